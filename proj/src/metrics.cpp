#include "meshgait/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>

#include "meshgait/errors.hpp"
#include "meshgait/rng.hpp"

namespace meshgait {

std::vector<double> pairwise_distances(const std::vector<SeqEmbedding>& probes,
                                       const std::vector<SeqEmbedding>& gallery) {
    size_t np = probes.size(), ng = gallery.size();
    std::vector<double> dist(np * ng);
    for (size_t i = 0; i < np; ++i) {
        const auto& a = probes[i].embedding;
        for (size_t j = 0; j < ng; ++j) {
            const auto& b = gallery[j].embedding;
            if (a.size() != b.size())
                throw ShapeError("pairwise_distances: embedding size mismatch");
            double s = 0;
            for (size_t q = 0; q < a.size(); ++q) {
                double d = static_cast<double>(a[q]) - b[q];
                s += d * d;
            }
            dist[i * ng + j] = std::sqrt(s);
        }
    }
    return dist;
}

namespace {

// per-probe ranks of true matches within the non-excluded gallery (1-based,
// ties by gallery index); empty when the probe has no reachable true match
std::vector<int> match_ranks(const std::vector<double>& dist, int ng, int probe,
                             const std::vector<int>& probe_labels,
                             const std::vector<int>& gallery_labels,
                             const std::vector<uint8_t>& excluded) {
    std::vector<int> order;
    order.reserve(static_cast<size_t>(ng));
    for (int j = 0; j < ng; ++j)
        if (!excluded[static_cast<size_t>(probe) * ng + j]) order.push_back(j);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        double da = dist[static_cast<size_t>(probe) * ng + a];
        double db = dist[static_cast<size_t>(probe) * ng + b];
        if (da != db) return da < db;
        return a < b;
    });
    std::vector<int> ranks;
    for (size_t pos = 0; pos < order.size(); ++pos)
        if (gallery_labels[static_cast<size_t>(order[pos])] ==
            probe_labels[static_cast<size_t>(probe)])
            ranks.push_back(static_cast<int>(pos) + 1);
    return ranks;
}

} // namespace

double rank_k(const std::vector<double>& dist, int np, int ng,
              const std::vector<int>& probe_labels, const std::vector<int>& gallery_labels, int k,
              const std::vector<uint8_t>& excluded, int* n_dropped) {
    int used = 0, hits = 0, dropped = 0;
    for (int p = 0; p < np; ++p) {
        auto ranks = match_ranks(dist, ng, p, probe_labels, gallery_labels, excluded);
        if (ranks.empty()) {
            ++dropped;
            continue;
        }
        ++used;
        if (*std::min_element(ranks.begin(), ranks.end()) <= k) ++hits;
    }
    if (n_dropped) *n_dropped = dropped;
    return used ? 100.0 * hits / used : 0.0;
}

double mean_ap(const std::vector<double>& dist, int np, int ng,
               const std::vector<int>& probe_labels, const std::vector<int>& gallery_labels,
               const std::vector<uint8_t>& excluded, int* n_dropped) {
    int used = 0, dropped = 0;
    double total = 0;
    for (int p = 0; p < np; ++p) {
        auto ranks = match_ranks(dist, ng, p, probe_labels, gallery_labels, excluded);
        if (ranks.empty()) {
            ++dropped;
            continue;
        }
        std::sort(ranks.begin(), ranks.end());
        double ap = 0;
        for (size_t m = 0; m < ranks.size(); ++m)
            ap += static_cast<double>(m + 1) / ranks[m];
        total += ap / ranks.size();
        ++used;
    }
    if (n_dropped) *n_dropped = dropped;
    return used ? 100.0 * total / used : 0.0;
}

double mean_inp(const std::vector<double>& dist, int np, int ng,
                const std::vector<int>& probe_labels, const std::vector<int>& gallery_labels,
                const std::vector<uint8_t>& excluded, int* n_dropped) {
    int used = 0, dropped = 0;
    double total = 0;
    for (int p = 0; p < np; ++p) {
        auto ranks = match_ranks(dist, ng, p, probe_labels, gallery_labels, excluded);
        if (ranks.empty()) {
            ++dropped;
            continue;
        }
        total += static_cast<double>(ranks.size()) /
                 *std::max_element(ranks.begin(), ranks.end());
        ++used;
    }
    if (n_dropped) *n_dropped = dropped;
    return used ? 100.0 * total / used : 0.0;
}

namespace {

EvalReport score(const std::vector<SeqEmbedding>& probes, const std::vector<SeqEmbedding>& gallery,
                 const std::vector<uint8_t>& excluded) {
    EvalReport rep;
    rep.num_probes = static_cast<int>(probes.size());
    rep.num_gallery = static_cast<int>(gallery.size());
    for (auto e : excluded) rep.excluded_pairs += e ? 1 : 0;
    if (probes.empty() || gallery.empty()) return rep;
    auto dist = pairwise_distances(probes, gallery);
    std::vector<int> pl, gl;
    for (auto& p : probes) pl.push_back(p.identity);
    for (auto& g : gallery) gl.push_back(g.identity);
    int np = static_cast<int>(probes.size()), ng = static_cast<int>(gallery.size());
    rep.rank1 = rank_k(dist, np, ng, pl, gl, 1, excluded, &rep.dropped_probes);
    rep.rank5 = rank_k(dist, np, ng, pl, gl, 5, excluded);
    rep.map = mean_ap(dist, np, ng, pl, gl, excluded);
    rep.minp = mean_inp(dist, np, ng, pl, gl, excluded);
    return rep;
}

std::vector<uint8_t> self_seq_exclusions(const std::vector<SeqEmbedding>& probes,
                                         const std::vector<SeqEmbedding>& gallery) {
    std::vector<uint8_t> excluded(probes.size() * gallery.size(), 0);
    for (size_t p = 0; p < probes.size(); ++p)
        for (size_t g = 0; g < gallery.size(); ++g)
            if (probes[p].seq_id == gallery[g].seq_id) excluded[p * gallery.size() + g] = 1;
    return excluded;
}

} // namespace

EvalReport evaluate_embeddings(const std::vector<SeqEmbedding>& all, const std::string& protocol,
                               uint64_t seed) {
    if (protocol == "gait3d") {
        std::map<int, std::vector<size_t>> by_id;
        for (size_t i = 0; i < all.size(); ++i) by_id[all[i].identity].push_back(i);
        Rng rng(seed);
        std::vector<SeqEmbedding> probes, gallery;
        std::vector<uint8_t> is_probe(all.size(), 0);
        int skipped = 0;
        for (auto& [id, seqs] : by_id) {
            if (seqs.size() < 2) {
                ++skipped;
                continue;
            }
            size_t pick = seqs[rng.uniform_index(seqs.size())];
            is_probe[pick] = 1;
            probes.push_back(all[pick]);
        }
        for (size_t i = 0; i < all.size(); ++i)
            if (!is_probe[i]) gallery.push_back(all[i]);
        EvalReport rep = score(probes, gallery, self_seq_exclusions(probes, gallery));
        rep.protocol = "gait3d";
        rep.seed = seed;
        rep.skipped_identities = skipped;
        return rep;
    }
    if (protocol == "cross_view") {
        std::vector<std::string> views;
        for (auto& e : all) views.push_back(e.view);
        std::sort(views.begin(), views.end());
        views.erase(std::unique(views.begin(), views.end()), views.end());

        const std::vector<SeqEmbedding>& gallery = all;
        std::vector<SeqEmbedding> probes;
        std::vector<size_t> view_start;
        for (auto& v : views) {
            view_start.push_back(probes.size());
            for (auto& e : all)
                if (e.view == v) probes.push_back(e);
        }
        view_start.push_back(probes.size());

        std::vector<uint8_t> excluded(probes.size() * gallery.size(), 0);
        for (size_t p = 0; p < probes.size(); ++p)
            for (size_t g = 0; g < gallery.size(); ++g) {
                bool self = probes[p].seq_id == gallery[g].seq_id;
                bool same_id_view = probes[p].identity == gallery[g].identity &&
                                    probes[p].view == gallery[g].view;
                if (self || same_id_view) excluded[p * gallery.size() + g] = 1;
            }

        EvalReport rep = score(probes, gallery, excluded);
        rep.protocol = "cross_view";
        rep.seed = seed;

        // per-view rank-1 over the matching probe slice
        auto dist = pairwise_distances(probes, gallery);
        std::vector<int> pl, gl;
        for (auto& p : probes) pl.push_back(p.identity);
        for (auto& g : gallery) gl.push_back(g.identity);
        int ng = static_cast<int>(gallery.size());
        double mean = 0;
        int counted = 0;
        for (size_t vi = 0; vi < views.size(); ++vi) {
            size_t s = view_start[vi], e = view_start[vi + 1];
            if (s == e) continue;
            std::vector<double> d(dist.begin() + s * ng, dist.begin() + e * ng);
            std::vector<int> vpl(pl.begin() + s, pl.begin() + e);
            std::vector<uint8_t> ex(excluded.begin() + s * ng, excluded.begin() + e * ng);
            double r1 = rank_k(d, static_cast<int>(e - s), ng, vpl, gl, 1, ex);
            rep.per_view_rank1.emplace_back(views[vi], r1);
            mean += r1;
            ++counted;
        }
        if (counted) rep.per_view_rank1.emplace_back("mean", mean / counted);
        return rep;
    }
    throw ConfigError("unknown evaluation protocol '" + protocol + "' (gait3d|cross_view)");
}

EvalReport evaluate_split(const std::vector<SeqEmbedding>& probes,
                          const std::vector<SeqEmbedding>& gallery) {
    EvalReport rep = score(probes, gallery, self_seq_exclusions(probes, gallery));
    rep.protocol = "holdout";
    return rep;
}

void write_report_csv(const std::filesystem::path& path, const EvalReport& report,
                      uint64_t config_fingerprint) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write report " + path.string());
    char fp[32];
    std::snprintf(fp, sizeof(fp), "%016llx",
                  static_cast<unsigned long long>(config_fingerprint));
    out << "# fingerprint=" << fp << "\n";
    out << "protocol,seed,num_probes,num_gallery,dropped_probes,skipped_identities,"
           "excluded_pairs,rank1,rank5,mAP,mINP";
    for (auto& [view, r1] : report.per_view_rank1) out << ",view_" << view;
    out << "\n";
    out << report.protocol << "," << report.seed << "," << report.num_probes << ","
        << report.num_gallery << "," << report.dropped_probes << "," << report.skipped_identities
        << "," << report.excluded_pairs;
    char buf[32];
    for (double v : {report.rank1, report.rank5, report.map, report.minp}) {
        std::snprintf(buf, sizeof(buf), "%.4f", v);
        out << "," << buf;
    }
    for (auto& [view, r1] : report.per_view_rank1) {
        std::snprintf(buf, sizeof(buf), "%.4f", r1);
        out << "," << buf;
    }
    out << "\n";
}

} // namespace meshgait
