#ifndef MESHGAIT_METRICS_HPP
#define MESHGAIT_METRICS_HPP

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace meshgait {

struct SeqEmbedding {
    std::vector<float> embedding; // flattened [Ce x P]
    int identity = 0;
    std::string view;
    std::string seq_id;
};

struct EvalReport {
    std::string protocol;
    uint64_t seed = 0;
    double rank1 = 0, rank5 = 0, map = 0, minp = 0; // percentages
    std::vector<std::pair<std::string, double>> per_view_rank1;
    int num_probes = 0;
    int num_gallery = 0;
    int dropped_probes = 0;       // probes without any non-excluded true match
    int skipped_identities = 0;   // identities with a single sequence (gait3d)
    int excluded_pairs = 0;       // probe-gallery pairs removed by exclusions
};

// Euclidean distance on flattened per-part embeddings; row-major [np x ng].
std::vector<double> pairwise_distances(const std::vector<SeqEmbedding>& probes,
                                       const std::vector<SeqEmbedding>& gallery);

// excluded: row-major [np x ng]; nonzero removes the pair. Ties broken by
// gallery index. Probes with no reachable true match are dropped and counted.
double rank_k(const std::vector<double>& dist, int np, int ng,
              const std::vector<int>& probe_labels, const std::vector<int>& gallery_labels, int k,
              const std::vector<uint8_t>& excluded, int* n_dropped = nullptr);
double mean_ap(const std::vector<double>& dist, int np, int ng,
               const std::vector<int>& probe_labels, const std::vector<int>& gallery_labels,
               const std::vector<uint8_t>& excluded, int* n_dropped = nullptr);
double mean_inp(const std::vector<double>& dist, int np, int ng,
                const std::vector<int>& probe_labels, const std::vector<int>& gallery_labels,
                const std::vector<uint8_t>& excluded, int* n_dropped = nullptr);

// gait3d: one seeded random probe per identity, all remaining sequences form
// the gallery, self-sequence pairs excluded; identities with a single sequence
// are skipped. cross_view: per probe view, gallery entries sharing the probe's
// identity AND view are excluded; reports per-view rank-1 plus the mean.
EvalReport evaluate_embeddings(const std::vector<SeqEmbedding>& all, const std::string& protocol,
                               uint64_t seed);

// Explicit probe/gallery split (held-out evaluation); only self-sequence
// exclusion applies.
EvalReport evaluate_split(const std::vector<SeqEmbedding>& probes,
                          const std::vector<SeqEmbedding>& gallery);

void write_report_csv(const std::filesystem::path& path, const EvalReport& report,
                      uint64_t config_fingerprint);

} // namespace meshgait

#endif
