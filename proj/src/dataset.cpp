#include "meshgait/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <regex>

#include "meshgait/errors.hpp"
#include "meshgait/image.hpp"

namespace meshgait {

namespace fs = std::filesystem;

namespace {

int parse_int_or(const std::string& s, int fallback) {
    int v = fallback;
    std::from_chars(s.data(), s.data() + s.size(), v);
    return v;
}

HostArray read_sidecar(const fs::path& path, int64_t t, int64_t points) {
    HostArray a = read_mg3d(path);
    Shape want = {t, points, 3};
    if (a.shape != want)
        throw FormatError("sidecar " + path.string() + " has dims " + shape_str(a.shape) +
                          ", expected " + shape_str(want));
    return a;
}

} // namespace

LoadedSequence load_sequence(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw DataError("sequence directory not found: " + dir.string());

    std::vector<fs::path> frames;
    for (auto& entry : fs::directory_iterator(dir))
        if (entry.is_regular_file() && entry.path().extension() == ".png")
            frames.push_back(entry.path());
    if (frames.empty()) throw DataError("no PNG frames in " + dir.string());
    std::sort(frames.begin(), frames.end());

    // when frames follow frame_%d naming, require a contiguous run from 0
    static const std::regex frame_re("frame_([0-9]+)\\.png");
    bool all_numbered = true;
    std::vector<long> numbers;
    for (auto& f : frames) {
        std::smatch m;
        std::string name = f.filename().string();
        if (std::regex_match(name, m, frame_re))
            numbers.push_back(std::stol(m[1]));
        else
            all_numbered = false;
    }
    if (all_numbered) {
        std::sort(numbers.begin(), numbers.end());
        for (size_t i = 0; i < numbers.size(); ++i)
            if (numbers[i] != static_cast<long>(i))
                throw DataError("missing frame " + std::to_string(i) + " in " + dir.string());
    }

    LoadedSequence seq;
    auto& sil = seq.silhouette;
    sil.t = static_cast<int>(frames.size());
    sil.frames.reserve(static_cast<size_t>(sil.t) * kFrameH * kFrameW);
    for (auto& f : frames) {
        ImageU8 img = read_png_gray(f);
        std::vector<float> mask = binarize(img);
        std::vector<float> norm = normalize_mask(mask, img.height, img.width, kFrameH, kFrameW);
        sil.frames.insert(sil.frames.end(), norm.begin(), norm.end());
    }

    // identity/covariate/view from the directory layout when present
    fs::path p = dir;
    std::string seq_name = p.filename().string();
    std::string view = p.has_parent_path() ? p.parent_path().filename().string() : "";
    std::string cov;
    std::string ident;
    if (p.has_parent_path() && p.parent_path().has_parent_path()) {
        cov = p.parent_path().parent_path().filename().string();
        if (p.parent_path().parent_path().has_parent_path())
            ident = p.parent_path().parent_path().parent_path().filename().string();
    }
    sil.identity = parse_int_or(ident, 0);
    sil.view = view;
    sil.covariate = cov;
    sil.seq_id = ident + "/" + cov + "/" + view + "/" + seq_name;

    bool hj = fs::exists(dir / "joints.mg3d");
    bool hm = fs::exists(dir / "markers.mg3d");
    bool hx = fs::exists(dir / "mesh.mg3d");
    if (hj || hm || hx) {
        if (!(hj && hm && hx))
            throw FormatError("partial sidecar set in " + dir.string() +
                              " (need all of joints/markers/mesh.mg3d)");
        GroundTruth3D gt;
        gt.t = sil.t;
        gt.joints = read_sidecar(dir / "joints.mg3d", sil.t, kJoints).data;
        gt.markers = read_sidecar(dir / "markers.mg3d", sil.t, kMarkers).data;
        gt.mesh = read_sidecar(dir / "mesh.mg3d", sil.t, kMeshVertices).data;
        seq.gt = std::move(gt);
    }
    return seq;
}

DatasetIndex DatasetIndex::scan(const fs::path& root) {
    if (!fs::is_directory(root)) throw DataError("dataset root not found: " + root.string());
    DatasetIndex index;
    std::vector<fs::path> id_dirs;
    for (auto& e : fs::directory_iterator(root))
        if (e.is_directory()) id_dirs.push_back(e.path());
    std::sort(id_dirs.begin(), id_dirs.end());
    for (auto& id_dir : id_dirs) {
        int identity = parse_int_or(id_dir.filename().string(), -1);
        if (identity < 0) continue;
        std::vector<fs::path> cov_dirs;
        for (auto& e : fs::directory_iterator(id_dir))
            if (e.is_directory()) cov_dirs.push_back(e.path());
        std::sort(cov_dirs.begin(), cov_dirs.end());
        for (auto& cov_dir : cov_dirs) {
            std::vector<fs::path> view_dirs;
            for (auto& e : fs::directory_iterator(cov_dir))
                if (e.is_directory()) view_dirs.push_back(e.path());
            std::sort(view_dirs.begin(), view_dirs.end());
            for (auto& view_dir : view_dirs) {
                std::vector<fs::path> seq_dirs;
                for (auto& e : fs::directory_iterator(view_dir))
                    if (e.is_directory()) seq_dirs.push_back(e.path());
                std::sort(seq_dirs.begin(), seq_dirs.end());
                for (auto& seq_dir : seq_dirs) {
                    SeqRecord rec;
                    rec.path = seq_dir;
                    rec.identity = identity;
                    rec.covariate = cov_dir.filename().string();
                    rec.view = view_dir.filename().string();
                    rec.seq_id = id_dir.filename().string() + "/" + rec.covariate + "/" +
                                 rec.view + "/" + seq_dir.filename().string();
                    index.sequences.push_back(std::move(rec));
                }
            }
        }
    }
    for (auto& s : index.sequences) index.identities.push_back(s.identity);
    std::sort(index.identities.begin(), index.identities.end());
    index.identities.erase(std::unique(index.identities.begin(), index.identities.end()),
                           index.identities.end());
    return index;
}

int DatasetIndex::class_of(int identity) const {
    auto it = std::lower_bound(identities.begin(), identities.end(), identity);
    if (it == identities.end() || *it != identity)
        throw DataError("unknown identity " + std::to_string(identity));
    return static_cast<int>(it - identities.begin());
}

std::vector<const SeqRecord*> DatasetIndex::of_identity(int identity) const {
    std::vector<const SeqRecord*> out;
    for (auto& s : sequences)
        if (s.identity == identity) out.push_back(&s);
    return out;
}

std::shared_ptr<const LoadedSequence> SequenceCache::get(const fs::path& path) {
    auto key = path.string();
    auto it = cache_.find(key);
    if (it != cache_.end()) return it->second;
    auto loaded = std::make_shared<const LoadedSequence>(load_sequence(path));
    cache_.emplace(key, loaded);
    return loaded;
}

Batch sample_batch(Rng& rng, const BatchSpec& spec, const DatasetIndex& index,
                   SequenceCache& cache, const std::vector<const SeqRecord*>* restrict_to) {
    if (spec.p < 1 || spec.k < 1 || spec.t_fixed < 1)
        throw ConfigError("sample_batch: p, k, t_fixed must be positive");

    // group candidate sequences by identity
    std::map<int, std::vector<const SeqRecord*>> by_id;
    if (restrict_to) {
        for (auto* rec : *restrict_to) by_id[rec->identity].push_back(rec);
    } else {
        for (auto& rec : index.sequences) by_id[rec.identity].push_back(&rec);
    }
    std::vector<int> ids;
    for (auto& [id, seqs] : by_id)
        if (!seqs.empty()) ids.push_back(id);
    if (static_cast<int>(ids.size()) < spec.p)
        throw DataError("sample_batch: need " + std::to_string(spec.p) + " identities, have " +
                        std::to_string(ids.size()));

    // Fisher-Yates prefix shuffle to pick p distinct identities
    for (int i = 0; i < spec.p; ++i) {
        int j = i + static_cast<int>(rng.uniform_index(ids.size() - i));
        std::swap(ids[static_cast<size_t>(i)], ids[static_cast<size_t>(j)]);
    }

    Batch batch;
    batch.b = spec.p * spec.k;
    batch.t = spec.t_fixed;
    int64_t frame_sz = static_cast<int64_t>(kFrameH) * kFrameW;
    batch.frames.resize(static_cast<size_t>(batch.b) * batch.t * frame_sz);
    batch.keypoints.assign(static_cast<size_t>(batch.b) * batch.t * kKeypoints * 3, 0.f);
    batch.mesh.assign(static_cast<size_t>(batch.b) * batch.t * kMeshVertices * 3, 0.f);

    int sample = 0;
    for (int pi = 0; pi < spec.p; ++pi) {
        int identity = ids[static_cast<size_t>(pi)];
        auto& pool = by_id[identity];
        std::vector<const SeqRecord*> chosen;
        if (static_cast<int>(pool.size()) >= spec.k) {
            std::vector<const SeqRecord*> tmp = pool;
            for (int i = 0; i < spec.k; ++i) {
                int j = i + static_cast<int>(rng.uniform_index(tmp.size() - i));
                std::swap(tmp[static_cast<size_t>(i)], tmp[static_cast<size_t>(j)]);
                chosen.push_back(tmp[static_cast<size_t>(i)]);
            }
        } else {
            for (int i = 0; i < spec.k; ++i)
                chosen.push_back(pool[rng.uniform_index(pool.size())]);
        }
        for (auto* rec : chosen) {
            auto seq = cache.get(rec->path);
            const auto& sil = seq->silhouette;
            int t_src = sil.t;
            int start = 0;
            if (t_src > spec.t_fixed)
                start = static_cast<int>(rng.uniform_index(t_src - spec.t_fixed + 1));
            bool gt = seq->gt.has_value();
            batch.labels.push_back(index.class_of(identity));
            batch.identities.push_back(identity);
            batch.seq_ids.push_back(rec->seq_id);
            batch.has_gt.push_back(gt ? 1 : 0);
            for (int ft = 0; ft < spec.t_fixed; ++ft) {
                int src = t_src >= spec.t_fixed ? start + ft : ft % t_src;
                std::copy_n(sil.frames.begin() + static_cast<size_t>(src) * frame_sz, frame_sz,
                            batch.frames.begin() +
                                (static_cast<size_t>(sample) * spec.t_fixed + ft) * frame_sz);
                if (gt) {
                    const auto& g = *seq->gt;
                    float* kp = batch.keypoints.data() +
                                (static_cast<size_t>(sample) * spec.t_fixed + ft) * kKeypoints * 3;
                    std::copy_n(g.joints.begin() + static_cast<size_t>(src) * kJoints * 3,
                                kJoints * 3, kp);
                    std::copy_n(g.markers.begin() + static_cast<size_t>(src) * kMarkers * 3,
                                kMarkers * 3, kp + kJoints * 3);
                    std::copy_n(g.mesh.begin() + static_cast<size_t>(src) * kMeshVertices * 3,
                                static_cast<size_t>(kMeshVertices) * 3,
                                batch.mesh.begin() + (static_cast<size_t>(sample) * spec.t_fixed +
                                                      ft) * kMeshVertices * 3);
                }
            }
            ++sample;
        }
    }
    return batch;
}

} // namespace meshgait
