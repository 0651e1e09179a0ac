#ifndef MESHGAIT_DATASET_HPP
#define MESHGAIT_DATASET_HPP

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "meshgait/mg3d.hpp"
#include "meshgait/rng.hpp"

namespace meshgait {

// pipeline constants (input size and keypoint/mesh counts)
inline constexpr int kFrameH = 64;
inline constexpr int kFrameW = 44;
inline constexpr int kJoints = 24;
inline constexpr int kMarkers = 64;
inline constexpr int kKeypoints = kJoints + kMarkers;
inline constexpr int kMeshVertices = 6890;

struct SilhouetteSequence {
    int t = 0;
    int height = kFrameH;
    int width = kFrameW;
    std::vector<float> frames; // [t * height * width], values in [0,1]
    std::string seq_id;
    int identity = 0;
    std::string view;
    std::string covariate;
};

struct GroundTruth3D {
    int t = 0;
    std::vector<float> joints;  // [t * 24 * 3] voxel coords, (x,y,z) per point
    std::vector<float> markers; // [t * 64 * 3]
    std::vector<float> mesh;    // [t * 6890 * 3]
};

struct LoadedSequence {
    SilhouetteSequence silhouette;
    std::optional<GroundTruth3D> gt;
};

// Loads one sequence directory: numbered grayscale PNG frames plus the
// optional all-or-nothing sidecar set (joints.mg3d / markers.mg3d / mesh.mg3d).
LoadedSequence load_sequence(const std::filesystem::path& dir);

struct SeqRecord {
    std::filesystem::path path;
    int identity = 0;
    std::string covariate;
    std::string view;
    std::string seq_id; // identity/covariate/view/seq, unique within a root
};

struct DatasetIndex {
    std::vector<SeqRecord> sequences;
    std::vector<int> identities; // sorted, unique

    static DatasetIndex scan(const std::filesystem::path& root);
    int class_of(int identity) const; // index into `identities`
    std::vector<const SeqRecord*> of_identity(int identity) const;
};

struct BatchSpec {
    int p = 32;       // identities per batch
    int k = 4;        // sequences per identity
    int t_fixed = 30; // frames per sequence after cropping
};

struct Batch {
    int b = 0; // p * k
    int t = 0;
    std::vector<float> frames;     // [b, t, 1, 64, 44]
    std::vector<int> labels;       // class indices
    std::vector<int> identities;   // raw identity numbers
    std::vector<std::string> seq_ids;
    std::vector<uint8_t> has_gt;   // per sample
    std::vector<float> keypoints;  // [b, t, 88, 3] joints then markers; zeros when absent
    std::vector<float> mesh;       // [b, t, 6890, 3]
};

// Immutable in-memory sequences keyed by path; safe to share across prefetch
// threads because entries are never mutated after insertion.
class SequenceCache {
public:
    std::shared_ptr<const LoadedSequence> get(const std::filesystem::path& path);

private:
    std::map<std::string, std::shared_ptr<const LoadedSequence>> cache_;
};

// PK sampling: p distinct identities, k sequences each (with replacement when an
// identity has fewer than k), each cropped to t_fixed frames (cyclic repeat for
// short sequences). Deterministic given the rng state.
Batch sample_batch(Rng& rng, const BatchSpec& spec, const DatasetIndex& index,
                   SequenceCache& cache,
                   const std::vector<const SeqRecord*>* restrict_to = nullptr);

// ---- synthetic data ----

struct SynthConfig {
    int num_ids = 2;
    int seqs_per_id = 1;
    int frames = 8;
    uint64_t seed = 0;
    std::filesystem::path out;
    std::vector<std::string> views = {"000", "090"};
};

// Renders articulated stick-figure walkers to silhouette sequences with exact
// 3D ground truth. Mesh ground truth is C_true * [joints; markers] for one
// global matrix written to <out>/C_true.mg3d.
void synth_generate(const SynthConfig& config);

} // namespace meshgait

#endif
