#ifndef MESHGAIT_MODEL_HPP
#define MESHGAIT_MODEL_HPP

#include <string>

#include "meshgait/backbone2d.hpp"
#include "meshgait/fusion.hpp"
#include "meshgait/losses.hpp"
#include "meshgait/recon3d.hpp"

namespace meshgait {

struct ModelConfig {
    std::string backbone = "tiny"; // tiny | deepgaitv2
    int heatmap_d = 16, heatmap_h = 16, heatmap_w = 16;
    int joints = 24;
    int markers = 64;
    int mesh_vertices = 6890;
    int heatmap_feat_dim = 8; // C^r, one of {4,8,16}
    std::string fusion = "concat";
    int parts = 16;
    int embed_dim = 256;
    std::string regressor = "adaptive"; // adaptive | static
    LossWeights loss;
    bool mesh_branch = true;
    int num_classes = 2;

    int keypoints() const { return joints + markers; }
    void validate() const;
    // stable, field-order-independent hash of the architecture-relevant fields
    uint64_t fingerprint() const;
};

struct ForwardOutput {
    Tensor embeddings; // [B,Ce,P]
    Tensor logits;     // [B,classes,P]
    Tensor heatmaps;   // [B,T,K,D,H,W], normalized
    Tensor keypoints;  // [B,T,K,3]; undefined when keypoint head skipped
    Tensor confidence; // [B,T,K]
    Tensor mesh;       // [B,T,M,3]; undefined when the mesh branch is off
};

struct ForwardOptions {
    bool with_keypoints = true;
    bool with_mesh = true; // ANDed with config.mesh_branch
};

class MeshGaitModel {
public:
    MeshGaitModel(const ModelConfig& config, uint64_t init_seed);

    // x: [B,T,1,64,44]
    ForwardOutput forward(const Tensor& x, bool training, ForwardOptions opts = {});

    ParamStore& store() { return store_; }
    const ParamStore& store() const { return store_; }
    const ModelConfig& config() const { return cfg_; }
    int64_t param_count() const { return store_.param_count(); }
    int64_t regressor_param_count() const { return regressor_.param_count(); }

private:
    ModelConfig cfg_;
    Backbone2d backbone_;
    HeatmapEstimator estimator_;
    HeatmapFeatures heat_features_;
    MeshRegressor regressor_;
    FusionHead head_;
    ParamStore store_;
};

} // namespace meshgait

#endif
