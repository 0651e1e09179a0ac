#include "meshgait/model.hpp"

#include <algorithm>
#include <sstream>

#include "meshgait/dataset.hpp"

namespace meshgait {

void ModelConfig::validate() const {
    backbone_plan(backbone); // throws on unknown preset
    fusion_from_string(fusion);
    if (regressor != "adaptive" && regressor != "static")
        throw ConfigError("regressor mode must be adaptive or static");
    if (heatmap_feat_dim != 4 && heatmap_feat_dim != 8 && heatmap_feat_dim != 16)
        throw ConfigError("heatmap feature dim must be one of 4, 8, 16 (got " +
                          std::to_string(heatmap_feat_dim) + ")");
    if (heatmap_d < 1 || heatmap_h < 1 || heatmap_w < 11)
        throw ConfigError("heatmap dims must be positive with width >= 11");
    if (heatmap_h != 16)
        throw ConfigError("heatmap height must equal the feature map height (16)");
    if (joints < 1 || markers < 0 || mesh_vertices < 1)
        throw ConfigError("joint/marker/vertex counts must be positive");
    if (parts < 1 || 16 % parts != 0)
        throw ConfigError("parts must divide the feature height 16");
    if (embed_dim < 1) throw ConfigError("embed_dim must be positive");
    if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
    loss.validate();
}

uint64_t ModelConfig::fingerprint() const {
    std::ostringstream os;
    auto put = [&os](const char* k, auto v) { os << k << "=" << v << "\n"; };
    put("backbone", backbone);
    put("embed_dim", embed_dim);
    put("fusion", fusion);
    put("heatmap_d", heatmap_d);
    put("heatmap_feat_dim", heatmap_feat_dim);
    put("heatmap_h", heatmap_h);
    put("heatmap_w", heatmap_w);
    put("joints", joints);
    put("markers", markers);
    put("mesh_branch", mesh_branch ? 1 : 0);
    put("mesh_vertices", mesh_vertices);
    put("num_classes", num_classes);
    put("parts", parts);
    put("regressor", regressor);
    return fnv1a64(os.str());
}

MeshGaitModel::MeshGaitModel(const ModelConfig& config, uint64_t init_seed) : cfg_(config) {
    cfg_.validate();
    Rng rng(init_seed);
    BackbonePlan plan = backbone_plan(cfg_.backbone);
    backbone_ = Backbone2d(plan, rng);
    HeatmapDims dims{cfg_.heatmap_d, cfg_.heatmap_h, cfg_.heatmap_w};
    estimator_ = HeatmapEstimator(cfg_.keypoints(), dims, cfg_.backbone, rng);
    int cq = backbone_.out_channels();
    int conv_kernel = cfg_.backbone == "deepgaitv2" ? 3 : 1;
    heat_features_ = HeatmapFeatures(cfg_.keypoints(), dims, cfg_.heatmap_feat_dim, cq,
                                     conv_kernel, rng);
    regressor_ = MeshRegressor(cfg_.regressor, cfg_.keypoints(), cfg_.mesh_vertices, rng);
    head_ = FusionHead(fusion_from_string(cfg_.fusion), backbone_.out_channels(), cq, cfg_.parts,
                       cfg_.embed_dim, cfg_.num_classes, rng);

    backbone_.register_into(store_, "backbone");
    estimator_.register_into(store_, "estimator");
    heat_features_.register_into(store_, "heatfeat");
    regressor_.register_into(store_, "regressor");
    head_.register_into(store_, "head");
}

ForwardOutput MeshGaitModel::forward(const Tensor& x, bool training, ForwardOptions opts) {
    if (x.ndim() != 5)
        throw ShapeError("forward: expects [B,T,1,64,44], got " + shape_str(x.shape()));
    int64_t b = x.dim(0), t = x.dim(1);
    int k = cfg_.keypoints();

    ForwardOutput out;
    Tensor f0 = backbone_.forward(x, training);
    out.heatmaps = estimator_.forward(x, training);
    Tensor f1 = heat_features_.forward(out.heatmaps, training);

    if (opts.with_keypoints) {
        Tensor h_flat = out.heatmaps.reshape({b * t, k, cfg_.heatmap_d, cfg_.heatmap_h,
                                              cfg_.heatmap_w});
        Tensor coords = ops::soft_argmax(h_flat); // [BT,K,3]
        Tensor conf = ops::gather_confidence(h_flat, coords);
        out.keypoints = coords.reshape({b, t, k, 3});
        out.confidence = conf.reshape({b, t, k});
        if (opts.with_mesh && cfg_.mesh_branch) {
            Tensor coef = regressor_.coefficients(conf.reshape({b * t, k}));
            Tensor mesh = reconstruct_mesh(coef, coords);
            out.mesh = mesh.reshape({b, t, cfg_.mesh_vertices, 3});
        }
    }

    auto ho = head_.forward(f0, f1, training);
    out.embeddings = ho.embeddings;
    out.logits = ho.logits;
    return out;
}

} // namespace meshgait
