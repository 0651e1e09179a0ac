#include "meshgait/recon3d.hpp"

#include "meshgait/dataset.hpp"

namespace meshgait {

HeatmapEstimator::HeatmapEstimator(int keypoints, HeatmapDims dims, const std::string& preset,
                                   Rng& rng)
    : keypoints_(keypoints), dims_(dims) {
    int c1 = 16, c2 = 32, c3 = 32;
    if (preset == "deepgaitv2") {
        c1 = 32;
        c2 = 64;
        c3 = 64;
    } else if (preset != "tiny") {
        throw ConfigError("unknown estimator preset '" + preset + "'");
    }
    conv1_ = nn::Conv2d(1, c1, 3, 3, 2, 2, 1, 1, false, rng);
    bn1_ = nn::BatchNorm(c1);
    conv2_ = nn::Conv2d(c1, c2, 3, 3, 2, 2, 1, 1, false, rng);
    bn2_ = nn::BatchNorm(c2);
    conv3_ = nn::Conv2d(c2, c3, 3, 3, 1, 1, 1, 1, false, rng);
    bn3_ = nn::BatchNorm(c3);
    conv4_ = nn::Conv2d(c3, c3, 3, 3, 1, 1, 1, 1, false, rng);
    bn4_ = nn::BatchNorm(c3);
    head_ = nn::Conv2d(c3, keypoints * dims.d, 1, 1, 1, 1, 0, 0, true, rng);
    // near-uniform start; the logit scale then sharpens distributions quickly
    for (auto& w : head_.w.vec()) w *= 0.1f;
}

Tensor HeatmapEstimator::forward(const Tensor& x, bool training) {
    if (x.ndim() != 5 || x.dim(2) != 1 || x.dim(3) != kFrameH || x.dim(4) != kFrameW)
        throw ShapeError("estimate_heatmaps: expects [B,T,1,64,44], got " + shape_str(x.shape()));
    int64_t b = x.dim(0), t = x.dim(1);
    Tensor f = x.reshape({b * t, 1, kFrameH, kFrameW});
    f = ops::relu(bn1_.forward(conv1_.forward(f), training)); // 32x22
    f = ops::relu(bn2_.forward(conv2_.forward(f), training)); // 16x11
    f = ops::relu(bn3_.forward(conv3_.forward(f), training));
    f = ops::relu(bn4_.forward(conv4_.forward(f), training));
    f = ops::resize_bilinear(f, dims_.h, dims_.w);
    Tensor logits = head_.forward(f); // [BT, K*D, H, W]
    Tensor rows = logits.reshape({b * t * keypoints_, dims_.voxels()});
    Tensor norm = ops::softmax_lastdim(ops::scale(rows, logit_scale_));
    return norm.reshape({b, t, keypoints_, dims_.d, dims_.h, dims_.w});
}

void HeatmapEstimator::register_into(ParamStore& store, const std::string& prefix) {
    conv1_.register_into(store, prefix + ".conv1");
    bn1_.register_into(store, prefix + ".bn1");
    conv2_.register_into(store, prefix + ".conv2");
    bn2_.register_into(store, prefix + ".bn2");
    conv3_.register_into(store, prefix + ".conv3");
    bn3_.register_into(store, prefix + ".bn3");
    conv4_.register_into(store, prefix + ".conv4");
    bn4_.register_into(store, prefix + ".bn4");
    head_.register_into(store, prefix + ".head");
}

HeatmapFeatures::HeatmapFeatures(int keypoints, HeatmapDims dims, int feat_dim, int out_channels,
                                 int conv_kernel, Rng& rng)
    : keypoints_(keypoints), dims_(dims), feat_dim_(feat_dim) {
    if (conv_kernel != 1 && conv_kernel != 3)
        throw ConfigError("heatmap_features: conv kernel must be 1 or 3");
    int pad = conv_kernel == 3 ? 1 : 0;
    conv_ = nn::Conv3d(keypoints, feat_dim, conv_kernel, 1, pad, false, rng);
    bn_ = nn::BatchNorm(feat_dim);
    // width Hw -> 11 through the projection kernel; height preserved
    int kw = dims.w - 11 + 1;
    if (kw < 1)
        throw ConfigError("heatmap_features: heatmap width must be >= 11 to match F0");
    stage_ = nn::ResBlock2d(feat_dim * dims.d, out_channels, 3, kw, 1, 1, 0, rng);
}

Tensor HeatmapFeatures::forward(const Tensor& heatmaps, bool training) {
    if (heatmaps.ndim() != 6)
        throw ShapeError("heatmap_features: expects [B,T,K,D,H,W], got " +
                         shape_str(heatmaps.shape()));
    int64_t b = heatmaps.dim(0), t = heatmaps.dim(1);
    Tensor h = heatmaps.reshape({b * t, keypoints_, dims_.d, dims_.h, dims_.w});
    Tensor p = ops::relu(bn_.forward(conv_.forward(h), training));
    // fold depth into channels for 2-d feature extraction
    Tensor folded = p.reshape({b * t, static_cast<int64_t>(feat_dim_) * dims_.d, dims_.h,
                               dims_.w});
    Tensor f1 = stage_.forward(folded, training);
    return f1.reshape({b, t, f1.dim(1), f1.dim(2), f1.dim(3)});
}

void HeatmapFeatures::register_into(ParamStore& store, const std::string& prefix) {
    conv_.register_into(store, prefix + ".conv3d");
    bn_.register_into(store, prefix + ".bn3d");
    stage_.register_into(store, prefix + ".stage");
}

MeshRegressor::MeshRegressor(const std::string& mode, int keypoints, int vertices, Rng& rng)
    : keypoints_(keypoints), vertices_(vertices) {
    if (mode == "adaptive") {
        adaptive_ = true;
        linear_ = nn::Linear(keypoints, vertices * keypoints, true, rng);
    } else if (mode == "static") {
        adaptive_ = false;
        static_coef_ = Tensor::randn({vertices, keypoints}, rng,
                                     1.f / static_cast<float>(keypoints), true);
    } else {
        throw ConfigError("regressor mode must be adaptive or static, got '" + mode + "'");
    }
}

Tensor MeshRegressor::coefficients(const Tensor& confidence) const {
    if (!adaptive_) return static_coef_;
    if (confidence.ndim() != 2 || confidence.dim(1) != keypoints_)
        throw ShapeError("regress_coefficients: expects confidence [N," +
                         std::to_string(keypoints_) + "], got " + shape_str(confidence.shape()));
    Tensor flat = ops::linear(confidence, linear_.w, linear_.b);
    return flat.reshape({confidence.dim(0), vertices_, keypoints_});
}

int64_t MeshRegressor::param_count() const {
    if (adaptive_) return linear_.w.numel() + linear_.b.numel();
    return static_coef_.numel();
}

void MeshRegressor::register_into(ParamStore& store, const std::string& prefix) {
    if (adaptive_)
        linear_.register_into(store, prefix + ".linear");
    else
        store.add_param(prefix + ".coef", static_coef_);
}

Tensor reconstruct_mesh(const Tensor& coef, const Tensor& coords) {
    if (coords.ndim() != 3 || coords.dim(2) != 3)
        throw ShapeError("reconstruct_mesh: coords must be [N,K,3], got " +
                         shape_str(coords.shape()));
    int64_t k = coords.dim(1);
    int64_t coef_k = coef.dim(coef.ndim() - 1);
    if (coef_k != k)
        throw ShapeError("reconstruct_mesh: coef columns " + std::to_string(coef_k) +
                         " != keypoint count " + std::to_string(k));
    return ops::bmm(coef, coords);
}

} // namespace meshgait
