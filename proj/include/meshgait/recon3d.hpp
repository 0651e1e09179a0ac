#ifndef MESHGAIT_RECON3D_HPP
#define MESHGAIT_RECON3D_HPP

#include <string>

#include "meshgait/nn.hpp"

namespace meshgait {

struct HeatmapDims {
    int d = 16;
    int h = 16;
    int w = 16;
    int64_t voxels() const { return static_cast<int64_t>(d) * h * w; }
};

// Strided-conv encoder with a bilinear upsample and a pointwise head producing
// per-keypoint voxel logits, normalized per channel by softmax:
// [B,T,1,64,44] -> [B,T,K,D,H,W], every channel summing to 1.
class HeatmapEstimator {
public:
    HeatmapEstimator() = default;
    HeatmapEstimator(int keypoints, HeatmapDims dims, const std::string& preset, Rng& rng);

    Tensor forward(const Tensor& x, bool training);
    void register_into(ParamStore& store, const std::string& prefix);

private:
    int keypoints_ = 0;
    HeatmapDims dims_;
    float logit_scale_ = 6.f; // sharpens voxel distributions; 0 logits stay uniform
    nn::Conv2d conv1_, conv2_, conv3_, conv4_, head_;
    nn::BatchNorm bn1_, bn2_, bn3_, bn4_;
};

// Conv3d + BN + ReLU over the voxel volumes, depth folded into channels, then
// a residual stage whose projection brings the width down to match F0:
// [B,T,K,D,H,W] -> [B,T,Cq,H,11].
class HeatmapFeatures {
public:
    HeatmapFeatures() = default;
    HeatmapFeatures(int keypoints, HeatmapDims dims, int feat_dim, int out_channels,
                    int conv_kernel, Rng& rng);

    Tensor forward(const Tensor& heatmaps, bool training);
    void register_into(ParamStore& store, const std::string& prefix);

private:
    int keypoints_ = 0;
    HeatmapDims dims_;
    int feat_dim_ = 0;
    nn::Conv3d conv_;
    nn::BatchNorm bn_;
    nn::ResBlock2d stage_;
};

// Keypoint confidences -> coefficient matrix. Adaptive mode predicts a matrix
// per sample from the confidences (Linear(K, V*K)); static mode is one learned
// global matrix, independent of the confidences.
class MeshRegressor {
public:
    MeshRegressor() = default;
    MeshRegressor(const std::string& mode, int keypoints, int vertices, Rng& rng);

    // confidence: [N,K]; returns [N,V,K] (adaptive) or [V,K] (static)
    Tensor coefficients(const Tensor& confidence) const;
    bool adaptive() const { return adaptive_; }
    int64_t param_count() const;
    void register_into(ParamStore& store, const std::string& prefix);

private:
    bool adaptive_ = true;
    int keypoints_ = 0;
    int vertices_ = 0;
    nn::Linear linear_;
    Tensor static_coef_;
};

// vertices[n,v] = sum_k coef[(n,)v,k] * coords[n,k]; coef from either mode.
Tensor reconstruct_mesh(const Tensor& coef, const Tensor& coords);

} // namespace meshgait

#endif
