#ifndef MESHGAIT_BACKBONE2D_HPP
#define MESHGAIT_BACKBONE2D_HPP

#include <string>
#include <vector>

#include "meshgait/nn.hpp"

namespace meshgait {

// stem channels + one stride-2 residual stage per entry
struct BackbonePlan {
    int stem_channels = 16;
    std::vector<int> stage_channels = {16, 16};
};

// "tiny" for tests and desk-scale runs, "deepgaitv2" mirrors the 64-128-256
// channel progression of the full-size backbone family.
BackbonePlan backbone_plan(const std::string& preset);

// Per-frame residual encoder: [B,T,1,64,44] -> [B,T,C,16,11]. The temporal
// axis is folded into the batch, so F0[b,t] depends only on frames[b,t].
class Backbone2d {
public:
    Backbone2d() = default;
    Backbone2d(const BackbonePlan& plan, Rng& rng);

    Tensor forward(const Tensor& x, bool training);
    int out_channels() const { return out_channels_; }
    void register_into(ParamStore& store, const std::string& prefix);

private:
    nn::Conv2d stem_;
    nn::BatchNorm stem_bn_;
    std::vector<nn::ResBlock2d> stages_;
    int out_channels_ = 0;
};

} // namespace meshgait

#endif
