#include "meshgait/backbone2d.hpp"

#include "meshgait/dataset.hpp"

namespace meshgait {

BackbonePlan backbone_plan(const std::string& preset) {
    if (preset == "tiny") return {16, {16, 16}};
    if (preset == "deepgaitv2") return {64, {128, 256}};
    throw ConfigError("unknown backbone preset '" + preset + "' (tiny|deepgaitv2)");
}

Backbone2d::Backbone2d(const BackbonePlan& plan, Rng& rng) {
    stem_ = nn::Conv2d(1, plan.stem_channels, 3, 3, 1, 1, 1, 1, false, rng);
    stem_bn_ = nn::BatchNorm(plan.stem_channels);
    int cin = plan.stem_channels;
    for (int cout : plan.stage_channels) {
        stages_.emplace_back(cin, cout, 3, 3, 2, 1, 1, rng);
        cin = cout;
    }
    out_channels_ = cin;
}

Tensor Backbone2d::forward(const Tensor& x, bool training) {
    if (x.ndim() != 5 || x.dim(2) != 1 || x.dim(3) != kFrameH || x.dim(4) != kFrameW)
        throw ShapeError("backbone2d: expects [B,T,1,64,44], got " + shape_str(x.shape()));
    int64_t b = x.dim(0), t = x.dim(1);
    Tensor f = x.reshape({b * t, 1, kFrameH, kFrameW});
    f = ops::relu(stem_bn_.forward(stem_.forward(f), training));
    for (auto& stage : stages_) f = stage.forward(f, training);
    return f.reshape({b, t, out_channels_, f.dim(2), f.dim(3)});
}

void Backbone2d::register_into(ParamStore& store, const std::string& prefix) {
    stem_.register_into(store, prefix + ".stem");
    stem_bn_.register_into(store, prefix + ".stem_bn");
    for (size_t i = 0; i < stages_.size(); ++i)
        stages_[i].register_into(store, prefix + ".stage" + std::to_string(i));
}

} // namespace meshgait
