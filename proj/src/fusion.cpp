#include "meshgait/fusion.hpp"

namespace meshgait {

FusionStrategy fusion_from_string(const std::string& name) {
    if (name == "concat") return FusionStrategy::Concat;
    if (name == "add") return FusionStrategy::Add;
    if (name == "attention") return FusionStrategy::Attention;
    throw ConfigError("unknown fusion strategy '" + name + "' (concat|add|attention)");
}

std::string fusion_to_string(FusionStrategy s) {
    switch (s) {
        case FusionStrategy::Concat: return "concat";
        case FusionStrategy::Add: return "add";
        case FusionStrategy::Attention: return "attention";
    }
    return "?";
}

Tensor fuse(const Tensor& f0, const Tensor& f1, FusionStrategy strategy,
            const Tensor& gate_logit) {
    if (f0.ndim() != 5 || f1.ndim() != 5)
        throw ShapeError("fuse: expects [B,T,C,H,W] inputs");
    for (int i : {0, 1, 3, 4})
        if (f0.dim(i) != f1.dim(i))
            throw ShapeError("fuse: non-channel dims differ " + shape_str(f0.shape()) + " vs " +
                             shape_str(f1.shape()));
    int64_t b = f0.dim(0), t = f0.dim(1);
    switch (strategy) {
        case FusionStrategy::Concat: {
            Tensor a = f0.reshape({b * t, f0.dim(2), f0.dim(3), f0.dim(4)});
            Tensor c = f1.reshape({b * t, f1.dim(2), f1.dim(3), f1.dim(4)});
            Tensor out = ops::concat_dim1(a, c);
            return out.reshape({b, t, out.dim(1), out.dim(2), out.dim(3)});
        }
        case FusionStrategy::Add:
            if (f0.dim(2) != f1.dim(2))
                throw ShapeError("fuse(add): channel mismatch " + shape_str(f0.shape()) + " vs " +
                                 shape_str(f1.shape()));
            return ops::add(f0, f1);
        case FusionStrategy::Attention: {
            if (f0.dim(2) != f1.dim(2))
                throw ShapeError("fuse(attention): channel mismatch " + shape_str(f0.shape()) +
                                 " vs " + shape_str(f1.shape()));
            Tensor a = f0.reshape({b * t, f0.dim(2), f0.dim(3), f0.dim(4)});
            Tensor c = f1.reshape({b * t, f1.dim(2), f1.dim(3), f1.dim(4)});
            Tensor out = ops::gate_blend(a, c, gate_logit);
            return out.reshape({b, t, f0.dim(2), f0.dim(3), f0.dim(4)});
        }
    }
    throw Error("unreachable fusion strategy");
}

FusionHead::FusionHead(FusionStrategy strategy, int c0, int c1, int parts, int embed_dim,
                       int num_classes, Rng& rng)
    : strategy_(strategy), parts_(parts) {
    int fused = strategy == FusionStrategy::Concat ? c0 + c1 : c0;
    if (strategy != FusionStrategy::Concat && c0 != c1)
        throw ConfigError("fusion '" + fusion_to_string(strategy) +
                          "' requires equal branch channels, got " + std::to_string(c0) + " and " +
                          std::to_string(c1));
    if (strategy == FusionStrategy::Attention) gate_logit_ = Tensor::zeros({c0}, true);
    embed_ = nn::PartLinear(parts, fused, embed_dim, true, rng);
    neck_bn_ = nn::BatchNorm(embed_dim * parts);
    classifier_ = nn::PartLinear(parts, embed_dim, num_classes, false, rng);
}

FusionHead::Output FusionHead::forward(const Tensor& f0, const Tensor& f1, bool training) {
    Tensor f2 = fuse(f0, f1, strategy_, gate_logit_);
    Tensor f3 = ops::temporal_max(f2);              // [B,C,H,W]
    Tensor f4 = ops::horizontal_pool(f3, parts_);   // [B,C,P]
    Tensor e = embed_.forward(f4);                  // [B,Ce,P]
    int64_t b = e.dim(0);
    Tensor flat = e.reshape({b, e.dim(1) * e.dim(2)});
    Tensor necked = neck_bn_.forward(flat, training).reshape({b, e.dim(1), e.dim(2)});
    Tensor logits = classifier_.forward(necked);
    return {e, logits};
}

void FusionHead::register_into(ParamStore& store, const std::string& prefix) {
    if (gate_logit_.defined()) store.add_param(prefix + ".gate", gate_logit_);
    embed_.register_into(store, prefix + ".embed");
    neck_bn_.register_into(store, prefix + ".neck_bn");
    classifier_.register_into(store, prefix + ".classifier");
}

} // namespace meshgait
