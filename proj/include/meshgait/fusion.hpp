#ifndef MESHGAIT_FUSION_HPP
#define MESHGAIT_FUSION_HPP

#include <string>

#include "meshgait/nn.hpp"

namespace meshgait {

enum class FusionStrategy { Concat, Add, Attention };

FusionStrategy fusion_from_string(const std::string& name);
std::string fusion_to_string(FusionStrategy s);

// gate_logit is only consulted for the attention strategy.
Tensor fuse(const Tensor& f0, const Tensor& f1, FusionStrategy strategy,
            const Tensor& gate_logit);

// fuse -> temporal max pool -> horizontal pyramid pool -> per-part embedding ->
// BNNeck classifier logits.
class FusionHead {
public:
    FusionHead() = default;
    FusionHead(FusionStrategy strategy, int c0, int c1, int parts, int embed_dim, int num_classes,
               Rng& rng);

    struct Output {
        Tensor embeddings; // [B,Ce,P]
        Tensor logits;     // [B,classes,P]
    };
    // f0, f1: [B,T,C,H',W']
    Output forward(const Tensor& f0, const Tensor& f1, bool training);
    void register_into(ParamStore& store, const std::string& prefix);

private:
    FusionStrategy strategy_ = FusionStrategy::Concat;
    int parts_ = 16;
    Tensor gate_logit_;
    nn::PartLinear embed_;
    nn::BatchNorm neck_bn_;
    nn::PartLinear classifier_;
};

} // namespace meshgait

#endif
