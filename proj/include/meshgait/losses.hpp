#ifndef MESHGAIT_LOSSES_HPP
#define MESHGAIT_LOSSES_HPP

#include "meshgait/dataset.hpp"
#include "meshgait/tensor.hpp"

namespace meshgait {

struct LossWeights {
    float triplet = 1.f;
    float ce = 1.f;
    float joint = 1.f;
    float mesh = 1.f;
    float margin = 0.2f;

    void validate() const; // all weights >= 0, at least one > 0
};

struct LossTerms {
    Tensor triplet, ce, joint, mesh; // raw scalar terms
    Tensor total;                    // weighted sum
    bool triplet_skipped = false;
    bool joint_skipped = false;
    bool mesh_skipped = false;
    int64_t n_triplets = 0;
};

// Individual losses; thin wrappers over the fused ops with the documented
// skip semantics.
ops::TripletResult triplet_loss(const Tensor& embeddings, const std::vector<int>& labels,
                                float margin);
Tensor ce_loss(const Tensor& logits, const std::vector<int>& labels);
ops::MaskedLossResult joint_loss(const Tensor& pred_coords, const std::vector<float>& gt,
                                 const std::vector<uint8_t>& has_gt);
ops::MaskedLossResult mesh_loss(const Tensor& pred_mesh, const std::vector<float>& gt,
                                const std::vector<uint8_t>& has_gt);
Tensor total_loss(const Tensor& triplet, const Tensor& ce, const Tensor& joint, const Tensor& mesh,
                  const LossWeights& w);

// Full training objective for a batch. `mesh` may be undefined (mesh branch
// disabled); its term is then 0/skipped.
LossTerms compute_losses(const Tensor& embeddings, const Tensor& logits, const Tensor& coords,
                         const Tensor& mesh, const Batch& batch, const LossWeights& w);

} // namespace meshgait

#endif
