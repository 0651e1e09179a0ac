#include "meshgait/losses.hpp"

namespace meshgait {

void LossWeights::validate() const {
    if (triplet < 0 || ce < 0 || joint < 0 || mesh < 0 || margin < 0)
        throw ConfigError("loss weights and margin must be nonnegative");
    if (triplet == 0 && ce == 0 && joint == 0 && mesh == 0)
        throw ConfigError("at least one loss weight must be positive");
}

ops::TripletResult triplet_loss(const Tensor& embeddings, const std::vector<int>& labels,
                                float margin) {
    return ops::triplet_batch_all(embeddings, labels, margin);
}

Tensor ce_loss(const Tensor& logits, const std::vector<int>& labels) {
    return ops::cross_entropy(logits, labels);
}

ops::MaskedLossResult joint_loss(const Tensor& pred_coords, const std::vector<float>& gt,
                                 const std::vector<uint8_t>& has_gt) {
    return ops::masked_mse(pred_coords, gt, has_gt);
}

ops::MaskedLossResult mesh_loss(const Tensor& pred_mesh, const std::vector<float>& gt,
                                const std::vector<uint8_t>& has_gt) {
    return ops::masked_mae(pred_mesh, gt, has_gt);
}

Tensor total_loss(const Tensor& triplet, const Tensor& ce, const Tensor& joint, const Tensor& mesh,
                  const LossWeights& w) {
    return ops::weighted_sum({triplet, ce, joint, mesh}, {w.triplet, w.ce, w.joint, w.mesh});
}

LossTerms compute_losses(const Tensor& embeddings, const Tensor& logits, const Tensor& coords,
                         const Tensor& mesh, const Batch& batch, const LossWeights& w) {
    w.validate();
    LossTerms terms;
    auto trip = triplet_loss(embeddings, batch.labels, w.margin);
    terms.triplet = trip.loss;
    terms.triplet_skipped = trip.skipped;
    terms.n_triplets = trip.n_valid;

    terms.ce = ce_loss(logits, batch.labels);

    auto jl = joint_loss(coords, batch.keypoints, batch.has_gt);
    terms.joint = jl.loss;
    terms.joint_skipped = jl.skipped;

    if (mesh.defined()) {
        auto ml = mesh_loss(mesh, batch.mesh, batch.has_gt);
        terms.mesh = ml.loss;
        terms.mesh_skipped = ml.skipped;
    } else {
        terms.mesh = Tensor::zeros({1});
        terms.mesh_skipped = true;
    }
    terms.total = total_loss(terms.triplet, terms.ce, terms.joint, terms.mesh, w);
    return terms;
}

} // namespace meshgait
