#ifndef MESHGAIT_TENSOR_HPP
#define MESHGAIT_TENSOR_HPP

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "meshgait/errors.hpp"
#include "meshgait/rng.hpp"

namespace meshgait {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

// Value + gradient storage. Shared between a tensor and its reshaped views, so
// reshape is metadata-only and gradients written through a view land in the
// right buffer. Large buffers are recycled through a pool on destruction to
// avoid per-step mmap churn in training loops.
struct TensorStorage {
    std::vector<float> v;
    std::vector<float> g; // allocated lazily by backward()

    TensorStorage() = default;
    ~TensorStorage();
    TensorStorage(const TensorStorage&) = delete;
    TensorStorage& operator=(const TensorStorage&) = delete;
};

struct TensorNode;
class Tensor;

// RAII guard that disables graph recording (inference / data plumbing).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

bool grad_enabled();

struct TensorNode {
    Shape shape;
    std::shared_ptr<TensorStorage> storage;
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode>> parents;
    // Reads this node's grad and accumulates into parents' grads.
    std::function<void(TensorNode&)> backward_fn;

    int64_t numel() const { return shape_numel(shape); }
};

// Value-semantic handle to a node in the autograd graph.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, float value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<float> values, bool requires_grad = false);
    static Tensor randn(Shape shape, Rng& rng, float stddev = 1.f, bool requires_grad = false);

    bool defined() const { return static_cast<bool>(n_); }
    const Shape& shape() const { return n_->shape; }
    int64_t dim(int i) const { return n_->shape[static_cast<size_t>(i)]; }
    int ndim() const { return static_cast<int>(n_->shape.size()); }
    int64_t numel() const { return n_->numel(); }
    bool requires_grad() const { return n_->requires_grad; }

    float* data() { return n_->storage->v.data(); }
    const float* data() const { return n_->storage->v.data(); }
    std::vector<float>& vec() { return n_->storage->v; }
    const std::vector<float>& vec() const { return n_->storage->v; }

    // Gradient buffer; valid after backward() has visited this node.
    float* grad() { return n_->storage->g.data(); }
    const float* grad() const { return n_->storage->g.data(); }
    bool grad_allocated() const { return !n_->storage->g.empty(); }
    void zero_grad();

    float item() const;

    // Shares storage; numel must match.
    Tensor reshape(Shape new_shape) const;
    // Deep copy of values, detached from the graph.
    Tensor clone_detached() const;

    // Runs reverse-mode autodiff from this scalar.
    void backward();

    std::shared_ptr<TensorNode> node() const { return n_; }
    static Tensor wrap(std::shared_ptr<TensorNode> n) {
        Tensor t;
        t.n_ = std::move(n);
        return t;
    }

private:
    std::shared_ptr<TensorNode> n_;
};

// Creates a non-leaf op result. Parents and backward_fn are recorded only when
// grad mode is on and some parent requires grad.
Tensor make_op_result(Shape shape, std::vector<Tensor> parents,
                      std::function<void(TensorNode&)> backward_fn);

namespace ops {

// ---- elementwise / arithmetic ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float s);
Tensor relu(const Tensor& a);
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);
// sum_i w_i * t_i over scalar tensors
Tensor weighted_sum(const std::vector<Tensor>& terms, const std::vector<float>& weights);

// ---- shape ----
Tensor concat_dim1(const Tensor& a, const Tensor& b);

// ---- dense / conv primitives ----
// x:[N,K] w:[M,K] b:[M] -> [N,M]
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);
// x:[B,C,P] w:[P,M,C] b:[P,M] -> [B,M,P]; each part has its own map
Tensor part_linear(const Tensor& x, const Tensor& w, const Tensor& b);
// x:[N,Cin,H,W] w:[Cout,Cin,kh,kw] b:[Cout] or undefined
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride_h, int stride_w,
              int pad_h, int pad_w);
// x:[N,Cin,D,H,W] w:[Cout,Cin,kd,kh,kw]
Tensor conv3d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad);
// batched matmul a:[N,M,K] or [M,K] (broadcast), b:[N,K,R] -> [N,M,R]
Tensor bmm(const Tensor& a, const Tensor& b);

// Batch normalization over all axes except dim 1 when x has >= 3 dims
// ([N,C,...] -> stats per C), or over dim 0 for 2-d input ([N,F] -> stats per F).
// running_mean/running_var are plain buffers mutated during training.
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor& running_mean,
                  Tensor& running_var, bool training, float momentum = 0.1f, float eps = 1e-5f);

// ---- pooling / resampling ----
// x viewed as [B,T,rest]: elementwise max over T
Tensor temporal_max(const Tensor& x);
// x:[B,C,H,W] -> [B,C,parts]; per strip: max + mean over strip rows x all columns
Tensor horizontal_pool(const Tensor& x, int parts);
// bilinear, align-corners; identity when sizes match
Tensor resize_bilinear(const Tensor& x, int out_h, int out_w);

// ---- softmax family ----
// softmax over the last axis, any leading shape
Tensor softmax_lastdim(const Tensor& x);

// ---- model-specific ----
// h:[N,K,D,H,W] normalized -> coords [N,K,3] in (x,y,z)=(w,h,d) order.
// Throws ContractError when a channel sum deviates from 1 by > sum_tol.
Tensor soft_argmax(const Tensor& h, float sum_tol = 1e-3f);
// h:[N,K,D,H,W], coords:[N,K,3] -> [N,K]; rounds+clamps coords, gathers the voxel value.
// No gradient flows to coords.
Tensor gather_confidence(const Tensor& h, const Tensor& coords);
// gate_logit:[C]; out = sigmoid(g) * f0 + (1-sigmoid(g)) * f1 with per-channel gate
Tensor gate_blend(const Tensor& f0, const Tensor& f1, const Tensor& gate_logit);

// ---- losses (fused ops with hand-derived backward) ----
struct TripletResult {
    Tensor loss;      // scalar
    int64_t n_valid;  // number of valid (a,p,n) triplets
    bool skipped;     // true when no valid triplet exists (loss == 0)
};
// e:[B,C,P]; batch-all hinge on per-part Euclidean distances
TripletResult triplet_batch_all(const Tensor& e, const std::vector<int>& labels, float margin);

// logits:[B,K,P]; softmax over K per (b,p), mean NLL over batch and parts
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels);

struct MaskedLossResult {
    Tensor loss;
    bool skipped; // true when mask selects nothing
};
// mean over elements of samples with mask[b] != 0; pred:[B,...], target same shape (host data)
MaskedLossResult masked_mse(const Tensor& pred, const std::vector<float>& target,
                            const std::vector<uint8_t>& sample_mask);
MaskedLossResult masked_mae(const Tensor& pred, const std::vector<float>& target,
                            const std::vector<uint8_t>& sample_mask);

} // namespace ops

} // namespace meshgait

#endif
