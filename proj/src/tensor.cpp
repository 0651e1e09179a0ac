#include "meshgait/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>
#include <mutex>
#include <sstream>
#include <unordered_set>

namespace meshgait {

using MatRM = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using StrideDyn = Eigen::Stride<Eigen::Dynamic, Eigen::Dynamic>;
using MapRM = Eigen::Map<MatRM, 0, StrideDyn>;
using CMapRM = Eigen::Map<const MatRM, 0, StrideDyn>;

namespace {

MapRM map_rm(float* p, int64_t rows, int64_t cols, int64_t outer = -1, int64_t inner = 1) {
    if (outer < 0) outer = cols * inner;
    return MapRM(p, rows, cols, StrideDyn(outer, inner));
}
CMapRM cmap_rm(const float* p, int64_t rows, int64_t cols, int64_t outer = -1, int64_t inner = 1) {
    if (outer < 0) outer = cols * inner;
    return CMapRM(p, rows, cols, StrideDyn(outer, inner));
}

// Recycles large float buffers by exact size. Training graphs allocate the
// same tensor sizes every step; reusing the pages is much cheaper than
// re-faulting hundred-megabyte allocations.
class BufferPool {
public:
    static constexpr size_t kMinPooled = 1 << 18; // 256k floats (1 MB)

    std::vector<float> take(size_t n) {
        if (n >= kMinPooled) {
            std::lock_guard<std::mutex> lock(m_);
            auto it = free_.find(n);
            if (it != free_.end() && !it->second.empty()) {
                std::vector<float> v = std::move(it->second.back());
                it->second.pop_back();
                return v;
            }
        }
        return std::vector<float>(n);
    }

    void give(std::vector<float>&& v) {
        if (v.size() < kMinPooled) return;
        std::lock_guard<std::mutex> lock(m_);
        auto& stack = free_[v.size()];
        if (stack.size() < 4) stack.push_back(std::move(v));
    }

private:
    std::mutex m_;
    std::map<size_t, std::vector<std::vector<float>>> free_;
};

BufferPool& pool() {
    static BufferPool p;
    return p;
}

// sized, contents unspecified
void acquire_buffer(std::vector<float>& dst, size_t n) {
    if (dst.size() == n) return;
    dst = pool().take(n);
}

// Fixed chunk grid for deterministic parallel reductions: the result is a
// sequential sum over chunk partials regardless of thread count.
int64_t chunk_count(int64_t n, int64_t target) {
    if (n <= 0) return 0;
    return (n + target - 1) / target;
}

void ensure_grad(TensorNode& n) {
    auto& s = *n.storage;
    if (s.g.empty()) s.g.assign(s.v.size(), 0.f);
}

} // namespace

TensorStorage::~TensorStorage() {
    pool().give(std::move(v));
    pool().give(std::move(g));
}

int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ")";
    return os.str();
}

static thread_local bool g_grad_enabled = true;

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }
bool grad_enabled() { return g_grad_enabled; }

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    return full(std::move(shape), 0.f, requires_grad);
}

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->storage = std::make_shared<TensorStorage>();
    n->storage->v.assign(static_cast<size_t>(n->numel()), value);
    n->requires_grad = requires_grad;
    return wrap(std::move(n));
}

Tensor Tensor::from_data(Shape shape, std::vector<float> values, bool requires_grad) {
    if (static_cast<int64_t>(values.size()) != shape_numel(shape))
        throw ShapeError("from_data: value count does not match shape " + shape_str(shape));
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->storage = std::make_shared<TensorStorage>();
    n->storage->v = std::move(values);
    n->requires_grad = requires_grad;
    return wrap(std::move(n));
}

Tensor Tensor::randn(Shape shape, Rng& rng, float stddev, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (auto& x : t.vec()) x = static_cast<float>(rng.normal()) * stddev;
    return t;
}

void Tensor::zero_grad() {
    acquire_buffer(n_->storage->g, n_->storage->v.size());
    std::fill(n_->storage->g.begin(), n_->storage->g.end(), 0.f);
}

float Tensor::item() const {
    if (numel() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape()));
    return n_->storage->v[0];
}

Tensor Tensor::reshape(Shape new_shape) const {
    if (shape_numel(new_shape) != numel())
        throw ShapeError("reshape: numel mismatch " + shape_str(shape()) + " -> " +
                         shape_str(new_shape));
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(new_shape);
    n->storage = n_->storage;
    if (grad_enabled() && n_->requires_grad) {
        n->requires_grad = true;
        n->parents = {n_};
        // storage (and thus the grad buffer) is shared; nothing to move
        n->backward_fn = [](TensorNode&) {};
    }
    return wrap(std::move(n));
}

Tensor Tensor::clone_detached() const {
    auto n = std::make_shared<TensorNode>();
    n->shape = n_->shape;
    n->storage = std::make_shared<TensorStorage>();
    n->storage->v = n_->storage->v;
    return wrap(std::move(n));
}

void Tensor::backward() {
    if (!n_) throw Error("backward() on undefined tensor");
    if (numel() != 1) throw ShapeError("backward() requires a scalar");
    if (!n_->requires_grad) throw Error("backward() on tensor that does not require grad");

    struct Frame {
        TensorNode* n;
        size_t i;
    };
    std::vector<TensorNode*> order;
    std::unordered_set<TensorNode*> visited;
    std::vector<Frame> st;
    st.push_back({n_.get(), 0});
    visited.insert(n_.get());
    while (!st.empty()) {
        Frame& f = st.back();
        if (f.i < f.n->parents.size()) {
            TensorNode* p = f.n->parents[f.i++].get();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                st.push_back({p, 0});
            }
        } else {
            order.push_back(f.n);
            st.pop_back();
        }
    }

    std::unordered_set<TensorStorage*> zeroed;
    for (auto* node : order) {
        if (zeroed.insert(node->storage.get()).second) {
            auto& s = *node->storage;
            acquire_buffer(s.g, s.v.size());
            std::fill(s.g.begin(), s.g.end(), 0.f);
        }
    }
    n_->storage->g[0] = 1.f;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if ((*it)->backward_fn) (*it)->backward_fn(**it);
    }
}

Tensor make_op_result(Shape shape, std::vector<Tensor> parents,
                      std::function<void(TensorNode&)> backward_fn) {
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->storage = std::make_shared<TensorStorage>();
    acquire_buffer(n->storage->v, static_cast<size_t>(n->numel()));
    bool rg = false;
    if (grad_enabled())
        for (auto& p : parents) rg = rg || p.requires_grad();
    n->requires_grad = rg;
    if (rg) {
        n->parents.reserve(parents.size());
        for (auto& p : parents) n->parents.push_back(p.node());
        n->backward_fn = std::move(backward_fn);
    }
    return Tensor::wrap(std::move(n));
}

namespace ops {

namespace {

void check_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

} // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    auto an = a.node(), bn = b.node();
    Tensor out = make_op_result(a.shape(), {a, b}, [an, bn](TensorNode& self) {
        const float* g = self.storage->g.data();
        int64_t n = self.numel();
        if (an->requires_grad) {
            float* ga = an->storage->g.data();
            for (int64_t i = 0; i < n; ++i) ga[i] += g[i];
        }
        if (bn->requires_grad) {
            float* gb = bn->storage->g.data();
            for (int64_t i = 0; i < n; ++i) gb[i] += g[i];
        }
    });
    const float* pa = a.data();
    const float* pb = b.data();
    float* po = out.data();
    int64_t n = out.numel();
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    auto an = a.node(), bn = b.node();
    Tensor out = make_op_result(a.shape(), {a, b}, [an, bn](TensorNode& self) {
        const float* g = self.storage->g.data();
        int64_t n = self.numel();
        if (an->requires_grad) {
            float* ga = an->storage->g.data();
            for (int64_t i = 0; i < n; ++i) ga[i] += g[i];
        }
        if (bn->requires_grad) {
            float* gb = bn->storage->g.data();
            for (int64_t i = 0; i < n; ++i) gb[i] -= g[i];
        }
    });
    const float* pa = a.data();
    const float* pb = b.data();
    float* po = out.data();
    for (int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] - pb[i];
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    auto an = a.node(), bn = b.node();
    Tensor out = make_op_result(a.shape(), {a, b}, [an, bn](TensorNode& self) {
        const float* g = self.storage->g.data();
        const float* va = an->storage->v.data();
        const float* vb = bn->storage->v.data();
        int64_t n = self.numel();
        if (an->requires_grad) {
            float* ga = an->storage->g.data();
            for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * vb[i];
        }
        if (bn->requires_grad) {
            float* gb = bn->storage->g.data();
            for (int64_t i = 0; i < n; ++i) gb[i] += g[i] * va[i];
        }
    });
    const float* pa = a.data();
    const float* pb = b.data();
    float* po = out.data();
    for (int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] * pb[i];
    return out;
}

Tensor scale(const Tensor& a, float s) {
    auto an = a.node();
    Tensor out = make_op_result(a.shape(), {a}, [an, s](TensorNode& self) {
        if (!an->requires_grad) return;
        const float* g = self.storage->g.data();
        float* ga = an->storage->g.data();
        for (int64_t i = 0; i < self.numel(); ++i) ga[i] += g[i] * s;
    });
    const float* pa = a.data();
    float* po = out.data();
    for (int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] * s;
    return out;
}

Tensor relu(const Tensor& a) {
    auto an = a.node();
    Tensor out = make_op_result(a.shape(), {a}, [an](TensorNode& self) {
        if (!an->requires_grad) return;
        const float* g = self.storage->g.data();
        const float* v = self.storage->v.data();
        float* ga = an->storage->g.data();
        int64_t n = self.numel();
#pragma omp parallel for schedule(static)
        for (int64_t i = 0; i < n; ++i)
            if (v[i] > 0.f) ga[i] += g[i];
    });
    const float* pa = a.data();
    float* po = out.data();
    int64_t n = out.numel();
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] > 0.f ? pa[i] : 0.f;
    return out;
}

Tensor sum_all(const Tensor& a) {
    auto an = a.node();
    Tensor out = make_op_result({1}, {a}, [an](TensorNode& self) {
        if (!an->requires_grad) return;
        float g = self.storage->g[0];
        float* ga = an->storage->g.data();
        for (int64_t i = 0; i < an->numel(); ++i) ga[i] += g;
    });
    double acc = 0.0;
    const float* pa = a.data();
    for (int64_t i = 0; i < a.numel(); ++i) acc += pa[i];
    out.data()[0] = static_cast<float>(acc);
    return out;
}

Tensor mean_all(const Tensor& a) {
    int64_t n = a.numel();
    auto an = a.node();
    Tensor out = make_op_result({1}, {a}, [an, n](TensorNode& self) {
        if (!an->requires_grad) return;
        float g = self.storage->g[0] / static_cast<float>(n);
        float* ga = an->storage->g.data();
        for (int64_t i = 0; i < n; ++i) ga[i] += g;
    });
    double acc = 0.0;
    const float* pa = a.data();
    for (int64_t i = 0; i < n; ++i) acc += pa[i];
    out.data()[0] = static_cast<float>(acc / static_cast<double>(n));
    return out;
}

Tensor weighted_sum(const std::vector<Tensor>& terms, const std::vector<float>& weights) {
    if (terms.size() != weights.size()) throw ShapeError("weighted_sum: arity mismatch");
    if (terms.empty()) throw ShapeError("weighted_sum: no terms");
    std::vector<std::shared_ptr<TensorNode>> nodes;
    for (auto& t : terms) {
        if (t.numel() != 1) throw ShapeError("weighted_sum: terms must be scalars");
        nodes.push_back(t.node());
    }
    auto w = weights;
    Tensor out = make_op_result({1}, terms, [nodes, w](TensorNode& self) {
        float g = self.storage->g[0];
        for (size_t i = 0; i < nodes.size(); ++i)
            if (nodes[i]->requires_grad) nodes[i]->storage->g[0] += g * w[i];
    });
    double acc = 0.0;
    for (size_t i = 0; i < terms.size(); ++i) acc += static_cast<double>(w[i]) * terms[i].item();
    out.data()[0] = static_cast<float>(acc);
    return out;
}

Tensor concat_dim1(const Tensor& a, const Tensor& b) {
    if (a.ndim() < 2 || b.ndim() != a.ndim())
        throw ShapeError("concat_dim1: rank mismatch");
    Shape sa = a.shape(), sb = b.shape();
    for (int i = 0; i < a.ndim(); ++i)
        if (i != 1 && sa[static_cast<size_t>(i)] != sb[static_cast<size_t>(i)])
            throw ShapeError("concat_dim1: non-channel dims differ " + shape_str(sa) + " vs " +
                             shape_str(sb));
    int64_t n = sa[0], ca = sa[1], cb = sb[1];
    int64_t rest = 1;
    for (size_t i = 2; i < sa.size(); ++i) rest *= sa[i];
    Shape so = sa;
    so[1] = ca + cb;
    auto an = a.node(), bn = b.node();
    Tensor out = make_op_result(so, {a, b}, [an, bn, n, ca, cb, rest](TensorNode& self) {
        const float* g = self.storage->g.data();
        int64_t co = ca + cb;
        if (an->requires_grad) {
            float* ga = an->storage->g.data();
#pragma omp parallel for schedule(static)
            for (int64_t i = 0; i < n; ++i)
                for (int64_t j = 0; j < ca * rest; ++j) ga[i * ca * rest + j] += g[i * co * rest + j];
        }
        if (bn->requires_grad) {
            float* gb = bn->storage->g.data();
#pragma omp parallel for schedule(static)
            for (int64_t i = 0; i < n; ++i)
                for (int64_t j = 0; j < cb * rest; ++j)
                    gb[i * cb * rest + j] += g[(i * co + ca) * rest + j];
        }
    });
    const float* pa = a.data();
    const float* pb = b.data();
    float* po = out.data();
    int64_t co = ca + cb;
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; ++i) {
        std::memcpy(po + i * co * rest, pa + i * ca * rest, sizeof(float) * ca * rest);
        std::memcpy(po + (i * co + ca) * rest, pb + i * cb * rest, sizeof(float) * cb * rest);
    }
    return out;
}

// ---------------------------------------------------------------------------
// linear
// ---------------------------------------------------------------------------

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    if (x.ndim() != 2 || w.ndim() != 2) throw ShapeError("linear: expects 2-d x and w");
    int64_t n = x.dim(0), k = x.dim(1), m = w.dim(0);
    if (w.dim(1) != k)
        throw ShapeError("linear: weight " + shape_str(w.shape()) + " incompatible with x " +
                         shape_str(x.shape()));
    bool has_b = b.defined();
    if (has_b && (b.ndim() != 1 || b.dim(0) != m)) throw ShapeError("linear: bad bias shape");

    auto xn = x.node(), wn = w.node();
    auto bn = has_b ? b.node() : nullptr;
    std::vector<Tensor> parents = {x, w};
    if (has_b) parents.push_back(b);

    const int64_t col_chunk = 32768;
    Tensor out = make_op_result({n, m}, std::move(parents),
                                [xn, wn, bn, n, k, m, col_chunk](TensorNode& self) {
        const float* g = self.storage->g.data();
        const float* xv = xn->storage->v.data();
        const float* wv = wn->storage->v.data();
        int64_t nchunks = chunk_count(m, col_chunk);
        if (wn->requires_grad) {
            float* gw = wn->storage->g.data();
            // dW[mc,:] = dY[:,mc]^T * X -- disjoint row blocks
#pragma omp parallel for schedule(static)
            for (int64_t c = 0; c < nchunks; ++c) {
                int64_t m0 = c * col_chunk, mc = std::min(col_chunk, m - m0);
                auto dyb = cmap_rm(g + m0, n, mc, m);
                auto xb = cmap_rm(xv, n, k);
                map_rm(gw + m0 * k, mc, k).noalias() += dyb.transpose() * xb;
            }
        }
        if (bn && bn->requires_grad) {
            float* gb = bn->storage->g.data();
#pragma omp parallel for schedule(static)
            for (int64_t c = 0; c < nchunks; ++c) {
                int64_t m0 = c * col_chunk, mc = std::min(col_chunk, m - m0);
                for (int64_t j = 0; j < mc; ++j) {
                    double acc = 0.0;
                    for (int64_t i = 0; i < n; ++i) acc += g[i * m + m0 + j];
                    gb[m0 + j] += static_cast<float>(acc);
                }
            }
        }
        if (xn->requires_grad) {
            // dX = sum over chunks of dY[:,mc] * W[mc,:], reduced in chunk order
            std::vector<float> partial(static_cast<size_t>(nchunks) * n * k, 0.f);
#pragma omp parallel for schedule(static)
            for (int64_t c = 0; c < nchunks; ++c) {
                int64_t m0 = c * col_chunk, mc = std::min(col_chunk, m - m0);
                auto dyb = cmap_rm(g + m0, n, mc, m);
                auto wb = cmap_rm(wv + m0 * k, mc, k);
                map_rm(partial.data() + c * n * k, n, k).noalias() = dyb * wb;
            }
            float* gx = xn->storage->g.data();
            for (int64_t c = 0; c < nchunks; ++c) {
                const float* p = partial.data() + c * n * k;
                for (int64_t i = 0; i < n * k; ++i) gx[i] += p[i];
            }
        }
    });

    float* po = out.data();
    const float* px = x.data();
    const float* pw = w.data();
    int64_t nchunks = chunk_count(m, col_chunk);
#pragma omp parallel for schedule(static)
    for (int64_t c = 0; c < nchunks; ++c) {
        int64_t m0 = c * col_chunk, mc = std::min(col_chunk, m - m0);
        auto xb = cmap_rm(px, n, k);
        auto wb = cmap_rm(pw + m0 * k, mc, k);
        map_rm(po + m0, n, mc, m).noalias() = xb * wb.transpose();
    }
    if (has_b) {
        const float* pb = b.data();
#pragma omp parallel for schedule(static)
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < m; ++j) po[i * m + j] += pb[j];
    }
    return out;
}

Tensor part_linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    if (x.ndim() != 3 || w.ndim() != 3) throw ShapeError("part_linear: expects x[B,C,P], w[P,M,C]");
    int64_t bsz = x.dim(0), cin = x.dim(1), parts = x.dim(2);
    int64_t m = w.dim(1);
    if (w.dim(0) != parts || w.dim(2) != cin)
        throw ShapeError("part_linear: weight " + shape_str(w.shape()) + " incompatible with x " +
                         shape_str(x.shape()));
    bool has_b = b.defined();
    if (has_b && (b.ndim() != 2 || b.dim(0) != parts || b.dim(1) != m))
        throw ShapeError("part_linear: bad bias shape");

    auto xn = x.node(), wn = w.node();
    auto bnn = has_b ? b.node() : nullptr;
    std::vector<Tensor> parents = {x, w};
    if (has_b) parents.push_back(b);

    Tensor out = make_op_result({bsz, m, parts}, std::move(parents),
                                [xn, wn, bnn, bsz, cin, parts, m](TensorNode& self) {
        const float* g = self.storage->g.data();
        const float* xv = xn->storage->v.data();
        const float* wv = wn->storage->v.data();
#pragma omp parallel for schedule(static)
        for (int64_t p = 0; p < parts; ++p) {
            auto dyp = cmap_rm(g + p, bsz, m, m * parts, parts);
            auto xp = cmap_rm(xv + p, bsz, cin, cin * parts, parts);
            auto wp = cmap_rm(wv + p * m * cin, m, cin);
            if (wn->requires_grad) {
                float* gw = wn->storage->g.data();
                map_rm(gw + p * m * cin, m, cin).noalias() += dyp.transpose() * xp;
            }
            if (bnn && bnn->requires_grad) {
                float* gb = bnn->storage->g.data();
                for (int64_t j = 0; j < m; ++j) {
                    double acc = 0.0;
                    for (int64_t i = 0; i < bsz; ++i) acc += g[(i * m + j) * parts + p];
                    gb[p * m + j] += static_cast<float>(acc);
                }
            }
            if (xn->requires_grad) {
                float* gx = xn->storage->g.data();
                map_rm(gx + p, bsz, cin, cin * parts, parts).noalias() += dyp * wp;
            }
        }
    });

    float* po = out.data();
    const float* px = x.data();
    const float* pw = w.data();
#pragma omp parallel for schedule(static)
    for (int64_t p = 0; p < parts; ++p) {
        auto xp = cmap_rm(px + p, bsz, cin, cin * parts, parts);
        auto wp = cmap_rm(pw + p * m * cin, m, cin);
        map_rm(po + p, bsz, m, m * parts, parts).noalias() = xp * wp.transpose();
        if (has_b) {
            const float* pb = b.data() + p * m;
            for (int64_t i = 0; i < bsz; ++i)
                for (int64_t j = 0; j < m; ++j) po[(i * m + j) * parts + p] += pb[j];
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// pointwise convolution (1x1 kernels, any spatial rank)
//
// Per-frame GEMMs at these sizes are overhead-bound, so frames are fused into
// one [Cout,Cin] x [Cin, N*S] product via a pack/scatter transpose pair.
// ---------------------------------------------------------------------------

namespace {

void pack_to_rows(const float* x, int64_t n, int64_t c, int64_t s, float* out) {
    // x[n][c][s] -> out[c][n*s]
#pragma omp parallel for schedule(static) collapse(2)
    for (int64_t ci = 0; ci < c; ++ci)
        for (int64_t f = 0; f < n; ++f)
            std::memcpy(out + (ci * n + f) * s, x + (f * c + ci) * s,
                        sizeof(float) * static_cast<size_t>(s));
}

void scatter_from_rows(const float* rows, int64_t n, int64_t c, int64_t s, float* y,
                       bool accumulate) {
    // rows[c][n*s] -> y[n][c][s]
#pragma omp parallel for schedule(static) collapse(2)
    for (int64_t f = 0; f < n; ++f)
        for (int64_t ci = 0; ci < c; ++ci) {
            const float* src = rows + (ci * n + f) * s;
            float* dst = y + (f * c + ci) * s;
            if (accumulate)
                for (int64_t i = 0; i < s; ++i) dst[i] += src[i];
            else
                std::memcpy(dst, src, sizeof(float) * static_cast<size_t>(s));
        }
}

void fused_gemm_cols(const float* a, const float* b, float* c, int64_t m, int64_t k, int64_t n) {
    // c[m,n] = a[m,k] * b[k,n], deterministic column chunking
    const int64_t col_chunk = 65536;
    int64_t nchunks = chunk_count(n, col_chunk);
#pragma omp parallel for schedule(static)
    for (int64_t ch = 0; ch < nchunks; ++ch) {
        int64_t c0 = ch * col_chunk, cc = std::min(col_chunk, n - c0);
        map_rm(c + c0, m, cc, n).noalias() = cmap_rm(a, m, k) * cmap_rm(b + c0, k, cc, n);
    }
}

void pointwise_forward(const float* x, const float* w, const float* bias, float* y, int64_t n,
                       int64_t cin, int64_t cout, int64_t s) {
    std::vector<float> packed = pool().take(static_cast<size_t>(cin) * n * s);
    std::vector<float> prod = pool().take(static_cast<size_t>(cout) * n * s);
    pack_to_rows(x, n, cin, s, packed.data());
    fused_gemm_cols(w, packed.data(), prod.data(), cout, cin, n * s);
    scatter_from_rows(prod.data(), n, cout, s, y, false);
    if (bias) {
#pragma omp parallel for schedule(static) collapse(2)
        for (int64_t f = 0; f < n; ++f)
            for (int64_t co = 0; co < cout; ++co) {
                float* dst = y + (f * cout + co) * s;
                float b = bias[co];
                for (int64_t i = 0; i < s; ++i) dst[i] += b;
            }
    }
    pool().give(std::move(packed));
    pool().give(std::move(prod));
}

void pointwise_backward(const float* x, const float* w, const float* dy, float* gx, float* gw,
                        float* gb, int64_t n, int64_t cin, int64_t cout, int64_t s) {
    int64_t cols = n * s;
    std::vector<float> dprod = pool().take(static_cast<size_t>(cout) * cols);
    pack_to_rows(dy, n, cout, s, dprod.data());
    if (gb) {
#pragma omp parallel for schedule(static)
        for (int64_t co = 0; co < cout; ++co) {
            double acc = 0.0;
            const float* row = dprod.data() + co * cols;
            for (int64_t i = 0; i < cols; ++i) acc += row[i];
            gb[co] += static_cast<float>(acc);
        }
    }
    if (gw) {
        std::vector<float> packed = pool().take(static_cast<size_t>(cin) * cols);
        pack_to_rows(x, n, cin, s, packed.data());
        // dW[co,:] row blocks are disjoint across threads
        const int64_t row_chunk = 128;
        int64_t nchunks = chunk_count(cout, row_chunk);
#pragma omp parallel for schedule(static)
        for (int64_t ch = 0; ch < nchunks; ++ch) {
            int64_t r0 = ch * row_chunk, rc = std::min(row_chunk, cout - r0);
            map_rm(gw + r0 * cin, rc, cin).noalias() +=
                cmap_rm(dprod.data() + r0 * cols, rc, cols) *
                cmap_rm(packed.data(), cin, cols).transpose();
        }
        pool().give(std::move(packed));
    }
    if (gx) {
        std::vector<float> dpacked = pool().take(static_cast<size_t>(cin) * cols);
        const int64_t col_chunk = 65536;
        int64_t nchunks = chunk_count(cols, col_chunk);
#pragma omp parallel for schedule(static)
        for (int64_t ch = 0; ch < nchunks; ++ch) {
            int64_t c0 = ch * col_chunk, cc = std::min(col_chunk, cols - c0);
            map_rm(dpacked.data() + c0, cin, cc, cols).noalias() =
                cmap_rm(w, cout, cin).transpose() * cmap_rm(dprod.data() + c0, cout, cc, cols);
        }
        scatter_from_rows(dpacked.data(), n, cin, s, gx, true);
        pool().give(std::move(dpacked));
    }
    pool().give(std::move(dprod));
}

} // namespace

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

namespace {

void im2col2d(const float* x, int64_t cin, int64_t h, int64_t w, int64_t kh, int64_t kw,
              int64_t sh, int64_t sw, int64_t ph, int64_t pw, int64_t ho, int64_t wo,
              float* cols) {
    int64_t plane = ho * wo;
    for (int64_t c = 0; c < cin; ++c) {
        for (int64_t ki = 0; ki < kh; ++ki) {
            for (int64_t kj = 0; kj < kw; ++kj) {
                float* row = cols + ((c * kh + ki) * kw + kj) * plane;
                for (int64_t oh = 0; oh < ho; ++oh) {
                    int64_t ih = oh * sh - ph + ki;
                    if (ih < 0 || ih >= h) {
                        std::fill(row + oh * wo, row + (oh + 1) * wo, 0.f);
                        continue;
                    }
                    const float* src = x + (c * h + ih) * w;
                    for (int64_t ow = 0; ow < wo; ++ow) {
                        int64_t iw = ow * sw - pw + kj;
                        row[oh * wo + ow] = (iw >= 0 && iw < w) ? src[iw] : 0.f;
                    }
                }
            }
        }
    }
}

void col2im2d(const float* cols, int64_t cin, int64_t h, int64_t w, int64_t kh, int64_t kw,
              int64_t sh, int64_t sw, int64_t ph, int64_t pw, int64_t ho, int64_t wo, float* x) {
    int64_t plane = ho * wo;
    for (int64_t c = 0; c < cin; ++c) {
        for (int64_t ki = 0; ki < kh; ++ki) {
            for (int64_t kj = 0; kj < kw; ++kj) {
                const float* row = cols + ((c * kh + ki) * kw + kj) * plane;
                for (int64_t oh = 0; oh < ho; ++oh) {
                    int64_t ih = oh * sh - ph + ki;
                    if (ih < 0 || ih >= h) continue;
                    float* dst = x + (c * h + ih) * w;
                    for (int64_t ow = 0; ow < wo; ++ow) {
                        int64_t iw = ow * sw - pw + kj;
                        if (iw >= 0 && iw < w) dst[iw] += row[oh * wo + ow];
                    }
                }
            }
        }
    }
}

} // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride_h, int stride_w,
              int pad_h, int pad_w) {
    if (x.ndim() != 4 || w.ndim() != 4) throw ShapeError("conv2d: expects x[N,C,H,W], w[O,C,kh,kw]");
    int64_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), wdt = x.dim(3);
    int64_t cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    if (w.dim(1) != cin)
        throw ShapeError("conv2d: channel mismatch x " + shape_str(x.shape()) + " w " +
                         shape_str(w.shape()));
    int64_t ho = (h + 2 * pad_h - kh) / stride_h + 1;
    int64_t wo = (wdt + 2 * pad_w - kw) / stride_w + 1;
    if (ho <= 0 || wo <= 0) throw ShapeError("conv2d: empty output");
    bool has_b = b.defined();
    if (has_b && (b.ndim() != 1 || b.dim(0) != cout)) throw ShapeError("conv2d: bad bias shape");
    bool pointwise = (kh == 1 && kw == 1 && stride_h == 1 && stride_w == 1 && pad_h == 0 &&
                      pad_w == 0);

    auto xn = x.node(), wn = w.node();
    auto bnn = has_b ? b.node() : nullptr;
    std::vector<Tensor> parents = {x, w};
    if (has_b) parents.push_back(b);

    const int64_t frame_chunk = 8;
    int64_t ckk = cin * kh * kw, plane = ho * wo;

    std::function<void(TensorNode&)> backward_fn;
    if (pointwise) {
        backward_fn = [=](TensorNode& self) {
            pointwise_backward(xn->storage->v.data(), wn->storage->v.data(),
                               self.storage->g.data(),
                               xn->requires_grad ? xn->storage->g.data() : nullptr,
                               wn->requires_grad ? wn->storage->g.data() : nullptr,
                               (bnn && bnn->requires_grad) ? bnn->storage->g.data() : nullptr, n,
                               cin, cout, plane);
        };
    } else {
        backward_fn = [=, sh = int64_t(stride_h), sw = int64_t(stride_w), ph = int64_t(pad_h),
                       pw = int64_t(pad_w)](TensorNode& self) {
            const float* g = self.storage->g.data();
            const float* xv = xn->storage->v.data();
            const float* wv = wn->storage->v.data();
            int64_t nchunks = chunk_count(n, frame_chunk);
            bool need_w = wn->requires_grad;
            bool need_b = bnn && bnn->requires_grad;
            bool need_x = xn->requires_grad;
            std::vector<float> wpart(need_w ? static_cast<size_t>(nchunks) * cout * ckk : 0, 0.f);
            std::vector<float> bpart(need_b ? static_cast<size_t>(nchunks) * cout : 0, 0.f);
#pragma omp parallel for schedule(static)
            for (int64_t c = 0; c < nchunks; ++c) {
                std::vector<float> cols(static_cast<size_t>(ckk) * plane);
                std::vector<float> dcols(need_x ? static_cast<size_t>(ckk) * plane : 0);
                int64_t f0 = c * frame_chunk, f1 = std::min(n, f0 + frame_chunk);
                for (int64_t f = f0; f < f1; ++f) {
                    const float* xf = xv + f * cin * h * wdt;
                    const float* gf = g + f * cout * plane;
                    im2col2d(xf, cin, h, wdt, kh, kw, sh, sw, ph, pw, ho, wo, cols.data());
                    if (need_w) {
                        map_rm(wpart.data() + c * cout * ckk, cout, ckk).noalias() +=
                            cmap_rm(gf, cout, plane) * cmap_rm(cols.data(), ckk, plane).transpose();
                    }
                    if (need_b) {
                        float* bp = bpart.data() + c * cout;
                        for (int64_t o = 0; o < cout; ++o) {
                            double acc = 0.0;
                            for (int64_t i = 0; i < plane; ++i) acc += gf[o * plane + i];
                            bp[o] += static_cast<float>(acc);
                        }
                    }
                    if (need_x) {
                        float* gx = xn->storage->g.data() + f * cin * h * wdt;
                        map_rm(dcols.data(), ckk, plane).noalias() =
                            cmap_rm(wv, cout, ckk).transpose() * cmap_rm(gf, cout, plane);
                        col2im2d(dcols.data(), cin, h, wdt, kh, kw, sh, sw, ph, pw, ho, wo, gx);
                    }
                }
            }
            if (need_w) {
                float* gw = wn->storage->g.data();
                for (int64_t c = 0; c < nchunks; ++c) {
                    const float* p = wpart.data() + c * cout * ckk;
                    for (int64_t i = 0; i < cout * ckk; ++i) gw[i] += p[i];
                }
            }
            if (need_b) {
                float* gb = bnn->storage->g.data();
                for (int64_t c = 0; c < nchunks; ++c) {
                    const float* p = bpart.data() + c * cout;
                    for (int64_t i = 0; i < cout; ++i) gb[i] += p[i];
                }
            }
        };
    }
    Tensor out = make_op_result({n, cout, ho, wo}, std::move(parents), std::move(backward_fn));

    float* po = out.data();
    const float* px = x.data();
    const float* pw = w.data();
    const float* pb = has_b ? b.data() : nullptr;
    if (pointwise) {
        pointwise_forward(px, pw, pb, po, n, cin, cout, plane);
        return out;
    }
    int64_t nchunks = chunk_count(n, frame_chunk);
#pragma omp parallel for schedule(static)
    for (int64_t c = 0; c < nchunks; ++c) {
        std::vector<float> cols(static_cast<size_t>(ckk) * plane);
        int64_t f0 = c * frame_chunk, f1 = std::min(n, f0 + frame_chunk);
        for (int64_t f = f0; f < f1; ++f) {
            const float* xf = px + f * cin * h * wdt;
            im2col2d(xf, cin, h, wdt, kh, kw, stride_h, stride_w, pad_h, pad_w, ho, wo,
                     cols.data());
            float* of = po + f * cout * plane;
            map_rm(of, cout, plane).noalias() =
                cmap_rm(pw, cout, ckk) * cmap_rm(cols.data(), ckk, plane);
            if (pb)
                for (int64_t o = 0; o < cout; ++o)
                    for (int64_t i = 0; i < plane; ++i) of[o * plane + i] += pb[o];
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// conv3d
// ---------------------------------------------------------------------------

namespace {

void im2col3d(const float* x, int64_t cin, int64_t d, int64_t h, int64_t w, int64_t k, int64_t s,
              int64_t p, int64_t dv, int64_t ho, int64_t wo, float* cols) {
    int64_t plane = dv * ho * wo;
    for (int64_t c = 0; c < cin; ++c)
        for (int64_t kd = 0; kd < k; ++kd)
            for (int64_t ki = 0; ki < k; ++ki)
                for (int64_t kj = 0; kj < k; ++kj) {
                    float* row = cols + (((c * k + kd) * k + ki) * k + kj) * plane;
                    for (int64_t od = 0; od < dv; ++od) {
                        int64_t id = od * s - p + kd;
                        for (int64_t oh = 0; oh < ho; ++oh) {
                            int64_t ih = oh * s - p + ki;
                            float* dst = row + (od * ho + oh) * wo;
                            if (id < 0 || id >= d || ih < 0 || ih >= h) {
                                std::fill(dst, dst + wo, 0.f);
                                continue;
                            }
                            const float* src = x + ((c * d + id) * h + ih) * w;
                            for (int64_t ow = 0; ow < wo; ++ow) {
                                int64_t iw = ow * s - p + kj;
                                dst[ow] = (iw >= 0 && iw < w) ? src[iw] : 0.f;
                            }
                        }
                    }
                }
}

void col2im3d(const float* cols, int64_t cin, int64_t d, int64_t h, int64_t w, int64_t k,
              int64_t s, int64_t p, int64_t dv, int64_t ho, int64_t wo, float* x) {
    int64_t plane = dv * ho * wo;
    for (int64_t c = 0; c < cin; ++c)
        for (int64_t kd = 0; kd < k; ++kd)
            for (int64_t ki = 0; ki < k; ++ki)
                for (int64_t kj = 0; kj < k; ++kj) {
                    const float* row = cols + (((c * k + kd) * k + ki) * k + kj) * plane;
                    for (int64_t od = 0; od < dv; ++od) {
                        int64_t id = od * s - p + kd;
                        if (id < 0 || id >= d) continue;
                        for (int64_t oh = 0; oh < ho; ++oh) {
                            int64_t ih = oh * s - p + ki;
                            if (ih < 0 || ih >= h) continue;
                            float* dst = x + ((c * d + id) * h + ih) * w;
                            const float* src = row + (od * ho + oh) * wo;
                            for (int64_t ow = 0; ow < wo; ++ow) {
                                int64_t iw = ow * s - p + kj;
                                if (iw >= 0 && iw < w) dst[iw] += src[ow];
                            }
                        }
                    }
                }
}

} // namespace

Tensor conv3d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
    if (x.ndim() != 5 || w.ndim() != 5)
        throw ShapeError("conv3d: expects x[N,C,D,H,W], w[O,C,k,k,k]");
    int64_t n = x.dim(0), cin = x.dim(1), d = x.dim(2), h = x.dim(3), wdt = x.dim(4);
    int64_t cout = w.dim(0), k = w.dim(2);
    if (w.dim(1) != cin || w.dim(3) != k || w.dim(4) != k)
        throw ShapeError("conv3d: weight shape " + shape_str(w.shape()));
    int64_t s = stride, p = pad;
    int64_t dv = (d + 2 * p - k) / s + 1;
    int64_t ho = (h + 2 * p - k) / s + 1;
    int64_t wo = (wdt + 2 * p - k) / s + 1;
    if (dv <= 0 || ho <= 0 || wo <= 0) throw ShapeError("conv3d: empty output");
    bool has_b = b.defined();
    if (has_b && (b.ndim() != 1 || b.dim(0) != cout)) throw ShapeError("conv3d: bad bias shape");
    bool pointwise = (k == 1 && s == 1 && p == 0);

    auto xn = x.node(), wn = w.node();
    auto bnn = has_b ? b.node() : nullptr;
    std::vector<Tensor> parents = {x, w};
    if (has_b) parents.push_back(b);

    const int64_t frame_chunk = 4;
    int64_t ckk = cin * k * k * k, plane = dv * ho * wo;

    std::function<void(TensorNode&)> backward_fn;
    if (pointwise) {
        backward_fn = [=](TensorNode& self) {
            pointwise_backward(xn->storage->v.data(), wn->storage->v.data(),
                               self.storage->g.data(),
                               xn->requires_grad ? xn->storage->g.data() : nullptr,
                               wn->requires_grad ? wn->storage->g.data() : nullptr,
                               (bnn && bnn->requires_grad) ? bnn->storage->g.data() : nullptr, n,
                               cin, cout, plane);
        };
    } else {
        backward_fn = [=](TensorNode& self) {
            const float* g = self.storage->g.data();
            const float* xv = xn->storage->v.data();
            const float* wv = wn->storage->v.data();
            int64_t nchunks = chunk_count(n, frame_chunk);
            bool need_w = wn->requires_grad;
            bool need_b = bnn && bnn->requires_grad;
            bool need_x = xn->requires_grad;
            std::vector<float> wpart(need_w ? static_cast<size_t>(nchunks) * cout * ckk : 0, 0.f);
            std::vector<float> bpart(need_b ? static_cast<size_t>(nchunks) * cout : 0, 0.f);
#pragma omp parallel for schedule(static)
            for (int64_t c = 0; c < nchunks; ++c) {
                std::vector<float> cols(static_cast<size_t>(ckk) * plane);
                std::vector<float> dcols(need_x ? static_cast<size_t>(ckk) * plane : 0);
                int64_t f0 = c * frame_chunk, f1 = std::min(n, f0 + frame_chunk);
                for (int64_t f = f0; f < f1; ++f) {
                    const float* xf = xv + f * cin * d * h * wdt;
                    const float* gf = g + f * cout * plane;
                    im2col3d(xf, cin, d, h, wdt, k, s, p, dv, ho, wo, cols.data());
                    if (need_w) {
                        map_rm(wpart.data() + c * cout * ckk, cout, ckk).noalias() +=
                            cmap_rm(gf, cout, plane) * cmap_rm(cols.data(), ckk, plane).transpose();
                    }
                    if (need_b) {
                        float* bp = bpart.data() + c * cout;
                        for (int64_t o = 0; o < cout; ++o) {
                            double acc = 0.0;
                            for (int64_t i = 0; i < plane; ++i) acc += gf[o * plane + i];
                            bp[o] += static_cast<float>(acc);
                        }
                    }
                    if (need_x) {
                        float* gx = xn->storage->g.data() + f * cin * d * h * wdt;
                        map_rm(dcols.data(), ckk, plane).noalias() =
                            cmap_rm(wv, cout, ckk).transpose() * cmap_rm(gf, cout, plane);
                        col2im3d(dcols.data(), cin, d, h, wdt, k, s, p, dv, ho, wo, gx);
                    }
                }
            }
            if (need_w) {
                float* gw = wn->storage->g.data();
                for (int64_t c = 0; c < nchunks; ++c) {
                    const float* q = wpart.data() + c * cout * ckk;
                    for (int64_t i = 0; i < cout * ckk; ++i) gw[i] += q[i];
                }
            }
            if (need_b) {
                float* gb = bnn->storage->g.data();
                for (int64_t c = 0; c < nchunks; ++c) {
                    const float* q = bpart.data() + c * cout;
                    for (int64_t i = 0; i < cout; ++i) gb[i] += q[i];
                }
            }
        };
    }
    Tensor out =
        make_op_result({n, cout, dv, ho, wo}, std::move(parents), std::move(backward_fn));

    float* po = out.data();
    const float* px = x.data();
    const float* pw = w.data();
    const float* pb = has_b ? b.data() : nullptr;
    if (pointwise) {
        pointwise_forward(px, pw, pb, po, n, cin, cout, plane);
        return out;
    }
    int64_t nchunks = chunk_count(n, frame_chunk);
#pragma omp parallel for schedule(static)
    for (int64_t c = 0; c < nchunks; ++c) {
        std::vector<float> cols(static_cast<size_t>(ckk) * plane);
        int64_t f0 = c * frame_chunk, f1 = std::min(n, f0 + frame_chunk);
        for (int64_t f = f0; f < f1; ++f) {
            const float* xf = px + f * cin * d * h * wdt;
            im2col3d(xf, cin, d, h, wdt, k, s, p, dv, ho, wo, cols.data());
            float* of = po + f * cout * plane;
            map_rm(of, cout, plane).noalias() =
                cmap_rm(pw, cout, ckk) * cmap_rm(cols.data(), ckk, plane);
            if (pb)
                for (int64_t o = 0; o < cout; ++o)
                    for (int64_t i = 0; i < plane; ++i) of[o * plane + i] += pb[o];
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// bmm
// ---------------------------------------------------------------------------

Tensor bmm(const Tensor& a, const Tensor& b) {
    if (b.ndim() != 3) throw ShapeError("bmm: b must be [N,K,R]");
    int64_t n = b.dim(0), k = b.dim(1), r = b.dim(2);
    bool shared = (a.ndim() == 2);
    if (!shared && a.ndim() != 3) throw ShapeError("bmm: a must be [N,M,K] or [M,K]");
    int64_t m = shared ? a.dim(0) : a.dim(1);
    int64_t ak = shared ? a.dim(1) : a.dim(2);
    if (ak != k || (!shared && a.dim(0) != n))
        throw ShapeError("bmm: incompatible shapes " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));

    auto an = a.node(), bn = b.node();
    const int64_t batch_chunk = 8;
    Tensor out = make_op_result({n, m, r}, {a, b}, [=](TensorNode& self) {
        const float* g = self.storage->g.data();
        const float* av = an->storage->v.data();
        const float* bv = bn->storage->v.data();
        if (an->requires_grad) {
            float* ga = an->storage->g.data();
            if (shared) {
                int64_t nchunks = chunk_count(n, batch_chunk);
                std::vector<float> part(static_cast<size_t>(nchunks) * m * k, 0.f);
#pragma omp parallel for schedule(static)
                for (int64_t c = 0; c < nchunks; ++c) {
                    int64_t f0 = c * batch_chunk, f1 = std::min(n, f0 + batch_chunk);
                    auto pm = map_rm(part.data() + c * m * k, m, k);
                    for (int64_t i = f0; i < f1; ++i)
                        pm.noalias() += cmap_rm(g + i * m * r, m, r) *
                                        cmap_rm(bv + i * k * r, k, r).transpose();
                }
                for (int64_t c = 0; c < nchunks; ++c) {
                    const float* q = part.data() + c * m * k;
                    for (int64_t i = 0; i < m * k; ++i) ga[i] += q[i];
                }
            } else {
#pragma omp parallel for schedule(static)
                for (int64_t i = 0; i < n; ++i)
                    map_rm(ga + i * m * k, m, k).noalias() +=
                        cmap_rm(g + i * m * r, m, r) * cmap_rm(bv + i * k * r, k, r).transpose();
            }
        }
        if (bn->requires_grad) {
            float* gb = bn->storage->g.data();
#pragma omp parallel for schedule(static)
            for (int64_t i = 0; i < n; ++i) {
                const float* am = shared ? av : av + i * m * k;
                map_rm(gb + i * k * r, k, r).noalias() +=
                    cmap_rm(am, m, k).transpose() * cmap_rm(g + i * m * r, m, r);
            }
        }
    });

    float* po = out.data();
    const float* pa = a.data();
    const float* pb = b.data();
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; ++i) {
        const float* am = shared ? pa : pa + i * m * k;
        map_rm(po + i * m * r, m, r).noalias() =
            cmap_rm(am, m, k) * cmap_rm(pb + i * k * r, k, r);
    }
    return out;
}

// ---------------------------------------------------------------------------
// batch norm
// ---------------------------------------------------------------------------

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor& running_mean,
                  Tensor& running_var, bool training, float momentum, float eps) {
    if (x.ndim() < 2) throw ShapeError("batch_norm: input rank must be >= 2");
    int64_t n = x.dim(0);
    int64_t c = x.dim(1);
    int64_t sp = 1;
    for (int i = 2; i < x.ndim(); ++i) sp *= x.dim(i);
    if (x.ndim() == 2) {
        // [N,F]: stats per feature over the batch only
        c = x.dim(1);
        sp = 1;
    }
    if (gamma.numel() != c || beta.numel() != c || running_mean.numel() != c ||
        running_var.numel() != c)
        throw ShapeError("batch_norm: parameter size mismatch");
    int64_t count = n * sp;
    if (training && count < 2)
        throw ContractError("batch_norm: training mode needs at least 2 values per channel "
                            "(batch of size 1)");

    std::vector<float> mean(static_cast<size_t>(c)), invstd(static_cast<size_t>(c));
    const float* px = x.data();
    if (training) {
        float* rm = running_mean.data();
        float* rv = running_var.data();
#pragma omp parallel for schedule(static)
        for (int64_t ch = 0; ch < c; ++ch) {
            double s1 = 0.0, s2 = 0.0;
            for (int64_t i = 0; i < n; ++i) {
                const float* base = px + (i * c + ch) * sp;
                for (int64_t j = 0; j < sp; ++j) {
                    double v = base[j];
                    s1 += v;
                    s2 += v * v;
                }
            }
            double mu = s1 / count;
            double var = s2 / count - mu * mu;
            if (var < 0) var = 0;
            mean[ch] = static_cast<float>(mu);
            invstd[ch] = static_cast<float>(1.0 / std::sqrt(var + eps));
            double unbiased = count > 1 ? var * count / (count - 1) : var;
            rm[ch] = (1.f - momentum) * rm[ch] + momentum * static_cast<float>(mu);
            rv[ch] = (1.f - momentum) * rv[ch] + momentum * static_cast<float>(unbiased);
        }
    } else {
        const float* rm = running_mean.data();
        const float* rv = running_var.data();
        for (int64_t ch = 0; ch < c; ++ch) {
            mean[ch] = rm[ch];
            invstd[ch] = 1.f / std::sqrt(rv[ch] + eps);
        }
    }

    auto xn = x.node(), gn = gamma.node(), bn = beta.node();
    Tensor out = make_op_result(
        x.shape(), {x, gamma, beta},
        [xn, gn, bn, n, c, sp, count, mean, invstd, training](TensorNode& self) {
            const float* g = self.storage->g.data();
            const float* xv = xn->storage->v.data();
            const float* gam = gn->storage->v.data();
#pragma omp parallel for schedule(static)
            for (int64_t ch = 0; ch < c; ++ch) {
                double sum_dy = 0.0, sum_dy_xhat = 0.0;
                for (int64_t i = 0; i < n; ++i) {
                    const float* gb = g + (i * c + ch) * sp;
                    const float* xb = xv + (i * c + ch) * sp;
                    for (int64_t j = 0; j < sp; ++j) {
                        double xhat = (xb[j] - mean[ch]) * invstd[ch];
                        sum_dy += gb[j];
                        sum_dy_xhat += gb[j] * xhat;
                    }
                }
                if (gn->requires_grad) gn->storage->g[ch] += static_cast<float>(sum_dy_xhat);
                if (bn->requires_grad) bn->storage->g[ch] += static_cast<float>(sum_dy);
                if (xn->requires_grad) {
                    float* gx = xn->storage->g.data();
                    float a = gam[ch] * invstd[ch];
                    float mdy = static_cast<float>(sum_dy / count);
                    float mdyx = static_cast<float>(sum_dy_xhat / count);
                    for (int64_t i = 0; i < n; ++i) {
                        const float* gb = g + (i * c + ch) * sp;
                        const float* xb = xv + (i * c + ch) * sp;
                        float* dst = gx + (i * c + ch) * sp;
                        if (training) {
                            for (int64_t j = 0; j < sp; ++j) {
                                float xhat = (xb[j] - mean[ch]) * invstd[ch];
                                dst[j] += a * (gb[j] - mdy - xhat * mdyx);
                            }
                        } else {
                            for (int64_t j = 0; j < sp; ++j) dst[j] += a * gb[j];
                        }
                    }
                }
            }
        });

    float* po = out.data();
    const float* pg = gamma.data();
    const float* pbt = beta.data();
#pragma omp parallel for schedule(static)
    for (int64_t ch = 0; ch < c; ++ch) {
        float a = pg[ch] * invstd[ch];
        float b2 = pbt[ch] - a * mean[ch];
        for (int64_t i = 0; i < n; ++i) {
            const float* xb = px + (i * c + ch) * sp;
            float* ob = po + (i * c + ch) * sp;
            for (int64_t j = 0; j < sp; ++j) ob[j] = a * xb[j] + b2;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// pooling / resize
// ---------------------------------------------------------------------------

Tensor temporal_max(const Tensor& x) {
    if (x.ndim() < 3) throw ShapeError("temporal_max: expects [B,T,...]");
    int64_t b = x.dim(0), t = x.dim(1);
    int64_t rest = 1;
    Shape so = {b};
    for (int i = 2; i < x.ndim(); ++i) {
        rest *= x.dim(i);
        so.push_back(x.dim(i));
    }
    auto xn = x.node();
    auto argmax = std::make_shared<std::vector<int32_t>>(static_cast<size_t>(b * rest));
    Tensor out = make_op_result(so, {x}, [xn, argmax, b, t, rest](TensorNode& self) {
        if (!xn->requires_grad) return;
        const float* g = self.storage->g.data();
        float* gx = xn->storage->g.data();
        const int32_t* am = argmax->data();
#pragma omp parallel for schedule(static)
        for (int64_t i = 0; i < b; ++i)
            for (int64_t j = 0; j < rest; ++j)
                gx[(i * t + am[i * rest + j]) * rest + j] += g[i * rest + j];
    });
    const float* px = x.data();
    float* po = out.data();
    int32_t* am = argmax->data();
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < b; ++i) {
        for (int64_t j = 0; j < rest; ++j) {
            float best = px[(i * t) * rest + j];
            int32_t bi = 0;
            for (int64_t k = 1; k < t; ++k) {
                float v = px[(i * t + k) * rest + j];
                if (v > best) {
                    best = v;
                    bi = static_cast<int32_t>(k);
                }
            }
            po[i * rest + j] = best;
            am[i * rest + j] = bi;
        }
    }
    return out;
}

Tensor horizontal_pool(const Tensor& x, int parts) {
    if (x.ndim() != 4) throw ShapeError("horizontal_pool: expects [B,C,H,W]");
    int64_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (parts <= 0 || h % parts != 0)
        throw ConfigError("horizontal_pool: height " + std::to_string(h) +
                          " not divisible by parts " + std::to_string(parts));
    int64_t strip = h / parts;
    auto xn = x.node();
    auto argmax = std::make_shared<std::vector<int32_t>>(static_cast<size_t>(b * c * parts));
    Tensor out = make_op_result(
        {b, c, parts}, {x}, [xn, argmax, b, c, h, w, parts, strip](TensorNode& self) {
            if (!xn->requires_grad) return;
            const float* g = self.storage->g.data();
            float* gx = xn->storage->g.data();
            const int32_t* am = argmax->data();
            float inv = 1.f / static_cast<float>(strip * w);
#pragma omp parallel for schedule(static) collapse(2)
            for (int64_t i = 0; i < b; ++i)
                for (int64_t ch = 0; ch < c; ++ch)
                    for (int64_t p = 0; p < parts; ++p) {
                        float gv = g[(i * c + ch) * parts + p];
                        float* base = gx + ((i * c + ch) * h + p * strip) * w;
                        for (int64_t j = 0; j < strip * w; ++j) base[j] += gv * inv;
                        base[am[(i * c + ch) * parts + p]] += gv;
                    }
        });
    const float* px = x.data();
    float* po = out.data();
    int32_t* am = argmax->data();
#pragma omp parallel for schedule(static) collapse(2)
    for (int64_t i = 0; i < b; ++i)
        for (int64_t ch = 0; ch < c; ++ch)
            for (int64_t p = 0; p < parts; ++p) {
                const float* base = px + ((i * c + ch) * h + p * strip) * w;
                float best = base[0];
                int32_t bi = 0;
                double sum = 0.0;
                for (int64_t j = 0; j < strip * w; ++j) {
                    sum += base[j];
                    if (base[j] > best) {
                        best = base[j];
                        bi = static_cast<int32_t>(j);
                    }
                }
                po[(i * c + ch) * parts + p] = best + static_cast<float>(sum / (strip * w));
                am[(i * c + ch) * parts + p] = bi;
            }
    return out;
}

Tensor resize_bilinear(const Tensor& x, int out_h, int out_w) {
    if (x.ndim() != 4) throw ShapeError("resize_bilinear: expects [N,C,H,W]");
    int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    int64_t oh = out_h, ow = out_w;
    // align-corners interpolation grid
    auto grid = [](int64_t in, int64_t out, std::vector<int32_t>& i0, std::vector<int32_t>& i1,
                   std::vector<float>& t) {
        i0.resize(static_cast<size_t>(out));
        i1.resize(static_cast<size_t>(out));
        t.resize(static_cast<size_t>(out));
        double s = out > 1 ? static_cast<double>(in - 1) / (out - 1) : 0.0;
        for (int64_t o = 0; o < out; ++o) {
            double pos = o * s;
            int64_t lo = static_cast<int64_t>(pos);
            if (lo > in - 1) lo = in - 1;
            int64_t hi = std::min(lo + 1, in - 1);
            i0[o] = static_cast<int32_t>(lo);
            i1[o] = static_cast<int32_t>(hi);
            t[o] = static_cast<float>(pos - lo);
        }
    };
    auto h0 = std::make_shared<std::vector<int32_t>>();
    auto h1 = std::make_shared<std::vector<int32_t>>();
    auto ht = std::make_shared<std::vector<float>>();
    auto w0 = std::make_shared<std::vector<int32_t>>();
    auto w1 = std::make_shared<std::vector<int32_t>>();
    auto wt = std::make_shared<std::vector<float>>();
    grid(h, oh, *h0, *h1, *ht);
    grid(w, ow, *w0, *w1, *wt);

    auto xn = x.node();
    Tensor out = make_op_result(
        {n, c, oh, ow}, {x}, [=](TensorNode& self) {
            if (!xn->requires_grad) return;
            const float* g = self.storage->g.data();
            float* gx = xn->storage->g.data();
#pragma omp parallel for schedule(static)
            for (int64_t pc = 0; pc < n * c; ++pc) {
                const float* gp = g + pc * oh * ow;
                float* xp = gx + pc * h * w;
                for (int64_t i = 0; i < oh; ++i) {
                    float ty = (*ht)[i];
                    int32_t y0 = (*h0)[i], y1 = (*h1)[i];
                    for (int64_t j = 0; j < ow; ++j) {
                        float tx = (*wt)[j];
                        int32_t x0 = (*w0)[j], x1 = (*w1)[j];
                        float gv = gp[i * ow + j];
                        xp[y0 * w + x0] += gv * (1 - ty) * (1 - tx);
                        xp[y0 * w + x1] += gv * (1 - ty) * tx;
                        xp[y1 * w + x0] += gv * ty * (1 - tx);
                        xp[y1 * w + x1] += gv * ty * tx;
                    }
                }
            }
        });
    const float* px = x.data();
    float* po = out.data();
#pragma omp parallel for schedule(static)
    for (int64_t pc = 0; pc < n * c; ++pc) {
        const float* xp = px + pc * h * w;
        float* op = po + pc * oh * ow;
        for (int64_t i = 0; i < oh; ++i) {
            float ty = (*ht)[i];
            int32_t y0 = (*h0)[i], y1 = (*h1)[i];
            for (int64_t j = 0; j < ow; ++j) {
                float tx = (*wt)[j];
                int32_t x0 = (*w0)[j], x1 = (*w1)[j];
                op[i * ow + j] = (1 - ty) * ((1 - tx) * xp[y0 * w + x0] + tx * xp[y0 * w + x1]) +
                                 ty * ((1 - tx) * xp[y1 * w + x0] + tx * xp[y1 * w + x1]);
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// softmax / soft-argmax / gather
// ---------------------------------------------------------------------------

Tensor softmax_lastdim(const Tensor& x) {
    if (x.ndim() < 1) throw ShapeError("softmax_lastdim: scalar input");
    int64_t m = x.dim(x.ndim() - 1);
    int64_t rows = x.numel() / m;
    auto xn = x.node();
    Tensor out = make_op_result(x.shape(), {x}, [xn, rows, m](TensorNode& self) {
        if (!xn->requires_grad) return;
        const float* g = self.storage->g.data();
        const float* y = self.storage->v.data();
        float* gx = xn->storage->g.data();
#pragma omp parallel for schedule(static)
        for (int64_t r = 0; r < rows; ++r) {
            const float* yr = y + r * m;
            const float* gr = g + r * m;
            float* xr = gx + r * m;
            double dot = 0.0;
            for (int64_t j = 0; j < m; ++j) dot += static_cast<double>(yr[j]) * gr[j];
            float d = static_cast<float>(dot);
            for (int64_t j = 0; j < m; ++j) xr[j] += yr[j] * (gr[j] - d);
        }
    });
    const float* px = x.data();
    float* po = out.data();
#pragma omp parallel for schedule(static)
    for (int64_t r = 0; r < rows; ++r) {
        Eigen::Map<const Eigen::ArrayXf> xr(px + r * m, m);
        Eigen::Map<Eigen::ArrayXf> yr(po + r * m, m);
        float mx = xr.maxCoeff();
        yr = (xr - mx).exp(); // packet exp, much faster than scalar expf
        float inv = 1.f / yr.sum();
        yr *= inv;
    }
    return out;
}

Tensor soft_argmax(const Tensor& h, float sum_tol) {
    if (h.ndim() != 5) throw ShapeError("soft_argmax: expects [N,K,D,H,W]");
    int64_t n = h.dim(0), k = h.dim(1), d = h.dim(2), hh = h.dim(3), ww = h.dim(4);
    int64_t vox = d * hh * ww;
    const float* ph = h.data();
    // contract: each channel is a normalized distribution
    std::vector<double> sums(static_cast<size_t>(n * k));
#pragma omp parallel for schedule(static)
    for (int64_t r = 0; r < n * k; ++r) {
        double s = 0.0;
        const float* base = ph + r * vox;
        for (int64_t i = 0; i < vox; ++i) s += base[i];
        sums[static_cast<size_t>(r)] = s;
    }
    for (int64_t r = 0; r < n * k; ++r)
        if (std::abs(sums[static_cast<size_t>(r)] - 1.0) > sum_tol)
            throw ContractError("soft_argmax: channel " + std::to_string(r) +
                                " not normalized (sum=" + std::to_string(sums[static_cast<size_t>(r)]) +
                                ")");
    auto hn = h.node();
    Tensor out = make_op_result({n, k, 3}, {h}, [hn, n, k, d, hh, ww, vox](TensorNode& self) {
        if (!hn->requires_grad) return;
        const float* g = self.storage->g.data();
        float* gh = hn->storage->g.data();
#pragma omp parallel for schedule(static)
        for (int64_t r = 0; r < n * k; ++r) {
            float gx = g[r * 3 + 0], gy = g[r * 3 + 1], gz = g[r * 3 + 2];
            float* dst = gh + r * vox;
            for (int64_t zd = 0; zd < d; ++zd)
                for (int64_t yh = 0; yh < hh; ++yh) {
                    float* row = dst + (zd * hh + yh) * ww;
                    float base = gy * yh + gz * zd;
                    for (int64_t xw = 0; xw < ww; ++xw) row[xw] += gx * xw + base;
                }
        }
    });
    float* po = out.data();
#pragma omp parallel for schedule(static)
    for (int64_t r = 0; r < n * k; ++r) {
        const float* base = ph + r * vox;
        double sx = 0.0, sy = 0.0, sz = 0.0;
        for (int64_t zd = 0; zd < d; ++zd)
            for (int64_t yh = 0; yh < hh; ++yh) {
                const float* row = base + (zd * hh + yh) * ww;
                for (int64_t xw = 0; xw < ww; ++xw) {
                    double p = row[xw];
                    sx += p * xw;
                    sy += p * yh;
                    sz += p * zd;
                }
            }
        po[r * 3 + 0] = static_cast<float>(sx);
        po[r * 3 + 1] = static_cast<float>(sy);
        po[r * 3 + 2] = static_cast<float>(sz);
    }
    return out;
}

Tensor gather_confidence(const Tensor& h, const Tensor& coords) {
    if (h.ndim() != 5 || coords.ndim() != 3 || coords.dim(2) != 3)
        throw ShapeError("gather_confidence: expects h[N,K,D,H,W], coords[N,K,3]");
    int64_t n = h.dim(0), k = h.dim(1), d = h.dim(2), hh = h.dim(3), ww = h.dim(4);
    if (coords.dim(0) != n || coords.dim(1) != k)
        throw ShapeError("gather_confidence: coords batch mismatch");
    int64_t vox = d * hh * ww;
    auto idx = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(n * k));
    const float* pc = coords.data();
    auto clampi = [](int64_t v, int64_t hi) { return v < 0 ? 0 : (v > hi ? hi : v); };
    for (int64_t r = 0; r < n * k; ++r) {
        int64_t xi = clampi(std::llround(pc[r * 3 + 0]), ww - 1);
        int64_t yi = clampi(std::llround(pc[r * 3 + 1]), hh - 1);
        int64_t zi = clampi(std::llround(pc[r * 3 + 2]), d - 1);
        (*idx)[r] = (zi * hh + yi) * ww + xi;
    }
    // coords enter through a rounded index only, so no gradient flows to them
    auto hn = h.node();
    Tensor out = make_op_result({n, k}, {h}, [hn, idx, vox, n, k](TensorNode& self) {
        if (!hn->requires_grad) return;
        const float* g = self.storage->g.data();
        float* gh = hn->storage->g.data();
        for (int64_t r = 0; r < n * k; ++r) gh[r * vox + (*idx)[r]] += g[r];
    });
    const float* ph = h.data();
    float* po = out.data();
    for (int64_t r = 0; r < n * k; ++r) po[r] = ph[r * vox + (*idx)[r]];
    return out;
}

Tensor gate_blend(const Tensor& f0, const Tensor& f1, const Tensor& gate_logit) {
    check_same_shape(f0, f1, "gate_blend");
    if (f0.ndim() < 2) throw ShapeError("gate_blend: expects [N,C,...]");
    int64_t n = f0.dim(0), c = f0.dim(1);
    int64_t sp = 1;
    for (int i = 2; i < f0.ndim(); ++i) sp *= f0.dim(i);
    if (gate_logit.numel() != c) throw ShapeError("gate_blend: gate size must equal channels");

    auto f0n = f0.node(), f1n = f1.node(), gn = gate_logit.node();
    Tensor out = make_op_result(
        f0.shape(), {f0, f1, gate_logit}, [f0n, f1n, gn, n, c, sp](TensorNode& self) {
            const float* g = self.storage->g.data();
            const float* v0 = f0n->storage->v.data();
            const float* v1 = f1n->storage->v.data();
            const float* gl = gn->storage->v.data();
#pragma omp parallel for schedule(static)
            for (int64_t ch = 0; ch < c; ++ch) {
                float s = 1.f / (1.f + std::exp(-gl[ch]));
                double dg = 0.0;
                for (int64_t i = 0; i < n; ++i) {
                    int64_t off = (i * c + ch) * sp;
                    for (int64_t j = 0; j < sp; ++j) {
                        float gv = g[off + j];
                        if (f0n->requires_grad) f0n->storage->g[off + j] += gv * s;
                        if (f1n->requires_grad) f1n->storage->g[off + j] += gv * (1.f - s);
                        dg += static_cast<double>(gv) * (v0[off + j] - v1[off + j]);
                    }
                }
                if (gn->requires_grad)
                    gn->storage->g[ch] += static_cast<float>(dg) * s * (1.f - s);
            }
        });
    const float* p0 = f0.data();
    const float* p1 = f1.data();
    const float* gl = gate_logit.data();
    float* po = out.data();
#pragma omp parallel for schedule(static)
    for (int64_t ch = 0; ch < c; ++ch) {
        float s = 1.f / (1.f + std::exp(-gl[ch]));
        for (int64_t i = 0; i < n; ++i) {
            int64_t off = (i * c + ch) * sp;
            for (int64_t j = 0; j < sp; ++j) po[off + j] = s * p0[off + j] + (1.f - s) * p1[off + j];
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

TripletResult triplet_batch_all(const Tensor& e, const std::vector<int>& labels, float margin) {
    if (e.ndim() != 3) throw ShapeError("triplet_batch_all: expects [B,C,P]");
    int64_t b = e.dim(0), c = e.dim(1), parts = e.dim(2);
    if (static_cast<int64_t>(labels.size()) != b)
        throw ShapeError("triplet_batch_all: label count mismatch");

    int64_t n_valid = 0;
    for (int64_t a = 0; a < b; ++a)
        for (int64_t p = 0; p < b; ++p)
            for (int64_t ng = 0; ng < b; ++ng)
                if (a != p && labels[a] == labels[p] && labels[a] != labels[ng]) ++n_valid;
    if (n_valid == 0) return {Tensor::zeros({1}), 0, true};

    const float eps = 1e-12f;
    // per-part pairwise distances
    auto dist = std::make_shared<std::vector<float>>(static_cast<size_t>(parts * b * b));
    const float* pe = e.data();
    for (int64_t pt = 0; pt < parts; ++pt)
        for (int64_t i = 0; i < b; ++i)
            for (int64_t j = 0; j < b; ++j) {
                double s = 0.0;
                for (int64_t ch = 0; ch < c; ++ch) {
                    double d = pe[(i * c + ch) * parts + pt] - pe[(j * c + ch) * parts + pt];
                    s += d * d;
                }
                (*dist)[(pt * b + i) * b + j] = std::sqrt(static_cast<float>(s) + eps);
            }

    double total = 0.0;
    const int64_t denom = n_valid * parts;
    for (int64_t pt = 0; pt < parts; ++pt)
        for (int64_t a = 0; a < b; ++a)
            for (int64_t p = 0; p < b; ++p) {
                if (a == p || labels[a] != labels[p]) continue;
                for (int64_t ng = 0; ng < b; ++ng) {
                    if (labels[ng] == labels[a]) continue;
                    double hinge = (*dist)[(pt * b + a) * b + p] - (*dist)[(pt * b + a) * b + ng] +
                                   margin;
                    if (hinge > 0) total += hinge;
                }
            }

    auto en = e.node();
    auto labs = std::make_shared<std::vector<int>>(labels);
    Tensor loss = make_op_result({1}, {e}, [en, labs, dist, b, c, parts, denom,
                                            margin](TensorNode& self) {
        if (!en->requires_grad) return;
        float g = self.storage->g[0] / static_cast<float>(denom);
        const float* ev = en->storage->v.data();
        float* ge = en->storage->g.data();
        const auto& lab = *labs;
#pragma omp parallel for schedule(static)
        for (int64_t pt = 0; pt < parts; ++pt) {
            // accumulate hinge-active coefficients per ordered pair
            std::vector<float> coef(static_cast<size_t>(b * b), 0.f);
            for (int64_t a = 0; a < b; ++a)
                for (int64_t p = 0; p < b; ++p) {
                    if (a == p || lab[a] != lab[p]) continue;
                    for (int64_t ng = 0; ng < b; ++ng) {
                        if (lab[ng] == lab[a]) continue;
                        float hinge = (*dist)[(pt * b + a) * b + p] -
                                      (*dist)[(pt * b + a) * b + ng] + margin;
                        if (hinge > 0) {
                            coef[a * b + p] += g;
                            coef[a * b + ng] -= g;
                        }
                    }
                }
            for (int64_t i = 0; i < b; ++i)
                for (int64_t j = 0; j < b; ++j) {
                    float w = coef[i * b + j];
                    if (w == 0.f) continue;
                    float d = (*dist)[(pt * b + i) * b + j];
                    float invd = w / d;
                    for (int64_t ch = 0; ch < c; ++ch) {
                        float diff = ev[(i * c + ch) * parts + pt] - ev[(j * c + ch) * parts + pt];
                        ge[(i * c + ch) * parts + pt] += invd * diff;
                        ge[(j * c + ch) * parts + pt] -= invd * diff;
                    }
                }
        }
    });
    loss.data()[0] = static_cast<float>(total / denom);
    return {loss, n_valid, false};
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
    if (logits.ndim() != 3) throw ShapeError("cross_entropy: expects [B,K,P]");
    int64_t b = logits.dim(0), k = logits.dim(1), parts = logits.dim(2);
    if (static_cast<int64_t>(labels.size()) != b)
        throw ShapeError("cross_entropy: label count mismatch");
    for (int lab : labels)
        if (lab < 0 || lab >= k)
            throw Error("cross_entropy: label " + std::to_string(lab) + " out of range [0," +
                        std::to_string(k) + ")");

    auto ln = logits.node();
    auto labs = std::make_shared<std::vector<int>>(labels);
    Tensor loss = make_op_result({1}, {logits}, [ln, labs, b, k, parts](TensorNode& self) {
        if (!ln->requires_grad) return;
        float g = self.storage->g[0] / static_cast<float>(b * parts);
        const float* lv = ln->storage->v.data();
        float* gl = ln->storage->g.data();
#pragma omp parallel for schedule(static) collapse(2)
        for (int64_t i = 0; i < b; ++i)
            for (int64_t p = 0; p < parts; ++p) {
                float mx = lv[(i * k) * parts + p];
                for (int64_t j = 1; j < k; ++j)
                    mx = std::max(mx, lv[(i * k + j) * parts + p]);
                double sum = 0.0;
                for (int64_t j = 0; j < k; ++j)
                    sum += std::exp(static_cast<double>(lv[(i * k + j) * parts + p]) - mx);
                for (int64_t j = 0; j < k; ++j) {
                    double sm =
                        std::exp(static_cast<double>(lv[(i * k + j) * parts + p]) - mx) / sum;
                    float delta = (j == (*labs)[i]) ? 1.f : 0.f;
                    gl[(i * k + j) * parts + p] += g * (static_cast<float>(sm) - delta);
                }
            }
    });
    const float* lv = logits.data();
    double total = 0.0;
    for (int64_t i = 0; i < b; ++i)
        for (int64_t p = 0; p < parts; ++p) {
            float mx = lv[(i * k) * parts + p];
            for (int64_t j = 1; j < k; ++j) mx = std::max(mx, lv[(i * k + j) * parts + p]);
            double sum = 0.0;
            for (int64_t j = 0; j < k; ++j)
                sum += std::exp(static_cast<double>(lv[(i * k + j) * parts + p]) - mx);
            total += std::log(sum) + mx - lv[(i * k + labels[i]) * parts + p];
        }
    loss.data()[0] = static_cast<float>(total / (b * parts));
    return loss;
}

namespace {

MaskedLossResult masked_pointwise(const Tensor& pred, const std::vector<float>& target,
                                  const std::vector<uint8_t>& sample_mask, bool squared) {
    if (static_cast<int64_t>(target.size()) != pred.numel())
        throw ShapeError("masked loss: target size mismatch");
    int64_t b = pred.dim(0);
    if (static_cast<int64_t>(sample_mask.size()) != b)
        throw ShapeError("masked loss: mask size mismatch");
    int64_t per = pred.numel() / b;
    int64_t n_on = 0;
    for (auto m : sample_mask) n_on += m ? 1 : 0;
    if (n_on == 0) return {Tensor::zeros({1}), true};
    int64_t count = n_on * per;

    auto pn = pred.node();
    auto tgt = std::make_shared<std::vector<float>>(target);
    auto msk = std::make_shared<std::vector<uint8_t>>(sample_mask);
    Tensor loss = make_op_result({1}, {pred}, [pn, tgt, msk, b, per, count,
                                               squared](TensorNode& self) {
        if (!pn->requires_grad) return;
        float g = self.storage->g[0] / static_cast<float>(count);
        const float* pv = pn->storage->v.data();
        float* gp = pn->storage->g.data();
#pragma omp parallel for schedule(static)
        for (int64_t i = 0; i < b; ++i) {
            if (!(*msk)[i]) continue;
            for (int64_t j = 0; j < per; ++j) {
                int64_t off = i * per + j;
                float d = pv[off] - (*tgt)[off];
                if (squared)
                    gp[off] += 2.f * d * g;
                else
                    gp[off] += (d > 0.f ? 1.f : (d < 0.f ? -1.f : 0.f)) * g;
            }
        }
    });
    const float* pv = pred.data();
    double total = 0.0;
    for (int64_t i = 0; i < b; ++i) {
        if (!sample_mask[i]) continue;
        for (int64_t j = 0; j < per; ++j) {
            double d = pv[i * per + j] - target[i * per + j];
            total += squared ? d * d : std::abs(d);
        }
    }
    loss.data()[0] = static_cast<float>(total / count);
    return {loss, false};
}

} // namespace

MaskedLossResult masked_mse(const Tensor& pred, const std::vector<float>& target,
                            const std::vector<uint8_t>& sample_mask) {
    return masked_pointwise(pred, target, sample_mask, true);
}

MaskedLossResult masked_mae(const Tensor& pred, const std::vector<float>& target,
                            const std::vector<uint8_t>& sample_mask) {
    return masked_pointwise(pred, target, sample_mask, false);
}

} // namespace ops

} // namespace meshgait
