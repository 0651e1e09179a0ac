#include "meshgait/nn.hpp"

#include <cmath>

namespace meshgait {

void ParamStore::add_param(const std::string& name, Tensor t) {
    if (find(name)) throw Error("ParamStore: duplicate name " + name);
    params_.emplace_back(name, std::move(t));
}

void ParamStore::add_buffer(const std::string& name, Tensor t) {
    if (find(name)) throw Error("ParamStore: duplicate name " + name);
    buffers_.emplace_back(name, std::move(t));
}

Tensor* ParamStore::find(const std::string& name) {
    for (auto& [n, t] : params_)
        if (n == name) return &t;
    for (auto& [n, t] : buffers_)
        if (n == name) return &t;
    return nullptr;
}

int64_t ParamStore::param_count() const {
    int64_t n = 0;
    for (auto& [name, t] : params_) n += t.numel();
    return n;
}

namespace nn {

Tensor he_normal(Shape shape, int64_t fan_in, Rng& rng) {
    float std = std::sqrt(2.0f / static_cast<float>(fan_in));
    return Tensor::randn(std::move(shape), rng, std, true);
}

Conv2d::Conv2d(int cin, int cout, int kh, int kw, int sh, int sw, int ph, int pw, bool bias,
               Rng& rng)
    : stride_h(sh), stride_w(sw), pad_h(ph), pad_w(pw) {
    w = he_normal({cout, cin, kh, kw}, static_cast<int64_t>(cin) * kh * kw, rng);
    if (bias) b = Tensor::zeros({cout}, true);
}

Tensor Conv2d::forward(const Tensor& x) const {
    return ops::conv2d(x, w, b, stride_h, stride_w, pad_h, pad_w);
}

void Conv2d::register_into(ParamStore& store, const std::string& prefix) {
    store.add_param(prefix + ".w", w);
    if (b.defined()) store.add_param(prefix + ".b", b);
}

Conv3d::Conv3d(int cin, int cout, int k, int stride_, int pad_, bool bias, Rng& rng)
    : stride(stride_), pad(pad_) {
    w = he_normal({cout, cin, k, k, k}, static_cast<int64_t>(cin) * k * k * k, rng);
    if (bias) b = Tensor::zeros({cout}, true);
}

Tensor Conv3d::forward(const Tensor& x) const { return ops::conv3d(x, w, b, stride, pad); }

void Conv3d::register_into(ParamStore& store, const std::string& prefix) {
    store.add_param(prefix + ".w", w);
    if (b.defined()) store.add_param(prefix + ".b", b);
}

BatchNorm::BatchNorm(int channels, float gamma_init) {
    gamma = Tensor::full({channels}, gamma_init, true);
    beta = Tensor::zeros({channels}, true);
    running_mean = Tensor::zeros({channels});
    running_var = Tensor::full({channels}, 1.f);
}

Tensor BatchNorm::forward(const Tensor& x, bool training) {
    return ops::batch_norm(x, gamma, beta, running_mean, running_var, training, momentum, eps);
}

void BatchNorm::register_into(ParamStore& store, const std::string& prefix) {
    store.add_param(prefix + ".gamma", gamma);
    store.add_param(prefix + ".beta", beta);
    store.add_buffer(prefix + ".running_mean", running_mean);
    store.add_buffer(prefix + ".running_var", running_var);
}

Linear::Linear(int in, int out, bool bias, Rng& rng) {
    w = he_normal({out, in}, in, rng);
    if (bias) b = Tensor::zeros({out}, true);
}

Tensor Linear::forward(const Tensor& x) const { return ops::linear(x, w, b); }

void Linear::register_into(ParamStore& store, const std::string& prefix) {
    store.add_param(prefix + ".w", w);
    if (b.defined()) store.add_param(prefix + ".b", b);
}

PartLinear::PartLinear(int parts, int in, int out, bool bias, Rng& rng) {
    w = he_normal({parts, out, in}, in, rng);
    if (bias) b = Tensor::zeros({parts, out}, true);
}

Tensor PartLinear::forward(const Tensor& x) const { return ops::part_linear(x, w, b); }

void PartLinear::register_into(ParamStore& store, const std::string& prefix) {
    store.add_param(prefix + ".w", w);
    if (b.defined()) store.add_param(prefix + ".b", b);
}

ResBlock2d::ResBlock2d(int cin, int cout, int k1h, int k1w, int stride, int p1h, int p1w,
                       Rng& rng) {
    conv1 = Conv2d(cin, cout, k1h, k1w, stride, stride, p1h, p1w, false, rng);
    bn1 = BatchNorm(cout);
    conv2 = Conv2d(cout, cout, 3, 3, 1, 1, 1, 1, false, rng);
    // small residual-branch scale keeps the block near identity at init
    bn2 = BatchNorm(cout, 0.1f);
    bool shape_preserving = (stride == 1 && k1h == 2 * p1h + 1 && k1w == 2 * p1w + 1);
    has_proj = (cin != cout) || !shape_preserving;
    if (has_proj) {
        int pkh = k1h - 2 * p1h;
        int pkw = k1w - 2 * p1w;
        proj = Conv2d(cin, cout, pkh, pkw, stride, stride, 0, 0, false, rng);
        bn_proj = BatchNorm(cout);
    }
}

Tensor ResBlock2d::forward(const Tensor& x, bool training) {
    Tensor main = ops::relu(bn1.forward(conv1.forward(x), training));
    main = bn2.forward(conv2.forward(main), training);
    Tensor shortcut = has_proj ? bn_proj.forward(proj.forward(x), training) : x;
    return ops::relu(ops::add(main, shortcut));
}

void ResBlock2d::register_into(ParamStore& store, const std::string& prefix) {
    conv1.register_into(store, prefix + ".conv1");
    bn1.register_into(store, prefix + ".bn1");
    conv2.register_into(store, prefix + ".conv2");
    bn2.register_into(store, prefix + ".bn2");
    if (has_proj) {
        proj.register_into(store, prefix + ".proj");
        bn_proj.register_into(store, prefix + ".bn_proj");
    }
}

} // namespace nn

} // namespace meshgait
