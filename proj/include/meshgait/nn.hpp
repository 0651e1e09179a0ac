#ifndef MESHGAIT_NN_HPP
#define MESHGAIT_NN_HPP

#include <string>
#include <utility>
#include <vector>

#include "meshgait/tensor.hpp"

namespace meshgait {

// Ordered registry of named parameters and buffers; the unit the optimizer and
// checkpoints operate on.
class ParamStore {
public:
    void add_param(const std::string& name, Tensor t);
    void add_buffer(const std::string& name, Tensor t);

    std::vector<std::pair<std::string, Tensor>>& params() { return params_; }
    const std::vector<std::pair<std::string, Tensor>>& params() const { return params_; }
    std::vector<std::pair<std::string, Tensor>>& buffers() { return buffers_; }
    const std::vector<std::pair<std::string, Tensor>>& buffers() const { return buffers_; }

    Tensor* find(const std::string& name);
    int64_t param_count() const;

private:
    std::vector<std::pair<std::string, Tensor>> params_;
    std::vector<std::pair<std::string, Tensor>> buffers_;
};

namespace nn {

// He fan-in normal init
Tensor he_normal(Shape shape, int64_t fan_in, Rng& rng);

struct Conv2d {
    Conv2d() = default;
    Conv2d(int cin, int cout, int kh, int kw, int sh, int sw, int ph, int pw, bool bias, Rng& rng);
    Tensor forward(const Tensor& x) const;
    void register_into(ParamStore& store, const std::string& prefix);

    Tensor w, b;
    int stride_h = 1, stride_w = 1, pad_h = 0, pad_w = 0;
};

struct Conv3d {
    Conv3d() = default;
    Conv3d(int cin, int cout, int k, int stride, int pad, bool bias, Rng& rng);
    Tensor forward(const Tensor& x) const;
    void register_into(ParamStore& store, const std::string& prefix);

    Tensor w, b;
    int stride = 1, pad = 0;
};

struct BatchNorm {
    BatchNorm() = default;
    explicit BatchNorm(int channels, float gamma_init = 1.f);
    Tensor forward(const Tensor& x, bool training);
    void register_into(ParamStore& store, const std::string& prefix);

    Tensor gamma, beta, running_mean, running_var;
    float momentum = 0.1f;
    float eps = 1e-5f;
};

struct Linear {
    Linear() = default;
    Linear(int in, int out, bool bias, Rng& rng);
    Tensor forward(const Tensor& x) const;
    void register_into(ParamStore& store, const std::string& prefix);

    Tensor w, b;
};

// Independent linear map per part: x[B,C,P] -> [B,M,P]
struct PartLinear {
    PartLinear() = default;
    PartLinear(int parts, int in, int out, bool bias, Rng& rng);
    Tensor forward(const Tensor& x) const;
    void register_into(ParamStore& store, const std::string& prefix);

    Tensor w, b;
};

// conv-bn-relu-conv-bn plus (projected) shortcut. The projection kernel is
// derived so both paths downsample identically; it is present whenever the
// main path changes channels or spatial dims.
struct ResBlock2d {
    ResBlock2d() = default;
    ResBlock2d(int cin, int cout, int k1h, int k1w, int stride, int p1h, int p1w, Rng& rng);
    Tensor forward(const Tensor& x, bool training);
    void register_into(ParamStore& store, const std::string& prefix);

    Conv2d conv1, conv2, proj;
    BatchNorm bn1, bn2, bn_proj;
    bool has_proj = false;
};

} // namespace nn

} // namespace meshgait

#endif
