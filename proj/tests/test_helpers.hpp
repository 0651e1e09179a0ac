#ifndef MESHGAIT_TESTS_HELPERS_HPP
#define MESHGAIT_TESTS_HELPERS_HPP

#include <vector>

#include "meshgait/rng.hpp"
#include "meshgait/tensor.hpp"
#include "oracle.hpp"

namespace testutil {

inline oracle::dvec to_d(const std::vector<float>& v) {
    return oracle::dvec(v.begin(), v.end());
}

inline std::vector<float> to_f(const oracle::dvec& v) {
    return std::vector<float>(v.begin(), v.end());
}

inline oracle::dvec rand_d(size_t n, meshgait::Rng& rng, double scale = 1.0) {
    oracle::dvec v(n);
    for (auto& x : v) x = rng.normal() * scale;
    return v;
}

inline meshgait::Tensor leaf(meshgait::Shape shape, const oracle::dvec& v,
                             bool requires_grad = true) {
    return meshgait::Tensor::from_data(std::move(shape), to_f(v), requires_grad);
}

// random projection so every output element contributes to the checked scalar
inline meshgait::Tensor project(const meshgait::Tensor& out, const oracle::dvec& r) {
    auto rt = meshgait::Tensor::from_data(out.shape(), to_f(r), false);
    return meshgait::ops::sum_all(meshgait::ops::mul(out, rt));
}

inline double dot(const oracle::dvec& a, const oracle::dvec& b) {
    double s = 0;
    for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline oracle::dvec grad_of(const meshgait::Tensor& t) {
    oracle::dvec g(static_cast<size_t>(t.numel()));
    for (size_t i = 0; i < g.size(); ++i) g[i] = t.grad()[i];
    return g;
}

} // namespace testutil

#endif
