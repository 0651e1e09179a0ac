#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "meshgait/dataset.hpp"
#include "meshgait/losses.hpp"
#include "meshgait/recon3d.hpp"
#include "meshgait/trainer.hpp"
#include "oracle.hpp"
#include "test_helpers.hpp"

using namespace meshgait;
using oracle::dvec;
using namespace testutil;

namespace {
const HeatmapDims kDims{16, 16, 16};
}

TEST_CASE("estimate_heatmaps: shape and per-channel normalization") {
    Rng rng(601);
    HeatmapEstimator est(kKeypoints, kDims, "tiny", rng);
    Tensor x = Tensor::randn({1, 2, 1, 64, 44}, rng, 0.5f, false);
    Tensor h = est.forward(x, false);
    CHECK(h.shape() == Shape{1, 2, 88, 16, 16, 16});
    for (int64_t r = 0; r < 2 * 88; ++r) {
        double s = 0;
        for (int64_t i = 0; i < 4096; ++i) s += h.data()[r * 4096 + i];
        CHECK(std::abs(s - 1.0) <= 1e-5);
    }
    Tensor bad = Tensor::zeros({1, 2, 1, 64, 40});
    CHECK_THROWS_AS(est.forward(bad, false), ShapeError);
}

TEST_CASE("estimate_heatmaps: zeroed final layer gives uniform channels") {
    Rng rng(602);
    HeatmapEstimator est(kKeypoints, kDims, "tiny", rng);
    ParamStore store;
    est.register_into(store, "est");
    for (auto& [name, t] : store.params())
        if (name.find("head") != std::string::npos)
            std::fill(t.vec().begin(), t.vec().end(), 0.f);
    Tensor x = Tensor::randn({1, 1, 1, 64, 44}, rng, 0.5f, false);
    Tensor h = est.forward(x, false);
    for (int64_t i = 0; i < h.numel(); ++i)
        CHECK(h.data()[i] == doctest::Approx(1.0 / 4096.0).epsilon(1e-5));
}

TEST_CASE("estimator trained a few steps separates different silhouettes") {
    auto out = std::filesystem::temp_directory_path() / "meshgait_test_recon_train";
    std::filesystem::remove_all(out);
    SynthConfig cfg;
    cfg.num_ids = 2;
    cfg.seqs_per_id = 1;
    cfg.frames = 8;
    cfg.seed = 3;
    cfg.out = out;
    cfg.views = {"000"};
    synth_generate(cfg);

    auto s0 = load_sequence(out / "0000" / "nm" / "000" / "seq00");
    auto s1 = load_sequence(out / "0001" / "nm" / "000" / "seq00");
    int t = 2;
    std::vector<float> frames;
    std::vector<float> gt;
    for (auto* s : {&s0, &s1}) {
        frames.insert(frames.end(), s->silhouette.frames.begin(),
                      s->silhouette.frames.begin() + static_cast<long>(t) * 64 * 44);
        for (int ft = 0; ft < t; ++ft) {
            const auto& g = *s->gt;
            gt.insert(gt.end(), g.joints.begin() + static_cast<long>(ft) * kJoints * 3,
                      g.joints.begin() + static_cast<long>(ft + 1) * kJoints * 3);
            gt.insert(gt.end(), g.markers.begin() + static_cast<long>(ft) * kMarkers * 3,
                      g.markers.begin() + static_cast<long>(ft + 1) * kMarkers * 3);
        }
    }
    Tensor x = Tensor::from_data({2, t, 1, 64, 44}, frames, false);

    Rng rng(603);
    HeatmapEstimator est(kKeypoints, kDims, "tiny", rng);
    ParamStore store;
    est.register_into(store, "est");
    SgdOptimizer opt(0.05f, 0.9f);
    std::vector<uint8_t> mask = {1, 1};
    double first = 0, last = 0;
    for (int step = 0; step < 10; ++step) {
        Tensor h = est.forward(x, true);
        Tensor coords = ops::soft_argmax(h.reshape({2ll * t, kKeypoints, 16, 16, 16}));
        auto loss = ops::masked_mse(coords.reshape({2, t, kKeypoints, 3}), gt, mask);
        if (step == 0) first = loss.loss.item();
        last = loss.loss.item();
        opt.zero_grad(store);
        loss.loss.backward();
        opt.step(store);
    }
    CHECK(last < first); // learning signal reaches the estimator

    // the two inputs now map to visibly different heatmaps
    NoGradGuard ng;
    Tensor h = est.forward(x, false);
    int64_t per = h.numel() / 2;
    double diff = 0;
    for (int64_t i = 0; i < per; ++i) diff += std::abs(h.data()[i] - h.data()[per + i]);
    CHECK(diff > 1e-3);
}

TEST_CASE("regress_coefficients: adaptive and static modes") {
    Rng rng(604);
    int kp = 6, verts = 10;
    MeshRegressor adaptive("adaptive", kp, verts, rng);
    ParamStore store;
    adaptive.register_into(store, "reg");

    // zero weights + bias b -> coef = reshape(b), identical for all samples
    Tensor* w = store.find("reg.linear.w");
    Tensor* b = store.find("reg.linear.b");
    REQUIRE(w);
    REQUIRE(b);
    std::fill(w->vec().begin(), w->vec().end(), 0.f);
    Rng brng(605);
    for (auto& v : b->vec()) v = static_cast<float>(brng.normal());
    Tensor conf = Tensor::randn({3, kp}, rng, 1.f, false);
    Tensor coef = adaptive.coefficients(conf);
    CHECK(coef.shape() == Shape{3, verts, kp});
    for (int n = 0; n < 3; ++n)
        for (int64_t i = 0; i < verts * kp; ++i)
            CHECK(coef.data()[n * verts * kp + i] == doctest::Approx(b->data()[i]));

    // adaptive with random weights: distinct confidences -> distinct coefs
    MeshRegressor adaptive2("adaptive", kp, verts, rng);
    Tensor conf2 = Tensor::randn({2, kp}, rng, 1.f, false);
    Tensor coef2 = adaptive2.coefficients(conf2);
    double diff = 0;
    for (int64_t i = 0; i < verts * kp; ++i)
        diff += std::abs(coef2.data()[i] - coef2.data()[verts * kp + i]);
    CHECK(diff > 1e-4);

    // static mode ignores the confidence input
    MeshRegressor stat("static", kp, verts, rng);
    Tensor ca = stat.coefficients(conf);
    Tensor cb = stat.coefficients(conf2);
    CHECK(ca.shape() == Shape{verts, kp});
    for (int64_t i = 0; i < ca.numel(); ++i) CHECK(ca.data()[i] == cb.data()[i]);

    CHECK_THROWS_AS(MeshRegressor("other", kp, verts, rng), ConfigError);
    Tensor bad_conf = Tensor::zeros({3, kp + 1});
    CHECK_THROWS_AS(adaptive.coefficients(bad_conf), ShapeError);

    // parameter count: K*V*K weights + V*K biases
    CHECK(adaptive.param_count() ==
          static_cast<int64_t>(kp) * verts * kp + static_cast<int64_t>(verts) * kp);
}

TEST_CASE("reconstruct_mesh: one-hot, zero, brute-force oracle, linearity, equivariance") {
    Rng rng(606);
    int n = 2, verts = 7, kp = 5;

    // one-hot rows on keypoint 0 -> every vertex equals keypoint 0
    std::vector<float> onehot(static_cast<size_t>(verts) * kp, 0.f);
    for (int v = 0; v < verts; ++v) onehot[static_cast<size_t>(v) * kp] = 1.f;
    Tensor coef1 = Tensor::from_data({verts, kp}, onehot);
    dvec coords_d = rand_d(static_cast<size_t>(n) * kp * 3, rng, 3.0);
    Tensor coords = leaf({n, kp, 3}, coords_d, false);
    Tensor mesh1 = reconstruct_mesh(coef1, coords);
    for (int i = 0; i < n; ++i)
        for (int v = 0; v < verts; ++v)
            for (int a = 0; a < 3; ++a)
                CHECK(mesh1.data()[(i * verts + v) * 3 + a] ==
                      doctest::Approx(coords_d[static_cast<size_t>(i) * kp * 3 + a]));

    // zero coefficients -> zero mesh
    Tensor coef0 = Tensor::zeros({verts, kp});
    Tensor mesh0 = reconstruct_mesh(coef0, coords);
    for (int64_t i = 0; i < mesh0.numel(); ++i) CHECK(mesh0.data()[i] == 0.f);

    // random adaptive coef matches the triple-loop oracle to 1e-6
    dvec coef_d = rand_d(static_cast<size_t>(n) * verts * kp, rng);
    Tensor coefr = leaf({n, verts, kp}, coef_d, false);
    Tensor meshr = reconstruct_mesh(coefr, coords);
    dvec want = oracle::bmm(coef_d, coords_d, n, verts, kp, 3, false);
    CHECK(oracle::max_abs_diff(meshr.vec(), want) <= 1e-6 * 10);
    CHECK(oracle::rel_err(meshr.vec(), want) < 1e-6);

    // exact linearity in the coordinates
    dvec x_d = rand_d(static_cast<size_t>(n) * kp * 3, rng);
    dvec y_d = rand_d(static_cast<size_t>(n) * kp * 3, rng);
    float alpha = 0.7f, beta = -1.3f;
    dvec mix(x_d.size());
    for (size_t i = 0; i < mix.size(); ++i) mix[i] = alpha * x_d[i] + beta * y_d[i];
    Tensor mx = reconstruct_mesh(coefr, leaf({n, kp, 3}, x_d, false));
    Tensor my = reconstruct_mesh(coefr, leaf({n, kp, 3}, y_d, false));
    Tensor mmix = reconstruct_mesh(coefr, leaf({n, kp, 3}, mix, false));
    for (int64_t i = 0; i < mmix.numel(); ++i)
        CHECK(std::abs(mmix.data()[i] - (alpha * mx.data()[i] + beta * my.data()[i])) <= 2e-6);

    // row-normalized coef: translating keypoints by delta translates the mesh by delta
    dvec rows = rand_d(static_cast<size_t>(verts) * kp, rng);
    for (int v = 0; v < verts; ++v) {
        double s = 0;
        for (int q = 0; q < kp; ++q) s += std::abs(rows[static_cast<size_t>(v) * kp + q]);
        for (int q = 0; q < kp; ++q) rows[static_cast<size_t>(v) * kp + q] =
            std::abs(rows[static_cast<size_t>(v) * kp + q]) / s;
    }
    Tensor coefn = leaf({verts, kp}, rows, false);
    dvec delta = {0.3, -1.1, 2.2};
    dvec shifted(coords_d.size());
    for (size_t i = 0; i < coords_d.size(); ++i)
        shifted[i] = coords_d[i] + delta[i % 3];
    Tensor m_base = reconstruct_mesh(coefn, coords);
    Tensor m_shift = reconstruct_mesh(coefn, leaf({n, kp, 3}, shifted, false));
    for (int64_t i = 0; i < m_base.numel(); ++i)
        CHECK(std::abs(m_shift.data()[i] - (m_base.data()[i] + delta[static_cast<size_t>(i % 3)])) <=
              1e-6 * 4);

    // dimension mismatch
    Tensor bad = Tensor::zeros({verts, kp + 2});
    CHECK_THROWS_AS(reconstruct_mesh(bad, coords), ShapeError);
}

TEST_CASE("heatmap_features: F1 spatially matches F0; equal inputs give equal rows") {
    Rng rng(607);
    HeatmapFeatures hf(kKeypoints, kDims, 8, 16, 1, rng);
    // two identical uniform heatmap samples
    Tensor h = Tensor::full({2, 3, 88, 16, 16, 16}, 1.f / 4096.f);
    Tensor f1 = hf.forward(h, false);
    CHECK(f1.shape() == Shape{2, 3, 16, 16, 11});
    int64_t per = f1.numel() / 2;
    for (int64_t i = 0; i < per; ++i) CHECK(f1.data()[i] == f1.data()[per + i]);

    // k=3 voxel kernel variant
    HeatmapFeatures hf3(kKeypoints, kDims, 4, 8, 3, rng);
    Tensor f3 = hf3.forward(h, false);
    CHECK(f3.shape() == Shape{2, 3, 8, 16, 11});

    CHECK_THROWS_AS(HeatmapFeatures(kKeypoints, kDims, 8, 16, 2, rng), ConfigError);
    CHECK_THROWS_AS(HeatmapFeatures(kKeypoints, HeatmapDims{16, 16, 8}, 8, 16, 1, rng),
                    ConfigError);
}
