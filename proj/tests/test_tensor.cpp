#include <doctest.h>

#include <cmath>

#include "meshgait/tensor.hpp"
#include "oracle.hpp"
#include "test_helpers.hpp"

using namespace meshgait;
using oracle::dvec;
using namespace testutil;

TEST_CASE("elementwise ops: values and gradients vs finite differences") {
    Rng rng(101);
    dvec xa = rand_d(24, rng), xb = rand_d(24, rng), r = rand_d(24, rng);

    auto run = [&](auto apply, auto oracle_fn) {
        Tensor a = leaf({2, 3, 4}, xa), b = leaf({2, 3, 4}, xb);
        Tensor out = apply(a, b);
        Tensor s = project(out, r);
        s.backward();
        dvec fa = oracle::fd_grad(
            [&](const dvec& v) {
                dvec o = oracle_fn(v, xb);
                return dot(o, r);
            },
            xa);
        dvec fb = oracle::fd_grad(
            [&](const dvec& v) {
                dvec o = oracle_fn(xa, v);
                return dot(o, r);
            },
            xb);
        CHECK(oracle::rel_err(grad_of(a), fa) < 1e-4);
        CHECK(oracle::rel_err(grad_of(b), fb) < 1e-4);
    };

    run([](Tensor& a, Tensor& b) { return ops::add(a, b); },
        [](const dvec& a, const dvec& b) {
            dvec o(a.size());
            for (size_t i = 0; i < a.size(); ++i) o[i] = a[i] + b[i];
            return o;
        });
    run([](Tensor& a, Tensor& b) { return ops::sub(a, b); },
        [](const dvec& a, const dvec& b) {
            dvec o(a.size());
            for (size_t i = 0; i < a.size(); ++i) o[i] = a[i] - b[i];
            return o;
        });
    run([](Tensor& a, Tensor& b) { return ops::mul(a, b); },
        [](const dvec& a, const dvec& b) {
            dvec o(a.size());
            for (size_t i = 0; i < a.size(); ++i) o[i] = a[i] * b[i];
            return o;
        });
}

TEST_CASE("relu forward and gradient") {
    Rng rng(102);
    dvec x = rand_d(30, rng), r = rand_d(30, rng);
    Tensor a = leaf({30}, x);
    Tensor s = project(ops::relu(a), r);
    s.backward();
    dvec fd = oracle::fd_grad(
        [&](const dvec& v) { return dot(oracle::relu(v), r); }, x, 1e-6);
    CHECK(oracle::rel_err(grad_of(a), fd) < 1e-3);
}

TEST_CASE("reshape shares storage and routes gradients") {
    Rng rng(103);
    dvec x = rand_d(12, rng);
    Tensor a = leaf({3, 4}, x);
    Tensor v = a.reshape({2, 6});
    CHECK(v.data() == a.data());
    // diamond: s = sum(a*a) + sum(view)
    Tensor s = ops::add(ops::sum_all(ops::mul(a, a)), ops::sum_all(v));
    Tensor total = ops::sum_all(s);
    total.backward();
    for (int i = 0; i < 12; ++i)
        CHECK(a.grad()[i] == doctest::Approx(2 * x[i] + 1).epsilon(1e-4));
}

TEST_CASE("linear matches oracle and chunks over wide outputs") {
    Rng rng(104);
    int n = 3, k = 5, m = 70001; // forces several column chunks
    dvec x = rand_d(static_cast<size_t>(n) * k, rng);
    dvec w = rand_d(static_cast<size_t>(m) * k, rng);
    dvec b = rand_d(static_cast<size_t>(m), rng);
    Tensor xt = leaf({n, k}, x), wt = leaf({m, k}, w), bt = leaf({m}, b);
    Tensor out = ops::linear(xt, wt, bt);
    dvec want = oracle::linear(x, n, k, w, m, b);
    CHECK(oracle::rel_err(out.vec(), want) < 1e-5);

    // gradient check on a small instance
    int m2 = 7;
    dvec x2 = rand_d(static_cast<size_t>(n) * k, rng);
    dvec w2 = rand_d(static_cast<size_t>(m2) * k, rng);
    dvec b2 = rand_d(static_cast<size_t>(m2), rng);
    dvec r = rand_d(static_cast<size_t>(n) * m2, rng);
    Tensor x2t = leaf({n, k}, x2), w2t = leaf({m2, k}, w2), b2t = leaf({m2}, b2);
    Tensor s = project(ops::linear(x2t, w2t, b2t), r);
    s.backward();
    auto f = [&](const dvec& xx, const dvec& ww, const dvec& bb) {
        return dot(oracle::linear(xx, n, k, ww, m2, bb), r);
    };
    CHECK(oracle::rel_err(grad_of(x2t),
                          oracle::fd_grad([&](const dvec& v) { return f(v, w2, b2); }, x2)) < 1e-4);
    CHECK(oracle::rel_err(grad_of(w2t),
                          oracle::fd_grad([&](const dvec& v) { return f(x2, v, b2); }, w2)) < 1e-4);
    CHECK(oracle::rel_err(grad_of(b2t),
                          oracle::fd_grad([&](const dvec& v) { return f(x2, w2, v); }, b2)) < 1e-4);
}

TEST_CASE("part_linear applies an independent map per part") {
    Rng rng(105);
    int b = 4, c = 6, parts = 3, m = 5;
    dvec x = rand_d(static_cast<size_t>(b) * c * parts, rng);
    dvec w = rand_d(static_cast<size_t>(parts) * m * c, rng);
    dvec bias = rand_d(static_cast<size_t>(parts) * m, rng);
    dvec r = rand_d(static_cast<size_t>(b) * m * parts, rng);
    Tensor xt = leaf({b, c, parts}, x), wt = leaf({parts, m, c}, w), bt = leaf({parts, m}, bias);
    Tensor out = ops::part_linear(xt, wt, bt);
    dvec want = oracle::part_linear(x, b, c, parts, w, m, bias);
    CHECK(oracle::rel_err(out.vec(), want) < 1e-5);

    Tensor s = project(out, r);
    s.backward();
    auto f = [&](const dvec& xx, const dvec& ww, const dvec& bb) {
        return dot(oracle::part_linear(xx, b, c, parts, ww, m, bb), r);
    };
    CHECK(oracle::rel_err(grad_of(xt),
                          oracle::fd_grad([&](const dvec& v) { return f(v, w, bias); }, x)) < 1e-4);
    CHECK(oracle::rel_err(grad_of(wt),
                          oracle::fd_grad([&](const dvec& v) { return f(x, v, bias); }, w)) < 1e-4);
    CHECK(oracle::rel_err(grad_of(bt),
                          oracle::fd_grad([&](const dvec& v) { return f(x, w, v); }, bias)) < 1e-4);
}

TEST_CASE("conv2d matches loop oracle across kernel/stride/padding combos") {
    Rng rng(106);
    struct Case {
        int n, cin, h, w, cout, kh, kw, sh, sw, ph, pw;
    };
    std::vector<Case> cases = {
        {2, 3, 8, 7, 4, 3, 3, 1, 1, 1, 1}, // shape preserving
        {2, 2, 9, 8, 3, 3, 3, 2, 2, 1, 1}, // stride 2
        {1, 4, 5, 6, 5, 1, 1, 1, 1, 0, 0}, // pointwise fast path
        {1, 3, 6, 16, 2, 3, 6, 1, 1, 1, 0}, // asymmetric width projection
    };
    for (auto& cs : cases) {
        CAPTURE(cs.kh);
        CAPTURE(cs.kw);
        dvec x = rand_d(static_cast<size_t>(cs.n) * cs.cin * cs.h * cs.w, rng);
        dvec w = rand_d(static_cast<size_t>(cs.cout) * cs.cin * cs.kh * cs.kw, rng);
        dvec b = rand_d(static_cast<size_t>(cs.cout), rng);
        Tensor xt = leaf({cs.n, cs.cin, cs.h, cs.w}, x);
        Tensor wt = leaf({cs.cout, cs.cin, cs.kh, cs.kw}, w);
        Tensor bt = leaf({cs.cout}, b);
        Tensor out = ops::conv2d(xt, wt, bt, cs.sh, cs.sw, cs.ph, cs.pw);
        dvec want = oracle::conv2d(x, cs.n, cs.cin, cs.h, cs.w, w, cs.cout, cs.kh, cs.kw, b, cs.sh,
                                   cs.sw, cs.ph, cs.pw);
        CHECK(oracle::rel_err(out.vec(), want) < 1e-5);

        dvec r = rand_d(want.size(), rng);
        Tensor s = project(out, r);
        s.backward();
        auto f = [&](const dvec& xx, const dvec& ww, const dvec& bb) {
            return dot(oracle::conv2d(xx, cs.n, cs.cin, cs.h, cs.w, ww, cs.cout, cs.kh, cs.kw, bb,
                                      cs.sh, cs.sw, cs.ph, cs.pw),
                       r);
        };
        CHECK(oracle::rel_err(grad_of(xt),
                              oracle::fd_grad([&](const dvec& v) { return f(v, w, b); }, x)) < 1e-4);
        CHECK(oracle::rel_err(grad_of(wt),
                              oracle::fd_grad([&](const dvec& v) { return f(x, v, b); }, w)) < 1e-4);
        CHECK(oracle::rel_err(grad_of(bt),
                              oracle::fd_grad([&](const dvec& v) { return f(x, w, v); }, b)) < 1e-4);
    }
}

TEST_CASE("conv3d matches loop oracle for pointwise and k=3 kernels") {
    Rng rng(107);
    struct Case {
        int n, cin, d, h, w, cout, k, s, p;
    };
    std::vector<Case> cases = {
        {2, 3, 4, 4, 4, 2, 1, 1, 0},
        {1, 2, 5, 5, 5, 3, 3, 1, 1},
        {1, 2, 6, 6, 6, 2, 3, 2, 1},
    };
    for (auto& cs : cases) {
        CAPTURE(cs.k);
        dvec x = rand_d(static_cast<size_t>(cs.n) * cs.cin * cs.d * cs.h * cs.w, rng);
        dvec w = rand_d(static_cast<size_t>(cs.cout) * cs.cin * cs.k * cs.k * cs.k, rng);
        dvec b = rand_d(static_cast<size_t>(cs.cout), rng);
        Tensor xt = leaf({cs.n, cs.cin, cs.d, cs.h, cs.w}, x);
        Tensor wt = leaf({cs.cout, cs.cin, cs.k, cs.k, cs.k}, w);
        Tensor bt = leaf({cs.cout}, b);
        Tensor out = ops::conv3d(xt, wt, bt, cs.s, cs.p);
        dvec want = oracle::conv3d(x, cs.n, cs.cin, cs.d, cs.h, cs.w, w, cs.cout, cs.k, b, cs.s,
                                   cs.p);
        CHECK(oracle::rel_err(out.vec(), want) < 1e-5);

        dvec r = rand_d(want.size(), rng);
        Tensor s = project(out, r);
        s.backward();
        auto f = [&](const dvec& xx, const dvec& ww) {
            return dot(oracle::conv3d(xx, cs.n, cs.cin, cs.d, cs.h, cs.w, ww, cs.cout, cs.k, b,
                                      cs.s, cs.p),
                       r);
        };
        CHECK(oracle::rel_err(grad_of(xt),
                              oracle::fd_grad([&](const dvec& v) { return f(v, w); }, x)) < 1e-4);
        CHECK(oracle::rel_err(grad_of(wt),
                              oracle::fd_grad([&](const dvec& v) { return f(x, v); }, w)) < 1e-4);
    }
}

TEST_CASE("bmm: batched and broadcast forms") {
    Rng rng(108);
    int n = 3, m = 4, k = 5, r2 = 3;
    for (bool shared : {false, true}) {
        CAPTURE(shared);
        size_t asz = shared ? static_cast<size_t>(m) * k : static_cast<size_t>(n) * m * k;
        dvec a = rand_d(asz, rng), b = rand_d(static_cast<size_t>(n) * k * r2, rng);
        dvec r = rand_d(static_cast<size_t>(n) * m * r2, rng);
        Shape ashape = shared ? Shape{m, k} : Shape{n, m, k};
        Tensor at = leaf(ashape, a), bt = leaf({n, k, r2}, b);
        Tensor out = ops::bmm(at, bt);
        dvec want = oracle::bmm(a, b, n, m, k, r2, shared);
        CHECK(oracle::rel_err(out.vec(), want) < 1e-5);
        Tensor s = project(out, r);
        s.backward();
        auto f = [&](const dvec& aa, const dvec& bb) {
            return dot(oracle::bmm(aa, bb, n, m, k, r2, shared), r);
        };
        CHECK(oracle::rel_err(grad_of(at),
                              oracle::fd_grad([&](const dvec& v) { return f(v, b); }, a)) < 1e-4);
        CHECK(oracle::rel_err(grad_of(bt),
                              oracle::fd_grad([&](const dvec& v) { return f(a, v); }, b)) < 1e-4);
    }
}

TEST_CASE("batch_norm training matches oracle, updates running stats, eval uses them") {
    Rng rng(109);
    int n = 4, c = 3, sp = 5;
    dvec x = rand_d(static_cast<size_t>(n) * c * sp, rng, 2.0);
    dvec gamma = rand_d(static_cast<size_t>(c), rng);
    dvec beta = rand_d(static_cast<size_t>(c), rng);
    Tensor xt = leaf({n, c, sp}, x), gt = leaf({c}, gamma), bt = leaf({c}, beta);
    Tensor rm = Tensor::zeros({c}), rv = Tensor::full({c}, 1.f);
    Tensor out = ops::batch_norm(xt, gt, bt, rm, rv, true, 0.1f, 1e-5f);
    dvec want = oracle::batch_norm_train(x, n, c, sp, gamma, beta, 1e-5);
    CHECK(oracle::rel_err(out.vec(), want) < 1e-4);

    // running stats moved toward batch stats
    for (int ch = 0; ch < c; ++ch) {
        double s1 = 0;
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < sp; ++j) s1 += x[(static_cast<size_t>(i) * c + ch) * sp + j];
        double mu = s1 / (n * sp);
        CHECK(rm.data()[ch] == doctest::Approx(0.9 * 0.0 + 0.1 * mu).epsilon(1e-4));
    }

    dvec r = rand_d(want.size(), rng);
    Tensor s = project(out, r);
    s.backward();
    auto f = [&](const dvec& xx, const dvec& gg, const dvec& bb) {
        return dot(oracle::batch_norm_train(xx, n, c, sp, gg, bb, 1e-5), r);
    };
    CHECK(oracle::rel_err(grad_of(xt),
                          oracle::fd_grad([&](const dvec& v) { return f(v, gamma, beta); }, x)) <
          1e-3);
    CHECK(oracle::rel_err(grad_of(gt),
                          oracle::fd_grad([&](const dvec& v) { return f(x, v, beta); }, gamma)) <
          1e-4);
    CHECK(oracle::rel_err(grad_of(bt),
                          oracle::fd_grad([&](const dvec& v) { return f(x, gamma, v); }, beta)) <
          1e-4);

    // eval mode consumes the running buffers
    Tensor out_eval = ops::batch_norm(xt, gt, bt, rm, rv, false, 0.1f, 1e-5f);
    dvec rmv(rm.data(), rm.data() + c), rvv(rv.data(), rv.data() + c);
    dvec want_eval = oracle::batch_norm_eval(x, n, c, sp, gamma, beta, rmv, rvv, 1e-5);
    CHECK(oracle::rel_err(out_eval.vec(), want_eval) < 1e-4);
}

TEST_CASE("batch_norm rejects a training batch of one") {
    Rng rng(110);
    dvec x = rand_d(4, rng);
    Tensor xt = leaf({1, 4}, x);
    Tensor g = Tensor::full({4}, 1.f, true), b = Tensor::zeros({4}, true);
    Tensor rm = Tensor::zeros({4}), rv = Tensor::full({4}, 1.f);
    CHECK_THROWS_AS(ops::batch_norm(xt, g, b, rm, rv, true), ContractError);
    // eval mode is fine
    CHECK_NOTHROW(ops::batch_norm(xt, g, b, rm, rv, false));
}

TEST_CASE("softmax_lastdim rows sum to one; gradient matches oracle") {
    Rng rng(111);
    int rows = 6, m = 9;
    dvec x = rand_d(static_cast<size_t>(rows) * m, rng, 2.0);
    dvec r = rand_d(static_cast<size_t>(rows) * m, rng);
    Tensor xt = leaf({rows, m}, x);
    Tensor out = ops::softmax_lastdim(xt);
    dvec want = oracle::softmax_rows(x, rows, m);
    CHECK(oracle::rel_err(out.vec(), want) < 1e-5);
    for (int i = 0; i < rows; ++i) {
        double s = 0;
        for (int j = 0; j < m; ++j) s += out.data()[i * m + j];
        CHECK(s == doctest::Approx(1.0).epsilon(1e-5));
    }
    Tensor s = project(out, r);
    s.backward();
    dvec fd = oracle::fd_grad(
        [&](const dvec& v) { return dot(oracle::softmax_rows(v, rows, m), r); }, x);
    CHECK(oracle::rel_err(grad_of(xt), fd) < 1e-4);
}

TEST_CASE("soft_argmax: one-hot, uniform, split mass, and gradients") {
    int d = 16, hh = 16, ww = 16;
    // one-hot at (d=3, h=5, w=7) -> coords (7, 5, 3)
    dvec h(static_cast<size_t>(d) * hh * ww, 0.0);
    h[(3 * hh + 5) * ww + 7] = 1.0;
    Tensor ht = leaf({1, 1, d, hh, ww}, h, false);
    Tensor c = ops::soft_argmax(ht);
    CHECK(c.data()[0] == doctest::Approx(7.0));
    CHECK(c.data()[1] == doctest::Approx(5.0));
    CHECK(c.data()[2] == doctest::Approx(3.0));

    // uniform over 16^3 -> (7.5, 7.5, 7.5)
    dvec u(static_cast<size_t>(d) * hh * ww, 1.0 / (d * hh * ww));
    Tensor ut = leaf({1, 1, d, hh, ww}, u, false);
    Tensor cu = ops::soft_argmax(ut);
    for (int i = 0; i < 3; ++i) CHECK(cu.data()[i] == doctest::Approx(7.5).epsilon(1e-5));

    // mass 0.25 at w=0 and 0.75 at w=8 (same d,h): independently computed expectation
    dvec m(static_cast<size_t>(d) * hh * ww, 0.0);
    m[(2 * hh + 4) * ww + 0] = 0.25;
    m[(2 * hh + 4) * ww + 8] = 0.75;
    dvec expect = oracle::soft_argmax(m, 1, 1, d, hh, ww);
    CHECK(expect[0] == doctest::Approx(6.0)); // independent oracle confirms the derived value
    Tensor mt = leaf({1, 1, d, hh, ww}, m, false);
    Tensor cm = ops::soft_argmax(mt);
    CHECK(cm.data()[0] == doctest::Approx(expect[0]).epsilon(1e-6));

    // gradient through softmax+soft_argmax on random 4^3 logits
    Rng rng(112);
    int dd = 4;
    int vox = dd * dd * dd;
    dvec logits = rand_d(static_cast<size_t>(vox), rng);
    dvec r = rand_d(3, rng);
    Tensor lt = leaf({1, vox}, logits);
    Tensor sm = ops::softmax_lastdim(lt);
    Tensor coords = ops::soft_argmax(sm.reshape({1, 1, dd, dd, dd}));
    Tensor s = project(coords, r);
    s.backward();
    dvec fd = oracle::fd_grad(
        [&](const dvec& v) {
            dvec p = oracle::softmax_rows(v, 1, vox);
            return dot(oracle::soft_argmax(p, 1, 1, dd, dd, dd), r);
        },
        logits);
    CHECK(oracle::rel_err(grad_of(lt), fd) < 1e-4);
}

TEST_CASE("soft_argmax rejects unnormalized channels") {
    int d = 4;
    dvec h(static_cast<size_t>(d) * d * d, 0.0);
    h[0] = 0.5; // sums to 0.5, off by > 1e-3
    Tensor ht = leaf({1, 1, d, d, d}, h, false);
    CHECK_THROWS_AS(ops::soft_argmax(ht), ContractError);
}

TEST_CASE("gather_confidence: one-hot, uniform, and rounding rule") {
    int d = 16, hh = 16, ww = 16;
    dvec h(static_cast<size_t>(d) * hh * ww, 0.0);
    h[(3 * hh + 5) * ww + 7] = 1.0;
    Tensor ht = leaf({1, 1, d, hh, ww}, h, false);
    Tensor c = ops::soft_argmax(ht);
    Tensor conf = ops::gather_confidence(ht, c);
    CHECK(conf.data()[0] == doctest::Approx(1.0));

    dvec u(static_cast<size_t>(d) * hh * ww, 1.0 / 4096.0);
    Tensor ut = leaf({1, 1, d, hh, ww}, u, false);
    Tensor cu = Tensor::from_data({1, 1, 3}, {9.2f, 3.9f, 0.4f});
    Tensor confu = ops::gather_confidence(ut, cu);
    CHECK(confu.data()[0] == doctest::Approx(1.0 / 4096.0));

    // coords (6.6, 0.2, 15.9) gather at voxel (x=7, y=0, z=15)
    dvec v(static_cast<size_t>(d) * hh * ww, 0.0);
    v[(15 * hh + 0) * ww + 7] = 0.625;
    Tensor vt = leaf({1, 1, d, hh, ww}, v, false);
    Tensor cc = Tensor::from_data({1, 1, 3}, {6.6f, 0.2f, 15.9f});
    Tensor confv = ops::gather_confidence(vt, cc);
    CHECK(confv.data()[0] == doctest::Approx(0.625));

    // gradient lands on the gathered voxel only
    Tensor vg = leaf({1, 1, d, hh, ww}, v, true);
    Tensor confg = ops::gather_confidence(vg, cc);
    ops::sum_all(confg).backward();
    CHECK(vg.grad()[(15 * hh + 0) * ww + 7] == doctest::Approx(1.0));
    double total = 0;
    for (int64_t i = 0; i < vg.numel(); ++i) total += std::abs(vg.grad()[i]);
    CHECK(total == doctest::Approx(1.0));
}

TEST_CASE("temporal_max and horizontal_pool match oracles") {
    Rng rng(113);
    int b = 2, t = 5, c = 3, h = 8, w = 4, parts = 4;
    dvec x = rand_d(static_cast<size_t>(b) * t * c * h * w, rng);
    Tensor xt = leaf({b, t, c, h, w}, x);
    Tensor tm = ops::temporal_max(xt);
    dvec want = oracle::temporal_max(x, b, t, c * h * w);
    CHECK(oracle::rel_err(tm.vec(), want) < 1e-6);

    dvec r = rand_d(want.size(), rng);
    Tensor s = project(tm, r);
    s.backward();
    dvec fd = oracle::fd_grad(
        [&](const dvec& v) { return dot(oracle::temporal_max(v, b, t, c * h * w), r); }, x, 1e-6);
    CHECK(oracle::rel_err(grad_of(xt), fd) < 1e-3);

    dvec y = rand_d(static_cast<size_t>(b) * c * h * w, rng);
    Tensor yt = leaf({b, c, h, w}, y);
    Tensor hp = ops::horizontal_pool(yt, parts);
    dvec want2 = oracle::horizontal_pool(y, b, c, h, w, parts);
    CHECK(oracle::rel_err(hp.vec(), want2) < 1e-6);

    dvec r2 = rand_d(want2.size(), rng);
    Tensor s2 = project(hp, r2);
    s2.backward();
    dvec fd2 = oracle::fd_grad(
        [&](const dvec& v) { return dot(oracle::horizontal_pool(v, b, c, h, w, parts), r2); }, y,
        1e-6);
    CHECK(oracle::rel_err(grad_of(yt), fd2) < 1e-3);
}

TEST_CASE("horizontal_pool rejects indivisible height") {
    Tensor x = Tensor::zeros({1, 1, 10, 4});
    CHECK_THROWS_AS(ops::horizontal_pool(x, 3), ConfigError);
}

TEST_CASE("resize_bilinear: identity at equal size, oracle match, gradients") {
    Rng rng(114);
    int n = 2, c = 3, h = 5, w = 4;
    dvec x = rand_d(static_cast<size_t>(n) * c * h * w, rng);
    Tensor xt = leaf({n, c, h, w}, x, false);
    Tensor same = ops::resize_bilinear(xt, h, w);
    for (int64_t i = 0; i < same.numel(); ++i) CHECK(same.data()[i] == xt.data()[i]);

    int oh = 7, ow = 9;
    Tensor xg = leaf({n, c, h, w}, x, true);
    Tensor out = ops::resize_bilinear(xg, oh, ow);
    dvec want = oracle::resize_bilinear(x, n, c, h, w, oh, ow);
    CHECK(oracle::rel_err(out.vec(), want) < 1e-5);

    dvec r = rand_d(want.size(), rng);
    Tensor s = project(out, r);
    s.backward();
    dvec fd = oracle::fd_grad(
        [&](const dvec& v) { return dot(oracle::resize_bilinear(v, n, c, h, w, oh, ow), r); }, x);
    CHECK(oracle::rel_err(grad_of(xg), fd) < 1e-4);
}

TEST_CASE("gate_blend: zero gate averages inputs; gradients flow to the gate") {
    Rng rng(115);
    int n = 2, c = 3, sp = 4;
    dvec f0 = rand_d(static_cast<size_t>(n) * c * sp, rng);
    dvec f1 = rand_d(static_cast<size_t>(n) * c * sp, rng);
    dvec gl(static_cast<size_t>(c), 0.0);
    Tensor f0t = leaf({n, c, sp}, f0), f1t = leaf({n, c, sp}, f1), glt = leaf({3}, gl);
    Tensor out = ops::gate_blend(f0t, f1t, glt);
    for (int64_t i = 0; i < out.numel(); ++i)
        CHECK(out.data()[i] == doctest::Approx(0.5 * (f0[i] + f1[i])).epsilon(1e-5));

    dvec glr = rand_d(static_cast<size_t>(c), rng);
    Tensor glt2 = leaf({3}, glr);
    Tensor out2 = ops::gate_blend(f0t, f1t, glt2);
    dvec r = rand_d(static_cast<size_t>(n) * c * sp, rng);
    Tensor s = project(out2, r);
    s.backward();
    auto blend = [&](const dvec& a, const dvec& b, const dvec& g) {
        dvec o(a.size());
        for (int i = 0; i < n; ++i)
            for (int ch = 0; ch < c; ++ch)
                for (int j = 0; j < sp; ++j) {
                    double sg = 1.0 / (1.0 + std::exp(-g[ch]));
                    size_t off = (static_cast<size_t>(i) * c + ch) * sp + j;
                    o[off] = sg * a[off] + (1 - sg) * b[off];
                }
        return o;
    };
    CHECK(oracle::rel_err(grad_of(f0t), oracle::fd_grad([&](const dvec& v) {
                              return dot(blend(v, f1, glr), r);
                          }, f0)) < 1e-4);
    CHECK(oracle::rel_err(grad_of(f1t), oracle::fd_grad([&](const dvec& v) {
                              return dot(blend(f0, v, glr), r);
                          }, f1)) < 1e-4);
    CHECK(oracle::rel_err(grad_of(glt2), oracle::fd_grad([&](const dvec& v) {
                              return dot(blend(f0, f1, v), r);
                          }, glr)) < 1e-4);
}

TEST_CASE("concat_dim1 stacks channels and splits gradients") {
    Rng rng(116);
    dvec a = rand_d(2 * 3 * 4, rng), b = rand_d(2 * 2 * 4, rng);
    Tensor at = leaf({2, 3, 4}, a), bt = leaf({2, 2, 4}, b);
    Tensor out = ops::concat_dim1(at, bt);
    CHECK(out.shape() == Shape{2, 5, 4});
    CHECK(out.data()[0] == doctest::Approx(a[0]));
    CHECK(out.data()[3 * 4] == doctest::Approx(b[0]));
    dvec r = rand_d(2 * 5 * 4, rng);
    Tensor s = project(out, r);
    s.backward();
    // gradient of concat is the corresponding slice of r
    CHECK(at.grad()[0] == doctest::Approx(r[0]));
    CHECK(bt.grad()[0] == doctest::Approx(r[3 * 4]));
}

TEST_CASE("triplet_batch_all: degenerate geometry and brute-force enumeration") {
    // all embeddings identical -> loss = margin
    Tensor e = Tensor::full({4, 3, 2}, 0.7f, true);
    std::vector<int> labels = {0, 0, 1, 1};
    auto res = ops::triplet_batch_all(e, labels, 0.2f);
    CHECK_FALSE(res.skipped);
    CHECK(res.loss.item() == doctest::Approx(0.2).epsilon(1e-6));

    // d(a,p)=0 and d(a,n) >= margin -> loss 0
    dvec sep = {0, 0, 0, 0, 5, 5, 5, 5}; // [4,1,2]: two ids far apart, same-id identical
    Tensor e2 = leaf({4, 1, 2}, sep);
    auto res2 = ops::triplet_batch_all(e2, labels, 0.2f);
    CHECK(res2.loss.item() == doctest::Approx(0.0));

    // 1-D embeddings {0, 0.1, 1.0, 1.1}, labels AABB, margin 0.2: exhaustive oracle
    dvec emb = {0.0, 0.1, 1.0, 1.1};
    Tensor e3 = leaf({4, 1, 1}, emb);
    auto res3 = ops::triplet_batch_all(e3, labels, 0.2f);
    double want = oracle::triplet_batch_all(emb, 4, 1, 1, labels, 0.2);
    CHECK(res3.loss.item() == doctest::Approx(want).epsilon(1e-6));

    // no valid triplet -> skipped
    std::vector<int> solo = {0, 1, 2, 3};
    auto res4 = ops::triplet_batch_all(e, solo, 0.2f);
    CHECK(res4.skipped);
    CHECK(res4.loss.item() == doctest::Approx(0.0));

    // gradient vs finite differences on a random instance
    Rng rng(117);
    int b = 5, c = 3, p = 2;
    dvec x = rand_d(static_cast<size_t>(b) * c * p, rng);
    std::vector<int> labs = {0, 0, 1, 1, 1};
    Tensor xt = leaf({b, c, p}, x);
    auto r5 = ops::triplet_batch_all(xt, labs, 0.3f);
    r5.loss.backward();
    dvec fd = oracle::fd_grad(
        [&](const dvec& v) { return oracle::triplet_batch_all(v, b, c, p, labs, 0.3); }, x);
    CHECK(oracle::rel_err(grad_of(xt), fd) < 1e-4);
}

TEST_CASE("cross_entropy: uniform logits, derived example, gradient, label validation") {
    // uniform logits over K classes -> ln K
    int k = 7;
    Tensor lt = Tensor::full({2, k, 3}, 0.42f, true);
    Tensor loss = ops::cross_entropy(lt, {1, 4});
    CHECK(loss.item() == doctest::Approx(std::log(double(k))).epsilon(1e-6));

    // logits [2,0], true class 0 -> value from direct softmax computation
    dvec two = {2.0, 0.0};
    double want = oracle::cross_entropy(two, 1, 2, 1, {0});
    CHECK(want == doctest::Approx(0.126928).epsilon(1e-4));
    Tensor l2 = leaf({1, 2, 1}, two);
    CHECK(ops::cross_entropy(l2, {0}).item() == doctest::Approx(want).epsilon(1e-6));

    // saturation: logit 20 for the true class -> loss ~ 0 within 1e-8
    Tensor l3 = Tensor::from_data({1, 2, 1}, {20.f, 0.f});
    dvec sat = {20.0, 0.0};
    CHECK(oracle::cross_entropy(sat, 1, 2, 1, {0}) < 1e-8);

    Rng rng(118);
    int b = 4, kk = 5, p = 2;
    dvec x = rand_d(static_cast<size_t>(b) * kk * p, rng);
    std::vector<int> labs = {0, 3, 2, 4};
    Tensor xt = leaf({b, kk, p}, x);
    ops::cross_entropy(xt, labs).backward();
    dvec fd = oracle::fd_grad(
        [&](const dvec& v) { return oracle::cross_entropy(v, b, kk, p, labs); }, x);
    CHECK(oracle::rel_err(grad_of(xt), fd) < 1e-4);

    CHECK_THROWS_AS(ops::cross_entropy(xt, {0, 1, 2, 5}), Error);
    CHECK_THROWS_AS(ops::cross_entropy(xt, {0, 1, 2, -1}), Error);
}

TEST_CASE("masked mse/mae: exact values, masking, gradients") {
    Rng rng(119);
    int b = 3;
    int per = 4;
    dvec p = rand_d(static_cast<size_t>(b) * per, rng);
    dvec t = p;
    Tensor pt = leaf({b, per}, p);
    std::vector<uint8_t> all_on = {1, 1, 1};
    auto eq = ops::masked_mse(pt, to_f(t), all_on);
    CHECK(eq.loss.item() == doctest::Approx(0.0));

    // pred = gt + 1 everywhere -> mse 1; pred = gt - 0.5 -> mae 0.5
    dvec t2(p.size());
    for (size_t i = 0; i < p.size(); ++i) t2[i] = p[i] - 1.0;
    auto off1 = ops::masked_mse(pt, to_f(t2), all_on);
    CHECK(off1.loss.item() == doctest::Approx(1.0).epsilon(1e-5));
    dvec t3(p.size());
    for (size_t i = 0; i < p.size(); ++i) t3[i] = p[i] + 0.5;
    auto off2 = ops::masked_mae(pt, to_f(t3), all_on);
    CHECK(off2.loss.item() == doctest::Approx(0.5).epsilon(1e-5));

    // only masked samples count
    dvec tr = rand_d(p.size(), rng);
    std::vector<uint8_t> mask = {1, 0, 1};
    auto part = ops::masked_mse(pt, to_f(tr), mask);
    double manual = 0;
    for (int i : {0, 2})
        for (int j = 0; j < per; ++j) {
            double d = p[static_cast<size_t>(i) * per + j] - tr[static_cast<size_t>(i) * per + j];
            manual += d * d;
        }
    manual /= 2 * per;
    CHECK(part.loss.item() == doctest::Approx(manual).epsilon(1e-5));

    // all masked out -> skipped flag
    std::vector<uint8_t> none = {0, 0, 0};
    auto sk = ops::masked_mse(pt, to_f(tr), none);
    CHECK(sk.skipped);
    CHECK(sk.loss.item() == doctest::Approx(0.0));

    // gradients
    Tensor pg = leaf({b, per}, p);
    auto lm = ops::masked_mse(pg, to_f(tr), mask);
    lm.loss.backward();
    dvec fd = oracle::fd_grad(
        [&](const dvec& v) {
            double s = 0;
            for (int i : {0, 2})
                for (int j = 0; j < per; ++j) {
                    double d = v[static_cast<size_t>(i) * per + j] -
                               tr[static_cast<size_t>(i) * per + j];
                    s += d * d;
                }
            return s / (2 * per);
        },
        p);
    CHECK(oracle::rel_err(grad_of(pg), fd) < 1e-4);
}

TEST_CASE("weighted_sum: arithmetic oracle") {
    Tensor a = Tensor::from_data({1}, {0.5f}, true);
    Tensor b = Tensor::from_data({1}, {2.0f}, true);
    Tensor c = Tensor::from_data({1}, {0.1f}, true);
    Tensor d = Tensor::from_data({1}, {0.3f}, true);
    Tensor total = ops::weighted_sum({a, b, c, d}, {1.f, 1.f, 10.f, 0.1f});
    CHECK(total.item() == doctest::Approx(3.53).epsilon(1e-6));
    total.backward();
    CHECK(a.grad()[0] == doctest::Approx(1.0));
    CHECK(c.grad()[0] == doctest::Approx(10.0));

    Tensor ones = Tensor::from_data({1}, {1.f});
    Tensor sum4 = ops::weighted_sum({ones, ones, ones, ones}, {1, 1, 1, 1});
    CHECK(sum4.item() == doctest::Approx(4.0));
}

TEST_CASE("op evaluation is deterministic") {
    Rng rng(120);
    int n = 3, cin = 4, h = 10, w = 9, cout = 6;
    dvec x = rand_d(static_cast<size_t>(n) * cin * h * w, rng);
    dvec wv = rand_d(static_cast<size_t>(cout) * cin * 9, rng);
    Tensor xt = leaf({n, cin, h, w}, x, false);
    Tensor wt = leaf({cout, cin, 3, 3}, wv, false);
    Tensor o1 = ops::conv2d(xt, wt, Tensor(), 1, 1, 1, 1);
    Tensor o2 = ops::conv2d(xt, wt, Tensor(), 1, 1, 1, 1);
    for (int64_t i = 0; i < o1.numel(); ++i) CHECK(o1.data()[i] == o2.data()[i]);
}
