#include <doctest.h>

#include "meshgait/nn.hpp"
#include "oracle.hpp"
#include "test_helpers.hpp"

using namespace meshgait;
using oracle::dvec;
using namespace testutil;

TEST_CASE("ParamStore rejects duplicate names and counts parameters") {
    ParamStore store;
    store.add_param("a", Tensor::zeros({2, 3}, true));
    store.add_param("b", Tensor::zeros({5}, true));
    CHECK(store.param_count() == 11);
    CHECK_THROWS_AS(store.add_param("a", Tensor::zeros({1}, true)), Error);
    CHECK(store.find("a") != nullptr);
    CHECK(store.find("missing") == nullptr);
}

TEST_CASE("ResBlock2d: projection derived to match the main path") {
    Rng rng(301);
    // stride-2 block: 8x8 -> 4x4 with channel change
    nn::ResBlock2d block(3, 5, 3, 3, 2, 1, 1, rng);
    CHECK(block.has_proj);
    Tensor x = Tensor::randn({2, 3, 8, 8}, rng, 1.f, false);
    Tensor y = block.forward(x, true);
    CHECK(y.shape() == Shape{2, 5, 4, 4});

    // width-projection block: 16 -> 11 with height preserved
    nn::ResBlock2d wide(4, 6, 3, 6, 1, 1, 0, rng);
    Tensor x2 = Tensor::randn({2, 4, 16, 16}, rng, 1.f, false);
    Tensor y2 = wide.forward(x2, true);
    CHECK(y2.shape() == Shape{2, 6, 16, 11});

    // identity block keeps dims, no projection
    nn::ResBlock2d id(4, 4, 3, 3, 1, 1, 1, rng);
    CHECK_FALSE(id.has_proj);
    Tensor y3 = id.forward(x2, true);
    CHECK(y3.shape() == x2.shape());
}

TEST_CASE("ResBlock2d output is nonnegative (final relu) and registers all params") {
    Rng rng(302);
    nn::ResBlock2d block(2, 4, 3, 3, 2, 1, 1, rng);
    ParamStore store;
    block.register_into(store, "blk");
    // conv1 + conv2 + proj weights, 3 BN pairs
    CHECK(store.params().size() == 3 + 6);
    CHECK(store.buffers().size() == 6);
    Tensor x = Tensor::randn({3, 2, 10, 10}, rng, 1.f, false);
    Tensor y = block.forward(x, true);
    for (int64_t i = 0; i < y.numel(); ++i) CHECK(y.data()[i] >= 0.f);
}

TEST_CASE("BatchNorm layer: eval after train approaches batch statistics") {
    Rng rng(303);
    nn::BatchNorm bn(4);
    Tensor x = Tensor::randn({6, 4, 5, 5}, rng, 2.f, false);
    // repeated training passes converge the running stats
    for (int i = 0; i < 200; ++i) (void)bn.forward(x, true);
    Tensor y = bn.forward(x, false);
    // output should be near zero-mean unit-var per channel
    for (int c = 0; c < 4; ++c) {
        double s1 = 0, s2 = 0;
        int64_t count = 0;
        for (int n = 0; n < 6; ++n)
            for (int i = 0; i < 25; ++i) {
                double v = y.data()[(n * 4 + c) * 25 + i];
                s1 += v;
                s2 += v * v;
                ++count;
            }
        double mu = s1 / count;
        CHECK(std::abs(mu) < 0.05);
        CHECK(std::abs(s2 / count - mu * mu - 1.0) < 0.1);
    }
}

TEST_CASE("Linear and PartLinear layer shapes") {
    Rng rng(304);
    nn::Linear lin(7, 3, true, rng);
    Tensor x = Tensor::randn({5, 7}, rng, 1.f, false);
    CHECK(lin.forward(x).shape() == Shape{5, 3});

    nn::PartLinear pl(4, 6, 2, true, rng);
    Tensor xp = Tensor::randn({3, 6, 4}, rng, 1.f, false);
    CHECK(pl.forward(xp).shape() == Shape{3, 2, 4});
}
