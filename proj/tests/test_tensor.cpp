#include <doctest.h>

#include <cmath>
#include <random>

#include "biss/errors.hpp"
#include "biss/tensor.hpp"
#include "gradcheck.hpp"

using namespace biss;
using biss::testing::gradcheck_max_rel_err;

namespace {

Tensor random_param(Shape shape, std::uint64_t seed, double stddev = 1.0) {
    std::mt19937_64 rng(seed);
    return Tensor::randn(std::move(shape), rng, stddev, true);
}

}  // namespace

TEST_CASE("tensor construction and invariants") {
    Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
    CHECK(t.size() == 6);
    CHECK(t.dim(1) == 3);
    CHECK(t.all_finite());
    CHECK_THROWS_AS(Tensor({2, 2}, {1.0, 2.0}), std::invalid_argument);
    CHECK_THROWS_AS(Tensor({0, 2}, {}), std::invalid_argument);
}

TEST_CASE("matmul identity and zeros") {
    Tensor id({2, 2}, {1, 0, 0, 1});
    Tensor m({2, 2}, {3, -1, 2, 5});
    Tensor prod = matmul(id, m);
    CHECK(prod.data() == m.data());

    Tensor z = Tensor::zeros({2, 3});
    Tensor any = random_param({3, 4}, 7);
    Tensor zp = matmul(z, any);
    for (double v : zp.data()) CHECK(v == 0.0);
    CHECK(zp.shape() == Shape{2, 4});
}

TEST_CASE("matmul shape error names both shapes") {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({4, 2});
    CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("(2,3)"), std::invalid_argument);
}

TEST_CASE("matmul gradient vs finite differences") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Tensor a = random_param({4, 4}, 100 + seed);
        Tensor b = random_param({4, 4}, 200 + seed);
        const double err = gradcheck_max_rel_err({a, b}, [&] { return sum(matmul(a, b)); });
        CHECK(err < 1e-3);
    }
}

TEST_CASE("softmax values") {
    Tensor x({3}, {0, 0, 0});
    Tensor y = softmax(x);
    for (double v : y.data()) CHECK(v == doctest::Approx(1.0 / 3).epsilon(1e-12));

    Tensor big({2}, {1000.0, 0.0});
    Tensor s = softmax(big);
    CHECK(s.all_finite());
    CHECK(s.data()[0] == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(s.data()[1] == doctest::Approx(0.0).epsilon(1e-9));
}

TEST_CASE("softmax rows sum to one and stay positive") {
    std::mt19937_64 rng(42);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor x = Tensor::randn({5, 7}, rng, 3.0);
        Tensor y = softmax(x, -1);
        for (int r = 0; r < 5; ++r) {
            double s = 0.0;
            for (int c = 0; c < 7; ++c) {
                const double v = y.data()[static_cast<std::size_t>(r) * 7 + c];
                CHECK(v > 0.0);
                s += v;
            }
            CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
        }
    }
}

TEST_CASE("softmax gradient vs finite differences") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Tensor x = random_param({8}, 300 + seed);
        Tensor w = random_param({8}, 400 + seed);  // weighting makes the reduction non-trivial
        const double err = gradcheck_max_rel_err({x}, [&] { return sum(mul(softmax(x), w)); });
        CHECK(err < 1e-3);
    }
}

TEST_CASE("softmax over a non-terminal axis") {
    Tensor x = random_param({2, 3, 4}, 9);
    Tensor y = softmax(x, 1);
    for (int b = 0; b < 2; ++b) {
        for (int c = 0; c < 4; ++c) {
            double s = 0.0;
            for (int m = 0; m < 3; ++m) s += y.data()[static_cast<std::size_t>(b) * 12 + m * 4 + c];
            CHECK(s == doctest::Approx(1.0).epsilon(1e-9));
        }
    }
}

TEST_CASE("cross entropy values") {
    // Probability ~1 on each target -> loss ~0.
    Tensor sure({2, 3}, {100, 0, 0, 0, 100, 0});
    Tensor loss = cross_entropy(sure, {0, 1}, {false, false});
    CHECK(loss.item() == doctest::Approx(0.0).epsilon(1e-9));

    // Uniform logits -> ln(V) per position.
    Tensor uniform = Tensor::zeros({2, 5});
    Tensor lu = cross_entropy(uniform, {3, 1}, {false, false});
    CHECK(lu.item() == doctest::Approx(std::log(5.0)).epsilon(1e-12));

    CHECK_THROWS_AS(cross_entropy(uniform, {3, 1}, {true, true}), DataError);
    CHECK_THROWS_AS(cross_entropy(uniform, {5, 1}, {false, false}), std::out_of_range);
}

TEST_CASE("cross entropy gradient, masked positions get exactly zero") {
    Tensor logits = random_param({4, 6}, 17);
    const std::vector<int> targets{1, 2, 3, 4};
    const std::vector<bool> mask{false, true, false, true};
    const double err = gradcheck_max_rel_err({logits}, [&] {
        return cross_entropy(logits, targets, mask);
    });
    CHECK(err < 1e-3);

    logits.zero_grad();
    Tape tape;
    {
        TapeScope scope(tape);
        Tensor loss = cross_entropy(logits, targets, mask);
        tape.backward(loss);
    }
    for (int r : {1, 3}) {
        for (int c = 0; c < 6; ++c) CHECK(logits.grad()[static_cast<std::size_t>(r) * 6 + c] == 0.0);
    }
}

TEST_CASE("backward basics") {
    Tensor x = Tensor::scalar(3.0, true);
    Tape tape;
    {
        TapeScope scope(tape);
        Tensor y = mul(x, x);
        tape.backward(y);
    }
    CHECK(x.grad()[0] == doctest::Approx(6.0));

    // Double backward without reset is an error.
    Tensor z = Tensor::scalar(1.0, true);
    CHECK_THROWS(tape.backward(z));

    // Non-scalar loss rejected.
    Tape t2;
    TapeScope scope(t2);
    Tensor v = random_param({3}, 1);
    Tensor w = add(v, v);
    CHECK_THROWS_AS(t2.backward(w), std::invalid_argument);
}

TEST_CASE("elementwise ops gradients") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Tensor a = random_param({3, 5}, 500 + seed);
        Tensor b = random_param({3, 5}, 600 + seed);
        Tensor bias = random_param({5}, 700 + seed);
        CHECK(gradcheck_max_rel_err({a, b}, [&] { return sum(mul(a, b)); }) < 1e-3);
        CHECK(gradcheck_max_rel_err({a, b}, [&] { return sum(add(a, b)); }) < 1e-3);
        CHECK(gradcheck_max_rel_err({a, bias}, [&] { return sum(mul(add(a, bias), add(a, bias))); }) < 1e-3);
        CHECK(gradcheck_max_rel_err({a}, [&] { return sum(mul(scale(a, -1.7), a)); }) < 1e-3);
        CHECK(gradcheck_max_rel_err({a}, [&] { return sum(mul(relu(a), a)); }) < 1e-3);
    }
}

TEST_CASE("bmm gradient") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Tensor a = random_param({2, 3, 4}, 800 + seed);
        Tensor b = random_param({2, 4, 2}, 900 + seed);
        CHECK(gradcheck_max_rel_err({a, b}, [&] { return sum(mul(bmm(a, b), bmm(a, b))); }) < 1e-3);
    }
}

TEST_CASE("layer_norm gradient") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Tensor x = random_param({4, 6}, 1000 + seed);
        Tensor g = random_param({6}, 1100 + seed);
        Tensor b = random_param({6}, 1200 + seed);
        Tensor w = random_param({4, 6}, 1300 + seed);
        const double err = gradcheck_max_rel_err({x, g, b}, [&] {
            return sum(mul(layer_norm(x, g, b), w));
        });
        CHECK(err < 1e-3);
    }
}

TEST_CASE("embedding lookup gradient and bounds") {
    Tensor table = random_param({6, 3}, 2000);
    const std::vector<int> ids{1, 4, 1, 5};
    Tensor w = random_param({4, 3}, 2100);
    const double err = gradcheck_max_rel_err({table}, [&] {
        return sum(mul(embedding_lookup(table, ids, {4}), w));
    });
    CHECK(err < 1e-3);
    CHECK_THROWS_AS(embedding_lookup(table, {6}, {1}), std::out_of_range);
}

TEST_CASE("dropout train/eval modes and gradient") {
    Tensor x = random_param({50}, 3000);
    std::mt19937_64 eval_rng(1);
    Tensor same = dropout(x, 0.5, eval_rng, /*train=*/false);
    CHECK(same.data() == x.data());

    // Train mode: surviving entries scaled by 1/(1-rate).
    std::mt19937_64 rng(7);
    Tensor dropped = dropout(x, 0.5, rng, true);
    int zeros = 0;
    for (std::size_t i = 0; i < dropped.data().size(); ++i) {
        if (dropped.data()[i] == 0.0) {
            ++zeros;
        } else {
            CHECK(dropped.data()[i] == doctest::Approx(2.0 * x.data()[i]));
        }
    }
    CHECK(zeros > 5);
    CHECK(zeros < 45);

    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const double err = gradcheck_max_rel_err({x}, [&] {
            std::mt19937_64 fixed(seed);  // same mask every evaluation
            return sum(mul(dropout(x, 0.3, fixed, true), x));
        });
        CHECK(err < 1e-3);
    }
}

TEST_CASE("reshape, permute, concat gradients") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Tensor x = random_param({2, 3, 4}, 4000 + seed);
        Tensor w = random_param({4, 3, 2}, 4100 + seed);
        CHECK(gradcheck_max_rel_err({x}, [&] {
            return sum(mul(permute(x, {2, 1, 0}), w));
        }) < 1e-3);
        Tensor w2 = random_param({24}, 4200 + seed);
        CHECK(gradcheck_max_rel_err({x}, [&] {
            return sum(mul(reshape(x, {24}), w2));
        }) < 1e-3);
        Tensor y = random_param({2, 2, 4}, 4300 + seed);
        Tensor w3 = random_param({2, 5, 4}, 4400 + seed);
        CHECK(gradcheck_max_rel_err({x, y}, [&] {
            return sum(mul(concat({x, y}, 1), w3));
        }) < 1e-3);
    }
}

TEST_CASE("permute matches manual transpose") {
    Tensor x({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor t = permute(x, {1, 0});
    CHECK(t.shape() == Shape{3, 2});
    CHECK(t.data() == std::vector<double>{1, 4, 2, 5, 3, 6});
}

TEST_CASE("determinism: identical seeds give bitwise identical results") {
    auto run = [] {
        std::mt19937_64 rng(99);
        Tensor a = Tensor::randn({4, 4}, rng, 1.0, true);
        Tensor b = Tensor::randn({4, 4}, rng, 1.0, true);
        Tape tape;
        std::vector<double> out;
        {
            TapeScope scope(tape);
            std::mt19937_64 drop_rng(5);
            Tensor y = sum(dropout(softmax(matmul(a, b)), 0.2, drop_rng, true));
            tape.backward(y);
        }
        out = a.grad();
        out.insert(out.end(), b.grad().begin(), b.grad().end());
        return out;
    };
    CHECK(run() == run());
}
