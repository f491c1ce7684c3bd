#include <catch2/catch.hpp>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <sstream>

#include "oracles.hpp"
#include "rdr/tensor.hpp"

using namespace rdr;

namespace {

Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng, double lo = -1.0,
                     double hi = 1.0) {
    std::vector<double> v(detail::shape_product(shape));
    for (double& x : v) x = rng.uniform(lo, hi);
    return Tensor::constant(std::move(shape), std::move(v));
}

} // namespace

TEST_CASE("matmul identity and hand cases") {
    Tensor eye = Tensor::constant({2, 2}, {1, 0, 0, 1});
    Tensor v = Tensor::constant({2, 1}, {3, 4});
    Tensor r = matmul(eye, v);
    REQUIRE(r.shape() == std::vector<std::size_t>{2, 1});
    REQUIRE(r.at(0, 0) == 3.0);
    REQUIRE(r.at(1, 0) == 4.0);

    Tensor a = Tensor::constant({1, 2}, {1, 2});
    Tensor b = Tensor::constant({2, 1}, {3, 4});
    REQUIRE(matmul(a, b).at(0, 0) == 11.0);
}

TEST_CASE("matmul matches the triple-loop oracle") {
    Rng rng(101);
    Tensor a = random_tensor({3, 4}, rng);
    Tensor b = random_tensor({4, 2}, rng);
    Tensor c = matmul(a, b);
    auto expect = oracle::matmul({a.values().begin(), a.values().end()},
                                 {b.values().begin(), b.values().end()}, 3, 4, 2);
    for (std::size_t i = 0; i < expect.size(); ++i)
        REQUIRE(std::fabs(c.at(i) - expect[i]) <= 1e-12);
}

TEST_CASE("matmul oracle agreement on random shapes up to 8x8") {
    Rng rng(202);
    for (int iter = 0; iter < 50; ++iter) {
        std::size_t m = 1 + rng.below(8), k = 1 + rng.below(8), n = 1 + rng.below(8);
        Tensor a = random_tensor({m, k}, rng);
        Tensor b = random_tensor({k, n}, rng);
        Tensor c = matmul(a, b);
        auto expect = oracle::matmul({a.values().begin(), a.values().end()},
                                     {b.values().begin(), b.values().end()}, m, k, n);
        for (std::size_t i = 0; i < expect.size(); ++i)
            REQUIRE(std::fabs(c.at(i) - expect[i]) <= 1e-12);
    }
}

TEST_CASE("matmul rejects mismatched shapes naming both") {
    Tensor a = Tensor::zeros({3, 4});
    Tensor b = Tensor::zeros({5, 2});
    REQUIRE_THROWS_MATCHES(matmul(a, b), dimension_error,
                           Catch::Matchers::Message(
                               "matmul: incompatible shapes (3,4) and (5,2)"));
}

TEST_CASE("cross entropy analytic values") {
    // uniform logits over C=4: ln 4 regardless of target
    Tensor logits = Tensor::constant({1, 4}, {0.7, 0.7, 0.7, 0.7});
    for (int t = 0; t < 4; ++t)
        REQUIRE(std::fabs(softmax_cross_entropy(logits, std::vector<int>{t}).scalar() -
                          std::log(4.0)) <= 1e-9);

    // +1000 on the true class
    Tensor sharp = Tensor::constant({1, 3}, {1000.0, 0.0, 0.0});
    REQUIRE(softmax_cross_entropy(sharp, std::vector<int>{0}).scalar() < 1e-6);

    // logits [1,2,3], target 2
    Tensor t123 = Tensor::constant({1, 3}, {1, 2, 3});
    const double got = softmax_cross_entropy(t123, std::vector<int>{2}).scalar();
    const double want = oracle::cross_entropy({1, 2, 3}, {2}, 1, 3);
    REQUIRE(std::fabs(got - want) <= 1e-12);
    REQUIRE(std::fabs(got - 0.40761) <= 1e-5);
}

TEST_CASE("cross entropy is nonnegative, ln C at uniform, shift invariant") {
    Rng rng(303);
    for (std::size_t c : {2ul, 4ul, 50ul}) {
        Tensor uniform = Tensor::constant({1, c}, std::vector<double>(c, 0.31));
        REQUIRE(std::fabs(softmax_cross_entropy(uniform, std::vector<int>{0}).scalar() -
                          std::log(static_cast<double>(c))) <= 1e-9);
    }
    for (int iter = 0; iter < 20; ++iter) {
        std::size_t n = 1 + rng.below(4), c = 2 + rng.below(6);
        Tensor logits = random_tensor({n, c}, rng);
        std::vector<int> targets;
        for (std::size_t i = 0; i < n; ++i)
            targets.push_back(static_cast<int>(rng.below(c)));
        const double base = softmax_cross_entropy(logits, targets).scalar();
        REQUIRE(base >= 0.0);

        const double shift = rng.uniform(-5.0, 5.0);
        std::vector<double> shifted(logits.values().begin(), logits.values().end());
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < c; ++j) shifted[i * c + j] += shift;
        const double after =
            softmax_cross_entropy(Tensor::constant({n, c}, shifted), targets).scalar();
        REQUIRE(std::fabs(base - after) <= 1e-9);
    }
}

TEST_CASE("cross entropy rejects out-of-range targets") {
    Tensor logits = Tensor::zeros({1, 3});
    REQUIRE_THROWS_AS(softmax_cross_entropy(logits, std::vector<int>{3}), target_error);
    REQUIRE_THROWS_AS(softmax_cross_entropy(logits, std::vector<int>{-1}), target_error);
}

TEST_CASE("distribution-target cross entropy matches one-hot indices") {
    Rng rng(404);
    Tensor logits = random_tensor({3, 5}, rng);
    std::vector<int> idx = {0, 2, 4};
    std::vector<double> onehot(15, 0.0);
    for (std::size_t i = 0; i < 3; ++i) onehot[i * 5 + static_cast<std::size_t>(idx[i])] = 1.0;
    const double a = softmax_cross_entropy(logits, idx).scalar();
    const double b = softmax_cross_entropy(logits, Tensor::constant({3, 5}, onehot)).scalar();
    REQUIRE(std::fabs(a - b) <= 1e-12);
}

TEST_CASE("grad_check on a quadratic") {
    ParamRegistry reg;
    reg.create_from("w", {1, 1}, {3.0});
    auto fn = [](ParamRegistry& p) { return reshape(matmul(p.get("w"), p.get("w")), {1}); };
    auto report = grad_check(fn, reg);
    REQUIRE(report.max_rel_error < 1e-9);
}

TEST_CASE("grad_check on random cross entropy") {
    ParamRegistry reg;
    Rng rng(505);
    reg.create("logits", {2, 3}, rng, -1.0, 1.0);
    auto fn = [](ParamRegistry& p) {
        return softmax_cross_entropy(p.get("logits"), std::vector<int>{1, 2});
    };
    auto report = grad_check(fn, reg);
    REQUIRE(report.max_rel_error < 1e-6);
}

TEST_CASE("every op's backward matches central differences") {
    Rng rng(606);
    ParamRegistry reg;
    Tensor a = reg.create("a", {3, 4}, rng, -1.0, 1.0);
    Tensor b = reg.create("b", {4, 3}, rng, -1.0, 1.0);
    Tensor v = reg.create("v", {4}, rng, -1.0, 1.0);
    Tensor u = reg.create("u", {3}, rng, -1.0, 1.0);

    // exercises matmul, vecmat, add, sub, add_row, scale, add_const, tanh,
    // relu, row, rows, mean_rows, concat, l2norm, reshape, softmax CE, and
    // sum_scalars in a single composite scalar
    auto fn = [](ParamRegistry& p) {
        Tensor a = p.get("a"), b = p.get("b"), v = p.get("v"), u = p.get("u");
        Tensor prod = matmul(a, b);                       // [3,3]
        Tensor act = tanh(add_row(prod, u));              // [3,3]
        Tensor ce = softmax_cross_entropy(act, std::vector<int>{0, 1, 2});
        Tensor picked = rows(a, std::vector<int>{2, 0});  // [2,4]
        Tensor pooled = mean_rows(picked);                // [4]
        Tensor fused = concat(pooled, row(b, 1));         // [7]
        Tensor normed = l2norm(sub(add(scale(fused, 0.5), scale(fused, 0.5)),
                                   add_const(scale(fused, 0.0), 0.1)));
        Tensor relud = l2norm(relu(vecmat(v, b)));
        Tensor reshaped = l2norm(reshape(picked, {8}));
        return sum_scalars({ce, normed, relud, reshaped});
    };
    auto report = grad_check(fn, reg);
    INFO("worst " << report.param << "[" << report.index << "] analytic " << report.analytic
                  << " numeric " << report.numeric);
    REQUIRE(report.max_rel_error <= 1e-4);
}

TEST_CASE("shared subexpressions accumulate gradients once per use") {
    ParamRegistry reg;
    Rng rng(707);
    reg.create("w", {3}, rng, 0.5, 1.5);
    auto fn = [](ParamRegistry& p) {
        Tensor x = l2norm(p.get("w"));
        return sum_scalars({x, x});
    };
    auto report = grad_check(fn, reg);
    REQUIRE(report.max_rel_error <= 1e-6);
}

TEST_CASE("sgd_step basic updates") {
    ParamRegistry reg;
    Tensor w = reg.create_from("w", {1}, {1.0});
    backward(scale(w, 2.0)); // grad = 2
    sgd_step(reg, 0.1);
    REQUIRE(w.at(0) == Approx(0.8).margin(1e-15));

    // zero gradient is a fixed point
    backward(scale(w, 0.0));
    const double before = w.at(0);
    sgd_step(reg, 0.1);
    REQUIRE(w.at(0) == before);
}

TEST_CASE("20 sgd steps on (w-5)^2 converge") {
    ParamRegistry reg;
    Tensor w = reg.create_from("w", {1, 1}, {0.0});
    for (int i = 0; i < 20; ++i) {
        Tensor shifted = add_const(w, -5.0);
        backward(reshape(matmul(shifted, shifted), {1}));
        sgd_step(reg, 0.1);
    }
    REQUIRE(std::fabs(w.at(0) - 5.0) < 0.1);
}

TEST_CASE("sgd_step rejects non-finite gradients by name") {
    ParamRegistry reg;
    Tensor w = reg.create_from("exploding", {1, 1}, {1e308});
    backward(reshape(matmul(w, w), {1})); // value inf, grad inf
    try {
        sgd_step(reg, 0.1);
        FAIL("expected numeric_error");
    } catch (const numeric_error& e) {
        REQUIRE(std::string(e.what()).find("exploding") != std::string::npos);
    }
}

TEST_CASE("param registry enforces unique names and stable order") {
    ParamRegistry reg;
    Rng rng(808);
    reg.create("b", {2}, rng);
    reg.create("a", {2}, rng);
    REQUIRE_THROWS_AS(reg.create("a", {2}, rng), argument_error);
    REQUIRE(reg.params()[0].name() == "b");
    REQUIRE(reg.params()[1].name() == "a");
    REQUIRE_THROWS_AS(reg.get("missing"), lookup_error);
}

TEST_CASE("checkpoint round trip is lossless") {
    ParamRegistry reg;
    reg.create_from("w1", {2, 2}, {1.0 / 3.0, -0.0, 1e-300, 12345.6789012345});
    reg.create_from("w2", {3}, {M_PI, -2.5e17, 0.1});
    std::string text = checkpoint_string(reg);

    ParamRegistry reg2;
    Rng rng(909);
    reg2.create("w1", {2, 2}, rng);
    reg2.create("w2", {3}, rng);
    std::istringstream in(text);
    auto entries = read_checkpoint(in);
    REQUIRE(entries.size() == 2);
    // write to a temp file and load back into the second registry
    std::string path = "ckpt_roundtrip_test.tmp";
    save_checkpoint(reg, path);
    load_checkpoint(reg2, path);
    for (std::size_t p = 0; p < 2; ++p)
        for (std::size_t i = 0; i < reg.params()[p].size(); ++i) {
            const double x = reg.params()[p].at(i);
            const double y = reg2.params()[p].at(i);
            REQUIRE(std::memcmp(&x, &y, sizeof(double)) == 0);
        }
    std::remove(path.c_str());
}

TEST_CASE("checkpoint load reports shape mismatches and missing params") {
    ParamRegistry reg;
    reg.create_from("w", {2}, {1.0, 2.0});
    std::string path = "ckpt_mismatch_test.tmp";
    save_checkpoint(reg, path);

    ParamRegistry other;
    other.create_from("w", {3}, {0.0, 0.0, 0.0});
    REQUIRE_THROWS_AS(load_checkpoint(other, path), dimension_error);

    ParamRegistry third;
    third.create_from("v", {2}, {0.0, 0.0});
    REQUIRE_THROWS_AS(load_checkpoint(third, path), lookup_error);
    std::remove(path.c_str());
}

TEST_CASE("backward requires a scalar root") {
    ParamRegistry reg;
    Rng rng(111);
    Tensor w = reg.create("w", {2, 2}, rng);
    REQUIRE_THROWS_AS(backward(scale(w, 1.0)), argument_error);
}
