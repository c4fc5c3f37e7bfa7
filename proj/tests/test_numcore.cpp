#include <catch2/catch_amalgamated.hpp>
#include <cstdio>
#include <fstream>

#include "mlmlab/autodiff.hpp"
#include "mlmlab/rng.hpp"
#include "mlmlab/serialize.hpp"

using namespace mlmlab;

namespace {

ParamStore random_params(std::vector<std::pair<std::string, std::vector<int64_t>>> layout,
                         uint64_t seed, double scale = 0.5) {
    Rng rng(seed);
    ParamStore ps;
    ps.seed = seed;
    for (auto& [name, shape] : layout) {
        Tensor t = Tensor::zeros(shape);
        for (auto& v : t.v) v = scale * rng.normal();
        ps.add(name, std::move(t));
    }
    return ps;
}

// small 2-layer net with softmax cross-entropy against a fixed target class
LossFn two_layer_ce_loss(Tensor input, int64_t target) {
    return [input = std::move(input), target](Tape& t) {
        Var x = t.constant(input);
        Var h = relu(add_row_broadcast(matmul(x, t.param("w1")), t.param("b1")));
        Var logits = add_row_broadcast(matmul(h, t.param("w2")), t.param("b2"));
        Var logp = log_softmax_rows(logits);
        return scale(pick_per_row(logp, {target}), -1.0);
    };
}

}  // namespace

TEST_CASE("quadratic gradient", "[numcore]") {
    ParamStore ps;
    ps.add("theta", Tensor({2}, {1.0, 2.0}));
    auto loss = [](Tape& t) {
        Var th = t.param("theta");
        return sum_all(mul(th, th));
    };
    Gradients g = grad(loss, ps);
    CHECK(g.get("theta").v[0] == Catch::Approx(2.0).margin(1e-14));
    CHECK(g.get("theta").v[1] == Catch::Approx(4.0).margin(1e-14));

    Gradients fd = finite_diff_grad(loss, ps, 1e-5);
    CHECK(fd.get("theta").v[0] == Catch::Approx(2.0).margin(1e-8));
    CHECK(fd.get("theta").v[1] == Catch::Approx(4.0).margin(1e-8));
}

TEST_CASE("constant loss has zero gradient", "[numcore]") {
    ParamStore ps;
    ps.add("theta", Tensor({3}, {0.3, -0.2, 4.0}));
    auto loss = [](Tape& t) { return t.constant(Tensor::scalar(3.0)); };
    Gradients g = grad(loss, ps);
    for (double v : g.get("theta").v) CHECK(v == 0.0);
    Gradients fd = finite_diff_grad(loss, ps, 1e-5);
    for (double v : fd.get("theta").v) CHECK(std::fabs(v) < 1e-9);
}

TEST_CASE("two-layer softmax-CE matches finite differences on 100 points", "[numcore]") {
    for (uint64_t seed = 0; seed < 100; ++seed) {
        ParamStore ps = random_params(
            {{"w1", {3, 5}}, {"b1", {5}}, {"w2", {5, 4}}, {"b2", {4}}}, 1000 + seed);
        Rng rng(seed);
        Tensor x = Tensor::zeros({1, 3});
        for (auto& v : x.v) v = rng.normal();
        LossFn loss = two_layer_ce_loss(x, static_cast<int64_t>(seed % 4));
        Gradients ad = grad(loss, ps);
        Gradients fd = finite_diff_grad(loss, ps, 1e-5);
        REQUIRE(relative_gradient_error(ad, fd) <= 1e-6);
    }
}

TEST_CASE("gradient is linear in the loss", "[numcore]") {
    ParamStore ps = random_params({{"w1", {3, 3}}, {"b1", {3}}}, 77);
    Rng rng(4);
    Tensor x = Tensor::zeros({2, 3});
    for (auto& v : x.v) v = rng.normal();
    auto f = [&x](Tape& t) {
        return sum_all(relu(add_row_broadcast(matmul(t.constant(x), t.param("w1")), t.param("b1"))));
    };
    auto g = [&x](Tape& t) {
        Var h = matmul(t.constant(x), t.param("w1"));
        return sum_all(mul(h, h));
    };
    double a = 1.7, b = -0.4;
    auto combined = [&](Tape& t) { return add(scale(f(t), a), scale(g(t), b)); };
    Gradients gf = grad(f, ps), gg = grad(g, ps), gc = grad(combined, ps);
    for (size_t s = 0; s < gc.segments.size(); ++s)
        for (size_t i = 0; i < gc.segments[s].second.v.size(); ++i) {
            double expect = a * gf.segments[s].second.v[i] + b * gg.segments[s].second.v[i];
            REQUIRE(gc.segments[s].second.v[i] == Catch::Approx(expect).margin(1e-12));
        }
}

TEST_CASE("non-finite intermediate raises a numeric error naming the op", "[numcore]") {
    ParamStore ps;
    ps.add("theta", Tensor({1}, {1e308}));
    auto loss = [](Tape& t) {
        Var th = t.param("theta");
        return sum_all(mul(th, th));  // overflows to inf
    };
    try {
        grad(loss, ps);
        FAIL("expected NumericError");
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("mul") != std::string::npos);
    }
}

TEST_CASE("finite_diff_grad rejects non-positive step", "[numcore]") {
    ParamStore ps;
    ps.add("theta", Tensor({1}, {1.0}));
    auto loss = [](Tape& t) { return sum_all(t.param("theta")); };
    CHECK_THROWS_AS(finite_diff_grad(loss, ps, 0.0), ArgumentError);
    CHECK_THROWS_AS(finite_diff_grad(loss, ps, -1e-5), ArgumentError);
}

TEST_CASE("structural ops round-trip gradients", "[numcore]") {
    // slice/concat/gather/layernorm/softmax all exercised against FD
    for (uint64_t seed = 0; seed < 20; ++seed) {
        ParamStore ps = random_params(
            {{"table", {6, 4}}, {"gamma", {4}}, {"beta", {4}}, {"wq", {4, 4}}}, 300 + seed);
        auto loss = [](Tape& t) {
            Var emb = gather_rows(t.param("table"), {0, 2, 5, 1});
            Var h = layer_norm_rows(emb, t.param("gamma"), t.param("beta"));
            Var q = matmul(h, t.param("wq"));
            Var s = softmax_rows(matmul_nt(q, h));
            Var mixed = matmul(s, h);
            Var left = slice_cols(mixed, 0, 2);
            Var right = slice_cols(mixed, 2, 4);
            Var swapped = concat_cols({right, left});
            Var top = slice_rows(swapped, 0, 2);
            return mean_all(mul(top, top));
        };
        Gradients ad = grad(loss, ps);
        Gradients fd = finite_diff_grad(loss, ps, 1e-6);
        REQUIRE(relative_gradient_error(ad, fd) <= 1e-6);
    }
}

TEST_CASE("solve_spd value and gradient", "[numcore]") {
    for (uint64_t seed = 0; seed < 10; ++seed) {
        ParamStore ps = random_params({{"f", {5, 3}}, {"y", {5, 2}}}, 900 + seed);
        auto loss = [](Tape& t) {
            Var f = t.param("f");
            Var ff_t = matmul_nt(f, f);
            Tensor eye = Tensor::zeros({5, 5});
            for (int i = 0; i < 5; ++i) eye.at(i, i) = 0.1;
            Var A = add(ff_t, t.constant(eye));
            Var X = solve_spd(A, t.param("y"));
            return sum_all(mul(X, X));
        };
        Gradients ad = grad(loss, ps);
        Gradients fd = finite_diff_grad(loss, ps, 1e-6);
        REQUIRE(relative_gradient_error(ad, fd) <= 1e-6);
    }
}

TEST_CASE("flatten/unflatten is the identity", "[numcore]") {
    ParamStore ps = random_params({{"a", {3, 4}}, {"b", {7}}, {"c", {2, 2, 2}}}, 5);
    std::vector<double> flat = ps.flatten();
    ParamStore copy = ps;
    for (auto& [name, t] : copy.segments)
        for (auto& v : t.v) v = 0.0;
    copy.set_flat(flat);
    for (size_t s = 0; s < ps.segments.size(); ++s)
        REQUIRE(copy.segments[s].second.v == ps.segments[s].second.v);
}

TEST_CASE("param container round-trips bit-exactly", "[numcore]") {
    ParamStore ps = random_params({{"embed.tok", {9, 4}}, {"layer0.w", {4, 16}}}, 123);
    ps.seed = 0xdeadbeef;
    std::string path = "roundtrip_test.params";
    save_params(ps, path, "{\"kind\":\"test\"}");
    std::string meta;
    ParamStore back = load_params(path, &meta);
    CHECK(meta == "{\"kind\":\"test\"}");
    CHECK(back.seed == ps.seed);
    REQUIRE(back.same_layout(ps));
    for (size_t s = 0; s < ps.segments.size(); ++s) {
        const auto& a = ps.segments[s].second.v;
        const auto& b = back.segments[s].second.v;
        REQUIRE(std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0);
    }
    std::remove(path.c_str());
}

TEST_CASE("rng determinism and dirichlet normalization", "[numcore]") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) REQUIRE(a.uniform() == b.uniform());
    Rng c(7);
    auto w = c.dirichlet(5, 0.5);
    double s = 0.0;
    for (double x : w) {
        CHECK(x >= 0.0);
        s += x;
    }
    CHECK(s == Catch::Approx(1.0).margin(1e-12));
}
