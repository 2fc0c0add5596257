#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "csl/error.hpp"
#include "csl/ops.hpp"
#include "csl/optim.hpp"
#include "csl/rng.hpp"
#include "csl/tensor.hpp"

using namespace csl;

namespace {

Tensor random_param(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    std::vector<double> data(shape_numel(shape));
    for (double& v : data) v = rng.uniform(lo, hi);
    return Tensor(std::move(shape), std::move(data), true);
}

}  // namespace

TEST_CASE("conv2d: identity-spatial kernel scales input") {
    Tensor x({1, 1, 3, 3}, std::vector<double>(9, 1.0));
    Tensor k({1, 1, 1, 1}, std::vector<double>{2.0});
    Tensor y = conv2d(x, k, 1, 0);
    CHECK(y.shape() == Shape{1, 1, 3, 3});
    for (double v : y.data()) CHECK(v == 2.0);
}

TEST_CASE("conv2d: hand dot product on 2x2") {
    Tensor x({1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4});
    Tensor k({1, 1, 2, 2}, std::vector<double>{1, 0, 0, 1});
    Tensor y = conv2d(x, k, 1, 0);
    CHECK(y.shape() == Shape{1, 1, 1, 1});
    CHECK(y.value() == 5.0);
}

TEST_CASE("conv2d: kernel gradient matches central differences on random 2x3x8x8") {
    Rng rng(7);
    Tensor x = random_param({2, 3, 8, 8}, rng);
    x.set_requires_grad(false);
    Tensor k = random_param({4, 3, 3, 3}, rng);
    auto loss = [&] { return sum(conv2d(x, k, 1, 1)); };
    const double err = finite_diff_check(loss, {{"kernel", k}}, 1e-5);
    CHECK(err < 1e-6);
}

TEST_CASE("conv2d: input gradient and stride/padding shapes") {
    Rng rng(21);
    Tensor x = random_param({1, 2, 6, 6}, rng);
    Tensor k = random_param({3, 2, 3, 3}, rng);
    Tensor y = conv2d(x, k, 2, 1);
    CHECK(y.shape() == Shape{1, 3, 3, 3});
    auto loss = [&] { return mean(conv2d(x, k, 2, 1) * conv2d(x, k, 2, 1)); };
    CHECK(finite_diff_check(loss, {{"x", x}, {"k", k}}, 1e-5) < 1e-6);
}

TEST_CASE("conv2d: channel mismatch raises a dimension error") {
    Tensor x({1, 2, 4, 4}, 0.0);
    Tensor k({1, 3, 3, 3}, 0.0);
    CHECK_THROWS_AS(conv2d(x, k, 1, 0), DimensionError);
}

TEST_CASE("relu, softmax, sigmoid basics") {
    Tensor x({3}, std::vector<double>{-1, 0, 2});
    Tensor y = relu(x);
    CHECK(y.data()[0] == 0.0);
    CHECK(y.data()[1] == 0.0);
    CHECK(y.data()[2] == 2.0);

    Tensor logits({1, 2}, std::vector<double>{0, 0});
    Tensor s = softmax_rows(logits);
    CHECK(s.data()[0] == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(s.data()[1] == doctest::Approx(0.5).epsilon(1e-15));

    Rng rng(3);
    Tensor z = random_param({4, 5}, rng, -30.0, 30.0);
    Tensor sig = sigmoid(z);
    for (double v : sig.data()) {
        CHECK(v > 0.0);
        CHECK(v < 1.0);
    }
    Tensor sm = softmax_rows(z);
    for (std::size_t i = 0; i < 4; ++i) {
        double row = 0.0;
        for (std::size_t j = 0; j < 5; ++j) row += sm.data()[i * 5 + j];
        CHECK(row == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("max_pool2d: value and subgradient routing") {
    Tensor x({1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4}, true);
    Tensor y = max_pool2d(x);
    CHECK(y.shape() == Shape{1, 1, 1, 1});
    CHECK(y.value() == 4.0);
    sum(y).backward();
    auto g = x.grad();
    CHECK(g[0] == 0.0);
    CHECK(g[1] == 0.0);
    CHECK(g[2] == 0.0);
    CHECK(g[3] == 1.0);
}

TEST_CASE("max_pool2d: matches brute-force window maxima away from ties") {
    Rng rng(11);
    Tensor x = random_param({2, 3, 6, 6}, rng);
    Tensor y = max_pool2d(x);
    CHECK(y.shape() == Shape{2, 3, 3, 3});
    auto xd = x.data();
    auto yd = y.data();
    for (std::size_t p = 0; p < 6; ++p)
        for (std::size_t ho = 0; ho < 3; ++ho)
            for (std::size_t wo = 0; wo < 3; ++wo) {
                double m = -1e30;
                for (std::size_t di = 0; di < 2; ++di)
                    for (std::size_t dj = 0; dj < 2; ++dj)
                        m = std::max(m, xd[p * 36 + (ho * 2 + di) * 6 + wo * 2 + dj]);
                CHECK(yd[(p * 3 + ho) * 3 + wo] == m);
            }
    auto loss = [&] { return sum(max_pool2d(x)); };
    CHECK(finite_diff_check(loss, {{"x", x}}, 1e-7) < 1e-4);
}

TEST_CASE("linear and matmul gradients") {
    Rng rng(5);
    Tensor x = random_param({4, 3}, rng);
    Tensor w = random_param({2, 3}, rng);
    Tensor b = random_param({2}, rng);
    auto loss = [&] { return mean(linear(x, w, b) * linear(x, w, b)); };
    CHECK(finite_diff_check(loss, {{"x", x}, {"w", w}, {"b", b}}, 1e-5) < 1e-6);

    Tensor a = random_param({3, 4}, rng);
    Tensor c = random_param({4, 2}, rng);
    auto loss2 = [&] { return sum(matmul(a, c)); };
    CHECK(finite_diff_check(loss2, {{"a", a}, {"c", c}}, 1e-5) < 1e-6);

    Tensor d = random_param({3, 4}, rng);
    auto loss3 = [&] { return sum(matmul_nt(a, d) * matmul_nt(a, d)); };
    CHECK(finite_diff_check(loss3, {{"a", a}, {"d", d}}, 1e-5) < 1e-6);
}

TEST_CASE("elementwise, reductions and row ops pass finite differences") {
    Rng rng(13);
    Tensor a = random_param({4, 6}, rng, 0.2, 1.0);
    Tensor b = random_param({4, 6}, rng, 0.2, 1.0);
    Tensor v = random_param({4}, rng, 0.5, 1.5);
    Tensor r = random_param({6}, rng);
    auto loss = [&] {
        Tensor t = mul_rowwise(a * b + a - b, v);
        t = sub_rowvec(t, r);
        return mean(t * t) + sum(log(clamp_min(a, 0.3))) + mean(csl::sqrt(a)) + sum(reciprocal(b)) +
               mean(csl::exp(row_sum(a) / 6.0)) + sum(sigmoid(b));
    };
    const double err = finite_diff_check(loss, {{"a", a}, {"b", b}, {"v", v}, {"r", r}}, 1e-5);
    CHECK(err < 1e-4);
}

TEST_CASE("gather/take/log_softmax gradients") {
    Rng rng(17);
    Tensor x = random_param({5, 4}, rng);
    std::vector<std::size_t> rows{0, 2, 2, 4};
    std::vector<std::size_t> cols{1, 3, 0, 2, 1};
    auto loss = [&] {
        Tensor g = gather_rows(x, rows);
        Tensor lp = log_softmax_rows(x);
        return mean(g * g) - mean(take_per_row(lp, cols));
    };
    CHECK(finite_diff_check(loss, {{"x", x}}, 1e-5) < 1e-4);
}

TEST_CASE("huber flat and quadratic regions") {
    std::vector<double> target{0.0, 0.0, 0.0};
    Tensor x({3}, std::vector<double>{0.5, 2.0, -3.0}, true);
    Tensor h = huber_to_const(x, target, 1.0);
    CHECK(h.data()[0] == doctest::Approx(0.125));
    CHECK(h.data()[1] == doctest::Approx(1.5));
    CHECK(h.data()[2] == doctest::Approx(2.5));
    auto loss = [&] { return sum(huber_to_const(x, target, 1.0)); };
    CHECK(finite_diff_check(loss, {{"x", x}}, 1e-6) < 1e-4);
}

TEST_CASE("backward accumulates through shared subexpressions and respects detach") {
    Tensor x({1}, std::vector<double>{3.0}, true);
    Tensor y = x * x + x;
    y.backward();
    CHECK(x.grad()[0] == doctest::Approx(7.0).epsilon(1e-15));

    Tensor z({1}, std::vector<double>{2.0}, true);
    Tensor w = z.detach() * z;  // only one path carries gradient
    w.backward();
    CHECK(z.grad()[0] == doctest::Approx(2.0).epsilon(1e-15));
}

TEST_CASE("two-layer scalar chain matches the closed-form product rule") {
    const double w1v = 0.7, w2v = -1.3, xv = 0.9;
    Tensor w1({1}, std::vector<double>{w1v}, true);
    Tensor w2({1}, std::vector<double>{w2v}, true);
    Tensor x({1}, std::vector<double>{xv});
    Tensor y = sigmoid(w2 * relu(w1 * x));
    y.backward();

    const double pre = w1v * xv;  // positive, so relu is identity here
    const double s = 1.0 / (1.0 + std::exp(-w2v * pre));
    const double ds = s * (1.0 - s);
    CHECK(w2.grad()[0] == doctest::Approx(ds * pre).epsilon(1e-12));
    CHECK(w1.grad()[0] == doctest::Approx(ds * w2v * xv).epsilon(1e-12));
}

TEST_CASE("adam: zero gradient is the identity on parameters") {
    Rng rng(23);
    Tensor p = random_param({3, 3}, rng);
    const std::vector<double> before(p.data().begin(), p.data().end());
    std::vector<NamedParam> params{{"p", p}};
    AdamState state;
    zero_grads(params);
    p.mutable_grad();  // allocate an all-zero grad buffer
    adam_step(params, state);
    CHECK(state.step_count == 1);
    for (std::size_t i = 0; i < before.size(); ++i) CHECK(p.data()[i] == before[i]);
}

TEST_CASE("adam: first step with unit gradient moves by about the learning rate") {
    Tensor p({1}, std::vector<double>{1.0}, true);
    p.mutable_grad()[0] = 1.0;
    std::vector<NamedParam> params{{"p", p}};
    AdamState state;
    adam_step(params, state);
    // bias-corrected first step: lr * 1 / (1 + eps)
    CHECK(p.data()[0] == doctest::Approx(1.0 - 1e-3).epsilon(1e-6));
}

TEST_CASE("adam: matches a scalar simulation under constant positive gradient") {
    Tensor p({1}, std::vector<double>{0.5}, true);
    std::vector<NamedParam> params{{"p", p}};
    AdamState state;

    double sim = 0.5, m = 0.0, v = 0.0;
    double prev = 0.5;
    for (int t = 1; t <= 5; ++t) {
        zero_grads(params);
        p.mutable_grad()[0] = 2.0;
        adam_step(params, state);

        m = 0.9 * m + 0.1 * 2.0;
        v = 0.999 * v + 0.001 * 4.0;
        const double mhat = m / (1.0 - std::pow(0.9, t));
        const double vhat = v / (1.0 - std::pow(0.999, t));
        sim -= 1e-3 * mhat / (std::sqrt(vhat) + 1e-8);

        CHECK(p.data()[0] == doctest::Approx(sim).epsilon(1e-12));
        CHECK(p.data()[0] < prev);
        prev = p.data()[0];
    }
}

TEST_CASE("adam: non-finite gradient aborts naming the parameter") {
    Tensor p({2}, std::vector<double>{0.0, 0.0}, true);
    p.mutable_grad()[1] = std::numeric_limits<double>::quiet_NaN();
    std::vector<NamedParam> params{{"weights", p}};
    AdamState state;
    CHECK_THROWS_WITH_AS(adam_step(params, state), doctest::Contains("weights"), TrainingAbort);
}

TEST_CASE("finite_diff_check: quadratic half x^2 at x=3") {
    Tensor x({1}, std::vector<double>{3.0}, true);
    auto loss = [&] { return 0.5 * (x * x); };
    CHECK(finite_diff_check(loss, {{"x", x}}, 1e-5) < 1e-9);
}

TEST_CASE("finite_diff_check: constant loss reports zero error") {
    Tensor x({4}, std::vector<double>{1, 2, 3, 4}, true);
    auto loss = [&] { return Tensor::scalar(7.0) + 0.0 * sum(x) * 0.0; };
    // the multiply by zero keeps x in the graph while the value stays flat
    CHECK(finite_diff_check(loss, {{"x", x}}, 1e-5) == 0.0);
}

TEST_CASE("no-grad guard suppresses graph construction") {
    Tensor x({2}, std::vector<double>{1.0, 2.0}, true);
    Tensor y;
    {
        NoGradGuard guard;
        y = sum(x * x);
    }
    CHECK_FALSE(y.needs_grad());
}
