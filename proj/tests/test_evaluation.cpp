#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "csl/error.hpp"
#include "csl/evaluation.hpp"
#include "csl/rng.hpp"

using namespace csl;

namespace {

EmbeddingBatch random_batch(std::size_t n, std::size_t d, int classes, Rng& rng) {
    std::vector<double> data(n * d);
    for (double& v : data) v = rng.uniform(-1.0, 1.0);
    std::vector<int> labels(n);
    for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<int>(i % classes);
    return {Tensor({n, d}, std::move(data)), std::move(labels)};
}

// reference mAP@R: per-query plain loops, no shared gram matrix
double reference_map(const EmbeddingBatch& batch) {
    const std::size_t n = batch.labels.size(), d = batch.vectors.dim(1);
    auto e = batch.vectors.data();
    auto cosine = [&](std::size_t a, std::size_t b) {
        double dot = 0, na = 0, nb = 0;
        for (std::size_t k = 0; k < d; ++k) {
            dot += e[a * d + k] * e[b * d + k];
            na += e[a * d + k] * e[a * d + k];
            nb += e[b * d + k] * e[b * d + k];
        }
        return dot / (std::sqrt(na) * std::sqrt(nb));
    };
    double total = 0.0;
    for (std::size_t q = 0; q < n; ++q) {
        std::vector<std::size_t> order;
        for (std::size_t i = 0; i < n; ++i)
            if (i != q) order.push_back(i);
        std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            const double sa = cosine(q, a), sb = cosine(q, b);
            if (sa != sb) return sa > sb;
            return a < b;
        });
        std::size_t r = 0;
        for (std::size_t i = 0; i < n; ++i)
            if (i != q && batch.labels[i] == batch.labels[q]) ++r;
        double hits = 0, ap = 0;
        for (std::size_t k = 0; k < r; ++k)
            if (batch.labels[order[k]] == batch.labels[q]) {
                hits += 1;
                ap += hits / static_cast<double>(k + 1);
            }
        total += ap / static_cast<double>(r);
    }
    return total / static_cast<double>(n);
}

}  // namespace

TEST_CASE("rank_by_cosine: a duplicate of the query ranks first") {
    EmbeddingBatch batch{Tensor({4, 3}, std::vector<double>{1, 2, 3, -1, 0, 1, 1, 2, 3, 0, 1, 0}),
                         {0, 1, 0, 1}};
    RankedRetrieval r = rank_by_cosine(batch, 0);
    CHECK(r.ordered_gallery.front() == 2);
    CHECK(r.relevance.front() == 1);
    CHECK(r.ordered_gallery.size() == 3);
}

TEST_CASE("rank_by_cosine: positive scaling of gallery rows keeps the ordering") {
    Rng rng(5);
    EmbeddingBatch batch = random_batch(12, 6, 3, rng);
    RankedRetrieval before = rank_by_cosine(batch, 4);

    EmbeddingBatch scaled = batch;
    std::vector<double> data(batch.vectors.data().begin(), batch.vectors.data().end());
    for (std::size_t i = 0; i < 12; ++i) {
        const double s = rng.uniform(0.1, 7.0);
        for (std::size_t k = 0; k < 6; ++k) data[i * 6 + k] *= s;
    }
    scaled.vectors = Tensor({12, 6}, std::move(data));
    RankedRetrieval after = rank_by_cosine(scaled, 4);
    CHECK(before.ordered_gallery == after.ordered_gallery);
}

TEST_CASE("rank_by_cosine: matches a brute-force sort on 50 random rows") {
    Rng rng(7);
    EmbeddingBatch batch = random_batch(50, 8, 5, rng);
    auto e = batch.vectors.data();
    for (std::size_t q = 0; q < 50; q += 7) {
        RankedRetrieval got = rank_by_cosine(batch, q);
        std::vector<std::size_t> want;
        for (std::size_t i = 0; i < 50; ++i)
            if (i != q) want.push_back(i);
        auto cosine = [&](std::size_t a, std::size_t b) {
            double dot = 0, na = 0, nb = 0;
            for (std::size_t k = 0; k < 8; ++k) {
                dot += e[a * 8 + k] * e[b * 8 + k];
                na += e[a * 8 + k] * e[a * 8 + k];
                nb += e[b * 8 + k] * e[b * 8 + k];
            }
            return dot / std::sqrt(na * nb);
        };
        std::sort(want.begin(), want.end(), [&](std::size_t a, std::size_t b) {
            const double sa = cosine(q, a), sb = cosine(q, b);
            if (sa != sb) return sa > sb;
            return a < b;
        });
        CHECK(got.ordered_gallery == want);
    }
}

TEST_CASE("rank_by_cosine: zero-norm rows are rejected by row number") {
    EmbeddingBatch batch{Tensor({3, 2}, std::vector<double>{1, 0, 0, 0, 0, 1}), {0, 0, 1}};
    CHECK_THROWS_WITH_AS(rank_by_cosine(batch, 0), doctest::Contains("row 1"), Error);
}

TEST_CASE("average_precision_at_r: spec values") {
    const std::vector<char> perfect{1, 1, 1, 0, 0};
    CHECK(average_precision_at_r(perfect, 3) == 1.0);

    const std::vector<char> mixed{1, 0, 1, 0};  // relevant at ranks 1 and 3
    CHECK(average_precision_at_r(mixed, 2) == doctest::Approx(0.5).epsilon(1e-12));

    const std::vector<char> misses{0, 0, 0, 1};
    CHECK(average_precision_at_r(misses, 3) == 0.0);

    CHECK_THROWS_AS(average_precision_at_r(mixed, 5), Error);
    CHECK_THROWS_AS(average_precision_at_r(mixed, 0), Error);
}

TEST_CASE("average_precision_at_r: bounded and monotone under rank improvement") {
    Rng rng(11);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t len = 2 + rng.below(12);
        std::vector<char> bits(len);
        for (auto& b : bits) b = rng.uniform() < 0.4 ? 1 : 0;
        const std::size_t r = 1 + rng.below(len);
        const double ap = average_precision_at_r(bits, r);
        CHECK(ap >= 0.0);
        CHECK(ap <= 1.0);

        // swap a relevant item one step earlier; AP@R must not decrease
        for (std::size_t k = 1; k < len; ++k)
            if (bits[k] == 1 && bits[k - 1] == 0) {
                std::vector<char> better = bits;
                std::swap(better[k], better[k - 1]);
                CHECK(average_precision_at_r(better, r) >= ap - 1e-15);
                break;
            }
    }
}

TEST_CASE("mean_ap_at_r: two tight well-separated classes retrieve perfectly") {
    std::vector<double> data;
    std::vector<int> labels;
    for (int i = 0; i < 3; ++i) {
        data.insert(data.end(), {10.0, 10.0});
        labels.push_back(0);
    }
    for (int i = 0; i < 4; ++i) {
        data.insert(data.end(), {-10.0, 10.0});
        labels.push_back(1);
    }
    EmbeddingBatch batch{Tensor({7, 2}, std::move(data)), std::move(labels)};
    CHECK(mean_ap_at_r(batch) == 1.0);
}

TEST_CASE("mean_ap_at_r: shuffled labels land on the permutation baseline") {
    Rng rng(13);
    const std::size_t n = 120;
    EmbeddingBatch batch = random_batch(n, 16, 2, rng);  // balanced 2 classes, random geometry
    double avg = 0.0;
    int runs = 8;
    for (int t = 0; t < runs; ++t) {
        rng.shuffle(batch.labels);
        avg += mean_ap_at_r(batch);
    }
    avg /= runs;

    // expected AP@R of a uniformly random ranking with R relevant among G:
    // E = p * [q + H_R (1-q) / R], p = R/G, q = (R-1)/(G-1)
    const double r = n / 2.0 - 1.0, g = n - 1.0;
    const double p = r / g, q = (r - 1.0) / (g - 1.0);
    double harmonic = 0.0;
    for (std::size_t k = 1; k <= static_cast<std::size_t>(r); ++k) harmonic += 1.0 / k;
    const double expected = p * (q + harmonic * (1.0 - q) / r);
    CHECK(avg == doctest::Approx(expected).epsilon(0.10));
}

TEST_CASE("mean_ap_at_r: equals the independent per-query reference on 60-item sets") {
    Rng rng(17);
    for (int trial = 0; trial < 10; ++trial) {
        EmbeddingBatch batch = random_batch(60, 5, 2 + trial % 4, rng);
        CHECK(mean_ap_at_r(batch) == reference_map(batch));
    }
}

TEST_CASE("mean_ap_at_r: invariant to orthogonal maps and per-vector positive scaling") {
    Rng rng(19);
    EmbeddingBatch batch = random_batch(24, 2, 3, rng);
    const double base = mean_ap_at_r(batch);

    const double c = std::cos(1.1), s = std::sin(1.1);
    std::vector<double> data(batch.vectors.data().begin(), batch.vectors.data().end());
    for (std::size_t i = 0; i < 24; ++i) {
        const double x = data[i * 2], y = data[i * 2 + 1];
        const double scale = rng.uniform(0.2, 5.0);
        data[i * 2] = scale * (c * x - s * y);
        data[i * 2 + 1] = scale * (s * x + c * y);
    }
    EmbeddingBatch moved{Tensor({24, 2}, std::move(data)), batch.labels};
    CHECK(mean_ap_at_r(moved) == doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("mean_ap_at_r: singleton class is an error naming the class") {
    EmbeddingBatch batch{Tensor({3, 2}, std::vector<double>{1, 0, 0, 1, 1, 1}), {0, 0, 7}};
    CHECK_THROWS_WITH_AS(mean_ap_at_r(batch), doctest::Contains("7"), Error);
}

TEST_CASE("mean_ap_at_r_for_queries: restricting queries reweights but keeps the gallery") {
    Rng rng(23);
    EmbeddingBatch batch = random_batch(30, 6, 3, rng);
    std::vector<std::size_t> newcomers;
    for (std::size_t i = 0; i < 30; ++i)
        if (batch.labels[i] == 2) newcomers.push_back(i);
    const double subset = mean_ap_at_r_for_queries(batch, newcomers);
    CHECK(subset >= 0.0);
    CHECK(subset <= 1.0);

    std::vector<std::size_t> all(30);
    std::iota(all.begin(), all.end(), 0);
    CHECK(mean_ap_at_r_for_queries(batch, all) == doctest::Approx(mean_ap_at_r(batch)).epsilon(1e-15));
}

TEST_CASE("omega_metrics: spec hand values") {
    SessionLog log;
    log.records = {{1, 0.9, 0.9, 0.9}, {2, 0.8, 0.9, 0.7}, {3, 0.6, 0.7, 0.5}};
    log.alpha_ideal_base = 0.9;
    log.alpha_ideal_all = 0.9;
    OmegaReport r = omega_metrics(log);
    CHECK(r.omega_base == doctest::Approx((0.8 / 0.9 + 0.6 / 0.9) / 2.0).epsilon(1e-12));
    CHECK(r.omega_base == doctest::Approx(0.77777777777777).epsilon(1e-10));
    CHECK(r.omega_new == doctest::Approx(0.8).epsilon(1e-12));
}

TEST_CASE("omega_metrics: perfect retention pins omega_base at 1") {
    SessionLog log;
    log.records = {{1, 0.85, 0.85, 0.85}, {2, 0.85, 0.5, 0.6}, {3, 0.85, 0.4, 0.55}};
    log.alpha_ideal_base = 0.85;
    log.alpha_ideal_all = 0.7;
    CHECK(omega_metrics(log).omega_base == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("omega_metrics: doubling the ideals halves base and all, leaves new fixed") {
    SessionLog log;
    log.records = {{1, 0.8, 0.8, 0.8}, {2, 0.7, 0.6, 0.65}, {3, 0.5, 0.55, 0.45}};
    log.alpha_ideal_base = 0.8;
    log.alpha_ideal_all = 0.75;
    OmegaReport a = omega_metrics(log);
    log.alpha_ideal_base *= 2.0;
    log.alpha_ideal_all *= 2.0;
    OmegaReport b = omega_metrics(log);
    CHECK(b.omega_base == doctest::Approx(a.omega_base / 2.0).epsilon(1e-12));
    CHECK(b.omega_all == doctest::Approx(a.omega_all / 2.0).epsilon(1e-12));
    CHECK(b.omega_new == a.omega_new);
}

TEST_CASE("omega_metrics: validation errors") {
    SessionLog log;
    log.records = {{1, 0.8, 0.8, 0.8}};
    log.alpha_ideal_base = log.alpha_ideal_all = 0.8;
    CHECK_THROWS_AS(omega_metrics(log), Error);  // T < 2

    log.records.push_back({3, 0.7, 0.7, 0.7});
    CHECK_THROWS_AS(omega_metrics(log), Error);  // gap in session indices

    log.records[1].session = 2;
    log.alpha_ideal_base = 0.0;
    CHECK_THROWS_AS(omega_metrics(log), Error);  // zero ideal
}
