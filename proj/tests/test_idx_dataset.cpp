#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "csl/dataset.hpp"
#include "csl/error.hpp"
#include "csl/idx.hpp"
#include "csl/rng.hpp"

using namespace csl;

namespace {

ImageSet tiny_set(const std::vector<int>& labels, std::uint64_t seed = 1, std::size_t hw = 2) {
    Rng rng(seed);
    std::vector<double> data(labels.size() * hw * hw);
    for (double& v : data) v = std::floor(rng.uniform(0, 256));
    int classes = 0;
    for (int y : labels) classes = std::max(classes, y + 1);
    return ImageSet{Tensor({labels.size(), 1, hw, hw}, std::move(data)), labels, classes};
}

}  // namespace

TEST_CASE("parse_idx: zero-item file yields an empty tensor") {
    std::vector<std::uint8_t> bytes{0, 0, 8, 3, 0, 0, 0, 0, 0, 0, 0, 2, 0, 0, 0, 2};
    Tensor t = parse_idx(bytes);
    CHECK(t.shape() == Shape{0, 1, 2, 2});
    CHECK(t.numel() == 0);
}

TEST_CASE("parse_idx: hand-built 2-image 2x2 file") {
    std::vector<std::uint8_t> bytes{0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2,
                                    1, 2, 3, 4, 250, 251, 252, 253};
    Tensor t = parse_idx(bytes);
    CHECK(t.shape() == Shape{2, 1, 2, 2});
    const std::vector<double> expect{1, 2, 3, 4, 250, 251, 252, 253};
    for (std::size_t i = 0; i < 8; ++i) CHECK(t.data()[i] == expect[i]);
}

TEST_CASE("parse_idx: truncated payload reports the failing offset") {
    std::vector<std::uint8_t> bytes{0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2, 1, 2, 3};
    try {
        parse_idx(bytes);
        FAIL("expected FormatError");
    } catch (const FormatError& e) {
        CHECK(e.byte_offset == bytes.size());
    }
}

TEST_CASE("parse_idx: bad magic and trailing garbage rejected") {
    std::vector<std::uint8_t> bad{0, 0, 9, 9, 0, 0, 0, 0};
    CHECK_THROWS_AS(parse_idx(bad), FormatError);
    std::vector<std::uint8_t> trailing{0, 0, 8, 1, 0, 0, 0, 1, 7, 99};
    CHECK_THROWS_AS(parse_idx(trailing), FormatError);
}

TEST_CASE("parse_idx after serialize_idx is the identity on random small tensors") {
    Rng rng(42);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t n = 1 + rng.below(5), h = 1 + rng.below(6), w = 1 + rng.below(6);
        std::vector<double> pix(n * h * w);
        for (double& v : pix) v = std::floor(rng.uniform(0, 256));
        Tensor img({n, 1, h, w}, pix);
        Tensor back = parse_idx(serialize_idx_images(img));
        CHECK(back.shape() == img.shape());
        CHECK(std::equal(back.data().begin(), back.data().end(), img.data().begin()));

        std::vector<int> labels(n);
        for (int& y : labels) y = static_cast<int>(rng.below(10));
        Tensor lt = parse_idx(serialize_idx_labels(labels));
        CHECK(lt.shape() == Shape{n});
        for (std::size_t i = 0; i < n; ++i) CHECK(static_cast<int>(lt.data()[i]) == labels[i]);
    }
}

TEST_CASE("normalize: hand values for the dataset constants") {
    ImageSet set = tiny_set({0}, 3, 1);
    const double m = 0.1307, s = 0.3801;

    set.images.mutable_data()[0] = 255.0 * m;
    ImageSet centered = normalize(set, {&m, 1}, {&s, 1});
    CHECK(centered.images.data()[0] == doctest::Approx(0.0).epsilon(1e-12));

    set.images.mutable_data()[0] = 0.0;
    ImageSet low = normalize(set, {&m, 1}, {&s, 1});
    CHECK(low.images.data()[0] == doctest::Approx(-m / s).epsilon(1e-12));
    CHECK(low.images.data()[0] == doctest::Approx(-0.34385).epsilon(1e-4));

    const double fm = 0.2860, fs = 0.3530;
    set.images.mutable_data()[0] = 255.0;
    ImageSet fashion = normalize(set, {&fm, 1}, {&fs, 1});
    CHECK(fashion.images.data()[0] == doctest::Approx((1.0 - fm) / fs).epsilon(1e-12));
}

TEST_CASE("normalize: zero std rejected") {
    ImageSet set = tiny_set({0, 1});
    const double m = 0.0, s = 0.0;
    CHECK_THROWS_AS(normalize(set, {&m, 1}, {&s, 1}), Error);
}

TEST_CASE("stratified_split: exact divisibility and determinism") {
    std::vector<int> labels;
    for (int c = 0; c < 3; ++c)
        for (int i = 0; i < 10; ++i) labels.push_back(c);
    ImageSet set = tiny_set(labels, 9);

    auto [kept, held] = stratified_split(set, 0.2, 77);
    CHECK(held.size() == 6);
    CHECK(kept.size() == 24);
    for (int c = 0; c < 3; ++c)
        CHECK(std::count(held.labels.begin(), held.labels.end(), c) == 2);

    auto [kept2, held2] = stratified_split(set, 0.2, 77);
    CHECK(std::equal(kept.images.data().begin(), kept.images.data().end(), kept2.images.data().begin()));
    CHECK(held.labels == held2.labels);

    auto [kept3, held3] = stratified_split(set, 0.2, 78);
    const bool same = std::equal(held.images.data().begin(), held.images.data().end(),
                                 held3.images.data().begin());
    CHECK_FALSE(same);
}

TEST_CASE("stratified_split: held-out counts stay within floor/ceil of the fraction") {
    Rng rng(1234);
    for (int trial = 0; trial < 30; ++trial) {
        std::vector<int> labels;
        const int classes = 2 + static_cast<int>(rng.below(4));
        std::vector<int> per_class(classes);
        for (int c = 0; c < classes; ++c) {
            per_class[c] = 2 + static_cast<int>(rng.below(17));
            for (int i = 0; i < per_class[c]; ++i) labels.push_back(c);
        }
        const double fraction = rng.uniform(0.1, 0.5);
        ImageSet set = tiny_set(labels, 1000 + trial);
        auto [kept, held] = stratified_split(set, fraction, trial);
        for (int c = 0; c < classes; ++c) {
            const auto got = std::count(held.labels.begin(), held.labels.end(), c);
            const double want = fraction * per_class[c];
            CHECK(got >= std::floor(want) - 0);
            CHECK(got <= std::ceil(want) + 0);
            CHECK(std::abs(got - want) <= 1.0);
        }
        CHECK(kept.size() + held.size() == labels.size());
    }
}

TEST_CASE("stratified_split: singleton class is an error listing the class") {
    ImageSet set = tiny_set({0, 0, 1});
    CHECK_THROWS_WITH_AS(stratified_split(set, 0.2, 1), doctest::Contains("1"), Error);
}

TEST_CASE("make_session_plan: half split for 10 and 26 classes") {
    SessionPlan p10 = make_session_plan(10, 5);
    CHECK(p10.base_classes.size() == 5);
    CHECK(p10.incremental_order.size() == 5);

    SessionPlan p26 = make_session_plan(26, 5);
    CHECK(p26.base_classes.size() == 13);
    CHECK(p26.incremental_order.size() == 13);
}

TEST_CASE("make_session_plan: partition property over 100 seeds") {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        SessionPlan plan = make_session_plan(9, seed);
        std::set<int> all(plan.base_classes.begin(), plan.base_classes.end());
        for (int c : plan.incremental_order) {
            CHECK(all.insert(c).second);  // no overlap with base or duplicates
        }
        CHECK(all.size() == 9);
        CHECK(*all.begin() == 0);
        CHECK(*all.rbegin() == 8);
        CHECK(std::is_sorted(plan.base_classes.begin(), plan.base_classes.end()));
    }
    // identical seeds agree, different seeds eventually differ
    CHECK(make_session_plan(10, 3).incremental_order == make_session_plan(10, 3).incremental_order);
    bool any_diff = false;
    for (std::uint64_t s = 0; s < 10 && !any_diff; ++s)
        any_diff = make_session_plan(10, s).incremental_order != make_session_plan(10, s + 1).incremental_order;
    CHECK(any_diff);
}

TEST_CASE("augment: identity at pad 0 / probability 0, involution under forced flip") {
    ImageSet set = tiny_set({0, 1, 0}, 33, 5);
    Rng rng(8);
    Tensor same = augment(set.images, 0, 0.0, rng);
    CHECK(std::equal(same.data().begin(), same.data().end(), set.images.data().begin()));

    Rng rng_a(9), rng_b(10);
    Tensor once = augment(set.images, 0, 1.0, rng_a);
    Tensor twice = augment(once, 0, 1.0, rng_b);
    CHECK(std::equal(twice.data().begin(), twice.data().end(), set.images.data().begin()));
}

TEST_CASE("augment: crop offsets cover [0, 2*pad] roughly uniformly") {
    const std::size_t pad = 2;
    const std::size_t images = 10000;
    // one-hot corner pixel makes the applied offset recoverable
    std::vector<double> data(images * 5 * 5, 0.0);
    Tensor batch({images, 1, 5, 5}, std::move(data));
    // mark the padded-center so every crop keeps it visible: use pixel (2,2)
    for (std::size_t i = 0; i < images; ++i) batch.mutable_data()[i * 25 + 2 * 5 + 2] = 200.0;

    Rng rng(77);
    Tensor shifted = augment(batch, pad, 0.0, rng);
    std::vector<int> dy_hist(2 * pad + 1, 0), dx_hist(2 * pad + 1, 0);
    for (std::size_t i = 0; i < images; ++i) {
        auto plane = shifted.data().subspan(i * 25, 25);
        for (std::size_t y = 0; y < 5; ++y)
            for (std::size_t x = 0; x < 5; ++x)
                if (plane[y * 5 + x] == 200.0) {
                    // pixel moved from (2,2) to (2 - (dy - pad), ...)
                    dy_hist[2 + pad - y] += 1;
                    dx_hist[2 + pad - x] += 1;
                }
    }
    for (std::size_t k = 0; k <= 2 * pad; ++k) {
        CHECK(dy_hist[k] > static_cast<int>(images / (2 * pad + 1) * 0.9));
        CHECK(dy_hist[k] < static_cast<int>(images / (2 * pad + 1) * 1.1));
        CHECK(dx_hist[k] > static_cast<int>(images / (2 * pad + 1) * 0.9));
        CHECK(dx_hist[k] < static_cast<int>(images / (2 * pad + 1) * 1.1));
    }
}

TEST_CASE("filter/concat/cap helpers") {
    ImageSet set = tiny_set({0, 1, 2, 1, 0, 2, 1}, 3);
    const int wanted[] = {1, 2};
    ImageSet sub = filter_classes(set, wanted);
    CHECK(sub.size() == 5);
    for (int y : sub.labels) CHECK((y == 1 || y == 2));

    ImageSet both = concat(sub, filter_classes(set, std::vector<int>{0}));
    CHECK(both.size() == 7);

    ImageSet capped = cap_per_class(set, 1, 4);
    CHECK(capped.size() == 3);
    std::set<int> seen(capped.labels.begin(), capped.labels.end());
    CHECK(seen == std::set<int>{0, 1, 2});
}
