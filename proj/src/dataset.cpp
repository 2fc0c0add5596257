#include "csl/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "csl/error.hpp"
#include "csl/idx.hpp"

namespace csl {

namespace {

// rng stream tags, one per operation that draws randomness
constexpr std::uint64_t kSplitStream = 0x51;
constexpr std::uint64_t kPlanStream = 0x9e;
constexpr std::uint64_t kCapStream = 0xca;

std::vector<std::vector<std::size_t>> indices_by_class(const ImageSet& set) {
    std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(set.class_count));
    for (std::size_t i = 0; i < set.labels.size(); ++i) {
        const int y = set.labels[i];
        if (y < 0 || y >= set.class_count)
            throw Error("label " + std::to_string(y) + " outside [0," + std::to_string(set.class_count) + ")");
        by_class[static_cast<std::size_t>(y)].push_back(i);
    }
    return by_class;
}

}  // namespace

ImageSet take_rows(const ImageSet& set, std::span<const std::size_t> rows) {
    const std::size_t item = set.images.numel() / std::max<std::size_t>(set.size(), 1);
    Shape shape = set.images.shape();
    shape[0] = rows.size();
    std::vector<double> data(rows.size() * item);
    std::vector<int> labels(rows.size());
    auto src = set.images.data();
    for (std::size_t t = 0; t < rows.size(); ++t) {
        std::copy_n(src.data() + rows[t] * item, item, data.data() + t * item);
        labels[t] = set.labels[rows[t]];
    }
    return ImageSet{Tensor(std::move(shape), std::move(data)), std::move(labels), set.class_count};
}

ImageSet load_image_set(const std::filesystem::path& images_path,
                        const std::filesystem::path& labels_path,
                        const std::map<int, int>* label_remap) {
    Tensor images = load_idx(images_path);
    Tensor raw_labels = load_idx(labels_path);
    if (images.ndim() != 4)
        throw FormatError(images_path.string() + " is not an IDX image file");
    if (raw_labels.ndim() != 1)
        throw FormatError(labels_path.string() + " is not an IDX label file");
    if (images.dim(0) != raw_labels.dim(0))
        throw FormatError("image count " + std::to_string(images.dim(0)) + " does not match label count " +
                          std::to_string(raw_labels.dim(0)));

    std::vector<int> labels(raw_labels.numel());
    int max_label = -1;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        int y = static_cast<int>(raw_labels.data()[i]);
        if (label_remap) {
            auto it = label_remap->find(y);
            if (it == label_remap->end())
                throw Error("label " + std::to_string(y) + " missing from the remap table");
            y = it->second;
        }
        labels[i] = y;
        max_label = std::max(max_label, y);
    }
    return ImageSet{std::move(images), std::move(labels), max_label + 1};
}

std::map<int, int> load_label_remap(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open label remap table " + path.string());
    std::map<int, int> remap;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        std::istringstream ls(line);
        int raw, mapped;
        if (ls >> raw) {
            if (!(ls >> mapped))
                throw FormatError(path.string() + ":" + std::to_string(lineno) + ": expected two labels");
            remap[raw] = mapped;
        }
    }
    return remap;
}

ImageSet normalize(const ImageSet& set, std::span<const double> mean, std::span<const double> std_dev) {
    const std::size_t channels = set.images.ndim() == 4 ? set.images.dim(1) : 1;
    if (mean.size() != channels || std_dev.size() != channels)
        throw DimensionError("normalize: need one mean/std per channel (" + std::to_string(channels) + ")");
    for (double s : std_dev)
        if (!(s > 0.0)) throw Error("normalize: standard deviation must be strictly positive");

    std::vector<double> data(set.images.data().begin(), set.images.data().end());
    const std::size_t plane = set.images.dim(2) * set.images.dim(3);
    const std::size_t n = set.images.dim(0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < channels; ++c) {
            double* p = data.data() + (i * channels + c) * plane;
            for (std::size_t j = 0; j < plane; ++j) p[j] = (p[j] / 255.0 - mean[c]) / std_dev[c];
        }
    return ImageSet{Tensor(set.images.shape(), std::move(data)), set.labels, set.class_count};
}

std::pair<ImageSet, ImageSet> stratified_split(const ImageSet& set, double fraction, std::uint64_t seed) {
    if (!(fraction > 0.0 && fraction < 1.0)) throw Error("stratified_split: fraction must lie in (0,1)");
    auto by_class = indices_by_class(set);

    std::string singletons;
    for (std::size_t c = 0; c < by_class.size(); ++c)
        if (by_class[c].size() == 1) singletons += (singletons.empty() ? "" : ", ") + std::to_string(c);
    if (!singletons.empty())
        throw Error("stratified_split: classes with a single item cannot be split: " + singletons);

    Rng rng = Rng(seed).derive(kSplitStream);
    std::vector<std::size_t> kept, held;
    for (auto& idx : by_class) {
        if (idx.empty()) continue;
        rng.shuffle(idx);
        const auto held_n = static_cast<std::size_t>(
            std::llround(fraction * static_cast<double>(idx.size())));
        held.insert(held.end(), idx.begin(), idx.begin() + held_n);
        kept.insert(kept.end(), idx.begin() + held_n, idx.end());
    }
    std::sort(kept.begin(), kept.end());
    std::sort(held.begin(), held.end());
    return {take_rows(set, kept), take_rows(set, held)};
}

SessionPlan make_session_plan(int class_count, std::uint64_t seed) {
    if (class_count < 4) throw Error("make_session_plan: need at least 4 classes");
    std::vector<int> classes(static_cast<std::size_t>(class_count));
    for (int c = 0; c < class_count; ++c) classes[static_cast<std::size_t>(c)] = c;
    Rng rng = Rng(seed).derive(kPlanStream);
    rng.shuffle(classes);

    const std::size_t base_n = static_cast<std::size_t>(class_count) / 2;
    SessionPlan plan;
    plan.seed = seed;
    plan.base_classes.assign(classes.begin(), classes.begin() + base_n);
    std::sort(plan.base_classes.begin(), plan.base_classes.end());
    plan.incremental_order.assign(classes.begin() + base_n, classes.end());
    return plan;
}

Tensor augment(const Tensor& images, std::size_t pad, double flip_probability, Rng& rng) {
    if (images.ndim() != 4) throw DimensionError("augment: expected [N,C,H,W]");
    if (flip_probability < 0.0 || flip_probability > 1.0)
        throw Error("augment: flip probability must lie in [0,1]");
    const std::size_t n = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
    std::vector<double> out(images.numel());
    auto src = images.data();
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t dy = static_cast<std::size_t>(rng.below(2 * pad + 1));
        const std::size_t dx = static_cast<std::size_t>(rng.below(2 * pad + 1));
        const bool flip = rng.uniform() < flip_probability;
        for (std::size_t ch = 0; ch < c; ++ch) {
            const double* in_plane = src.data() + (i * c + ch) * h * w;
            double* out_plane = out.data() + (i * c + ch) * h * w;
            for (std::size_t y = 0; y < h; ++y)
                for (std::size_t x = 0; x < w; ++x) {
                    // coordinates into the zero-padded image
                    const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y + dy) - static_cast<std::ptrdiff_t>(pad);
                    const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(x + dx) - static_cast<std::ptrdiff_t>(pad);
                    double v = 0.0;
                    if (sy >= 0 && sy < static_cast<std::ptrdiff_t>(h) && sx >= 0 && sx < static_cast<std::ptrdiff_t>(w))
                        v = in_plane[sy * w + sx];
                    out_plane[y * w + (flip ? w - 1 - x : x)] = v;
                }
        }
    }
    return Tensor(images.shape(), std::move(out));
}

ImageSet filter_classes(const ImageSet& set, std::span<const int> classes) {
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < set.labels.size(); ++i)
        if (std::find(classes.begin(), classes.end(), set.labels[i]) != classes.end()) rows.push_back(i);
    return take_rows(set, rows);
}

ImageSet concat(const ImageSet& a, const ImageSet& b) {
    if (a.empty()) return b;
    if (b.empty()) return a;
    Shape sa = a.images.shape(), sb = b.images.shape();
    if (Shape(sa.begin() + 1, sa.end()) != Shape(sb.begin() + 1, sb.end()))
        throw DimensionError("concat: item shapes differ, " + shape_str(sa) + " vs " + shape_str(sb));
    Shape shape = sa;
    shape[0] = sa[0] + sb[0];
    std::vector<double> data;
    data.reserve(a.images.numel() + b.images.numel());
    data.insert(data.end(), a.images.data().begin(), a.images.data().end());
    data.insert(data.end(), b.images.data().begin(), b.images.data().end());
    std::vector<int> labels = a.labels;
    labels.insert(labels.end(), b.labels.begin(), b.labels.end());
    return ImageSet{Tensor(std::move(shape), std::move(data)), std::move(labels),
                    std::max(a.class_count, b.class_count)};
}

ImageSet cap_per_class(const ImageSet& set, std::size_t max_per_class, std::uint64_t seed) {
    if (max_per_class == 0) return set;
    auto by_class = indices_by_class(set);
    Rng rng = Rng(seed).derive(kCapStream);
    std::vector<std::size_t> keep;
    for (auto& idx : by_class) {
        rng.shuffle(idx);
        const std::size_t n = std::min(idx.size(), max_per_class);
        keep.insert(keep.end(), idx.begin(), idx.begin() + n);
    }
    std::sort(keep.begin(), keep.end());
    return take_rows(set, keep);
}

}  // namespace csl
