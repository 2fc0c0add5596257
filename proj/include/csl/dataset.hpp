#ifndef CSL_DATASET_HPP
#define CSL_DATASET_HPP

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <utility>
#include <vector>

#include "csl/rng.hpp"
#include "csl/tensor.hpp"

namespace csl {

struct ImageSet {
    Tensor images;            // [N,C,H,W]
    std::vector<int> labels;  // length N
    int class_count = 0;

    std::size_t size() const { return labels.size(); }
    bool empty() const { return labels.empty(); }
};

// Loads an IDX image/label pair, optionally remapping raw labels (EMNIST
// case folding and friends). class_count is 1 + max label after remap.
ImageSet load_image_set(const std::filesystem::path& images_path,
                        const std::filesystem::path& labels_path,
                        const std::map<int, int>* label_remap = nullptr);

// Two-column text file: "raw_label new_label" per line, '#' comments allowed.
std::map<int, int> load_label_remap(const std::filesystem::path& path);

// Per-channel (v/255 - mean) / std. std entries must be strictly positive.
ImageSet normalize(const ImageSet& set, std::span<const double> mean, std::span<const double> std_dev);

// Per-class split holding out ~fraction of each class; deterministic per
// seed. Every class must have at least 2 items.
std::pair<ImageSet, ImageSet> stratified_split(const ImageSet& set, double fraction, std::uint64_t seed);

// Base/incremental class schedule for one experiment.
struct SessionPlan {
    std::vector<int> base_classes;       // ascending
    std::vector<int> incremental_order;  // session order
    std::uint64_t seed = 0;
};

SessionPlan make_session_plan(int class_count, std::uint64_t seed);

// Zero padding, random crop back to the original extent, then horizontal
// flip with the given probability. One (dy, dx, flip) draw per image.
Tensor augment(const Tensor& images, std::size_t pad, double flip_probability, Rng& rng);

// ---- assembly helpers for the session runner ----
ImageSet filter_classes(const ImageSet& set, std::span<const int> classes);
ImageSet concat(const ImageSet& a, const ImageSet& b);
// Keeps at most max_per_class items of each class (0 = keep all).
ImageSet cap_per_class(const ImageSet& set, std::size_t max_per_class, std::uint64_t seed);
ImageSet take_rows(const ImageSet& set, std::span<const std::size_t> rows);

}  // namespace csl

#endif
