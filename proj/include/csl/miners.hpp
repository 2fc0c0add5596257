#ifndef CSL_MINERS_HPP
#define CSL_MINERS_HPP

#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "csl/tensor.hpp"

// Online batch miners. Selection works on embedding values only (no
// gradients flow through mining) and output index lists are emitted in
// ascending (anchor, positive, negative) order so results are deterministic.

namespace csl {

struct TripletIndexSet {
    struct Triple {
        std::size_t anchor, positive, negative;
    };
    std::vector<Triple> triples;
    // No valid anchor-positive pair existed in the batch at all.
    bool empty_flagged = false;
};

struct PairIndexSet {
    std::vector<std::pair<std::size_t, std::size_t>> positive_pairs;
    std::vector<std::pair<std::size_t, std::size_t>> negative_pairs;
    bool empty_flagged = false;
};

// Semi-hard negatives: for every ordered same-class (a,p), keep negatives in
// the band d(a,p) < d(a,n) < d(a,p) + margin. When the band is empty the
// hardest (closest) negative substitutes, so homogeneous geometry still
// yields usable triples.
TripletIndexSet mine_semi_hard_triplets(const Tensor& embeddings, std::span<const int> labels,
                                        double margin);

// Violating pairs only: positive pairs further apart than pos_threshold,
// negative pairs closer than margin. pos_threshold < 0 selects the default
// 0.2 * margin.
PairIndexSet mine_margin_pairs(const Tensor& embeddings, std::span<const int> labels, double margin,
                               double pos_threshold = -1.0);

// Keeps triples whose angle at the negative (seen from the anchor-positive
// midpoint) exceeds alpha_degrees.
TripletIndexSet mine_angular_triplets(const Tensor& embeddings, std::span<const int> labels,
                                      double alpha_degrees);

// Full pairwise Euclidean distance matrix, row-major [n*n].
std::vector<double> pairwise_distances(const Tensor& embeddings);

}  // namespace csl

#endif
