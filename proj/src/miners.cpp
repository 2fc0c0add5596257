#include "csl/miners.hpp"

#include <Eigen/Core>
#include <cmath>

#include "csl/error.hpp"

namespace csl {

namespace {

void check_batch(const Tensor& embeddings, std::span<const int> labels) {
    if (embeddings.ndim() != 2)
        throw DimensionError("miner: embeddings must be [N,d], got " + shape_str(embeddings.shape()));
    if (embeddings.dim(0) != labels.size())
        throw DimensionError("miner: " + std::to_string(labels.size()) + " labels for " +
                             std::to_string(embeddings.dim(0)) + " embeddings");
}

}  // namespace

std::vector<double> pairwise_distances(const Tensor& embeddings) {
    const std::size_t n = embeddings.dim(0), d = embeddings.dim(1);
    using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    Eigen::Map<const RowMat> e(embeddings.data().data(), n, d);
    RowMat gram = e * e.transpose();
    std::vector<double> dist(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            const double sq = gram(i, i) + gram(j, j) - 2.0 * gram(i, j);
            dist[i * n + j] = std::sqrt(std::max(sq, 0.0));
        }
    return dist;
}

TripletIndexSet mine_semi_hard_triplets(const Tensor& embeddings, std::span<const int> labels,
                                        double margin) {
    check_batch(embeddings, labels);
    const std::size_t n = labels.size();
    const auto dist = pairwise_distances(embeddings);

    TripletIndexSet out;
    bool any_pair = false;
    for (std::size_t a = 0; a < n; ++a)
        for (std::size_t p = 0; p < n; ++p) {
            if (a == p || labels[a] != labels[p]) continue;
            any_pair = true;
            const double dap = dist[a * n + p];
            bool band_hit = false;
            std::size_t hardest = n;
            double hardest_d = 0.0;
            for (std::size_t neg = 0; neg < n; ++neg) {
                if (labels[neg] == labels[a]) continue;
                const double dan = dist[a * n + neg];
                if (dan > dap && dan < dap + margin) {
                    out.triples.push_back({a, p, neg});
                    band_hit = true;
                } else if (hardest == n || dan < hardest_d) {
                    hardest = neg;
                    hardest_d = dan;
                }
            }
            if (!band_hit && hardest < n) out.triples.push_back({a, p, hardest});
        }
    out.empty_flagged = !any_pair || out.triples.empty();
    return out;
}

PairIndexSet mine_margin_pairs(const Tensor& embeddings, std::span<const int> labels, double margin,
                               double pos_threshold) {
    check_batch(embeddings, labels);
    if (pos_threshold < 0.0) pos_threshold = 0.2 * margin;
    const std::size_t n = labels.size();
    const auto dist = pairwise_distances(embeddings);

    PairIndexSet out;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            const double d = dist[i * n + j];
            if (labels[i] == labels[j]) {
                if (d > pos_threshold) out.positive_pairs.emplace_back(i, j);
            } else if (d < margin) {
                out.negative_pairs.emplace_back(i, j);
            }
        }
    out.empty_flagged = out.positive_pairs.empty() && out.negative_pairs.empty();
    return out;
}

TripletIndexSet mine_angular_triplets(const Tensor& embeddings, std::span<const int> labels,
                                      double alpha_degrees) {
    check_batch(embeddings, labels);
    const std::size_t n = labels.size(), d = embeddings.dim(1);
    const auto dist = pairwise_distances(embeddings);
    const double alpha_rad = alpha_degrees * 3.14159265358979323846 / 180.0;
    const auto emb = embeddings.data();

    TripletIndexSet out;
    bool any_pair = false;
    for (std::size_t a = 0; a < n; ++a)
        for (std::size_t p = 0; p < n; ++p) {
            if (a == p || labels[a] != labels[p]) continue;
            any_pair = true;
            const double half_ap = 0.5 * dist[a * n + p];
            for (std::size_t neg = 0; neg < n; ++neg) {
                if (labels[neg] == labels[a]) continue;
                // angle at the negative subtended by the (a,p) segment:
                // tan(angle) = (|a-p|/2) / |midpoint - n|
                double mid_dist_sq = 0.0;
                for (std::size_t k = 0; k < d; ++k) {
                    const double m = 0.5 * (emb[a * d + k] + emb[p * d + k]) - emb[neg * d + k];
                    mid_dist_sq += m * m;
                }
                const double angle = std::atan2(half_ap, std::sqrt(mid_dist_sq));
                if (angle > alpha_rad) out.triples.push_back({a, p, neg});
            }
        }
    out.empty_flagged = !any_pair || out.triples.empty();
    return out;
}

}  // namespace csl
