#include "csl/evaluation.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numeric>

#include "csl/error.hpp"

namespace csl {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// rows scaled to unit norm; throws naming any zero row
RowMat unit_rows(const EmbeddingBatch& batch) {
    if (batch.vectors.ndim() != 2)
        throw DimensionError("evaluation: embeddings must be [N,d], got " + shape_str(batch.vectors.shape()));
    if (batch.vectors.dim(0) != batch.labels.size())
        throw DimensionError("evaluation: label count does not match embedding rows");
    const std::size_t n = batch.vectors.dim(0), d = batch.vectors.dim(1);
    Eigen::Map<const RowMat> e(batch.vectors.data().data(), n, d);
    RowMat unit(n, d);
    for (std::size_t i = 0; i < n; ++i) {
        const double norm = e.row(i).norm();
        if (!(norm > 0.0)) throw Error("zero-norm embedding at row " + std::to_string(i));
        unit.row(i) = e.row(i) / norm;
    }
    return unit;
}

void ranked_for_query(const RowMat& unit, const std::vector<int>& labels, std::size_t query,
                      RankedRetrieval& out) {
    const std::size_t n = labels.size();
    Eigen::VectorXd sims = unit * unit.row(query).transpose();
    out.query = query;
    out.ordered_gallery.clear();
    out.ordered_gallery.reserve(n - 1);
    for (std::size_t i = 0; i < n; ++i)
        if (i != query) out.ordered_gallery.push_back(i);
    std::stable_sort(out.ordered_gallery.begin(), out.ordered_gallery.end(),
                     [&](std::size_t a, std::size_t b) {
                         if (sims[a] != sims[b]) return sims[a] > sims[b];
                         return a < b;
                     });
    out.relevance.resize(out.ordered_gallery.size());
    for (std::size_t k = 0; k < out.ordered_gallery.size(); ++k)
        out.relevance[k] = labels[out.ordered_gallery[k]] == labels[query] ? 1 : 0;
}

double map_over_queries(const EmbeddingBatch& batch, std::span<const std::size_t> queries) {
    const RowMat unit = unit_rows(batch);
    const std::size_t n = batch.labels.size();

    std::vector<std::size_t> class_total(0);
    for (int y : batch.labels) {
        if (y < 0) throw Error("negative class label in evaluation batch");
        if (static_cast<std::size_t>(y) >= class_total.size()) class_total.resize(y + 1, 0);
        ++class_total[static_cast<std::size_t>(y)];
    }

    RankedRetrieval ranked;
    double total = 0.0;
    for (std::size_t q : queries) {
        if (q >= n) throw DimensionError("query index out of range");
        const std::size_t r = class_total[static_cast<std::size_t>(batch.labels[q])] - 1;
        if (r == 0)
            throw Error("class " + std::to_string(batch.labels[q]) +
                        " has a single item; every query needs a same-class gallery item");
        ranked_for_query(unit, batch.labels, q, ranked);
        total += average_precision_at_r(ranked.relevance, r);
    }
    return total / static_cast<double>(queries.size());
}

}  // namespace

RankedRetrieval rank_by_cosine(const EmbeddingBatch& batch, std::size_t query_index) {
    const RowMat unit = unit_rows(batch);
    if (query_index >= batch.labels.size()) throw DimensionError("query index out of range");
    RankedRetrieval out;
    ranked_for_query(unit, batch.labels, query_index, out);
    return out;
}

double average_precision_at_r(std::span<const char> relevance_bits, std::size_t r) {
    if (r < 1) throw Error("average_precision_at_r: R must be at least 1");
    if (r > relevance_bits.size())
        throw Error("average_precision_at_r: R = " + std::to_string(r) + " exceeds the gallery size " +
                    std::to_string(relevance_bits.size()));
    double hits = 0.0, total = 0.0;
    for (std::size_t k = 0; k < r; ++k) {
        if (!relevance_bits[k]) continue;
        hits += 1.0;
        total += hits / static_cast<double>(k + 1);  // P@k * Rel@k
    }
    return total / static_cast<double>(r);
}

double mean_ap_at_r(const EmbeddingBatch& batch) {
    std::vector<std::size_t> all(batch.labels.size());
    std::iota(all.begin(), all.end(), 0);
    if (all.empty()) throw Error("mean_ap_at_r: empty batch");
    return map_over_queries(batch, all);
}

double mean_ap_at_r_for_queries(const EmbeddingBatch& batch, std::span<const std::size_t> queries) {
    if (queries.empty()) throw Error("mean_ap_at_r_for_queries: no query rows given");
    return map_over_queries(batch, queries);
}

OmegaReport omega_metrics(const SessionLog& log) {
    const std::size_t t = log.records.size();
    if (t < 2) throw Error("omega_metrics: need at least the base session plus one incremental session");
    for (std::size_t i = 0; i < t; ++i)
        if (log.records[i].session != i + 1)
            throw Error("omega_metrics: session indices must run contiguously from 1");
    if (!(log.alpha_ideal_base > 0.0) || !(log.alpha_ideal_all > 0.0))
        throw Error("omega_metrics: ideal scores must be positive");

    OmegaReport out;
    for (std::size_t i = 1; i < t; ++i) {
        out.omega_base += log.records[i].alpha_base / log.alpha_ideal_base;
        out.omega_new += log.records[i].alpha_new;
        out.omega_all += log.records[i].alpha_all / log.alpha_ideal_all;
    }
    const double denom = static_cast<double>(t - 1);
    out.omega_base /= denom;
    out.omega_new /= denom;
    out.omega_all /= denom;
    return out;
}

}  // namespace csl
