#ifndef CSL_EVALUATION_HPP
#define CSL_EVALUATION_HPP

#include <cstddef>
#include <span>
#include <vector>

#include "csl/tensor.hpp"

namespace csl {

struct EmbeddingBatch {
    Tensor vectors;  // [N, d]
    std::vector<int> labels;
};

// One retrieval: gallery indices ordered by descending cosine similarity to
// the query (ties broken by ascending index), the query itself excluded.
struct RankedRetrieval {
    std::size_t query = 0;
    std::vector<std::size_t> ordered_gallery;
    std::vector<char> relevance;  // aligned with ordered_gallery
};

RankedRetrieval rank_by_cosine(const EmbeddingBatch& batch, std::size_t query_index);

// (1/R) * sum_{k=1..R} P@k * Rel@k over the given ranking prefix.
double average_precision_at_r(std::span<const char> relevance_bits, std::size_t r);

// Mean AP@R over every query in the batch, each query excluded from its own
// gallery; R is the query's same-class gallery count.
double mean_ap_at_r(const EmbeddingBatch& batch);
// Same, restricted to the given query rows (gallery stays the full batch).
double mean_ap_at_r_for_queries(const EmbeddingBatch& batch, std::span<const std::size_t> queries);

// Per-session retrieval scores; session 1 is the base session.
struct SessionRecord {
    std::size_t session = 0;
    double alpha_base = 0.0;  // base-test mAP@R after this session
    double alpha_new = 0.0;   // mAP@R of the session's new class within all seen
    double alpha_all = 0.0;   // mAP@R over everything seen so far
};

struct SessionLog {
    std::vector<SessionRecord> records;  // contiguous sessions 1..T
    double alpha_ideal_base = 0.0;       // offline model, base-test set
    double alpha_ideal_all = 0.0;        // offline model, entire test set
};

struct OmegaReport {
    double omega_base = 0.0;
    double omega_new = 0.0;
    double omega_all = 0.0;
};

// Session-averaged retention: base and all are normalized by their offline
// ideals, new is reported raw.
OmegaReport omega_metrics(const SessionLog& log);

}  // namespace csl

#endif
