#ifndef CSL_FISHER_HPP
#define CSL_FISHER_HPP

#include <functional>

#include "csl/dataset.hpp"
#include "csl/losses.hpp"
#include "csl/net.hpp"

namespace csl {

struct FisherResult {
    FisherDiag fisher;
    std::size_t used_batches = 0;
    std::size_t skipped_batches = 0;  // batches whose miner came back empty
};

// Diagonal Fisher estimate: mean over batches of the squared loss gradient
// for every trainable parameter, anchored at the current parameter values.
// loss_builder runs the full forward for one batch (mining included).
FisherResult compute_fisher_diagonal(
    EmbeddingNet& net,
    const std::function<LossResult(EmbeddingNet&, const ImageSet& batch)>& loss_builder,
    const ImageSet& data_sample, std::size_t batch_size, double importance);

}  // namespace csl

#endif
