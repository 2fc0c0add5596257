#include "csl/fisher.hpp"

#include <algorithm>

#include "csl/error.hpp"

namespace csl {

FisherResult compute_fisher_diagonal(
    EmbeddingNet& net,
    const std::function<LossResult(EmbeddingNet&, const ImageSet& batch)>& loss_builder,
    const ImageSet& data_sample, std::size_t batch_size, double importance) {
    if (data_sample.empty()) throw Error("compute_fisher_diagonal: empty data sample");
    if (batch_size == 0) throw Error("compute_fisher_diagonal: batch size must be positive");

    auto params = net.trainable_parameters();
    std::vector<std::vector<double>> accum(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) accum[i].assign(params[i].tensor.numel(), 0.0);

    FisherResult result;
    const std::size_t n = data_sample.size();
    for (std::size_t start = 0; start < n; start += batch_size) {
        const std::size_t stop = std::min(n, start + batch_size);
        std::vector<std::size_t> rows(stop - start);
        for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = start + i;
        ImageSet batch = take_rows(data_sample, rows);

        zero_grads(params);
        LossResult loss = loss_builder(net, batch);
        if (loss.empty) {
            ++result.skipped_batches;
            continue;
        }
        loss.value.backward();
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto g = params[i].tensor.grad();
            for (std::size_t j = 0; j < g.size(); ++j) accum[i][j] += g[j] * g[j];
        }
        ++result.used_batches;
    }

    const double scale = result.used_batches > 0 ? 1.0 / static_cast<double>(result.used_batches) : 0.0;
    result.fisher.importance = importance;
    for (std::size_t i = 0; i < params.size(); ++i) {
        for (double& v : accum[i]) v *= scale;
        result.fisher.coefficients.push_back(
            {params[i].name, Tensor(params[i].tensor.shape(), std::move(accum[i]))});
        Tensor anchor = params[i].tensor.detach();
        result.fisher.anchor.push_back({params[i].name, anchor});
    }
    zero_grads(params);
    return result;
}

}  // namespace csl
