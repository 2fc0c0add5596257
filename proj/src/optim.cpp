#include "csl/optim.hpp"

#include <cmath>

#include "csl/error.hpp"

namespace csl {

void adam_step(std::vector<NamedParam>& params, AdamState& state) {
    if (state.first_moment.empty()) {
        state.first_moment.resize(params.size());
        state.second_moment.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            state.first_moment[i].assign(params[i].tensor.numel(), 0.0);
            state.second_moment[i].assign(params[i].tensor.numel(), 0.0);
        }
    }
    if (state.first_moment.size() != params.size())
        throw DimensionError("adam_step: state holds " + std::to_string(state.first_moment.size()) +
                             " moment buffers for " + std::to_string(params.size()) + " parameters");

    state.step_count += 1;
    const double t = static_cast<double>(state.step_count);
    const double bc1 = 1.0 - std::pow(state.beta1, t);
    const double bc2 = 1.0 - std::pow(state.beta2, t);

    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& p = params[i].tensor;
        if (state.first_moment[i].size() != p.numel())
            throw DimensionError("adam_step: moment buffer for '" + params[i].name +
                                 "' is not shape-congruent with the parameter");
        auto grad = p.has_grad() ? p.grad() : std::span<const double>{};
        auto data = p.mutable_data();
        auto& m = state.first_moment[i];
        auto& v = state.second_moment[i];
        for (std::size_t j = 0; j < data.size(); ++j) {
            const double g = grad.empty() ? 0.0 : grad[j];
            if (!std::isfinite(g))
                throw TrainingAbort("non-finite gradient in parameter '" + params[i].name +
                                    "' at element " + std::to_string(j));
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g;
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g * g;
            const double mhat = m[j] / bc1;
            const double vhat = v[j] / bc2;
            data[j] -= state.learning_rate * mhat / (std::sqrt(vhat) + state.epsilon);
        }
    }
}

void zero_grads(std::vector<NamedParam>& params) {
    for (auto& p : params) p.tensor.zero_grad();
}

double finite_diff_check(const std::function<Tensor()>& loss_fn, std::vector<NamedParam> params,
                         double h, std::size_t max_coords, Rng* rng) {
    if (h <= 0.0) throw Error("finite_diff_check: h must be positive");

    zero_grads(params);
    Tensor loss = loss_fn();
    loss.backward();
    std::vector<std::vector<double>> analytic(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto g = params[i].tensor.grad();
        analytic[i].assign(g.begin(), g.end());
        if (analytic[i].empty()) analytic[i].assign(params[i].tensor.numel(), 0.0);
    }

    double max_err = 0.0;
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& p = params[i].tensor;
        const std::size_t n = p.numel();
        std::vector<std::size_t> coords;
        if (max_coords == 0 || max_coords >= n) {
            coords.resize(n);
            for (std::size_t j = 0; j < n; ++j) coords[j] = j;
        } else {
            for (std::size_t j = 0; j < max_coords; ++j)
                coords.push_back(rng ? static_cast<std::size_t>(rng->below(n)) : j * n / max_coords);
        }
        for (std::size_t j : coords) {
            auto data = p.mutable_data();
            const double saved = data[j];
            data[j] = saved + h;
            double up, down;
            {
                NoGradGuard no_grad;
                up = loss_fn().value();
                data[j] = saved - h;
                down = loss_fn().value();
            }
            data[j] = saved;
            if (!std::isfinite(up) || !std::isfinite(down))
                throw Error("finite_diff_check: loss is non-finite when perturbing '" + params[i].name +
                            "' at element " + std::to_string(j));
            const double numeric = (up - down) / (2.0 * h);
            const double err = std::abs(analytic[i][j] - numeric) / (std::abs(analytic[i][j]) + 1e-12);
            max_err = std::max(max_err, err);
        }
    }
    return max_err;
}

}  // namespace csl
