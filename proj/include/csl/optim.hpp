#ifndef CSL_OPTIM_HPP
#define CSL_OPTIM_HPP

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "csl/rng.hpp"
#include "csl/tensor.hpp"

namespace csl {

struct NamedParam {
    std::string name;
    Tensor tensor;
};

struct AdamState {
    std::size_t step_count = 0;
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    // Shape-congruent with their parameters; allocated on first step.
    std::vector<std::vector<double>> first_moment;
    std::vector<std::vector<double>> second_moment;
};

// One bias-corrected Adam update over params using their accumulated grads.
// Throws TrainingAbort naming the parameter if any gradient is non-finite.
void adam_step(std::vector<NamedParam>& params, AdamState& state);

void zero_grads(std::vector<NamedParam>& params);

// Max over sampled coordinates of |analytic - central difference| /
// (|analytic| + 1e-12). loss_fn must rebuild the loss from the current
// parameter values on every call. max_coords == 0 checks every coordinate.
// Throws Error naming the coordinate if the loss turns non-finite at a
// perturbed point.
double finite_diff_check(const std::function<Tensor()>& loss_fn, std::vector<NamedParam> params,
                         double h, std::size_t max_coords = 0, Rng* rng = nullptr);

}  // namespace csl

#endif
