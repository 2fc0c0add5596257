#ifndef CSL_LOSSES_HPP
#define CSL_LOSSES_HPP

#include <cstddef>
#include <span>
#include <vector>

#include "csl/autoencoder.hpp"
#include "csl/miners.hpp"
#include "csl/optim.hpp"
#include "csl/tensor.hpp"

namespace csl {

// Scalar loss plus the batch bookkeeping callers log. An empty index set is
// not an error: the value is the zero scalar and empty is flagged so long
// sessions survive homogeneous batches.
struct LossResult {
    Tensor value;
    bool empty = false;
    std::size_t skipped = 0;

    static LossResult zero(bool flag) { return {Tensor::scalar(0.0), flag, 0}; }
};

// mean over triples of max(d(a,p) - d(a,n) + margin, 0), Euclidean d.
LossResult triplet_loss(const Tensor& embeddings, const TripletIndexSet& triples, double margin);

// mean over all mined pairs: 1/2 d^2 for positives, 1/2 max(0, margin-d)^2
// for negatives.
LossResult contrastive_loss(const Tensor& embeddings, const PairIndexSet& pairs, double margin);

// mean over anchor-positive groups of log(1 + sum_n exp(f)) with
// f = 4 tan^2(alpha) (x_a+x_p)^T x_n - 2 (1+tan^2(alpha)) x_a^T x_p,
// log-sum-exp stabilized.
LossResult angular_loss(const Tensor& embeddings, const TripletIndexSet& triples, double alpha_degrees);

// Running class centers for the softmax+center objective. Centers live
// outside the gradient graph and move toward batch class means at center_lr.
struct CenterState {
    Tensor centers;  // [K, dim]
    double lambda_weight = 1.0;
    double center_lr = 0.5;

    static CenterState init(std::size_t class_count, std::size_t dim = 128);
    void expand(std::size_t new_class_count);
    std::size_t class_count() const { return centers.dim(0); }
};

struct CenterLossOut {
    Tensor loss;
    Tensor center_delta;  // [K, dim], apply with apply_center_update
};

// cross-entropy(logits, labels) + (lambda/2) * mean_i ||x_i - c_{y_i}||^2.
// The returned delta is the class-mean pull; the trainer applies it after
// the optimizer step. Labels index the classifier head rows.
CenterLossOut center_softmax_loss(const Tensor& features, const Tensor& logits,
                                  std::span<const std::size_t> labels, const CenterState& state);
void apply_center_update(CenterState& state, const Tensor& center_delta);

// Huber distance between teacher and student angle potentials over all
// unordered (i,k) pairs around every middle point j. The teacher side is
// constant; zero-length legs are skipped and counted.
LossResult angle_distill_loss(const Tensor& teacher_embeddings, const Tensor& student_embeddings);

// - mean_i sum_k softmax(t/T)_k log softmax(s/T)_k.
Tensor kd_distill_loss(const Tensor& teacher_logits, const Tensor& student_logits, double temperature);

// mean binary cross-entropy between reconstruction and target (both in
// [0,1]) plus the mean over the batch of 1/2 sum(exp(lv) + mu^2 - 1 - lv).
Tensor vae_loss(const Tensor& reconstruction, const Tensor& target, const Tensor& mu,
                const Tensor& log_var);

// Quadratic anchor penalty weighted by a Fisher information diagonal.
struct FisherDiag {
    double importance = 150.0;             // lambda
    std::vector<NamedParam> coefficients;  // F_i >= 0
    std::vector<NamedParam> anchor;        // theta* from the previous session
};

// sum_i (lambda/2) F_i (theta_i - theta*_i)^2 over all matched parameters.
Tensor ewc_penalty(std::span<const NamedParam> params, const FisherDiag& fisher);

// Mean squared error between autoencoder codes of current vs frozen conv
// features. Only the encoder half of the autoencoder participates.
Tensor ebll_code_loss(const Tensor& current_features, const Tensor& frozen_features,
                      const FeatureAutoencoder& autoencoder);

}  // namespace csl

#endif
