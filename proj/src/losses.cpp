#include "csl/losses.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "csl/error.hpp"
#include "csl/ops.hpp"

namespace csl {

namespace {

using detail::TensorNode;
using detail::make_op;

Tensor euclidean_rowwise(const Tensor& a, const Tensor& b) {
    Tensor diff = a - b;
    return csl::sqrt(row_sum(diff * diff));
}

}  // namespace

LossResult triplet_loss(const Tensor& embeddings, const TripletIndexSet& triples, double margin) {
    if (!(margin > 0.0)) throw Error("triplet_loss: margin must be positive");
    if (triples.triples.empty()) return LossResult::zero(true);

    std::vector<std::size_t> a, p, n;
    for (const auto& t : triples.triples) {
        a.push_back(t.anchor);
        p.push_back(t.positive);
        n.push_back(t.negative);
    }
    Tensor anchors = gather_rows(embeddings, a);
    Tensor dap = euclidean_rowwise(anchors, gather_rows(embeddings, p));
    Tensor dan = euclidean_rowwise(anchors, gather_rows(embeddings, n));
    return {mean(relu(dap - dan + margin)), false, 0};
}

LossResult contrastive_loss(const Tensor& embeddings, const PairIndexSet& pairs, double margin) {
    if (!(margin > 0.0)) throw Error("contrastive_loss: margin must be positive");
    const std::size_t total = pairs.positive_pairs.size() + pairs.negative_pairs.size();
    if (total == 0) return LossResult::zero(true);

    std::vector<Tensor> terms;
    if (!pairs.positive_pairs.empty()) {
        std::vector<std::size_t> i, j;
        for (auto [x, y] : pairs.positive_pairs) {
            i.push_back(x);
            j.push_back(y);
        }
        Tensor diff = gather_rows(embeddings, i) - gather_rows(embeddings, j);
        terms.push_back(0.5 * sum(row_sum(diff * diff)));
    }
    if (!pairs.negative_pairs.empty()) {
        std::vector<std::size_t> i, j;
        for (auto [x, y] : pairs.negative_pairs) {
            i.push_back(x);
            j.push_back(y);
        }
        Tensor d = euclidean_rowwise(gather_rows(embeddings, i), gather_rows(embeddings, j));
        Tensor hinge = relu(margin - d);
        terms.push_back(0.5 * sum(hinge * hinge));
    }
    Tensor loss = terms.size() == 1 ? terms[0] : terms[0] + terms[1];
    return {loss / static_cast<double>(total), false, 0};
}

LossResult angular_loss(const Tensor& embeddings, const TripletIndexSet& triples, double alpha_degrees) {
    if (!(alpha_degrees > 0.0 && alpha_degrees < 90.0))
        throw Error("angular_loss: alpha must lie strictly between 0 and 90 degrees");
    if (triples.triples.empty()) return LossResult::zero(true);

    const double tan_a = std::tan(alpha_degrees * 3.14159265358979323846 / 180.0);
    const double tan_sq = tan_a * tan_a;

    // negatives grouped per anchor-positive pair; each group is one
    // log(1 + sum exp(f)) term
    std::map<std::pair<std::size_t, std::size_t>, std::vector<std::size_t>> groups;
    for (const auto& t : triples.triples) groups[{t.anchor, t.positive}].push_back(t.negative);

    std::vector<Tensor> group_losses;
    group_losses.reserve(groups.size());
    for (const auto& [ap, negatives] : groups) {
        const std::vector<std::size_t> a{ap.first}, p{ap.second};
        Tensor xa = gather_rows(embeddings, a);
        Tensor xp = gather_rows(embeddings, p);
        Tensor dot_ap = sum(xa * xp);
        Tensor xn = gather_rows(embeddings, negatives);
        Tensor dots = reshape(matmul_nt(xn, xa + xp), {negatives.size()});
        Tensor f = dots * (4.0 * tan_sq) - (2.0 * (1.0 + tan_sq)) * dot_ap;

        // log(1 + sum exp(f)), stabilized against the largest exponent
        double peak = 0.0;
        for (double v : f.data()) peak = std::max(peak, v);
        Tensor total = sum(csl::exp(f - peak)) + std::exp(-peak);
        group_losses.push_back(csl::log(total) + peak);
    }
    return {add_n(group_losses) / static_cast<double>(group_losses.size()), false, 0};
}

CenterState CenterState::init(std::size_t class_count, std::size_t dim) {
    CenterState s;
    s.centers = Tensor({class_count, dim}, 0.0);
    return s;
}

void CenterState::expand(std::size_t new_class_count) {
    if (new_class_count < class_count())
        throw ConfigError("CenterState: cannot shrink from " + std::to_string(class_count()) + " to " +
                          std::to_string(new_class_count) + " classes");
    Tensor grown({new_class_count, centers.dim(1)}, 0.0);
    std::copy_n(centers.data().data(), centers.numel(), grown.mutable_data().data());
    centers = grown;
}

CenterLossOut center_softmax_loss(const Tensor& features, const Tensor& logits,
                                  std::span<const std::size_t> labels, const CenterState& state) {
    const std::size_t n = features.dim(0), dim = features.dim(1), k = state.class_count();
    if (logits.dim(0) != n || labels.size() != n)
        throw DimensionError("center_softmax_loss: row counts disagree");
    for (std::size_t y : labels)
        if (y >= k || y >= logits.dim(1))
            throw DimensionError("center_softmax_loss: label " + std::to_string(y) +
                                 " outside the current " + std::to_string(k) + "-class head");

    Tensor cross_entropy = -mean(take_per_row(log_softmax_rows(logits), labels));
    Tensor class_centers = gather_rows(state.centers, labels);  // constant path
    Tensor diff = features - class_centers;
    Tensor center_term = (state.lambda_weight / 2.0) * mean(row_sum(diff * diff));

    // class-mean pull, computed on values only
    Tensor delta({k, dim}, 0.0);
    std::vector<double> counts(k, 0.0);
    auto fd = features.data();
    auto cd = state.centers.data();
    auto dd = delta.mutable_data();
    for (std::size_t i = 0; i < n; ++i) {
        counts[labels[i]] += 1.0;
        for (std::size_t j = 0; j < dim; ++j)
            dd[labels[i] * dim + j] += cd[labels[i] * dim + j] - fd[i * dim + j];
    }
    for (std::size_t c = 0; c < k; ++c)
        for (std::size_t j = 0; j < dim; ++j) dd[c * dim + j] /= 1.0 + counts[c];

    return {cross_entropy + center_term, delta};
}

void apply_center_update(CenterState& state, const Tensor& center_delta) {
    if (center_delta.shape() != state.centers.shape())
        throw DimensionError("apply_center_update: delta shape does not match centers");
    auto c = state.centers.mutable_data();
    auto d = center_delta.data();
    for (std::size_t i = 0; i < c.size(); ++i) c[i] -= state.center_lr * d[i];
}

namespace {

constexpr double kZeroLegTolerance = 1e-12;
constexpr double kHuberDelta = 1.0;

// cosines of the angles at point j toward every other pair of points plus
// per-leg validity. Teacher and student both run through this exact op
// sequence so identical batches produce bitwise-identical potentials.
Tensor angle_cosines_at(const Tensor& embeddings, std::size_t j, std::vector<bool>& leg_ok) {
    const std::size_t n = embeddings.dim(0);
    std::vector<std::size_t> jrow{j};
    Tensor legs = sub_rowvec(embeddings, gather_rows(embeddings, jrow));
    Tensor norms = csl::sqrt(row_sum(legs * legs));
    for (std::size_t i = 0; i < n; ++i) leg_ok[i] = i != j && norms.data()[i] > kZeroLegTolerance;
    Tensor unit = mul_rowwise(legs, reciprocal(clamp_min(norms, kZeroLegTolerance)));
    return matmul_nt(unit, unit);
}

}  // namespace

LossResult angle_distill_loss(const Tensor& teacher_embeddings, const Tensor& student_embeddings) {
    if (teacher_embeddings.shape() != student_embeddings.shape())
        throw DimensionError("angle_distill_loss: teacher and student batches must be row-aligned");
    const std::size_t n = student_embeddings.dim(0);
    if (n < 3) throw DimensionError("angle_distill_loss: need at least 3 embeddings");

    std::vector<bool> t_leg(n), s_leg(n);
    std::vector<Tensor> contributions;
    std::size_t instances = 0, skipped = 0;
    for (std::size_t j = 0; j < n; ++j) {
        Tensor teacher_cos;
        {
            NoGradGuard no_grad;
            teacher_cos = angle_cosines_at(teacher_embeddings, j, t_leg);
        }
        Tensor cosines = angle_cosines_at(student_embeddings, j, s_leg);

        std::vector<double> mask(n * n, 0.0);
        std::size_t valid_here = 0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t k2 = i + 1; k2 < n; ++k2) {
                if (i == j || k2 == j) continue;
                if (!t_leg[i] || !t_leg[k2] || !s_leg[i] || !s_leg[k2]) {
                    ++skipped;
                    continue;
                }
                mask[i * n + k2] = 1.0;
                ++valid_here;
            }
        if (valid_here == 0) continue;
        instances += valid_here;
        Tensor masked = huber_to_const(cosines, teacher_cos.data(), kHuberDelta) * Tensor({n, n}, mask);
        contributions.push_back(sum(masked));
    }

    if (instances == 0) return {Tensor::scalar(0.0), true, skipped};
    return {add_n(contributions) / static_cast<double>(instances), false, skipped};
}

Tensor kd_distill_loss(const Tensor& teacher_logits, const Tensor& student_logits, double temperature) {
    if (teacher_logits.shape() != student_logits.shape())
        throw DimensionError("kd_distill_loss: logit shapes differ, " + shape_str(teacher_logits.shape()) +
                             " vs " + shape_str(student_logits.shape()));
    if (!(temperature > 0.0)) throw Error("kd_distill_loss: temperature must be positive");

    Tensor soft_teacher;
    {
        NoGradGuard no_grad;
        soft_teacher = softmax_rows(teacher_logits.detach() / temperature);
    }
    Tensor log_soft_student = log_softmax_rows(student_logits / temperature);
    return -(sum(soft_teacher * log_soft_student) / static_cast<double>(student_logits.dim(0)));
}

namespace {

constexpr double kBceTiny = 1e-12;

Tensor bce_elementwise(const Tensor& recon, const Tensor& target) {
    const std::size_t n = recon.numel();
    std::vector<double> out(n);
    auto rd = recon.data();
    auto td = target.data();
    for (std::size_t i = 0; i < n; ++i) {
        // 0 * log(0) reads as 0 so exact {0,1} targets with exact
        // reconstructions cost nothing
        const double t = td[i], r = rd[i];
        double v = 0.0;
        if (t > 0.0) v -= t * std::log(std::max(r, kBceTiny));
        if (t < 1.0) v -= (1.0 - t) * std::log(std::max(1.0 - r, kBceTiny));
        out[i] = v;
    }
    return detail::make_op(recon.shape(), std::move(out), {recon, target}, [](TensorNode& self) {
        TensorNode& pr = *self.parents[0];
        if (!pr.needs_grad) return;
        pr.ensure_grad();
        TensorNode& pt = *self.parents[1];
        for (std::size_t i = 0; i < self.numel(); ++i) {
            const double r = pr.data[i], t = pt.data[i];
            pr.grad[i] += self.grad[i] * (r - t) / std::max(r * (1.0 - r), kBceTiny);
        }
    });
}

}  // namespace

Tensor vae_loss(const Tensor& reconstruction, const Tensor& target, const Tensor& mu,
                const Tensor& log_var) {
    if (reconstruction.shape() != target.shape())
        throw DimensionError("vae_loss: reconstruction and target shapes differ");
    if (mu.shape() != log_var.shape()) throw DimensionError("vae_loss: mu and log_var shapes differ");
    for (double v : target.data())
        if (!(v >= 0.0 && v <= 1.0)) throw Error("vae_loss: target values must lie in [0,1]");

    Tensor bce = mean(bce_elementwise(reconstruction, target));
    Tensor kl_per_dim = csl::exp(log_var) + mu * mu - 1.0 - log_var;
    Tensor kl = mu.ndim() == 2 ? mean(row_sum(kl_per_dim)) : sum(kl_per_dim);
    return bce + 0.5 * kl;
}

Tensor ewc_penalty(std::span<const NamedParam> params, const FisherDiag& fisher) {
    if (fisher.coefficients.size() != fisher.anchor.size())
        throw DimensionError("ewc_penalty: Fisher coefficients and anchors disagree");

    std::vector<Tensor> terms;
    for (const auto& p : params) {
        const Tensor* coeff = nullptr;
        const Tensor* anchor = nullptr;
        for (const auto& c : fisher.coefficients)
            if (c.name == p.name) coeff = &c.tensor;
        for (const auto& a : fisher.anchor)
            if (a.name == p.name) anchor = &a.tensor;
        if (!coeff || !anchor)
            throw DimensionError("ewc_penalty: no Fisher entry for parameter '" + p.name + "'");
        if (coeff->shape() != p.tensor.shape() || anchor->shape() != p.tensor.shape())
            throw DimensionError("ewc_penalty: Fisher entry for '" + p.name +
                                 "' is not shape-congruent with the parameter");
        Tensor diff = p.tensor - *anchor;
        terms.push_back(sum(*coeff * (diff * diff)));
    }
    if (terms.empty()) return Tensor::scalar(0.0);
    return (fisher.importance / 2.0) * add_n(terms);
}

Tensor ebll_code_loss(const Tensor& current_features, const Tensor& frozen_features,
                      const FeatureAutoencoder& autoencoder) {
    if (current_features.shape() != frozen_features.shape())
        throw DimensionError("ebll_code_loss: feature shapes differ, " +
                             shape_str(current_features.shape()) + " vs " +
                             shape_str(frozen_features.shape()));
    Tensor current_code = autoencoder.encode(current_features);
    Tensor frozen_code;
    {
        NoGradGuard no_grad;
        frozen_code = autoencoder.encode(frozen_features.detach());
    }
    Tensor diff = current_code - frozen_code;
    return mean(diff * diff);
}

}  // namespace csl
