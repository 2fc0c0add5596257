#include "csl/strategies.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "csl/checkpoint.hpp"
#include "csl/error.hpp"
#include "csl/ops.hpp"

namespace csl {

namespace {

constexpr std::uint64_t kTrainStream = 0x7121;
constexpr std::uint64_t kAeStream = 0xeb11;
constexpr std::uint64_t kReplayEpochStream = 0x5e9a;
constexpr std::uint64_t kReplayValStream = 0x5e9b;
constexpr std::uint64_t kVaeFitStream = 0xf17a;

ImageSet combine(const SessionData& a, const SessionData& b, bool validation) {
    return validation ? concat(a.validation, b.validation) : concat(a.train, b.train);
}

int single_class_of(const ImageSet& set, const char* who) {
    if (set.empty()) throw Error(std::string(who) + ": new-class data is empty");
    const int cls = set.labels.front();
    for (int y : set.labels)
        if (y != cls) throw Error(std::string(who) + ": expected exactly one new class, saw " +
                                  std::to_string(cls) + " and " + std::to_string(y));
    return cls;
}

}  // namespace

// ---------------------------------------------------------------- center

std::size_t CenterSession::head_index(int class_id) const {
    for (std::size_t i = 0; i < class_order.size(); ++i)
        if (class_order[i] == class_id) return i;
    throw Error("class " + std::to_string(class_id) + " is not registered with the classifier head");
}

void CenterSession::register_class(int class_id, EmbeddingNet& net, Rng& rng) {
    for (int c : class_order)
        if (c == class_id) return;
    class_order.push_back(class_id);
    net.expand_classifier(class_order.size(), rng);
    if (state.class_count() == 0)
        state = CenterState::init(class_order.size(), NetConfig::kEmbeddingWidth);
    else
        state.expand(class_order.size());
}

std::vector<std::size_t> CenterSession::head_labels(std::span<const int> labels) const {
    std::vector<std::size_t> out(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) out[i] = head_index(labels[i]);
    return out;
}

// ----------------------------------------------------------------- store

std::size_t ExemplarStore::total_images() const {
    std::size_t n = 0;
    for (const auto& [cls, set] : images_by_class) n += set.size();
    return n;
}

std::vector<int> ExemplarStore::seen_classes() const {
    std::vector<int> out;
    if (mode == Mode::vae)
        for (const auto& [cls, vae] : vae_by_class) out.push_back(cls);
    else
        for (const auto& [cls, set] : images_by_class) out.push_back(cls);
    return out;
}

ImageSet ExemplarStore::merged_images() const {
    ImageSet all;
    for (const auto& [cls, set] : images_by_class) all = concat(all, set);
    return all;
}

void ExemplarStore::save(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    std::ofstream manifest(dir / "manifest.txt");
    if (!manifest) throw IoError("cannot write store manifest in " + dir.string());
    manifest << "mode = " << (mode == Mode::vae ? "vae" : mode == Mode::images ? "images" : "none") << "\n";
    manifest << "budget = " << budget << "\n";
    manifest << "classes =";
    for (int c : seen_classes()) manifest << " " << c;
    manifest << "\n";

    if (mode == Mode::images) {
        for (const auto& [cls, set] : images_by_class) {
            Checkpoint ckpt;
            ckpt.descriptor = "kind = exemplar_images\nclass = " + std::to_string(cls) + "\n";
            ckpt.tensors.push_back({"images", set.images});
            save_checkpoint(dir / ("class_" + std::to_string(cls) + ".ckpt"), ckpt);
        }
    } else if (mode == Mode::vae) {
        for (const auto& [cls, vae] : vae_by_class)
            vae.save(dir / ("vae_" + std::to_string(cls) + ".ckpt"));
    }
}

ExemplarStore ExemplarStore::load(const std::filesystem::path& dir) {
    std::ifstream manifest(dir / "manifest.txt");
    if (!manifest) throw IoError("cannot read store manifest in " + dir.string());
    std::stringstream buffer;
    buffer << manifest.rdbuf();
    const std::string text = buffer.str();

    ExemplarStore store;
    const std::string mode = descriptor_get(text, "mode");
    store.mode = mode == "vae" ? Mode::vae : mode == "images" ? Mode::images : Mode::none;
    store.budget = std::stoul(descriptor_get(text, "budget"));

    std::istringstream classes(descriptor_get(text, "classes"));
    int cls;
    while (classes >> cls) {
        if (store.mode == Mode::vae) {
            store.vae_by_class[cls] = ClassVAE::load(dir / ("vae_" + std::to_string(cls) + ".ckpt"));
        } else if (store.mode == Mode::images) {
            Checkpoint ckpt = load_checkpoint(dir / ("class_" + std::to_string(cls) + ".ckpt"));
            const Tensor* images = ckpt.find("images");
            if (!images) throw FormatError("exemplar checkpoint is missing the image tensor");
            ImageSet set{images->clone(), std::vector<int>(images->dim(0), cls), cls + 1};
            store.images_by_class[cls] = std::move(set);
        }
    }
    return store;
}

// --------------------------------------------------------------- teacher

Tensor TeacherSnapshot::embed(const Tensor& images) const {
    NoGradGuard no_grad;
    return net_.embed(images);
}

Tensor TeacherSnapshot::conv_features(const Tensor& images) const {
    NoGradGuard no_grad;
    return net_.conv_features(images);
}

Tensor TeacherSnapshot::embed_from_features(const Tensor& features) const {
    NoGradGuard no_grad;
    return net_.embed_from_features(features);
}

Tensor TeacherSnapshot::logits_from_embedding(const Tensor& embedding) const {
    NoGradGuard no_grad;
    return net_.logits_from_embedding(embedding);
}

// --------------------------------------------------------------- helpers

Tensor embed_all(const EmbeddingNet& net, const Tensor& images, std::size_t batch_size) {
    NoGradGuard no_grad;
    const std::size_t n = images.dim(0);
    Tensor out({n, NetConfig::kEmbeddingWidth}, 0.0);
    const std::size_t item = images.numel() / n;
    Shape chunk_shape = images.shape();
    for (std::size_t start = 0; start < n; start += batch_size) {
        const std::size_t stop = std::min(n, start + batch_size);
        chunk_shape[0] = stop - start;
        std::vector<double> data(images.data().begin() + start * item,
                                 images.data().begin() + stop * item);
        Tensor emb = net.embed(Tensor(chunk_shape, std::move(data)));
        std::copy_n(emb.data().data(), emb.numel(),
                    out.mutable_data().data() + start * NetConfig::kEmbeddingWidth);
    }
    return out;
}

Tensor conv_features_all(const EmbeddingNet& net, const Tensor& images, std::size_t batch_size) {
    NoGradGuard no_grad;
    const std::size_t n = images.dim(0);
    const std::size_t width = net.config().feature_width();
    const std::size_t item = images.numel() / n;
    Tensor out({n, width}, 0.0);
    Shape chunk_shape = images.shape();
    for (std::size_t start = 0; start < n; start += batch_size) {
        const std::size_t stop = std::min(n, start + batch_size);
        chunk_shape[0] = stop - start;
        std::vector<double> data(images.data().begin() + start * item,
                                 images.data().begin() + stop * item);
        Tensor feats = net.conv_features(Tensor(chunk_shape, std::move(data)));
        std::copy_n(feats.data().data(), feats.numel(), out.mutable_data().data() + start * width);
    }
    return out;
}

LossResult similarity_loss(const Tensor& embeddings, std::span<const int> labels, const LossConfig& cfg) {
    switch (cfg.kind) {
        case LossKind::triplet: {
            TripletIndexSet t = mine_semi_hard_triplets(embeddings.detach(), labels, cfg.triplet_margin);
            return triplet_loss(embeddings, t, cfg.triplet_margin);
        }
        case LossKind::contrastive: {
            PairIndexSet p = mine_margin_pairs(embeddings.detach(), labels, cfg.contrastive_margin,
                                               cfg.pair_pos_threshold);
            return contrastive_loss(embeddings, p, cfg.contrastive_margin);
        }
        case LossKind::angular: {
            TripletIndexSet t =
                mine_angular_triplets(embeddings.detach(), labels, cfg.angular_alpha_degrees);
            return angular_loss(embeddings, t, cfg.angular_alpha_degrees);
        }
        default:
            throw Error("similarity_loss: the center loss needs the classifier path");
    }
}

namespace {

// one mini-batch loss for the image-space trainer
struct BatchLoss {
    Tensor total;
    bool main_empty = false;
    Tensor center_delta;  // defined only on the center path
};

struct ImagesExtras {
    const FisherDiag* fisher = nullptr;
    const std::vector<FeatureAutoencoder>* code_refs = nullptr;
    const TeacherSnapshot* frozen_features = nullptr;  // pre-session snapshot for code losses
    double lambda_ae = 0.0;
    const TeacherSnapshot* distill_teacher = nullptr;
    double lambda_distil = 0.0;
    double kd_temperature = 2.0;
};

Tensor student_logits_for_old_classes(const EmbeddingNet& net, const Tensor& embeddings,
                                      std::size_t old_classes) {
    std::vector<std::size_t> rows(old_classes);
    std::iota(rows.begin(), rows.end(), 0);
    Tensor w_old = gather_rows(net.classifier_weight(), rows);
    Tensor b = net.classifier_bias();
    Tensor b_old = reshape(gather_rows(reshape(b, {b.numel(), 1}), rows), {old_classes});
    return linear(embeddings, w_old, b_old);
}

BatchLoss batch_loss_images(EmbeddingNet& net, const Tensor& images, std::span<const int> labels,
                            const TrainerContext& ctx, const ImagesExtras& extras,
                            std::vector<NamedParam>& params) {
    BatchLoss out;
    Tensor features = net.conv_features(images);
    Tensor embeddings = net.embed_from_features(features);

    if (ctx.loss.kind == LossKind::center) {
        if (!ctx.center) throw ConfigError("center loss requires a CenterSession");
        Tensor logits = net.logits_from_embedding(embeddings);
        auto head = ctx.center->head_labels(labels);
        auto c = center_softmax_loss(embeddings, logits, head, ctx.center->state);
        out.total = c.loss;
        out.center_delta = c.center_delta;
    } else {
        LossResult main = similarity_loss(embeddings, labels, ctx.loss);
        out.total = main.value;
        out.main_empty = main.empty;
    }

    if (extras.fisher && extras.fisher->importance != 0.0 && !extras.fisher->coefficients.empty())
        out.total = out.total + ewc_penalty(params, *extras.fisher);

    if (extras.code_refs && extras.lambda_ae != 0.0 && !extras.code_refs->empty()) {
        Tensor frozen = extras.frozen_features->conv_features(images);
        std::vector<Tensor> codes;
        codes.reserve(extras.code_refs->size());
        for (const auto& ae : *extras.code_refs) codes.push_back(ebll_code_loss(features, frozen, ae));
        out.total = out.total + extras.lambda_ae * add_n(codes);
    }

    if (extras.distill_teacher && extras.lambda_distil != 0.0) {
        if (ctx.loss.kind == LossKind::center) {
            const std::size_t old_k = extras.distill_teacher->classifier_classes();
            Tensor teacher_emb = extras.distill_teacher->embed(images);
            Tensor teacher_logits = extras.distill_teacher->logits_from_embedding(teacher_emb);
            Tensor student_old = student_logits_for_old_classes(net, embeddings, old_k);
            out.total =
                out.total + extras.lambda_distil *
                                kd_distill_loss(teacher_logits, student_old, extras.kd_temperature);
        } else if (images.dim(0) >= 3) {
            Tensor teacher_emb = extras.distill_teacher->embed(images);
            LossResult distill = angle_distill_loss(teacher_emb, embeddings);
            if (!distill.empty) out.total = out.total + extras.lambda_distil * distill.value;
        }
    }
    return out;
}

ImageSet batch_rows(const ImageSet& set, std::span<const std::size_t> order, std::size_t start,
                    std::size_t stop) {
    std::vector<std::size_t> rows(order.begin() + start, order.begin() + stop);
    return take_rows(set, rows);
}

double validation_loss_images(EmbeddingNet& net, const ImageSet& val, const TrainerContext& ctx) {
    if (val.empty()) return std::numeric_limits<double>::infinity();
    NoGradGuard no_grad;
    double total = 0.0;
    std::size_t used = 0;
    const std::size_t n = val.size();
    for (std::size_t start = 0; start < n; start += ctx.train.batch_size) {
        const std::size_t stop = std::min(n, start + ctx.train.batch_size);
        std::vector<std::size_t> rows(stop - start);
        std::iota(rows.begin(), rows.end(), start);
        ImageSet batch = take_rows(val, rows);
        Tensor emb = net.embed(batch.images);
        if (ctx.loss.kind == LossKind::center) {
            Tensor logits = net.logits_from_embedding(emb);
            auto head = ctx.center->head_labels(batch.labels);
            total += center_softmax_loss(emb, logits, head, ctx.center->state).loss.value();
            ++used;
        } else {
            LossResult r = similarity_loss(emb, batch.labels, ctx.loss);
            if (!r.empty) {
                total += r.value.value();
                ++used;
            }
        }
    }
    return used > 0 ? total / static_cast<double>(used) : std::numeric_limits<double>::infinity();
}

struct ParamSnapshot {
    std::vector<std::vector<double>> data;
    std::vector<double> centers;

    static ParamSnapshot take(std::vector<NamedParam>& params, const CenterSession* center) {
        ParamSnapshot s;
        for (auto& p : params) s.data.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
        if (center)
            s.centers.assign(center->state.centers.data().begin(), center->state.centers.data().end());
        return s;
    }
    void restore(std::vector<NamedParam>& params, CenterSession* center) const {
        for (std::size_t i = 0; i < params.size(); ++i)
            std::copy(data[i].begin(), data[i].end(), params[i].tensor.mutable_data().begin());
        if (center && !centers.empty())
            std::copy(centers.begin(), centers.end(), center->state.centers.mutable_data().begin());
    }
};

TrainReport train_images_loop(EmbeddingNet& net, const ImageSet& train, const ImageSet& val,
                              const TrainerContext& ctx, const ImagesExtras& extras) {
    if (train.empty()) throw Error("training set is empty");
    auto params = net.trainable_parameters();
    AdamState adam;
    adam.learning_rate = ctx.train.learning_rate;
    adam.beta1 = ctx.train.beta1;
    adam.beta2 = ctx.train.beta2;
    adam.epsilon = ctx.train.epsilon;

    Rng rng = Rng(ctx.train.seed).derive(kTrainStream);
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);

    TrainReport report;
    report.best_validation_loss = std::numeric_limits<double>::infinity();
    ParamSnapshot best;
    bool have_best = false;
    std::size_t since_best = 0;

    for (std::size_t epoch = 0; epoch < ctx.train.max_epochs; ++epoch) {
        ++report.epochs_run;
        rng.shuffle(order);
        for (std::size_t start = 0; start < train.size(); start += ctx.train.batch_size) {
            const std::size_t stop = std::min(train.size(), start + ctx.train.batch_size);
            ImageSet batch = batch_rows(train, order, start, stop);

            zero_grads(params);
            BatchLoss loss = batch_loss_images(net, batch.images, batch.labels, ctx, extras, params);
            if (loss.main_empty) ++report.empty_batches;
            const double value = loss.total.value();
            if (!std::isfinite(value))
                throw TrainingAbort("loss diverged at epoch " + std::to_string(epoch + 1) + ", batch " +
                                    std::to_string(start / ctx.train.batch_size + 1));
            loss.total.backward();
            adam_step(params, adam);
            if (loss.center_delta.defined()) apply_center_update(ctx.center->state, loss.center_delta);
        }

        const double vloss = validation_loss_images(net, val, ctx);
        if (vloss < report.best_validation_loss) {
            report.best_validation_loss = vloss;
            best = ParamSnapshot::take(params, ctx.center);
            have_best = true;
            since_best = 0;
        } else if (++since_best > ctx.train.early_stop_patience) {
            break;
        }
    }
    if (have_best) best.restore(params, ctx.center);
    return report;
}

std::function<LossResult(EmbeddingNet&, const ImageSet&)> fisher_loss_builder(const TrainerContext& ctx) {
    return [&ctx](EmbeddingNet& net, const ImageSet& batch) -> LossResult {
        Tensor emb = net.embed(batch.images);
        if (ctx.loss.kind == LossKind::center) {
            Tensor logits = net.logits_from_embedding(emb);
            auto head = ctx.center->head_labels(batch.labels);
            return {center_softmax_loss(emb, logits, head, ctx.center->state).loss, false, 0};
        }
        return similarity_loss(emb, batch.labels, ctx.loss);
    };
}

}  // namespace

// ------------------------------------------------------------- strategies

TrainReport train_base(EmbeddingNet& net, const SessionData& base_data, const TrainerContext& ctx) {
    return train_images_loop(net, base_data.train, base_data.validation, ctx, {});
}

TrainReport train_normal_session(EmbeddingNet& net, const SessionData& new_class_data,
                                 const SessionData& paired_old_class_data, const TrainerContext& ctx) {
    return train_images_loop(net, combine(new_class_data, paired_old_class_data, false),
                             combine(new_class_data, paired_old_class_data, true), ctx, {});
}

EwcSessionResult train_ewc_session(EmbeddingNet& net, const FisherDiag& fisher,
                                   const SessionData& new_class_data,
                                   const SessionData& paired_old_class_data, const TrainerContext& ctx) {
    ImagesExtras extras;
    extras.fisher = &fisher;
    EwcSessionResult result;
    ImageSet train = combine(new_class_data, paired_old_class_data, false);
    result.report = train_images_loop(net, train, combine(new_class_data, paired_old_class_data, true),
                                      ctx, extras);
    result.refreshed_fisher =
        compute_fisher_diagonal(net, fisher_loss_builder(ctx), train, ctx.train.batch_size,
                                fisher.importance);
    return result;
}

namespace {

FeatureAutoencoder train_session_autoencoder(EmbeddingNet& net, const SessionData& session_train,
                                             const EbllConfig& ebll, const TrainerContext& ctx) {
    // conv features are fixed during the autoencoder fit
    Tensor feats_train = conv_features_all(net, session_train.train.images);
    Tensor feats_val = conv_features_all(net, session_train.validation.images);

    Rng rng = Rng(ctx.train.seed).derive(kAeStream);
    FeatureAutoencoder ae(net.config().feature_width(), ebll.code_width, rng);
    auto ae_params = ae.parameters();
    AdamState adam;
    adam.learning_rate = ctx.train.learning_rate;
    adam.beta1 = ctx.train.beta1;
    adam.beta2 = ctx.train.beta2;
    adam.epsilon = ctx.train.epsilon;

    // only the autoencoder trains here; spare the backward pass through the net
    auto fc = net.fc_parameters();
    for (auto& p : fc) p.tensor.set_requires_grad(false);

    const std::size_t n = feats_train.dim(0), width = feats_train.dim(1);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);

    auto holdout_mse = [&]() {
        NoGradGuard no_grad;
        Tensor recon = ae.reconstruct(feats_val);
        Tensor diff = recon - feats_val;
        return mean(diff * diff).value();
    };

    double best = holdout_mse();
    FeatureAutoencoder best_ae = ae.clone();
    std::size_t since_best = 0;

    for (std::size_t epoch = 0; epoch < ctx.train.max_epochs; ++epoch) {
        rng.shuffle(order);
        for (std::size_t start = 0; start < n; start += ctx.train.batch_size) {
            const std::size_t stop = std::min(n, start + ctx.train.batch_size);
            std::vector<double> data((stop - start) * width);
            std::vector<int> labels(stop - start);
            for (std::size_t i = start; i < stop; ++i) {
                std::copy_n(feats_train.data().data() + order[i] * width, width,
                            data.data() + (i - start) * width);
                labels[i - start] = session_train.train.labels[order[i]];
            }
            Tensor batch({stop - start, width}, std::move(data));

            zero_grads(ae_params);
            Tensor recon = ae.reconstruct(batch);
            Tensor diff = recon - batch;
            Tensor loss = ebll.lambda_ae * mean(diff * diff);
            // reconstructed features must still embed usefully
            Tensor emb = net.embed_from_features(recon);
            if (ctx.loss.kind == LossKind::center) {
                Tensor logits = net.logits_from_embedding(emb);
                auto head = ctx.center->head_labels(labels);
                loss = loss + center_softmax_loss(emb, logits, head, ctx.center->state).loss;
            } else {
                LossResult sim = similarity_loss(emb, labels, ctx.loss);
                if (!sim.empty) loss = loss + sim.value;
            }
            if (!std::isfinite(loss.value()))
                throw TrainingAbort("autoencoder reconstruction diverged at epoch " +
                                    std::to_string(epoch + 1));
            loss.backward();
            adam_step(ae_params, adam);
        }
        const double mse = holdout_mse();
        if (mse < best) {
            best = mse;
            best_ae = ae.clone();
            since_best = 0;
        } else if (++since_best > ctx.train.early_stop_patience) {
            break;
        }
    }

    for (auto& p : fc) p.tensor.set_requires_grad(true);
    best_ae.set_trainable(false);
    return best_ae;
}

}  // namespace

TrainReport train_ebll_session(EmbeddingNet& net, std::vector<FeatureAutoencoder>& autoencoders,
                               const SessionData& new_class_data,
                               const SessionData& paired_old_class_data, const EbllConfig& ebll,
                               const TrainerContext& ctx) {
    ImagesExtras extras;
    std::optional<TeacherSnapshot> frozen;
    if (ebll.lambda_ae != 0.0 && !autoencoders.empty()) {
        frozen.emplace(net);
        extras.frozen_features = &*frozen;
        extras.code_refs = &autoencoders;
        extras.lambda_ae = ebll.lambda_ae;
    }
    TrainReport report = train_images_loop(net, combine(new_class_data, paired_old_class_data, false),
                                           combine(new_class_data, paired_old_class_data, true), ctx,
                                           extras);

    SessionData session{combine(new_class_data, paired_old_class_data, false),
                        combine(new_class_data, paired_old_class_data, true)};
    autoencoders.push_back(train_session_autoencoder(net, session, ebll, ctx));
    return report;
}

std::map<int, std::vector<std::size_t>> select_exemplars(const Tensor& embeddings,
                                                         std::span<const int> labels, std::size_t k) {
    if (k < 1) throw Error("select_exemplars: k must be at least 1");
    if (embeddings.dim(0) != labels.size())
        throw DimensionError("select_exemplars: label count does not match embeddings");
    const std::size_t d = embeddings.dim(1);

    std::map<int, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);

    std::map<int, std::vector<std::size_t>> chosen;
    for (auto& [cls, idx] : by_class) {
        std::vector<double> mean(d, 0.0);
        for (std::size_t i : idx)
            for (std::size_t j = 0; j < d; ++j) mean[j] += embeddings.data()[i * d + j];
        for (double& v : mean) v /= static_cast<double>(idx.size());

        std::vector<std::pair<double, std::size_t>> ranked;
        ranked.reserve(idx.size());
        for (std::size_t i : idx) {
            double dist = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                const double v = embeddings.data()[i * d + j] - mean[j];
                dist += v * v;
            }
            ranked.emplace_back(dist, i);
        }
        std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
            if (a.first != b.first) return a.first < b.first;
            return a.second < b.second;
        });
        auto& out = chosen[cls];
        for (std::size_t t = 0; t < std::min(k, ranked.size()); ++t) out.push_back(ranked[t].second);
        std::sort(out.begin(), out.end());
    }
    return chosen;
}

namespace {

void reherd_store(EmbeddingNet& net, ExemplarStore& store, const ImageSet& new_class_train,
                  int new_class) {
    std::map<int, ImageSet> candidates = store.images_by_class;
    candidates[new_class] = new_class_train;
    const std::size_t seen = candidates.size();
    const std::size_t per_class = store.budget / std::max<std::size_t>(seen, 1);

    store.images_by_class.clear();
    for (auto& [cls, set] : candidates) {
        if (per_class == 0) continue;
        Tensor emb = embed_all(net, set.images);
        auto chosen = select_exemplars(emb, set.labels, per_class);
        store.images_by_class[cls] = take_rows(set, chosen[cls]);
    }
}

}  // namespace

TrainReport train_icarl_session(EmbeddingNet& net, ExemplarStore& store,
                                const SessionData& new_class_data, double lambda_distil,
                                const TrainerContext& ctx) {
    if (store.mode == ExemplarStore::Mode::vae)
        throw ConfigError("train_icarl_session needs an image-mode exemplar store");
    const int new_class = single_class_of(new_class_data.train, "train_icarl_session");

    ImageSet train = concat(new_class_data.train, store.merged_images());
    ImagesExtras extras;
    std::optional<TeacherSnapshot> teacher;
    if (lambda_distil != 0.0) {
        teacher.emplace(net);
        extras.distill_teacher = &*teacher;
        extras.lambda_distil = lambda_distil;
        extras.kd_temperature = ctx.loss.kd_temperature;
    }
    TrainReport report = train_images_loop(net, train, new_class_data.validation, ctx, extras);

    store.mode = ExemplarStore::Mode::images;
    reherd_store(net, store, new_class_data.train, new_class);
    return report;
}

ClassVAE fit_class_vae(const EmbeddingNet& net, const Tensor& class_features, const VaeFitConfig& config,
                       VaeFitReport* report) {
    if (!net.frozen_feature_extractor())
        throw ConfigError("fit_class_vae: the feature extractor must be frozen, otherwise the "
                          "learned reconstructions dangle");
    if (class_features.dim(1) != net.config().feature_width())
        throw DimensionError("fit_class_vae: features do not match the net's conv output width");
    return fit_vae(class_features, config, report);
}

ReplayBatch sample_replay_features(const ExemplarStore& store, std::size_t per_class_count,
                                   std::uint64_t seed) {
    if (store.mode != ExemplarStore::Mode::vae)
        throw ConfigError("sample_replay_features needs a VAE-mode store");
    ReplayBatch out;
    if (store.vae_by_class.empty() || per_class_count == 0) {
        out.empty_flagged = true;
        out.features = Tensor({0, 0}, std::vector<double>{});
        return out;
    }
    const std::size_t width = store.vae_by_class.begin()->second.input_width();
    std::vector<double> data;
    data.reserve(store.vae_by_class.size() * per_class_count * width);
    for (const auto& [cls, vae] : store.vae_by_class) {
        Rng noise = Rng(seed).derive(0x9000 + static_cast<std::uint64_t>(cls));
        Tensor sample = vae.sample(per_class_count, noise);
        data.insert(data.end(), sample.data().begin(), sample.data().end());
        out.labels.insert(out.labels.end(), per_class_count, cls);
    }
    out.features = Tensor({out.labels.size(), width}, std::move(data));
    return out;
}

namespace {

struct FeatureSet {
    Tensor features;
    std::vector<int> labels;
    std::size_t size() const { return labels.size(); }
};

FeatureSet feature_rows(const FeatureSet& set, std::span<const std::size_t> rows) {
    const std::size_t width = set.features.dim(1);
    std::vector<double> data(rows.size() * width);
    std::vector<int> labels(rows.size());
    for (std::size_t t = 0; t < rows.size(); ++t) {
        std::copy_n(set.features.data().data() + rows[t] * width, width, data.data() + t * width);
        labels[t] = set.labels[rows[t]];
    }
    return {Tensor({rows.size(), width}, std::move(data)), std::move(labels)};
}

FeatureSet concat_features(const FeatureSet& a, const FeatureSet& b) {
    if (a.size() == 0) return b;
    if (b.size() == 0) return a;
    std::vector<double> data(a.features.data().begin(), a.features.data().end());
    data.insert(data.end(), b.features.data().begin(), b.features.data().end());
    std::vector<int> labels = a.labels;
    labels.insert(labels.end(), b.labels.begin(), b.labels.end());
    return {Tensor({a.size() + b.size(), a.features.dim(1)}, std::move(data)), std::move(labels)};
}

double validation_loss_features(EmbeddingNet& net, const FeatureSet& val, const TrainerContext& ctx) {
    if (val.size() == 0) return std::numeric_limits<double>::infinity();
    NoGradGuard no_grad;
    Tensor emb = net.embed_from_features(val.features);
    if (ctx.loss.kind == LossKind::center) {
        Tensor logits = net.logits_from_embedding(emb);
        auto head = ctx.center->head_labels(val.labels);
        return center_softmax_loss(emb, logits, head, ctx.center->state).loss.value();
    }
    LossResult r = similarity_loss(emb, val.labels, ctx.loss);
    return r.empty ? std::numeric_limits<double>::infinity() : r.value.value();
}

}  // namespace

TrainReport train_vae_replay_session(EmbeddingNet& net, ExemplarStore& store,
                                     const SessionData& new_class_data, int new_class_id,
                                     const ReplayConfig& replay, const TrainerContext& ctx) {
    if (!net.frozen_feature_extractor())
        throw ConfigError("train_vae_replay_session: the feature extractor must be frozen");
    if (store.mode != ExemplarStore::Mode::vae)
        throw ConfigError("train_vae_replay_session needs a VAE-mode store");
    if (single_class_of(new_class_data.train, "train_vae_replay_session") != new_class_id)
        throw Error("train_vae_replay_session: new-class data does not match the announced class");

    // the extractor is frozen, so conv features are constants for the session
    FeatureSet train_new{conv_features_all(net, new_class_data.train.images),
                         new_class_data.train.labels};
    FeatureSet val_new{conv_features_all(net, new_class_data.validation.images),
                       new_class_data.validation.labels};

    TeacherSnapshot teacher(net);
    const std::vector<int> seen = store.seen_classes();
    const std::size_t per_class =
        replay.replay_per_class > 0
            ? replay.replay_per_class
            : std::max<std::size_t>(1, train_new.size() / std::max<std::size_t>(seen.size(), 1));

    ReplayBatch val_replay = sample_replay_features(
        store, std::max<std::size_t>(1, val_new.size() / std::max<std::size_t>(seen.size(), 1)),
        Rng(ctx.train.seed).derive(kReplayValStream).next_u64());
    FeatureSet val = concat_features(val_new, {val_replay.features, val_replay.labels});

    auto params = net.trainable_parameters();  // fc stack (+ head)
    AdamState adam;
    adam.learning_rate = ctx.train.learning_rate;
    adam.beta1 = ctx.train.beta1;
    adam.beta2 = ctx.train.beta2;
    adam.epsilon = ctx.train.epsilon;

    Rng rng = Rng(ctx.train.seed).derive(kTrainStream);
    Rng epoch_seeds = Rng(ctx.train.seed).derive(kReplayEpochStream);

    TrainReport report;
    report.best_validation_loss = std::numeric_limits<double>::infinity();
    ParamSnapshot best;
    bool have_best = false;
    std::size_t since_best = 0;
    const std::size_t half = std::max<std::size_t>(1, ctx.train.batch_size / 2);

    for (std::size_t epoch = 0; epoch < ctx.train.max_epochs; ++epoch) {
        ++report.epochs_run;
        ReplayBatch replayed = sample_replay_features(store, per_class, epoch_seeds.next_u64());
        FeatureSet rep{replayed.features, replayed.labels};

        std::vector<std::size_t> order_new(train_new.size()), order_rep(rep.size());
        std::iota(order_new.begin(), order_new.end(), 0);
        std::iota(order_rep.begin(), order_rep.end(), 0);
        rng.shuffle(order_new);
        rng.shuffle(order_rep);

        const std::size_t steps =
            (std::max(train_new.size(), rep.size()) + half - 1) / half;
        for (std::size_t step = 0; step < steps; ++step) {
            // half real new-class features, half replayed, wrapping each pool
            std::vector<std::size_t> rows_new(half), rows_rep(half);
            for (std::size_t i = 0; i < half; ++i) {
                rows_new[i] = order_new[(step * half + i) % order_new.size()];
                rows_rep[i] = order_rep[(step * half + i) % order_rep.size()];
            }
            FeatureSet fresh = feature_rows(train_new, rows_new);
            FeatureSet rehearsal = feature_rows(rep, rows_rep);
            FeatureSet batch = concat_features(fresh, rehearsal);

            zero_grads(params);
            Tensor emb = net.embed_from_features(batch.features);
            Tensor total;
            Tensor center_delta;
            if (ctx.loss.kind == LossKind::center) {
                Tensor logits = net.logits_from_embedding(emb);
                auto head = ctx.center->head_labels(batch.labels);
                auto c = center_softmax_loss(emb, logits, head, ctx.center->state);
                total = c.loss;
                center_delta = c.center_delta;
            } else {
                LossResult main = similarity_loss(emb, batch.labels, ctx.loss);
                if (main.empty) ++report.empty_batches;
                total = main.value;
            }

            if (replay.lambda_distil != 0.0 && rehearsal.size() >= 3) {
                std::vector<std::size_t> rep_rows(rehearsal.size());
                std::iota(rep_rows.begin(), rep_rows.end(), fresh.size());
                Tensor student_rep = gather_rows(emb, rep_rows);
                Tensor teacher_rep = teacher.embed_from_features(rehearsal.features);
                if (ctx.loss.kind == LossKind::center) {
                    Tensor teacher_logits = teacher.logits_from_embedding(teacher_rep);
                    Tensor student_old =
                        student_logits_for_old_classes(net, student_rep, teacher.classifier_classes());
                    total = total + replay.lambda_distil *
                                        kd_distill_loss(teacher_logits, student_old,
                                                        ctx.loss.kd_temperature);
                } else {
                    LossResult distill = angle_distill_loss(teacher_rep, student_rep);
                    if (!distill.empty) total = total + replay.lambda_distil * distill.value;
                }
            }

            if (!std::isfinite(total.value()))
                throw TrainingAbort("replay session diverged at epoch " + std::to_string(epoch + 1));
            total.backward();
            adam_step(params, adam);
            if (center_delta.defined()) apply_center_update(ctx.center->state, center_delta);
        }

        const double vloss = validation_loss_features(net, val, ctx);
        if (vloss < report.best_validation_loss) {
            report.best_validation_loss = vloss;
            best = ParamSnapshot::take(params, ctx.center);
            have_best = true;
            since_best = 0;
        } else if (++since_best > ctx.train.early_stop_patience) {
            break;
        }
    }
    if (have_best) best.restore(params, ctx.center);

    VaeFitConfig fit = replay.vae_fit;
    fit.seed = Rng(ctx.train.seed).derive(kVaeFitStream + static_cast<std::uint64_t>(new_class_id)).next_u64();
    store.vae_by_class[new_class_id] = fit_class_vae(net, train_new.features, fit);
    return report;
}

}  // namespace csl
