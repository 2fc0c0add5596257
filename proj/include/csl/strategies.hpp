#ifndef CSL_STRATEGIES_HPP
#define CSL_STRATEGIES_HPP

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <vector>

#include "csl/autoencoder.hpp"
#include "csl/dataset.hpp"
#include "csl/fisher.hpp"
#include "csl/losses.hpp"
#include "csl/net.hpp"
#include "csl/vae.hpp"

namespace csl {

enum class LossKind { triplet, contrastive, angular, center };

struct LossConfig {
    LossKind kind = LossKind::contrastive;
    double triplet_margin = 1.25;
    double contrastive_margin = 1.0;
    double angular_alpha_degrees = 45.0;
    double pair_pos_threshold = -1.0;  // <0 selects 0.2 * contrastive margin
    double center_lambda = 1.0;
    double center_lr = 0.5;
    double kd_temperature = 2.0;
};

struct TrainConfig {
    std::size_t max_epochs = 50;
    std::size_t batch_size = 64;
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::size_t early_stop_patience = 5;
    std::uint64_t seed = 0;
};

// Head bookkeeping for the softmax+center path: position in `order` is the
// classifier row and center row of that class id.
struct CenterSession {
    CenterState state = CenterState::init(0);
    std::vector<int> class_order;

    std::size_t head_index(int class_id) const;
    // Expands the classifier head and the center table for a new class.
    void register_class(int class_id, EmbeddingNet& net, Rng& rng);
    std::vector<std::size_t> head_labels(std::span<const int> labels) const;
};

struct TrainerContext {
    LossConfig loss;
    TrainConfig train;
    CenterSession* center = nullptr;  // required for LossKind::center
};

struct SessionData {
    ImageSet train;
    ImageSet validation;
};

struct TrainReport {
    std::size_t epochs_run = 0;
    double best_validation_loss = 0.0;
    std::size_t empty_batches = 0;  // batches whose miner found nothing
};

// Retained items of previously seen classes: raw images (rehearsal) or one
// trained VAE per class (latent replay).
struct ExemplarStore {
    enum class Mode { none, images, vae };

    Mode mode = Mode::none;
    std::size_t budget = 200;  // images mode: total retained images
    std::map<int, ImageSet> images_by_class;
    std::map<int, ClassVAE> vae_by_class;

    std::size_t total_images() const;
    std::vector<int> seen_classes() const;
    ImageSet merged_images() const;

    void save(const std::filesystem::path& dir) const;
    static ExemplarStore load(const std::filesystem::path& dir);
};

// Frozen copy of the network taken before a session; all outputs are
// produced outside the gradient graph.
class TeacherSnapshot {
public:
    explicit TeacherSnapshot(const EmbeddingNet& net) : net_(net.clone()) {}
    Tensor embed(const Tensor& images) const;
    Tensor conv_features(const Tensor& images) const;
    Tensor embed_from_features(const Tensor& features) const;
    Tensor logits_from_embedding(const Tensor& embedding) const;
    std::size_t classifier_classes() const { return net_.classifier_classes(); }

private:
    EmbeddingNet net_;
};

// ---- strategies ----

// Plain training on the base classes; keeps the best epoch by validation
// loss within the epoch cap.
TrainReport train_base(EmbeddingNet& net, const SessionData& base_data, const TrainerContext& ctx);

// Fine-tune on one new class paired with one previously seen class. No
// retention machinery.
TrainReport train_normal_session(EmbeddingNet& net, const SessionData& new_class_data,
                                 const SessionData& paired_old_class_data, const TrainerContext& ctx);

struct EwcSessionResult {
    TrainReport report;
    FisherResult refreshed_fisher;  // computed on this session's data afterward
};
// Adds the quadratic anchor penalty (skipped entirely at importance 0, so
// the zero-weight run reproduces normal training bitwise).
EwcSessionResult train_ewc_session(EmbeddingNet& net, const FisherDiag& fisher,
                                   const SessionData& new_class_data,
                                   const SessionData& paired_old_class_data, const TrainerContext& ctx);

struct EbllConfig {
    double lambda_ae = 1.0;
    std::size_t code_width = 128;
};
// Constrains bottleneck codes of conv features against the pre-session
// snapshot through every stored autoencoder, then trains and appends a new
// autoencoder for this session.
TrainReport train_ebll_session(EmbeddingNet& net, std::vector<FeatureAutoencoder>& autoencoders,
                               const SessionData& new_class_data,
                               const SessionData& paired_old_class_data, const EbllConfig& ebll,
                               const TrainerContext& ctx);

// For each class, the k items whose embeddings sit closest to the class
// mean; ties break by index. Classes smaller than k keep everything.
std::map<int, std::vector<std::size_t>> select_exemplars(const Tensor& embeddings,
                                                         std::span<const int> labels, std::size_t k);

// Rehearsal with stored exemplars plus teacher distillation (angle-wise; the
// softened-softmax form for the center loss). Afterward the store is
// re-herded to floor(budget / seen classes) per class.
TrainReport train_icarl_session(EmbeddingNet& net, ExemplarStore& store, const SessionData& new_class_data,
                                double lambda_distil, const TrainerContext& ctx);

// One VAE on a single class's frozen conv features. Refuses when the
// extractor is not frozen.
ClassVAE fit_class_vae(const EmbeddingNet& net, const Tensor& class_features, const VaeFitConfig& config,
                       VaeFitReport* report = nullptr);

struct ReplayBatch {
    Tensor features;  // [N, feature_width]
    std::vector<int> labels;
    bool empty_flagged = false;
};
// per_class_count decoded feature vectors per seen class.
ReplayBatch sample_replay_features(const ExemplarStore& store, std::size_t per_class_count,
                                   std::uint64_t seed);

struct ReplayConfig {
    double lambda_distil = 1.0;
    std::size_t replay_per_class = 0;  // 0: balance against the new-class count
    VaeFitConfig vae_fit;
};
// Trains the fully connected stack on mixed batches of real new-class conv
// features and replayed features, with teacher distillation on the replayed
// half; afterward fits the new class's VAE into the store.
TrainReport train_vae_replay_session(EmbeddingNet& net, ExemplarStore& store,
                                     const SessionData& new_class_data, int new_class_id,
                                     const ReplayConfig& replay, const TrainerContext& ctx);

// ---- shared helpers ----

// Batched no-grad forward passes.
Tensor embed_all(const EmbeddingNet& net, const Tensor& images, std::size_t batch_size = 128);
Tensor conv_features_all(const EmbeddingNet& net, const Tensor& images, std::size_t batch_size = 128);

// Mines with the configured miner and evaluates the similarity loss.
LossResult similarity_loss(const Tensor& embeddings, std::span<const int> labels, const LossConfig& cfg);

}  // namespace csl

#endif
