#ifndef CSL_VAE_HPP
#define CSL_VAE_HPP

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "csl/optim.hpp"
#include "csl/rng.hpp"
#include "csl/tensor.hpp"

namespace csl {

// Per-class variational autoencoder over flattened conv features:
// input -> hidden -> (mu, log_var) -> mirrored decoder with sigmoid output.
// The stock geometry is 512 -> 256 -> 128.
class ClassVAE {
public:
    ClassVAE() = default;
    ClassVAE(std::size_t input_width, std::size_t hidden_width, std::size_t latent_width, Rng& rng);
    static ClassVAE standard(Rng& rng) { return ClassVAE(512, 256, 128, rng); }

    struct ForwardOut {
        Tensor reconstruction;  // [N, input] in (0,1)
        Tensor mu;              // [N, latent]
        Tensor log_var;         // [N, latent]
    };
    // Reparameterized pass: z = mu + exp(log_var / 2) * eps, eps ~ N(0,I).
    ForwardOut forward(const Tensor& features, Rng& noise) const;
    // Deterministic pass through the mean latent (evaluation).
    ForwardOut forward_mean(const Tensor& features) const;

    Tensor decode(const Tensor& z) const;
    // count decoded samples from standard-normal latents.
    Tensor sample(std::size_t count, Rng& noise) const;

    std::size_t input_width() const { return enc1_w_.dim(1); }
    std::size_t hidden_width() const { return enc1_w_.dim(0); }
    std::size_t latent_width() const { return mu_w_.dim(0); }

    std::vector<NamedParam> parameters();
    ClassVAE clone() const;

    void save(const std::filesystem::path& path) const;
    static ClassVAE load(const std::filesystem::path& path);

private:
    Tensor enc1_w_, enc1_b_;  // input -> hidden
    Tensor mu_w_, mu_b_, lv_w_, lv_b_;
    Tensor dec1_w_, dec1_b_;  // latent -> hidden
    Tensor dec2_w_, dec2_b_;  // hidden -> input
};

struct VaeFitConfig {
    std::size_t max_epochs = 50;
    std::size_t batch_size = 64;
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double holdout_fraction = 0.1;
    std::size_t patience = 5;
    std::uint64_t seed = 0;
    std::size_t hidden_width = 256;
    std::size_t latent_width = 128;
};

struct VaeFitReport {
    double initial_holdout_bce = 0.0;
    double best_holdout_bce = 0.0;
    std::size_t epochs_run = 0;
};

// Trains a fresh VAE on one class's conv features (values in [0,1]). Early
// stops on held-out reconstruction BCE and returns the best snapshot.
ClassVAE fit_vae(const Tensor& features, const VaeFitConfig& config, VaeFitReport* report = nullptr);

// Mean reconstruction BCE through the deterministic mean latent.
double vae_holdout_bce(const ClassVAE& vae, const Tensor& features);

}  // namespace csl

#endif
