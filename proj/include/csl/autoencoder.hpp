#ifndef CSL_AUTOENCODER_HPP
#define CSL_AUTOENCODER_HPP

#include <cstddef>
#include <filesystem>
#include <vector>

#include "csl/optim.hpp"
#include "csl/rng.hpp"
#include "csl/tensor.hpp"

namespace csl {

enum class AeActivation { identity, relu, sigmoid };

// Single-bottleneck feature autoencoder: code = act(W_e x + b_e),
// reconstruction = W_d code + b_d (linear output so it serves both relu and
// sigmoid conv feature ranges).
class FeatureAutoencoder {
public:
    FeatureAutoencoder() = default;
    FeatureAutoencoder(std::size_t input_width, std::size_t code_width, Rng& rng,
                       AeActivation code_activation = AeActivation::sigmoid);
    static FeatureAutoencoder from_weights(Tensor enc_w, Tensor enc_b, Tensor dec_w, Tensor dec_b,
                                           AeActivation code_activation);

    Tensor encode(const Tensor& features) const;       // [N, code_width]
    Tensor reconstruct(const Tensor& features) const;  // [N, input_width]

    std::size_t input_width() const { return enc_w_.dim(1); }
    std::size_t code_width() const { return enc_w_.dim(0); }

    std::vector<NamedParam> parameters();
    void set_trainable(bool trainable);
    FeatureAutoencoder clone() const;

    void save(const std::filesystem::path& path) const;
    static FeatureAutoencoder load(const std::filesystem::path& path);

private:
    AeActivation code_activation_ = AeActivation::sigmoid;
    Tensor enc_w_, enc_b_, dec_w_, dec_b_;
};

}  // namespace csl

#endif
