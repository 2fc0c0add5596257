#ifndef CSL_NET_HPP
#define CSL_NET_HPP

#include <array>
#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include "csl/optim.hpp"
#include "csl/rng.hpp"
#include "csl/tensor.hpp"

namespace csl {

enum class ConvActivation { relu, sigmoid };

// Embedding CNN: three 3x3 conv blocks (each followed by 2x2 max pooling),
// then fc 256 -> fc 128 -> linear 128-wide embedding. The last conv uses
// padding 0 so a 28x28 input flattens to 128 channels x 2x2 = 512, which is
// also the input width of the feature autoencoders and class VAEs. An
// optional K-way classifier head on top of the embedding serves the
// softmax+center objective.
struct NetConfig {
    std::size_t in_channels = 1;
    std::size_t in_h = 28;
    std::size_t in_w = 28;
    std::array<std::size_t, 3> conv_channels{32, 64, 128};
    std::size_t fc1_width = 256;
    std::size_t fc2_width = 128;
    ConvActivation final_conv_activation = ConvActivation::relu;
    std::size_t classifier_classes = 0;  // 0 = no head

    static constexpr std::size_t kEmbeddingWidth = 128;

    std::size_t conv_out_h() const;
    std::size_t conv_out_w() const;
    std::size_t feature_width() const;  // flattened conv output

    std::string descriptor() const;
    static NetConfig from_descriptor(const std::string& descriptor);

    void validate() const;
};

class EmbeddingNet {
public:
    EmbeddingNet() = default;
    EmbeddingNet(const NetConfig& config, Rng& rng);

    const NetConfig& config() const { return config_; }

    // Flattened [N, feature_width] output of the conv stack.
    Tensor conv_features(const Tensor& images) const;
    // Same, but only valid on a sigmoid-configured net (VAE replay needs
    // features in (0,1) for the binary cross-entropy reconstruction).
    Tensor vae_features(const Tensor& images) const;

    Tensor embed_from_features(const Tensor& features) const;
    Tensor embed(const Tensor& images) const;  // [N, 128]

    bool has_classifier() const { return head_w_.defined(); }
    std::size_t classifier_classes() const { return has_classifier() ? head_w_.dim(0) : 0; }
    Tensor logits_from_embedding(const Tensor& embedding) const;
    Tensor classifier_weight() const { return head_w_; }
    Tensor classifier_bias() const { return head_b_; }
    // Grows the head to new_class_count rows; existing rows are preserved
    // bitwise. Creates the head if absent. Shrinking is an error.
    void expand_classifier(std::size_t new_class_count, Rng& rng);

    bool frozen_feature_extractor() const { return frozen_; }
    void set_frozen_feature_extractor(bool frozen);

    std::vector<NamedParam> parameters();                 // everything
    std::vector<NamedParam> trainable_parameters();       // honors the freeze
    std::vector<NamedParam> conv_parameters();
    std::vector<NamedParam> fc_parameters();              // fc stack + head

    EmbeddingNet clone() const;

    void save(const std::filesystem::path& path) const;
    static EmbeddingNet load(const std::filesystem::path& path);

private:
    Tensor conv_maps(const Tensor& images) const;  // [N,C3,h,w] before flatten

    NetConfig config_;
    bool frozen_ = false;
    Tensor conv_w_[3], conv_b_[3];
    Tensor fc1_w_, fc1_b_, fc2_w_, fc2_b_, fc3_w_, fc3_b_;
    Tensor head_w_, head_b_;
};

// Uniform fan-in initialization: U(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights,
// zero biases.
Tensor init_weight(Shape shape, std::size_t fan_in, Rng& rng);

}  // namespace csl

#endif
