#include "csl/net.hpp"

#include <cmath>
#include <sstream>

#include "csl/checkpoint.hpp"
#include "csl/error.hpp"
#include "csl/ops.hpp"

namespace csl {

namespace {

std::size_t pool_out(std::size_t x) { return (x - 2) / 2 + 1; }

std::size_t conv_stack_out(std::size_t x) {
    // conv 3x3 pad 1 keeps the extent; the final conv runs without padding
    x = pool_out(x);
    x = pool_out(x);
    return pool_out(x - 2);
}

}  // namespace

std::size_t NetConfig::conv_out_h() const { return conv_stack_out(in_h); }
std::size_t NetConfig::conv_out_w() const { return conv_stack_out(in_w); }
std::size_t NetConfig::feature_width() const { return conv_channels[2] * conv_out_h() * conv_out_w(); }

void NetConfig::validate() const {
    if (in_h < 16 || in_w < 16)
        throw DimensionError("net input must be at least 16x16 to survive three pooled conv blocks");
    for (std::size_t c : conv_channels)
        if (c == 0) throw DimensionError("conv channel counts must be positive");
    if (fc1_width == 0 || fc2_width == 0) throw DimensionError("fc widths must be positive");
}

std::string NetConfig::descriptor() const {
    std::ostringstream os;
    os << "kind = embedding_net\n";
    os << "in_channels = " << in_channels << "\n";
    os << "in_h = " << in_h << "\n";
    os << "in_w = " << in_w << "\n";
    os << "conv1 = " << conv_channels[0] << "\n";
    os << "conv2 = " << conv_channels[1] << "\n";
    os << "conv3 = " << conv_channels[2] << "\n";
    os << "fc1 = " << fc1_width << "\n";
    os << "fc2 = " << fc2_width << "\n";
    os << "final_conv_activation = " << (final_conv_activation == ConvActivation::relu ? "relu" : "sigmoid")
       << "\n";
    os << "classifier_classes = " << classifier_classes << "\n";
    return os.str();
}

NetConfig NetConfig::from_descriptor(const std::string& d) {
    if (descriptor_get(d, "kind") != "embedding_net")
        throw FormatError("checkpoint does not describe an embedding net");
    NetConfig c;
    c.in_channels = std::stoul(descriptor_get(d, "in_channels"));
    c.in_h = std::stoul(descriptor_get(d, "in_h"));
    c.in_w = std::stoul(descriptor_get(d, "in_w"));
    c.conv_channels = {std::stoul(descriptor_get(d, "conv1")), std::stoul(descriptor_get(d, "conv2")),
                       std::stoul(descriptor_get(d, "conv3"))};
    c.fc1_width = std::stoul(descriptor_get(d, "fc1"));
    c.fc2_width = std::stoul(descriptor_get(d, "fc2"));
    c.final_conv_activation =
        descriptor_get(d, "final_conv_activation") == "sigmoid" ? ConvActivation::sigmoid : ConvActivation::relu;
    c.classifier_classes = std::stoul(descriptor_get(d, "classifier_classes"));
    return c;
}

Tensor init_weight(Shape shape, std::size_t fan_in, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::vector<double> data(shape_numel(shape));
    for (double& v : data) v = rng.uniform(-bound, bound);
    return Tensor(std::move(shape), std::move(data), true);
}

EmbeddingNet::EmbeddingNet(const NetConfig& config, Rng& rng) : config_(config) {
    config_.validate();
    std::size_t in_c = config_.in_channels;
    for (std::size_t i = 0; i < 3; ++i) {
        const std::size_t out_c = config_.conv_channels[i];
        conv_w_[i] = init_weight({out_c, in_c, 3, 3}, in_c * 9, rng);
        conv_b_[i] = Tensor({out_c}, 0.0, true);
        in_c = out_c;
    }
    const std::size_t flat = config_.feature_width();
    fc1_w_ = init_weight({config_.fc1_width, flat}, flat, rng);
    fc1_b_ = Tensor({config_.fc1_width}, 0.0, true);
    fc2_w_ = init_weight({config_.fc2_width, config_.fc1_width}, config_.fc1_width, rng);
    fc2_b_ = Tensor({config_.fc2_width}, 0.0, true);
    fc3_w_ = init_weight({NetConfig::kEmbeddingWidth, config_.fc2_width}, config_.fc2_width, rng);
    fc3_b_ = Tensor({NetConfig::kEmbeddingWidth}, 0.0, true);
    if (config_.classifier_classes > 0) expand_classifier(config_.classifier_classes, rng);
}

Tensor EmbeddingNet::conv_maps(const Tensor& images) const {
    if (images.ndim() != 4 || images.dim(1) != config_.in_channels || images.dim(2) != config_.in_h ||
        images.dim(3) != config_.in_w)
        throw DimensionError("net expects images shaped [N," + std::to_string(config_.in_channels) + "," +
                             std::to_string(config_.in_h) + "," + std::to_string(config_.in_w) + "], got " +
                             shape_str(images.shape()));
    for (double v : images.data())
        if (!std::isfinite(v)) throw Error("net input contains non-finite values");

    Tensor x = max_pool2d(relu(bias_nchw(conv2d(images, conv_w_[0], 1, 1), conv_b_[0])));
    x = max_pool2d(relu(bias_nchw(conv2d(x, conv_w_[1], 1, 1), conv_b_[1])));
    x = bias_nchw(conv2d(x, conv_w_[2], 1, 0), conv_b_[2]);
    x = config_.final_conv_activation == ConvActivation::relu ? relu(x) : sigmoid(x);
    return max_pool2d(x);
}

Tensor EmbeddingNet::conv_features(const Tensor& images) const { return flatten_rows(conv_maps(images)); }

Tensor EmbeddingNet::vae_features(const Tensor& images) const {
    if (config_.final_conv_activation != ConvActivation::sigmoid)
        throw ConfigError("VAE-compatible features need the sigmoid final conv activation; "
                          "this net is configured with relu");
    return conv_features(images);
}

Tensor EmbeddingNet::embed_from_features(const Tensor& features) const {
    if (features.ndim() != 2 || features.dim(1) != config_.feature_width())
        throw DimensionError("expected [N," + std::to_string(config_.feature_width()) + "] conv features, got " +
                             shape_str(features.shape()));
    Tensor x = relu(linear(features, fc1_w_, fc1_b_));
    x = relu(linear(x, fc2_w_, fc2_b_));
    return linear(x, fc3_w_, fc3_b_);  // fc3 is linear: raw embedding geometry
}

Tensor EmbeddingNet::embed(const Tensor& images) const { return embed_from_features(conv_features(images)); }

Tensor EmbeddingNet::logits_from_embedding(const Tensor& embedding) const {
    if (!has_classifier()) throw ConfigError("net has no classifier head");
    return linear(embedding, head_w_, head_b_);
}

void EmbeddingNet::expand_classifier(std::size_t new_class_count, Rng& rng) {
    const std::size_t old_count = classifier_classes();
    if (new_class_count <= old_count)
        throw ConfigError("expand_classifier: head already has " + std::to_string(old_count) +
                          " classes, cannot shrink to " + std::to_string(new_class_count));
    Tensor w = init_weight({new_class_count, NetConfig::kEmbeddingWidth}, NetConfig::kEmbeddingWidth, rng);
    Tensor b({new_class_count}, 0.0, true);
    if (old_count > 0) {
        std::copy_n(head_w_.data().data(), old_count * NetConfig::kEmbeddingWidth, w.mutable_data().data());
        std::copy_n(head_b_.data().data(), old_count, b.mutable_data().data());
    }
    head_w_ = w;
    head_b_ = b;
    config_.classifier_classes = new_class_count;
}

void EmbeddingNet::set_frozen_feature_extractor(bool frozen) {
    frozen_ = frozen;
    for (std::size_t i = 0; i < 3; ++i) {
        conv_w_[i].set_requires_grad(!frozen);
        conv_b_[i].set_requires_grad(!frozen);
    }
}

std::vector<NamedParam> EmbeddingNet::conv_parameters() {
    std::vector<NamedParam> out;
    for (std::size_t i = 0; i < 3; ++i) {
        out.push_back({"conv" + std::to_string(i + 1) + ".w", conv_w_[i]});
        out.push_back({"conv" + std::to_string(i + 1) + ".b", conv_b_[i]});
    }
    return out;
}

std::vector<NamedParam> EmbeddingNet::fc_parameters() {
    std::vector<NamedParam> out{{"fc1.w", fc1_w_}, {"fc1.b", fc1_b_}, {"fc2.w", fc2_w_},
                                {"fc2.b", fc2_b_}, {"fc3.w", fc3_w_}, {"fc3.b", fc3_b_}};
    if (has_classifier()) {
        out.push_back({"head.w", head_w_});
        out.push_back({"head.b", head_b_});
    }
    return out;
}

std::vector<NamedParam> EmbeddingNet::parameters() {
    std::vector<NamedParam> out = conv_parameters();
    for (auto& p : fc_parameters()) out.push_back(std::move(p));
    return out;
}

std::vector<NamedParam> EmbeddingNet::trainable_parameters() {
    return frozen_ ? fc_parameters() : parameters();
}

EmbeddingNet EmbeddingNet::clone() const {
    EmbeddingNet copy;
    copy.config_ = config_;
    copy.frozen_ = frozen_;
    for (std::size_t i = 0; i < 3; ++i) {
        copy.conv_w_[i] = conv_w_[i].clone();
        copy.conv_b_[i] = conv_b_[i].clone();
    }
    copy.fc1_w_ = fc1_w_.clone();
    copy.fc1_b_ = fc1_b_.clone();
    copy.fc2_w_ = fc2_w_.clone();
    copy.fc2_b_ = fc2_b_.clone();
    copy.fc3_w_ = fc3_w_.clone();
    copy.fc3_b_ = fc3_b_.clone();
    if (has_classifier()) {
        copy.head_w_ = head_w_.clone();
        copy.head_b_ = head_b_.clone();
    }
    return copy;
}

void EmbeddingNet::save(const std::filesystem::path& path) const {
    Checkpoint ckpt;
    ckpt.descriptor = config_.descriptor() + "frozen_feature_extractor = " + (frozen_ ? "1" : "0") + "\n";
    ckpt.tensors = const_cast<EmbeddingNet*>(this)->parameters();
    save_checkpoint(path, ckpt);
}

EmbeddingNet EmbeddingNet::load(const std::filesystem::path& path) {
    Checkpoint ckpt = load_checkpoint(path);
    NetConfig config = NetConfig::from_descriptor(ckpt.descriptor);
    Rng scratch(0);
    EmbeddingNet net(config, scratch);
    for (auto& p : net.parameters()) {
        const Tensor* stored = ckpt.find(p.name);
        if (!stored) throw FormatError("checkpoint is missing tensor '" + p.name + "'");
        if (stored->shape() != p.tensor.shape())
            throw FormatError("checkpoint tensor '" + p.name + "' has shape " + shape_str(stored->shape()) +
                              ", expected " + shape_str(p.tensor.shape()));
        std::copy_n(stored->data().data(), stored->numel(), p.tensor.mutable_data().data());
    }
    net.set_frozen_feature_extractor(descriptor_get(ckpt.descriptor, "frozen_feature_extractor") == "1");
    return net;
}

}  // namespace csl
