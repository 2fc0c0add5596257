#include "csl/autoencoder.hpp"

#include "csl/checkpoint.hpp"
#include "csl/error.hpp"
#include "csl/net.hpp"
#include "csl/ops.hpp"

namespace csl {

namespace {

const char* act_name(AeActivation a) {
    switch (a) {
        case AeActivation::identity: return "identity";
        case AeActivation::relu: return "relu";
        default: return "sigmoid";
    }
}

AeActivation act_from_name(const std::string& s) {
    if (s == "identity") return AeActivation::identity;
    if (s == "relu") return AeActivation::relu;
    if (s == "sigmoid") return AeActivation::sigmoid;
    throw FormatError("unknown autoencoder activation '" + s + "'");
}

}  // namespace

FeatureAutoencoder::FeatureAutoencoder(std::size_t input_width, std::size_t code_width, Rng& rng,
                                       AeActivation code_activation)
    : code_activation_(code_activation) {
    enc_w_ = init_weight({code_width, input_width}, input_width, rng);
    enc_b_ = Tensor({code_width}, 0.0, true);
    dec_w_ = init_weight({input_width, code_width}, code_width, rng);
    dec_b_ = Tensor({input_width}, 0.0, true);
}

FeatureAutoencoder FeatureAutoencoder::from_weights(Tensor enc_w, Tensor enc_b, Tensor dec_w,
                                                    Tensor dec_b, AeActivation code_activation) {
    FeatureAutoencoder ae;
    ae.code_activation_ = code_activation;
    ae.enc_w_ = std::move(enc_w);
    ae.enc_b_ = std::move(enc_b);
    ae.dec_w_ = std::move(dec_w);
    ae.dec_b_ = std::move(dec_b);
    return ae;
}

Tensor FeatureAutoencoder::encode(const Tensor& features) const {
    if (features.ndim() != 2 || features.dim(1) != input_width())
        throw DimensionError("autoencoder expects [N," + std::to_string(input_width()) +
                             "] features, got " + shape_str(features.shape()));
    Tensor code = linear(features, enc_w_, enc_b_);
    switch (code_activation_) {
        case AeActivation::identity: return code;
        case AeActivation::relu: return relu(code);
        default: return sigmoid(code);
    }
}

Tensor FeatureAutoencoder::reconstruct(const Tensor& features) const {
    return linear(encode(features), dec_w_, dec_b_);
}

std::vector<NamedParam> FeatureAutoencoder::parameters() {
    return {{"enc.w", enc_w_}, {"enc.b", enc_b_}, {"dec.w", dec_w_}, {"dec.b", dec_b_}};
}

FeatureAutoencoder FeatureAutoencoder::clone() const {
    return from_weights(enc_w_.clone(), enc_b_.clone(), dec_w_.clone(), dec_b_.clone(), code_activation_);
}

void FeatureAutoencoder::set_trainable(bool trainable) {
    enc_w_.set_requires_grad(trainable);
    enc_b_.set_requires_grad(trainable);
    dec_w_.set_requires_grad(trainable);
    dec_b_.set_requires_grad(trainable);
}

void FeatureAutoencoder::save(const std::filesystem::path& path) const {
    Checkpoint ckpt;
    ckpt.descriptor = std::string("kind = feature_autoencoder\n") +
                      "code_activation = " + act_name(code_activation_) + "\n";
    ckpt.tensors = const_cast<FeatureAutoencoder*>(this)->parameters();
    save_checkpoint(path, ckpt);
}

FeatureAutoencoder FeatureAutoencoder::load(const std::filesystem::path& path) {
    Checkpoint ckpt = load_checkpoint(path);
    if (descriptor_get(ckpt.descriptor, "kind") != "feature_autoencoder")
        throw FormatError(path.string() + " does not hold a feature autoencoder");
    const Tensor *ew = ckpt.find("enc.w"), *eb = ckpt.find("enc.b"), *dw = ckpt.find("dec.w"),
                 *db = ckpt.find("dec.b");
    if (!ew || !eb || !dw || !db) throw FormatError("autoencoder checkpoint is missing tensors");
    FeatureAutoencoder ae = from_weights(ew->clone(), eb->clone(), dw->clone(), db->clone(),
                                         act_from_name(descriptor_get(ckpt.descriptor, "code_activation")));
    ae.set_trainable(true);
    return ae;
}

}  // namespace csl
