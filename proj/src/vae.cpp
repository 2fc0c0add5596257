#include "csl/vae.hpp"

#include <algorithm>
#include <cmath>

#include "csl/checkpoint.hpp"
#include "csl/error.hpp"
#include "csl/losses.hpp"
#include "csl/net.hpp"
#include "csl/ops.hpp"

namespace csl {

ClassVAE::ClassVAE(std::size_t input_width, std::size_t hidden_width, std::size_t latent_width, Rng& rng) {
    enc1_w_ = init_weight({hidden_width, input_width}, input_width, rng);
    enc1_b_ = Tensor({hidden_width}, 0.0, true);
    mu_w_ = init_weight({latent_width, hidden_width}, hidden_width, rng);
    mu_b_ = Tensor({latent_width}, 0.0, true);
    lv_w_ = init_weight({latent_width, hidden_width}, hidden_width, rng);
    lv_b_ = Tensor({latent_width}, 0.0, true);
    dec1_w_ = init_weight({hidden_width, latent_width}, latent_width, rng);
    dec1_b_ = Tensor({hidden_width}, 0.0, true);
    dec2_w_ = init_weight({input_width, hidden_width}, hidden_width, rng);
    dec2_b_ = Tensor({input_width}, 0.0, true);
}

ClassVAE::ForwardOut ClassVAE::forward(const Tensor& features, Rng& noise) const {
    Tensor h = relu(linear(features, enc1_w_, enc1_b_));
    Tensor mu = linear(h, mu_w_, mu_b_);
    Tensor log_var = linear(h, lv_w_, lv_b_);

    std::vector<double> eps(mu.numel());
    for (double& v : eps) v = noise.normal();
    Tensor z = mu + csl::exp(log_var * 0.5) * Tensor(mu.shape(), std::move(eps));
    return {decode(z), mu, log_var};
}

ClassVAE::ForwardOut ClassVAE::forward_mean(const Tensor& features) const {
    Tensor h = relu(linear(features, enc1_w_, enc1_b_));
    Tensor mu = linear(h, mu_w_, mu_b_);
    Tensor log_var = linear(h, lv_w_, lv_b_);
    return {decode(mu), mu, log_var};
}

Tensor ClassVAE::decode(const Tensor& z) const {
    Tensor h = relu(linear(z, dec1_w_, dec1_b_));
    return sigmoid(linear(h, dec2_w_, dec2_b_));
}

Tensor ClassVAE::sample(std::size_t count, Rng& noise) const {
    std::vector<double> z(count * latent_width());
    for (double& v : z) v = noise.normal();
    NoGradGuard no_grad;
    return decode(Tensor({count, latent_width()}, std::move(z)));
}

std::vector<NamedParam> ClassVAE::parameters() {
    return {{"enc1.w", enc1_w_}, {"enc1.b", enc1_b_}, {"mu.w", mu_w_},     {"mu.b", mu_b_},
            {"lv.w", lv_w_},     {"lv.b", lv_b_},     {"dec1.w", dec1_w_}, {"dec1.b", dec1_b_},
            {"dec2.w", dec2_w_}, {"dec2.b", dec2_b_}};
}

ClassVAE ClassVAE::clone() const {
    ClassVAE c;
    c.enc1_w_ = enc1_w_.clone();
    c.enc1_b_ = enc1_b_.clone();
    c.mu_w_ = mu_w_.clone();
    c.mu_b_ = mu_b_.clone();
    c.lv_w_ = lv_w_.clone();
    c.lv_b_ = lv_b_.clone();
    c.dec1_w_ = dec1_w_.clone();
    c.dec1_b_ = dec1_b_.clone();
    c.dec2_w_ = dec2_w_.clone();
    c.dec2_b_ = dec2_b_.clone();
    return c;
}

void ClassVAE::save(const std::filesystem::path& path) const {
    Checkpoint ckpt;
    ckpt.descriptor = "kind = class_vae\n";
    ckpt.tensors = const_cast<ClassVAE*>(this)->parameters();
    save_checkpoint(path, ckpt);
}

ClassVAE ClassVAE::load(const std::filesystem::path& path) {
    Checkpoint ckpt = load_checkpoint(path);
    if (descriptor_get(ckpt.descriptor, "kind") != "class_vae")
        throw FormatError(path.string() + " does not hold a class VAE");
    ClassVAE vae;
    std::vector<std::pair<std::string, Tensor*>> slots{
        {"enc1.w", &vae.enc1_w_}, {"enc1.b", &vae.enc1_b_}, {"mu.w", &vae.mu_w_},
        {"mu.b", &vae.mu_b_},     {"lv.w", &vae.lv_w_},     {"lv.b", &vae.lv_b_},
        {"dec1.w", &vae.dec1_w_}, {"dec1.b", &vae.dec1_b_}, {"dec2.w", &vae.dec2_w_},
        {"dec2.b", &vae.dec2_b_}};
    for (auto& [name, slot] : slots) {
        const Tensor* t = ckpt.find(name);
        if (!t) throw FormatError("VAE checkpoint is missing tensor '" + name + "'");
        *slot = t->clone();
        slot->set_requires_grad(true);
    }
    return vae;
}

double vae_holdout_bce(const ClassVAE& vae, const Tensor& features) {
    NoGradGuard no_grad;
    auto out = vae.forward_mean(features);
    double total = 0.0;
    auto r = out.reconstruction.data();
    auto t = features.data();
    for (std::size_t i = 0; i < r.size(); ++i) {
        double v = 0.0;
        if (t[i] > 0.0) v -= t[i] * std::log(std::max(r[i], 1e-12));
        if (t[i] < 1.0) v -= (1.0 - t[i]) * std::log(std::max(1.0 - r[i], 1e-12));
        total += v;
    }
    return total / static_cast<double>(r.size());
}

ClassVAE fit_vae(const Tensor& features, const VaeFitConfig& config, VaeFitReport* report) {
    if (features.ndim() != 2 || features.dim(0) < 2)
        throw DimensionError("fit_vae: need a [N>=2, width] feature matrix, got " +
                             shape_str(features.shape()));
    const std::size_t n = features.dim(0), width = features.dim(1);

    Rng rng = Rng(config.seed).derive(0xae);
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    rng.shuffle(order);
    std::size_t holdout_n = static_cast<std::size_t>(std::llround(config.holdout_fraction * n));
    holdout_n = std::clamp<std::size_t>(holdout_n, 1, n - 1);

    auto slice = [&](std::size_t begin, std::size_t end) {
        std::vector<double> data((end - begin) * width);
        for (std::size_t i = begin; i < end; ++i)
            std::copy_n(features.data().data() + order[i] * width, width, data.data() + (i - begin) * width);
        return Tensor({end - begin, width}, std::move(data));
    };
    Tensor holdout = slice(0, holdout_n);
    Tensor train = slice(holdout_n, n);
    const std::size_t train_n = train.dim(0);

    ClassVAE vae(width, config.hidden_width, config.latent_width, rng);
    auto params = vae.parameters();
    AdamState adam;
    adam.learning_rate = config.learning_rate;
    adam.beta1 = config.beta1;
    adam.beta2 = config.beta2;
    adam.epsilon = config.epsilon;

    double best_bce = vae_holdout_bce(vae, holdout);
    const double initial_bce = best_bce;
    ClassVAE best = vae.clone();
    std::size_t since_best = 0, epochs_run = 0;

    Rng noise = rng.derive(0x7a);
    std::vector<std::size_t> idx(train_n);
    for (std::size_t i = 0; i < train_n; ++i) idx[i] = i;

    for (std::size_t epoch = 0; epoch < config.max_epochs; ++epoch) {
        ++epochs_run;
        rng.shuffle(idx);
        for (std::size_t start = 0; start < train_n; start += config.batch_size) {
            const std::size_t stop = std::min(train_n, start + config.batch_size);
            std::vector<double> batch((stop - start) * width);
            for (std::size_t i = start; i < stop; ++i)
                std::copy_n(train.data().data() + idx[i] * width, width, batch.data() + (i - start) * width);
            Tensor input({stop - start, width}, std::move(batch));

            zero_grads(params);
            auto out = vae.forward(input, noise);
            Tensor loss = vae_loss(out.reconstruction, input, out.mu, out.log_var);
            if (!std::isfinite(loss.value()))
                throw TrainingAbort("VAE training diverged at epoch " + std::to_string(epoch));
            loss.backward();
            adam_step(params, adam);
        }
        const double bce = vae_holdout_bce(vae, holdout);
        if (bce < best_bce) {
            best_bce = bce;
            best = vae.clone();
            since_best = 0;
        } else if (++since_best > config.patience) {
            break;
        }
    }

    if (report) *report = {initial_bce, best_bce, epochs_run};
    return best;
}

}  // namespace csl
