#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <filesystem>

#include "csl/checkpoint.hpp"
#include "csl/error.hpp"
#include "csl/net.hpp"
#include "csl/ops.hpp"
#include "csl/rng.hpp"

using namespace csl;

namespace {

NetConfig toy_config() {
    NetConfig c;
    c.conv_channels = {4, 6, 8};
    c.fc1_width = 32;
    c.fc2_width = 16;
    return c;
}

Tensor random_images(std::size_t n, Rng& rng, std::size_t hw = 28) {
    std::vector<double> data(n * hw * hw);
    for (double& v : data) v = rng.uniform(-1.0, 1.0);
    return Tensor({n, 1, hw, hw}, std::move(data));
}

}  // namespace

TEST_CASE("embedding is 128-wide and deterministic per seed") {
    Rng init(11);
    EmbeddingNet net(toy_config(), init);
    Rng data_rng(5);
    Tensor imgs = random_images(3, data_rng);

    Tensor emb = net.embed(imgs);
    CHECK(emb.shape() == Shape{3, 128});

    Rng init2(11);
    EmbeddingNet net2(toy_config(), init2);
    Tensor emb2 = net2.embed(imgs);
    CHECK(std::equal(emb.data().begin(), emb.data().end(), emb2.data().begin()));
}

TEST_CASE("identical images embed identically") {
    Rng init(3);
    EmbeddingNet net(toy_config(), init);
    Rng data_rng(8);
    Tensor one = random_images(1, data_rng);
    std::vector<double> dup(one.data().begin(), one.data().end());
    dup.insert(dup.end(), one.data().begin(), one.data().end());
    Tensor two({2, 1, 28, 28}, std::move(dup));
    Tensor emb = net.embed(two);
    for (std::size_t j = 0; j < 128; ++j) CHECK(emb.data()[j] == emb.data()[128 + j]);
}

TEST_CASE("non-finite input is rejected") {
    Rng init(3);
    EmbeddingNet net(toy_config(), init);
    Tensor bad({1, 1, 28, 28}, 0.0);
    bad.mutable_data()[5] = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(net.embed(bad), Error);
}

TEST_CASE("Fig-1 sized stack flattens a 28x28 input to 512 features") {
    // shape arithmetic: 28 -> pool 14 -> pool 7 -> unpadded conv 5 -> pool 2
    NetConfig full;  // 32/64/128 channels
    CHECK(full.conv_out_h() == 2);
    CHECK(full.conv_out_w() == 2);
    CHECK(full.feature_width() == 512);

    Rng init(1);
    EmbeddingNet net(full, init);
    Rng data_rng(2);
    Tensor imgs = random_images(2, data_rng);
    CHECK(net.conv_features(imgs).shape() == Shape{2, 512});
}

TEST_CASE("sigmoid-configured conv features sit strictly inside (0,1)") {
    NetConfig c = toy_config();
    c.final_conv_activation = ConvActivation::sigmoid;
    Rng init(4);
    EmbeddingNet net(c, init);
    Rng data_rng(6);
    Tensor f = net.vae_features(random_images(2, data_rng));
    for (double v : f.data()) {
        CHECK(v > 0.0);
        CHECK(v < 1.0);
    }
}

TEST_CASE("relu-configured net refuses to hand out VAE features") {
    Rng init(4);
    EmbeddingNet net(toy_config(), init);
    Rng data_rng(6);
    Tensor imgs = random_images(1, data_rng);
    CHECK_THROWS_AS(net.vae_features(imgs), ConfigError);
    CHECK_NOTHROW(net.conv_features(imgs));
}

TEST_CASE("freeze keeps conv parameters out of the trainable set") {
    Rng init(9);
    EmbeddingNet net(toy_config(), init);
    CHECK(net.trainable_parameters().size() == net.parameters().size());
    net.set_frozen_feature_extractor(true);
    auto trainable = net.trainable_parameters();
    for (const auto& p : trainable) CHECK(p.name.substr(0, 4) != "conv");

    const auto before = net.conv_parameters();
    std::vector<std::vector<double>> snapshot;
    for (const auto& p : before) snapshot.emplace_back(p.tensor.data().begin(), p.tensor.data().end());

    // run a few optimizer steps over the trainable set
    AdamState state;
    Rng data_rng(10);
    Tensor imgs = random_images(2, data_rng);
    for (int it = 0; it < 3; ++it) {
        zero_grads(trainable);
        Tensor loss = mean(net.embed(imgs) * net.embed(imgs));
        loss.backward();
        adam_step(trainable, state);
    }
    auto after = net.conv_parameters();
    for (std::size_t i = 0; i < after.size(); ++i)
        CHECK(std::equal(snapshot[i].begin(), snapshot[i].end(), after[i].tensor.data().begin()));
}

TEST_CASE("expand_classifier preserves old rows bitwise and old logits exactly") {
    NetConfig c = toy_config();
    c.classifier_classes = 5;
    Rng init(13);
    EmbeddingNet net(c, init);
    Rng data_rng(14);
    Tensor imgs = random_images(2, data_rng);
    Tensor before = net.logits_from_embedding(net.embed(imgs));
    const std::vector<double> w5(net.parameters().back().tensor.data().begin(),
                                 net.parameters().back().tensor.data().end());

    Rng grow(15);
    net.expand_classifier(6, grow);
    CHECK(net.classifier_classes() == 6);
    Tensor after = net.logits_from_embedding(net.embed(imgs));
    for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t j = 0; j < 5; ++j)
            CHECK(after.data()[i * 6 + j] == before.data()[i * 5 + j]);

    CHECK_THROWS_AS(net.expand_classifier(4, grow), ConfigError);
}

TEST_CASE("repeated expansion equals direct expansion on preserved rows") {
    NetConfig c = toy_config();
    c.classifier_classes = 5;
    Rng init_a(21), init_b(21);
    EmbeddingNet stepwise(c, init_a);
    EmbeddingNet direct(c, init_b);

    Rng grow_a(22), grow_b(22);
    stepwise.expand_classifier(6, grow_a);
    stepwise.expand_classifier(7, grow_a);
    direct.expand_classifier(7, grow_b);

    auto w_step = stepwise.parameters();
    auto w_dir = direct.parameters();
    const Tensor& hw_step = w_step[w_step.size() - 2].tensor;
    const Tensor& hw_dir = w_dir[w_dir.size() - 2].tensor;
    for (std::size_t j = 0; j < 5 * NetConfig::kEmbeddingWidth; ++j)
        CHECK(hw_step.data()[j] == hw_dir.data()[j]);
}

TEST_CASE("checkpoint round-trip is bitwise") {
    NetConfig c = toy_config();
    c.final_conv_activation = ConvActivation::sigmoid;
    c.classifier_classes = 3;
    Rng init(31);
    EmbeddingNet net(c, init);
    net.set_frozen_feature_extractor(true);

    const auto path = std::filesystem::temp_directory_path() / "csl_net_roundtrip.ckpt";
    net.save(path);
    EmbeddingNet back = EmbeddingNet::load(path);
    std::filesystem::remove(path);

    CHECK(back.frozen_feature_extractor());
    CHECK(back.config().final_conv_activation == ConvActivation::sigmoid);
    CHECK(back.classifier_classes() == 3);

    auto pa = net.parameters();
    auto pb = back.parameters();
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) {
        CHECK(pa[i].name == pb[i].name);
        CHECK(pa[i].tensor.shape() == pb[i].tensor.shape());
        CHECK(std::equal(pa[i].tensor.data().begin(), pa[i].tensor.data().end(),
                         pb[i].tensor.data().begin()));
    }

    Rng data_rng(32);
    Tensor imgs = random_images(2, data_rng);
    Tensor ea = net.embed(imgs), eb = back.embed(imgs);
    CHECK(std::equal(ea.data().begin(), ea.data().end(), eb.data().begin()));
}

TEST_CASE("checkpoint survives odd descriptor payloads and rejects garbage") {
    const auto path = std::filesystem::temp_directory_path() / "csl_raw.ckpt";
    Checkpoint out;
    out.descriptor = "kind = scratch\nnote = has = signs\n";
    out.tensors.push_back({"a", Tensor({2, 2}, std::vector<double>{1.5, -2.25, 0.0, 1e-300})});
    save_checkpoint(path, out);
    Checkpoint in = load_checkpoint(path);
    CHECK(descriptor_get(in.descriptor, "note") == "has = signs");
    CHECK(in.find("a") != nullptr);
    CHECK(in.find("a")->data()[3] == 1e-300);
    std::filesystem::remove(path);

    CHECK_THROWS_AS(load_checkpoint("/nonexistent/missing.ckpt"), IoError);
}
