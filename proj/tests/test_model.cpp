#include <chrono>
#include <cmath>
#include <filesystem>
#include <random>

#include "doctest.h"
#include "medthink/errors.hpp"
#include "medthink/model.hpp"
#include "test_support.hpp"

using namespace medthink;

namespace {

ModelConfig small_config(std::size_t d = 16, std::size_t m = 4, std::size_t vocab = 32) {
  ModelConfig c;
  c.vocab_size = vocab;
  c.d = d;
  c.n_max = 8;
  c.m = m;
  c.heads = 2;
  c.enc_layers = 1;
  c.dec_layers = 1;
  c.image_height = 4;
  c.image_width = 4;
  c.seed = 17;
  return c;
}

Tensor random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> dist(0.0, scale);
  Tensor t({r, c});
  for (auto& v : t.data()) v = dist(rng);
  return t;
}

}  // namespace

TEST_CASE("parameter count matches the closed form") {
  for (std::size_t d : {8u, 16u, 32u})
    for (std::size_t layers : {1u, 2u}) {
      ModelConfig c = small_config(d);
      c.enc_layers = layers;
      c.dec_layers = layers + 1;
      MedThinkModel model(c);
      CHECK(model.parameter_count() == MedThinkModel::expected_parameter_count(c));
      for (std::size_t i = 0; i < model.tensor_count(); ++i) CHECK(model.param(i).all_finite());
    }
  // Hand count for d=2, vocab=7, n_max=2, m=1, 2x2 image (patch of 4 pixels),
  // one layer each, ffn 4d=8, single head.
  ModelConfig tiny;
  tiny.vocab_size = 7;
  tiny.d = 2;
  tiny.n_max = 2;
  tiny.m = 1;
  tiny.heads = 1;
  tiny.image_height = 2;
  tiny.image_width = 2;
  // embed 14+4, vision 8+2+2, encoder (8+16+42)+4, fusion 20,
  // decoder (12+32+42)+4, output 14
  CHECK(MedThinkModel::expected_parameter_count(tiny) == 18 + 12 + 70 + 20 + 90 + 14);
  CHECK(MedThinkModel(tiny).parameter_count() == 224);
}

TEST_CASE("config validation") {
  ModelConfig c = small_config();
  c.heads = 3;
  CHECK_THROWS_AS(MedThinkModel{c}, ContractError);
  c = small_config();
  c.m = 3;
  CHECK_THROWS_AS(MedThinkModel{c}, GeometryError);
  c = small_config();
  c.image_width = 5;
  CHECK_THROWS_AS(MedThinkModel{c}, GeometryError);
}

TEST_CASE("encode_text contracts") {
  const MedThinkModel model(small_config());
  const std::vector<int> one{1};
  CHECK(model.encode_text(one).shape() == Shape{1, 16});

  const std::vector<int> ids{1, 9, 12, 2};
  CHECK(model.encode_text(ids) == model.encode_text(ids));

  const std::vector<int> swapped{1, 12, 9, 2};
  CHECK_FALSE(model.encode_text(ids) == model.encode_text(swapped));

  const std::vector<int> bad{1, 32};
  CHECK_THROWS_AS(model.encode_text(bad), VocabularyError);
  const std::vector<int> long_ids(9, 1);
  CHECK_THROWS_AS(model.encode_text(long_ids), LengthError);
}

TEST_CASE("encode_image contracts") {
  MedThinkModel model(small_config());
  Image zero{4, 4, std::vector<int>(16, 0), ""};
  CHECK(model.encode_image(zero) == model.param("vision.patch_positions"));

  ModelConfig c1 = small_config();
  c1.m = 1;
  CHECK(MedThinkModel(c1).encode_image(zero).shape() == Shape{1, 16});

  Image wrong{3, 4, std::vector<int>(12, 0), ""};
  try {
    model.encode_image(wrong);
    FAIL("expected GeometryError");
  } catch (const GeometryError& e) {
    CHECK(std::string(e.what()).find("4x4") != std::string::npos);
    CHECK(std::string(e.what()).find("3x4") != std::string::npos);
  }

  // Changing one pixel in patch 3 (lower right) only moves row 3.
  Image changed = zero;
  changed.pixels[3 * 4 + 3] = 7;
  const Tensor a = model.encode_image(zero), b = model.encode_image(changed);
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t j = 0; j < 16; ++j) {
      if (r == 3) continue;
      CHECK(a.at(r, j) == b.at(r, j));
    }
  bool row3_differs = false;
  for (std::size_t j = 0; j < 16; ++j) row3_differs = row3_differs || a.at(3, j) != b.at(3, j);
  CHECK(row3_differs);
}

TEST_CASE("cross_attention hand case with d=1") {
  ModelConfig c = small_config(1, 4, 8);
  c.heads = 1;
  c.m = 1;
  MedThinkModel model(c);
  model.param("fusion.wq")[0] = 1.0;
  model.param("fusion.wk")[0] = 1.0;
  model.param("fusion.wv")[0] = 1.0;
  Tape tape(false);
  const auto b = model.bind(tape);
  Var query = tape.constant(Tensor::matrix({{1.0}}));
  Var keys = tape.constant(Tensor::matrix({{0.0}, {std::log(2.0)}}));
  // Keys and values share F_I = [0, ln 2]; scale the value projection so the
  // value rows are 0 and 3.
  model.param("fusion.wv")[0] = 3.0 / std::log(2.0);
  auto [attended, weights] = model.cross_attention(b, query, keys);
  CHECK(std::abs(weights.value()[0] - 1.0 / 3.0) < 1e-12);
  CHECK(std::abs(weights.value()[1] - 2.0 / 3.0) < 1e-12);
  CHECK(std::abs(attended.value()[0] - 2.0) < 1e-12);
}

TEST_CASE("cross_attention with a single patch returns the value row") {
  ModelConfig c = small_config();
  c.m = 1;
  MedThinkModel model(c);
  std::mt19937_64 rng(2);
  const Tensor text = random_matrix(5, 16, rng), image = random_matrix(1, 16, rng);
  const FusionTrace t = model.trace(text, image);
  const Tensor value_row = matmul(image, model.param("fusion.wv"));
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(t.attention.at(i, 0) == 1.0);
    for (std::size_t j = 0; j < 16; ++j) CHECK(t.attended.at(i, j) == value_row.at(0, j));
  }
}

TEST_CASE("gated fusion special cases") {
  MedThinkModel model(small_config());
  std::mt19937_64 rng(4);
  const Tensor text = random_matrix(3, 16, rng), image = random_matrix(4, 16, rng);

  SUBCASE("zero gate weights give the mean") {
    for (auto& v : model.param("gate.wl").data()) v = 0.0;
    for (auto& v : model.param("gate.wv").data()) v = 0.0;
    const FusionTrace t = model.trace(text, image);
    for (std::size_t i = 0; i < t.fused.size(); ++i) {
      CHECK(t.gate[i] == 0.5);
      CHECK(std::abs(t.fused[i] - 0.5 * (t.text[i] + t.attended[i])) < 1e-15);
    }
  }
  SUBCASE("equal inputs pass through") {
    Tape tape(false);
    const auto b = model.bind(tape);
    Var x = tape.constant(text);
    auto [fused, gate] = model.gated_fusion(b, x, x);
    CHECK(fused.value() == text);
  }
}

TEST_CASE("fusion trace invariants over random draws") {
  std::mt19937_64 rng(1234);
  for (int draw = 0; draw < 200; ++draw) {
    ModelConfig c = small_config();
    c.seed = rng();
    MedThinkModel model(c);
    for (const char* name : {"gate.wl", "gate.wv", "fusion.wq", "fusion.wk"})
      for (auto& v : model.param(name).data()) v = std::normal_distribution<double>(0.0, 0.5)(rng);
    const Tensor text = random_matrix(1 + draw % 8, 16, rng), image = random_matrix(4, 16, rng, 2.0);
    CHECK(test_support::fusion_invariants_hold(model.trace(text, image)));
  }
}

TEST_CASE("closing the gate collapses the fusion onto the text features") {
  MedThinkModel model(small_config());
  std::mt19937_64 rng(6);
  // Positive text/attended entries with negative gate weights push every
  // pre-activation below -30.
  Tensor text({3, 16}), image({4, 16});
  for (auto& v : text.data()) v = std::uniform_real_distribution<double>(0.5, 1.5)(rng);
  for (auto& v : image.data()) v = std::uniform_real_distribution<double>(0.5, 1.5)(rng);
  for (auto& v : model.param("fusion.wv").data()) v = std::abs(v) + 0.1;
  for (auto& v : model.param("gate.wl").data()) v = -10.0;
  for (auto& v : model.param("gate.wv").data()) v = -10.0;
  const FusionTrace t = model.trace(text, image);
  const Tensor pre = [&] {
    Tensor a = matmul(t.text, model.param("gate.wl"));
    const Tensor b = matmul(t.attended, model.param("gate.wv"));
    for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
    return a;
  }();
  double max_dev = 0.0, max_gap = 0.0;
  for (std::size_t i = 0; i < t.fused.size(); ++i) {
    REQUIRE(pre[i] <= -30.0);
    max_dev = std::max(max_dev, std::abs(t.fused[i] - t.text[i]));
    max_gap = std::max(max_gap, std::abs(t.attended[i] - t.text[i]));
  }
  CHECK(max_dev <= 1e-11 * max_gap);
}

TEST_CASE("decoder is causal and reads the fused features") {
  const MedThinkModel model(small_config());
  std::mt19937_64 rng(9);
  const Tensor fused = random_matrix(5, 16, rng);
  std::vector<int> prefix{1, 7, 9, 11, 13, 4};
  const Tensor base = model.decode_logits(fused, prefix);
  CHECK(base.shape() == Shape{6, 32});
  for (std::size_t t = 1; t < prefix.size(); ++t) {
    auto changed = prefix;
    changed[t] = changed[t] == 20 ? 21 : 20;
    const Tensor alt = model.decode_logits(fused, changed);
    for (std::size_t r = 0; r < t; ++r)
      for (std::size_t j = 0; j < 32; ++j) REQUIRE(alt.at(r, j) == base.at(r, j));
  }
  const Tensor zeroed = model.decode_logits(Tensor({5, 16}), prefix);
  CHECK_FALSE(zeroed == base);

  const std::vector<int> empty;
  CHECK_THROWS_AS(model.decode_logits(fused, empty), ContractError);
}

TEST_CASE("nll_loss examples") {
  Tape tape(false);
  SUBCASE("perfect prediction") {
    Var logits = tape.constant(Tensor::matrix({{0.0, -1e4, -1e4}, {-1e4, 0.0, -1e4}}));
    const std::vector<int> targets{0, 1};
    const auto r = nll_loss(logits, targets, {true, true});
    CHECK(r.sum_loss == 0.0);
  }
  SUBCASE("uniform logits") {
    Var logits = tape.constant(Tensor({5, 7}, 0.3));
    const std::vector<int> targets{0, 1, 2, 3, 4};
    const auto r = nll_loss(logits, targets, {true, false, true, true, false});
    CHECK(std::abs(r.sum_loss - 3.0 * std::log(7.0)) <= 1e-9);
    CHECK(r.sum_loss == r.mean_loss * 3.0);
  }
  SUBCASE("probabilities one half and one quarter") {
    Var logits = tape.constant(Tensor::matrix({{std::log(2.0), std::log(2.0)}, {0.0, std::log(3.0)}}));
    const std::vector<int> targets{1, 0};
    const auto r = nll_loss(logits, targets, {true, true});
    CHECK(std::abs(r.sum_loss - (std::log(2.0) + std::log(4.0))) < 1e-12);
  }
  SUBCASE("all padding") {
    Var logits = tape.constant(Tensor({2, 3}));
    const std::vector<int> targets{0, 0};
    CHECK_THROWS_AS(nll_loss(logits, targets, {false, false}), DegenerateBatchError);
  }
}

TEST_CASE("sum_loss equals mean_loss times count on random batches") {
  std::mt19937_64 rng(77);
  for (int trial = 0; trial < 500; ++trial) {
    Tape tape(false);
    const std::size_t n = 1 + rng() % 9, v = 2 + rng() % 9;
    Var logits = tape.constant(random_matrix(n, v, rng, 3.0));
    std::vector<int> targets(n);
    std::vector<bool> mask(n);
    for (std::size_t i = 0; i < n; ++i) {
      targets[i] = static_cast<int>(rng() % v);
      mask[i] = i == 0 || rng() % 3 != 0;
    }
    const auto r = nll_loss(logits, targets, mask);
    REQUIRE(r.sum_loss == r.mean_loss * static_cast<double>(r.count));
  }
}

TEST_CASE("forward pass is bitwise repeatable") {
  const MedThinkModel model(small_config());
  const auto batch = test_support::toy_batch(small_config());
  double first = 0.0;
  for (int rep = 0; rep < 3; ++rep) {
    Tape tape;
    const auto b = model.bind(tape);
    const double loss = model.sequence_loss(b, batch[0].input, batch[0].image, batch[0].target).mean_loss;
    if (rep == 0) first = loss;
    CHECK(loss == first);
  }
}

TEST_CASE("full model gradient check (d=16, n=8, m=4, vocab=32)") {
  const auto start = std::chrono::steady_clock::now();
  const auto result = test_support::full_model_grad_check();
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  for (const auto& t : result.tensors) {
    CAPTURE(t.name);
    CHECK(t.max_rel_error <= 1e-4);
  }
  CHECK(result.passed);
  CHECK(seconds < 60.0);
}

TEST_CASE("checkpoint round trip") {
  const MedThinkModel model(small_config());
  const Vocab vocab(std::vector<std::string>{"alpha", "beta"});
  ModelConfig c = small_config();
  c.vocab_size = 9;
  const MedThinkModel small(c);
  const auto path = std::filesystem::temp_directory_path() / "medthink_model_ckpt.bin";
  save_checkpoint(path, small, vocab);
  const Checkpoint loaded = load_checkpoint(path);
  CHECK(loaded.model.config() == small.config());
  CHECK(loaded.model.fingerprint() == small.fingerprint());
  CHECK(loaded.vocab == vocab);

  // Vocabulary / config mismatch is rejected.
  save_checkpoint(path, model, vocab);
  CHECK_THROWS_AS(load_checkpoint(path), CheckpointError);

  TensorArchive archive = small.to_archive();
  archive.tensors.pop_back();
  CHECK_THROWS_AS(MedThinkModel::from_archive(archive), CheckpointError);
  archive = small.to_archive();
  archive.tensors[0].second = Tensor({2, 2});
  CHECK_THROWS_AS(MedThinkModel::from_archive(archive), CheckpointError);
  std::filesystem::remove(path);
}
