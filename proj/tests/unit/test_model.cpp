#include <cmath>
#include <numeric>

#include "doctest.h"
#include "poemform/corpus.hpp"
#include "poemform/errors.hpp"
#include "poemform/model.hpp"
#include "test_support.hpp"

using namespace poemform;
using namespace poemform::lm;
using poemform::testing::TempDir;

namespace {

// Reference cross-entropy in long double, straight from the definition.
long double ce_oracle(const std::vector<long double>& x, std::size_t target) {
  long double sum = 0;
  for (auto v : x) sum += std::exp(v);
  return -x[target] + std::log(sum);
}

ModelConfig toy_config(int vocab = 32) {
  ModelConfig c;
  c.layers = 2;
  c.heads = 2;
  c.embed_dim = 16;
  c.ff_dim = 32;
  c.vocab_size = vocab;
  c.max_seq_len = 16;
  c.dropout_rate = 0.0;
  return c;
}

Parameters<double> perturbed_toy(std::uint64_t seed) {
  auto p = init_parameters(toy_config(), seed).cast<double>();
  Rng rng(seed + 100);
  for (auto& v : p.values()) v += 0.05 * rng.normal();
  return p;
}

Batch toy_batch() {
  static const std::vector<TokenId> a{2, 9, 10, 11, 4, 12, 13, 3};
  static const std::vector<TokenId> b{2, 14, 15, 5, 16, 6, 17, 18, 7, 19, 3};
  return make_batch({a, b}, 16);
}

}  // namespace

TEST_CASE("ce_loss values") {
  const std::vector<double> zeros{0.0, 0.0};
  CHECK(ce_loss<double>(zeros, 0) == doctest::Approx(std::log(2.0)).epsilon(1e-12));

  const std::vector<double> far{10.0, -10.0};
  // The definition cancels catastrophically here; ln(1 + e^-20) is the closed form.
  const auto expected = static_cast<double>(std::log1p(std::exp(-20.0L)));
  CHECK(expected == doctest::Approx(2.061e-9).epsilon(1e-3));
  CHECK(std::abs(ce_loss<double>(far, 0) - expected) <= 1e-12 * expected);

  for (int v : {2, 7, 100}) {
    const std::vector<double> flat(v, 3.25);
    for (int t = 0; t < v; t += 3) CHECK(ce_loss<double>(flat, t) == doctest::Approx(std::log(double(v))).epsilon(1e-12));
  }

  const std::vector<float> big{1e4f, -1e4f, 0.0f};
  CHECK(std::isfinite(ce_loss<float>(big, 1)));
  CHECK(ce_loss<float>(big, 1) == doctest::Approx(2e4).epsilon(1e-6));

  const std::vector<double> bad{0.0, NAN};
  CHECK_THROWS(ce_loss<double>(bad, 0));
  CHECK_THROWS_AS(ce_loss<double>(zeros, 2), ValidationError);
}

TEST_CASE("weighted loss values") {
  TokenWeights w(3);
  w.set(1, 2.0);
  const std::vector<double> x{1.0, 2.0, 3.0};
  const auto oracle = 2.0L * ce_oracle({1.0L, 2.0L, 3.0L}, 1);
  CHECK(weighted_loss<double>(x, 1, w) == doctest::Approx(static_cast<double>(oracle)).epsilon(1e-12));
  CHECK(weighted_loss<double>(x, 1, w) == doctest::Approx(2.8152).epsilon(1e-4));

  // Two tied finite logits, everything else far below: the EOS term is 3 ln 2.
  const auto enhanced = TokenWeights::form_stressed(Vocabulary::kSpecialCount);
  std::vector<double> logits(Vocabulary::kSpecialCount, -1e4);
  logits[Vocabulary::kEos] = 0.0;
  logits[Vocabulary::kCls] = 0.0;
  CHECK(weighted_loss<double>(logits, Vocabulary::kEos, enhanced) == doctest::Approx(3 * std::log(2.0)).epsilon(1e-12));

  CHECK(enhanced[Vocabulary::kLineSep] == 2.0);
  CHECK(enhanced[Vocabulary::kStanzaSep] == 2.0);
  CHECK(enhanced[Vocabulary::kEos] == 3.0);
  CHECK(enhanced[Vocabulary::kLabel1] == 1.0);
  CHECK(enhanced[Vocabulary::kCls] == 1.0);
  const auto basic = weights_for(LossMode::kBasic, 20);
  for (TokenId i = 0; i < 20; ++i) CHECK(basic[i] == 1.0);
  CHECK(parse_loss_mode("enhanced") == LossMode::kEnhanced);
  CHECK_THROWS_AS(parse_loss_mode("fancy"), ValidationError);
  CHECK_THROWS_AS(w.set(0, -1.0), ValidationError);
}

TEST_CASE("loss identities on random logits") {
  Rng rng(17);
  const TokenWeights ones(50);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<double> x(50);
    for (auto& v : x) v = 10.0 * rng.normal();
    const TokenId t = static_cast<TokenId>(rng.below(50));
    CHECK(weighted_loss<double>(x, t, ones) == ce_loss<double>(x, t));
    auto shifted = x;
    const double c = 100.0 * rng.normal();
    for (auto& v : shifted) v += c;
    CHECK(std::abs(ce_loss<double>(shifted, t) - ce_loss<double>(x, t)) <= 1e-6);
  }
}

TEST_CASE("model config validation") {
  ModelConfig c = toy_config();
  CHECK_NOTHROW(c.validate());
  c.heads = 3;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c = toy_config();
  c.vocab_size = 0;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c = toy_config();
  c.dropout_rate = 1.0;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c = toy_config();
  CHECK(ModelConfig::from_json(c.to_json()) == c);

  ModelConfig d;
  CHECK(d.layers == 8);
  CHECK(d.heads == 8);
  CHECK(d.embed_dim == 512);
  CHECK(d.ff_dim == 1024);
  CHECK_FALSE(d.tie_embeddings);
}

TEST_CASE("initialization") {
  const auto p = init_parameters(toy_config(), 5);
  for (float v : p.tensor("h.0.ln_1.weight")) CHECK(v == 1.0f);
  for (float v : p.tensor("h.1.mlp.c_fc.bias")) CHECK(v == 0.0f);
  const auto w = p.tensor("h.0.attn.c_attn.weight");
  double sum = 0, sq = 0;
  for (float v : w) {
    sum += v;
    sq += double(v) * v;
  }
  const double mean = sum / w.size();
  const double sd = std::sqrt(sq / w.size() - mean * mean);
  CHECK(std::abs(mean) < 0.004);
  CHECK(sd == doctest::Approx(0.02).epsilon(0.1));
  CHECK(init_parameters(toy_config(), 5).tensor("wte")[7] == p.tensor("wte")[7]);
  CHECK(init_parameters(toy_config(), 6).tensor("wte")[7] != p.tensor("wte")[7]);

  auto tied = toy_config();
  tied.tie_embeddings = true;
  CHECK(ParameterLayout(tied).total_size() + 32 * 16 == ParameterLayout(toy_config()).total_size());
}

TEST_CASE("forward shape, causality and errors") {
  const auto p = init_parameters(toy_config(), 1);
  const std::vector<TokenId> ids{2, 8, 9, 10, 11};
  const auto logits = forward(p, std::span<const TokenId>(ids));
  CHECK(logits.rows() == 5);
  CHECK(logits.cols() == 32);
  CHECK(logits.allFinite());

  for (std::size_t t = 0; t < ids.size(); ++t) {
    auto changed = ids;
    changed[t] = 20;
    const auto other = forward(p, std::span<const TokenId>(changed));
    for (std::size_t r = 0; r < t; ++r) CHECK((other.row(r).array() == logits.row(r).array()).all());
    CHECK((other.row(t).array() != logits.row(t).array()).any());
  }

  const std::vector<TokenId> too_long(17, 8);
  CHECK_THROWS_AS(forward(p, std::span<const TokenId>(too_long)), ValidationError);
  const std::vector<TokenId> bad_id{2, 32};
  CHECK_THROWS_AS(forward(p, std::span<const TokenId>(bad_id)), ValidationError);
  CHECK_THROWS_AS(forward(p, std::span<const TokenId>()), ValidationError);

  CHECK((forward(p, std::span<const TokenId>(ids)).array() == logits.array()).all());
}

TEST_CASE("zero parameters give position-independent logits") {
  const Parameters<float> zero(toy_config());
  const std::vector<TokenId> ids{2, 8, 8, 9, 3};
  const auto logits = forward(zero, std::span<const TokenId>(ids));
  for (int r = 1; r < logits.rows(); ++r) CHECK((logits.row(r).array() == logits.row(0).array()).all());
}

TEST_CASE("batch construction") {
  const std::vector<TokenId> a{2, 8, 3};
  const std::vector<TokenId> b{2, 8, 9, 10, 3};
  const auto batch = make_batch({a, b}, 4);
  CHECK(batch.rows == 2);
  CHECK(batch.cols == 4);
  CHECK(batch.lengths == std::vector<int>{3, 4});
  CHECK(batch.ids == std::vector<TokenId>{2, 8, 3, Vocabulary::kPad, 2, 8, 9, 10});
  CHECK(batch.target_count() == 5);

  const std::vector<TokenId> two{2, 3};
  CHECK(make_batch({two}, 8).target_count() == 1);
}

TEST_CASE("batch loss matches an oracle with known logits") {
  // With every block zeroed the residual stream is zero, so ln_f outputs its
  // bias and every position predicts logits = lm_head * ln_f.bias.
  auto c = toy_config(8);
  Parameters<double> p(c);
  Rng rng(8);
  auto bias = p.tensor("ln_f.bias");
  for (auto& v : bias) v = rng.normal();
  auto head = p.tensor("lm_head.weight");
  for (auto& v : head) v = rng.normal();
  std::vector<long double> logits(8, 0.0L);
  for (int t = 0; t < 8; ++t) {
    for (int k = 0; k < 16; ++k) logits[t] += static_cast<long double>(head[t * 16 + k]) * bias[k];
  }

  const std::vector<TokenId> sample{2, 4, 3};
  const auto batch = make_batch({sample}, 8);
  const auto w = TokenWeights::form_stressed(8);
  const long double expected = (2.0L * ce_oracle(logits, 4) + 3.0L * ce_oracle(logits, 3)) / 2.0L;
  CHECK(batch_loss(p, batch, w) == doctest::Approx(static_cast<double>(expected)).epsilon(1e-12));

  const std::vector<TokenId> pad_only{Vocabulary::kPad};
  CHECK_THROWS_AS(batch_loss(p, make_batch({pad_only}, 8), w), ValidationError);
  const std::vector<TokenId> single{2};
  CHECK_THROWS_AS(batch_loss(p, make_batch({single}, 8), w), ValidationError);
}

TEST_CASE("analytic gradients match central differences") {
  auto p = perturbed_toy(1);
  const auto batch = toy_batch();
  for (auto mode : {LossMode::kBasic, LossMode::kEnhanced}) {
    const auto w = weights_for(mode, 32);
    Parameters<double> g(p.config());
    const double loss = gradients(p, batch, w, g);
    CHECK(loss == doctest::Approx(batch_loss(p, batch, w)).epsilon(1e-12));
    Rng rng(mode == LossMode::kBasic ? 41 : 42);
    int failures = 0;
    for (int k = 0; k < 60; ++k) {
      const std::size_t i = rng.below(p.size());
      const double orig = p.values()[i];
      const double eps = 1e-4;
      p.values()[i] = orig + eps;
      const double up = batch_loss(p, batch, w);
      p.values()[i] = orig - eps;
      const double down = batch_loss(p, batch, w);
      p.values()[i] = orig;
      const double numeric = (up - down) / (2 * eps);
      const double rel = std::abs(g.values()[i] - numeric) / (std::abs(numeric) + 1e-8);
      if (rel >= 1e-3) ++failures;
    }
    CHECK(failures == 0);
  }
}

TEST_CASE("gradients with tied embeddings and dropout") {
  auto c = toy_config();
  c.tie_embeddings = true;
  auto p = init_parameters(c, 3).cast<double>();
  const auto batch = toy_batch();
  const auto w = TokenWeights::form_stressed(32);
  const DropoutOptions drop{0.2, 99};
  Parameters<double> g(c);
  const double loss = gradients(p, batch, w, g, drop);
  CHECK(loss == doctest::Approx(batch_loss(p, batch, w, drop)).epsilon(1e-12));
  CHECK(loss != doctest::Approx(batch_loss(p, batch, w)).epsilon(1e-9));
  Rng rng(4);
  for (int k = 0; k < 40; ++k) {
    const std::size_t i = rng.below(p.size());
    const double orig = p.values()[i];
    p.values()[i] = orig + 1e-4;
    const double up = batch_loss(p, batch, w, drop);
    p.values()[i] = orig - 1e-4;
    const double down = batch_loss(p, batch, w, drop);
    p.values()[i] = orig;
    const double numeric = (up - down) / 2e-4;
    CHECK(std::abs(g.values()[i] - numeric) / (std::abs(numeric) + 1e-8) < 1e-3);
  }
}

TEST_CASE("gradients are linear in the token weights") {
  const auto p = perturbed_toy(2);
  const auto batch = toy_batch();
  const auto w = TokenWeights::form_stressed(32);
  Parameters<double> g1(p.config()), g2(p.config()), g0(p.config());
  gradients(p, batch, w, g1);
  gradients(p, batch, w.scaled(2.0), g2);
  for (std::size_t i = 0; i < g1.size(); ++i) CHECK(g2.values()[i] == 2.0 * g1.values()[i]);

  CHECK(gradients(p, batch, w.scaled(0.0), g0) == 0.0);
  for (double v : g0.values()) CHECK(v == 0.0);
}

TEST_CASE("non-finite parameters are reported by name") {
  auto p = perturbed_toy(3);
  p.tensor("h.1.mlp.c_fc.weight")[5] = INFINITY;
  Parameters<double> g(p.config());
  try {
    gradients(p, toy_batch(), TokenWeights(32), g);
    FAIL("expected a failure");
  } catch (const RuntimeFailure& e) {
    CHECK(std::string(e.what()).find("non-finite") != std::string::npos);
  }
}

TEST_CASE("decoder state matches the full forward pass") {
  for (bool tied : {false, true}) {
    auto c = toy_config();
    c.tie_embeddings = tied;
    const auto p = init_parameters(c, 7);
    const std::vector<TokenId> ids{2, 8, 9, 10, 4, 11, 12, 7, 13, 3, 14, 15, 16, 17, 18, 19};
    const auto full = forward(p, std::span<const TokenId>(ids));
    DecoderState<float> state(p);
    for (std::size_t t = 0; t < ids.size(); ++t) {
      const auto step = state.push(ids[t]);
      REQUIRE(step.size() == 32);
      for (int v = 0; v < 32; ++v) CHECK(step[v] == doctest::Approx(full(t, v)).epsilon(1e-5));
    }
    CHECK(state.length() == 16);
    CHECK_THROWS_AS(state.push(8), ValidationError);
    state.reset();
    CHECK(state.length() == 0);
    const auto again = state.push(ids[0]);
    CHECK(again[3] == doctest::Approx(full(0, 3)).epsilon(1e-5));
  }
}

TEST_CASE("checkpoint round-trip") {
  TempDir dir("ckpt");
  Checkpoint ck(toy_config());
  ck.params = init_parameters(toy_config(), 9);
  ck.vocab_hash = 0x0123456789abcdefULL;
  ck.step = 77;
  ck.extra["adam.m"] = std::vector<float>(ck.params.size(), 0.5f);
  save_checkpoint(dir / "a.pmc", ck);
  const auto back = load_checkpoint(dir / "a.pmc");
  CHECK(back.config == ck.config);
  CHECK(back.vocab_hash == ck.vocab_hash);
  CHECK(back.step == 77);
  CHECK(std::equal(back.params.values().begin(), back.params.values().end(), ck.params.values().begin()));
  CHECK(back.extra.at("adam.m") == ck.extra.at("adam.m"));

  const auto size = std::filesystem::file_size(dir / "a.pmc");
  std::filesystem::resize_file(dir / "a.pmc", size - 1);
  CHECK_THROWS_AS(load_checkpoint(dir / "a.pmc"), ValidationError);
  CHECK_THROWS_AS(load_checkpoint(dir / "missing.pmc"), ValidationError);
}
