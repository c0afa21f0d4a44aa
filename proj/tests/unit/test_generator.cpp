#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "poemform/errors.hpp"
#include "poemform/generator.hpp"
#include "test_support.hpp"

using namespace poemform;
using poemform::testing::TempDir;

namespace {

Vocabulary small_vocab() {
  const std::vector<Sample> corpus = {Sample{"卜算子", "塞外", {"一二三", "四五"}, std::nullopt}};
  return Vocabulary::build(corpus, 1);
}

// Zero model whose every position prefers `favourite`, then `second`.
lm::Parameters<float> biased_model(int vocab, TokenId favourite, TokenId second) {
  lm::ModelConfig c;
  c.layers = 1;
  c.heads = 1;
  c.embed_dim = 4;
  c.ff_dim = 4;
  c.vocab_size = vocab;
  c.max_seq_len = 40;
  c.dropout_rate = 0.0;
  lm::Parameters<float> p(c);
  p.tensor("ln_f.bias")[0] = 1.0f;
  p.tensor("lm_head.weight")[favourite * 4] = 3.0f;
  p.tensor("lm_head.weight")[second * 4] = 2.0f;
  return p;
}

}  // namespace

TEST_CASE("build_prompt") {
  const auto vocab = small_vocab();
  const auto ids = build_prompt("卜算子", "塞外", vocab);
  REQUIRE(ids.size() == 1 + 3 + 1 + 2 + 1);
  CHECK(ids[0] == Vocabulary::kCls);
  CHECK(ids[1] == vocab.id_of(U'卜'));
  CHECK(ids[4] == Vocabulary::kLabel1);
  CHECK(ids[5] == vocab.id_of(U'塞'));
  CHECK(ids[7] == Vocabulary::kLabel2);

  CHECK(build_prompt("卜算子", "", vocab) ==
        std::vector<TokenId>{Vocabulary::kCls, vocab.id_of(U'卜'), vocab.id_of(U'算'), vocab.id_of(U'子'),
                             Vocabulary::kLabel1, Vocabulary::kLabel2});
  const auto oov = build_prompt("卜算子", "塞北", vocab);
  CHECK(oov[6] == Vocabulary::kUnk);
}

TEST_CASE("top-k with k = 1 is argmax") {
  Rng rng(1);
  const std::vector<float> x{1.0f, 3.0f, 2.0f};
  for (int i = 0; i < 10; ++i) CHECK(top_k_sample<float>(x, 1, rng) == 1);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<double> v(50);
    for (auto& e : v) e = rng.normal();
    const auto best = static_cast<TokenId>(std::max_element(v.begin(), v.end()) - v.begin());
    CHECK(top_k_sample<double>(v, 1, rng) == best);
  }
  const std::vector<float> tie{2.0f, 5.0f, 5.0f, 1.0f};
  CHECK(top_k_sample<float>(tie, 1, rng) == 1);
  CHECK(top_k_ids<float>(tie, 3) == std::vector<TokenId>{1, 2, 0});
}

TEST_CASE("top-k with k = 2 renormalizes over the survivors") {
  Rng rng(2);
  const std::vector<float> x{0.0f, 0.0f, -100.0f};
  int counts[3] = {0, 0, 0};
  const int draws = 100000;
  for (int i = 0; i < draws; ++i) ++counts[top_k_sample<float>(x, 2, rng)];
  CHECK(counts[2] == 0);
  CHECK(std::abs(counts[0] / double(draws) - 0.5) < 0.01);
  CHECK(std::abs(counts[1] / double(draws) - 0.5) < 0.01);
}

TEST_CASE("top-k sampling matches the truncated softmax") {
  Rng rng(3);
  const std::vector<double> x{1.0, 0.5, 2.0, -1.0, 1.5, 0.0};
  for (int k : {3, 6}) {
    const auto ids = top_k_ids<double>(x, k);
    std::vector<double> p(x.size(), 0.0);
    double z = 0;
    for (TokenId id : ids) z += std::exp(x[id]);
    for (TokenId id : ids) p[id] = std::exp(x[id]) / z;
    std::vector<int> counts(x.size(), 0);
    const int draws = 100000;
    for (int i = 0; i < draws; ++i) ++counts[top_k_sample<double>(x, k, rng)];
    for (std::size_t j = 0; j < x.size(); ++j) {
      if (p[j] == 0.0) CHECK(counts[j] == 0);
      CHECK(std::abs(counts[j] / double(draws) - p[j]) < 0.01);
    }
  }
  std::vector<float> bad{0.0f, NAN};
  CHECK_THROWS_AS(top_k_sample<float>(bad, 1, rng), RuntimeFailure);
  const std::vector<float> one{0.0f};
  CHECK_THROWS_AS(top_k_sample<float>(one, 0, rng), ValidationError);
}

TEST_CASE("generation budget and termination") {
  const auto vocab = small_vocab();
  const int V = static_cast<int>(vocab.size());
  const auto prompt = build_prompt("卜算子", "塞外", vocab);
  GenerationParams gen;
  gen.top_k = 1;
  gen.max_new_tokens = 1;
  Rng rng(0);

  const auto looping = biased_model(V, vocab.id_of(U'一'), Vocabulary::kEos);
  const auto r = generate(looping, vocab, prompt, gen, rng);
  CHECK_FALSE(r.terminated);
  CHECK_FALSE(r.parse_ok());
  CHECK(r.raw.size() == prompt.size() + 1);
  CHECK(std::equal(prompt.begin(), prompt.end(), r.raw.begin()));
  CHECK(r.raw_len == r.raw.size());

  gen.max_new_tokens = 41;
  CHECK_THROWS_AS(generate(looping, vocab, prompt, gen, rng), ValidationError);
  gen.max_new_tokens = 10;
  gen.top_k = V + 1;
  CHECK_THROWS_AS(generate(looping, vocab, prompt, gen, rng), ValidationError);

  // EOS right after the prompt: terminated but the body is empty.
  gen.top_k = 1;
  const auto stopper = biased_model(V, Vocabulary::kEos, vocab.id_of(U'一'));
  const auto s = generate(stopper, vocab, prompt, gen, rng);
  CHECK(s.terminated);
  CHECK_FALSE(s.parse_ok());
  CHECK_FALSE(s.parse_error.empty());

  // Two-way ties between a character and EOS: some results parse.
  gen.top_k = 2;
  gen.count = 40;
  gen.seed = 5;
  auto tied = biased_model(V, vocab.id_of(U'二'), Vocabulary::kEos);
  tied.tensor("lm_head.weight")[Vocabulary::kEos * 4] = 3.0f;
  const auto many = generate_many(tied, vocab, "卜算子", "塞外", gen);
  REQUIRE(many.size() == 40);
  const auto ok = std::count_if(many.begin(), many.end(), [](const auto& g) { return g.parse_ok(); });
  CHECK(ok > 0);
  for (const auto& g : many) {
    if (!g.parse_ok()) continue;
    CHECK(g.parsed->form_name == "卜算子");
    CHECK(g.parsed->title == "塞外");
    CHECK(g.parsed->body_lines.size() == 1);
    CHECK(g.text == g.parsed->body_lines[0] + "[EOS]");
  }
}

TEST_CASE("seeded generation is reproducible") {
  const auto vocab = small_vocab();
  lm::ModelConfig c;
  c.layers = 2;
  c.heads = 2;
  c.embed_dim = 16;
  c.ff_dim = 16;
  c.vocab_size = static_cast<int>(vocab.size());
  c.max_seq_len = 48;
  const auto params = lm::init_parameters(c, 3);
  GenerationParams gen;
  gen.top_k = 5;
  gen.max_new_tokens = 30;
  gen.count = 6;
  gen.seed = 7;
  const auto a = generate_many(params, vocab, "卜算子", "塞外", gen);
  const auto b = generate_many(params, vocab, "卜算子", "塞外", gen);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].raw == b[i].raw);
    CHECK(to_json_line(a[i]) == to_json_line(b[i]));
  }
  CHECK(a[0].raw != a[1].raw);
  gen.seed = 8;
  CHECK(generate_many(params, vocab, "卜算子", "塞外", gen)[0].raw != a[0].raw);
}

TEST_CASE("parse_generated") {
  const auto vocab = small_vocab();
  const Sample s{"卜算子", "塞外", {"一二", "三四", "五"}, 2};
  const auto ids = encode(s, vocab);
  CHECK(parse_generated(ids, vocab) == s);
  auto mid_eos = ids;
  mid_eos[ids.size() - 3] = Vocabulary::kEos;
  CHECK_THROWS_AS(parse_generated(mid_eos, vocab), ValidationError);
  auto mid_cls = ids;
  mid_cls[9] = Vocabulary::kCls;
  CHECK_THROWS_AS(parse_generated(mid_cls, vocab), ValidationError);
  std::vector<TokenId> unterminated(ids.begin(), ids.end() - 1);
  CHECK_THROWS_AS(parse_generated(unterminated, vocab), ValidationError);
}

TEST_CASE("JSON Lines round-trip") {
  GenerationResult ok;
  ok.form_name = "卜算子";
  ok.title = "塞外";
  ok.terminated = true;
  ok.raw_len = 20;
  ok.parsed = Sample{"卜算子", "塞外", {"一二", "三四"}, 1};
  GenerationResult bad;
  bad.form_name = "卜算子";
  bad.title = "";
  bad.raw_len = 40;
  bad.parse_error = "unterminated";

  const auto line = to_json_line(ok);
  CHECK(line.find("\"form\":\"卜算子\"") != std::string::npos);
  CHECK(line.find("\"parse_ok\":true") != std::string::npos);
  CHECK(line.find("\"stanza_break\":1") != std::string::npos);
  CHECK(line.find("\"body\":[\"一二\",\"三四\"]") != std::string::npos);
  const auto back = from_json_line(line);
  CHECK(back.parsed == ok.parsed);
  CHECK(back.terminated);
  CHECK(back.raw_len == 20);
  CHECK_FALSE(from_json_line(to_json_line(bad)).parse_ok());
  CHECK(to_json_line(bad).find("\"stanza_break\":null") != std::string::npos);

  TempDir dir("gen");
  const std::vector<GenerationResult> all{ok, bad};
  write_generation_results(dir / "g.jsonl", all);
  const auto read = read_generation_results(dir / "g.jsonl");
  REQUIRE(read.size() == 2);
  CHECK(to_json_line(read[0]) == to_json_line(ok));
  CHECK(to_json_line(read[1]) == to_json_line(bad));
  CHECK_THROWS_AS(from_json_line("{\"title\": \"x\"}"), ValidationError);
  CHECK_THROWS_AS(from_json_line("nope"), ValidationError);
}
