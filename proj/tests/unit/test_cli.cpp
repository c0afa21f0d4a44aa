#include <fstream>
#include <sstream>

#include "cli.hpp"
#include "doctest.h"
#include "json.hpp"
#include "poemform/corpus.hpp"
#include "poemform/model.hpp"
#include "test_support.hpp"

using namespace poemform;
using poemform::testing::TempDir;

namespace {

struct Run {
  int code;
  std::string out;
  std::string err;
};

Run run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

const std::string kForms = POEMFORM_DATA_DIR "/forms.jsonl";

// Small raw corpus of Busuanzi poems over a 20-character alphabet.
void write_raw_corpus(const std::filesystem::path& p, int count) {
  Rng rng(5);
  std::vector<Sample> samples;
  for (int i = 0; i < count; ++i) {
    auto s = poemform::testing::sample_for(poemform::testing::busuanzi(), rng, "塞外");
    for (auto& l : s.body_lines) {
      std::u32string cps = utf8::decode(l);
      for (auto& c : cps) c = static_cast<char32_t>(0x4E00 + (c - 0x4E00) % 20);
      l = utf8::encode(cps);
    }
    s.stanza_break.reset();
    samples.push_back(s);
  }
  write(p, format_raw_corpus(samples));
}

}  // namespace

TEST_CASE("forms-validate") {
  const auto ok = run({"forms-validate", "--forms", kForms});
  CHECK(ok.code == 0);
  CHECK(ok.out.find("6 forms") != std::string::npos);

  TempDir dir("cli-forms");
  write(dir / "bad.jsonl", R"({"name": "X", "category": "CI", "line_lengths": [5,5,7,5,5,5,7,5], "stanza_break": 9})");
  const auto bad = run({"forms-validate", "--forms", (dir / "bad.jsonl").string()});
  CHECK(bad.code == 1);
  CHECK(bad.err.find(":1") != std::string::npos);
  CHECK(bad.err.find("stanza_break") != std::string::npos);

  CHECK(run({"forms-validate", "--forms", (dir / "missing.jsonl").string()}).code == 1);
  CHECK(run({"forms-validate", "--forms", kForms, "--bogus"}).code == 1);
  CHECK(run({}).code == 1);
  CHECK(run({"dance"}).code == 1);
}

TEST_CASE("help documents every flag") {
  const auto help = run({"train", "--help"});
  CHECK(help.code == 0);
  for (const char* flag : {"--corpus", "--vocab", "--out", "--mode", "--steps", "--batch-size", "--lr", "--seed",
                           "--checkpoint"}) {
    CHECK_MESSAGE(help.out.find(flag) != std::string::npos, flag);
  }
  const auto gen = run({"generate", "--help"});
  for (const char* flag : {"--form", "--title", "--count", "--top-k", "--max-new-tokens", "--seed"}) {
    CHECK_MESSAGE(gen.out.find(flag) != std::string::npos, flag);
  }
  CHECK(run({"preprocess", "--help"}).out.find("--min-freq") != std::string::npos);
  CHECK(run({"preprocess", "--help"}).out.find("--stanza-label") != std::string::npos);
  CHECK(run({"eval-form", "--help"}).out.find("--report") != std::string::npos);
  CHECK(run({"coverage", "--help"}).out.find("--target-coverage") != std::string::npos);
  CHECK(run({"--help"}).out.find("--config") != std::string::npos);
}

TEST_CASE("full pipeline") {
  TempDir dir("cli-pipeline");
  const auto p = [&](const char* name) { return (dir / name).string(); };
  write_raw_corpus(dir / "raw.jsonl", 24);

  const auto pre = run({"preprocess", "--corpus", p("raw.jsonl"), "--forms", kForms, "--out", p("c.pmf"), "--vocab",
                        p("v.json"), "--min-freq", "1"});
  REQUIRE_MESSAGE(pre.code == 0, pre.err);
  const auto vocab = Vocabulary::load(dir / "v.json");
  const auto corpus = read_encoded_corpus(dir / "c.pmf");
  CHECK(corpus.vocab_hash == vocab.hash());
  CHECK(corpus.stream.sample_count() == 24);
  // The registry supplied the stanza break, so '&' appears once per sample.
  CHECK(std::count(corpus.stream.ids.begin(), corpus.stream.ids.end(), Vocabulary::kStanzaSep) == 24);

  const auto off = run({"preprocess", "--corpus", p("raw.jsonl"), "--forms", kForms, "--out", p("c_off.pmf"),
                        "--vocab", p("v_off.json"), "--min-freq", "1", "--stanza-label", "off"});
  REQUIRE(off.code == 0);
  const auto corpus_off = read_encoded_corpus(dir / "c_off.pmf");
  CHECK(std::count(corpus_off.stream.ids.begin(), corpus_off.stream.ids.end(), Vocabulary::kStanzaSep) == 0);

  const std::vector<std::string> train_args = {
      "train", "--corpus", p("c.pmf"), "--vocab", p("v.json"), "--out", p("run"), "--steps", "6",
      "--batch-size", "4", "--layers", "1", "--heads", "2", "--embed-dim", "16", "--ff-dim", "16",
      "--max-seq-len", "64", "--warmup-steps", "2", "--lr", "0.01", "--seed", "3", "--report-every", "3",
      "--checkpoint-every", "3"};
  const auto tr = run(train_args);
  REQUIRE_MESSAGE(tr.code == 0, tr.err);
  for (const char* f : {"config.json", "report.csv", "final.pmc", "checkpoint-3.pmc", "checkpoint-6.pmc"}) {
    CHECK(std::filesystem::exists(dir / "run" / f));
  }
  const auto cfg = nlohmann::json::parse(slurp(dir / "run" / "config.json"));
  CHECK(cfg["model"]["layers"] == 1);
  CHECK(cfg["train"]["mode"] == "enhanced");

  // Resume from the step-3 checkpoint to the same end point.
  auto resume_args = train_args;
  resume_args[6] = p("run2");
  resume_args.erase(resume_args.begin() + 11, resume_args.begin() + 21);  // model shape flags
  resume_args.insert(resume_args.end(), {"--checkpoint", p("run/checkpoint-3.pmc")});
  const auto resumed = run(resume_args);
  REQUIRE_MESSAGE(resumed.code == 0, resumed.err);
  CHECK(slurp(dir / "run2" / "final.pmc") == slurp(dir / "run" / "final.pmc"));

  auto clash = resume_args;
  clash.insert(clash.end(), {"--layers", "2"});
  CHECK(run(clash).code == 1);

  // A vocabulary built from a different corpus.
  write(dir / "other.jsonl", R"({"form": "Busuanzi", "body": "甲乙丙丁戊。"})" "\n");
  REQUIRE(run({"preprocess", "--corpus", p("other.jsonl"), "--out", p("o.pmf"), "--vocab", p("o.json"), "--min-freq",
               "1"})
              .code == 0);
  REQUIRE(Vocabulary::load(dir / "o.json").hash() != vocab.hash());
  const auto mismatch = run({"train", "--corpus", p("c.pmf"), "--vocab", p("o.json"), "--out", p("x")});
  CHECK(mismatch.code == 1);
  CHECK(mismatch.err.find("hash") != std::string::npos);
  CHECK_FALSE(std::filesystem::exists(dir / "x"));

  const std::vector<std::string> gen_args = {"generate", "--checkpoint", p("run/final.pmc"), "--vocab", p("v.json"),
                                             "--form", "Busuanzi", "--title", "塞外", "--count", "300",
                                             "--top-k", "15", "--seed", "7"};
  const auto g1 = run(gen_args);
  REQUIRE_MESSAGE(g1.code == 0, g1.err);
  CHECK(std::count(g1.out.begin(), g1.out.end(), '\n') == 300);
  const auto g2 = run(gen_args);
  CHECK(g1.out == g2.out);
  auto other_seed = gen_args;
  other_seed.back() = "8";
  CHECK(run(other_seed).out != g1.out);

  auto to_file = gen_args;
  to_file.insert(to_file.end(), {"--out", p("gens.jsonl")});
  REQUIRE(run(to_file).code == 0);
  CHECK(slurp(dir / "gens.jsonl") == g1.out);

  const auto ev = run({"eval-form", "--in", p("gens.jsonl"), "--forms", kForms, "--report", p("r.csv"), "--out",
                       p("r.json"), "--label", "enhanced"});
  REQUIRE_MESSAGE(ev.code == 0, ev.err);
  CHECK(slurp(dir / "r.csv").rfind("form,length_of_body,n_generated,n_correct,rate\nBusuanzi,44,300,", 0) == 0);
  CHECK(nlohmann::json::parse(slurp(dir / "r.json"))["label"] == "enhanced");

  const auto cmp = run({"compare", "--in", p("r.json"), "--in", p("r.csv"), "--out", p("cmp.csv")});
  REQUIRE(cmp.code == 0);
  CHECK(slurp(dir / "cmp.csv").find("Busuanzi") != std::string::npos);
  CHECK(cmp.out.find("unchanged 1") != std::string::npos);
  CHECK(run({"compare", "--in", p("r.json")}).code == 1);

  const auto bad_vocab = run({"generate", "--checkpoint", p("run/final.pmc"), "--vocab", p("o.json"), "--form",
                              "Busuanzi"});
  CHECK(bad_vocab.code == 1);
  CHECK(bad_vocab.err.find("hash") != std::string::npos);
  CHECK(run({"generate", "--checkpoint", p("run/final.pmc"), "--vocab", p("v.json"), "--form", "Busuanzi",
             "--max-new-tokens", "500"})
            .code == 1);
  CHECK(run({"generate", "--checkpoint", p("run/final.pmc"), "--vocab", p("v.json"), "--forms", kForms, "--form",
             "Unknown"})
            .code == 1);
  CHECK(run({"train", "--corpus", p("c.pmf"), "--vocab", p("v.json"), "--out", p("y"), "--mode", "fancy"}).code == 1);
}

TEST_CASE("eval-form matches the golden report") {
  TempDir dir("cli-eval");
  const auto r = run({"eval-form", "--in", POEMFORM_TEST_DATA_DIR "/eval20.jsonl", "--forms", kForms, "--report",
                      (dir / "out.csv").string()});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  CHECK(slurp(dir / "out.csv") == slurp(POEMFORM_TEST_DATA_DIR "/eval20_report.csv"));
}

TEST_CASE("config file precedence") {
  TempDir dir("cli-config");
  write_raw_corpus(dir / "raw.jsonl", 10);
  write(dir / "pre.toml", "[preprocess]\nmin-freq = 1000\nstanza-label = \"off\"\n");
  const auto p = [&](const char* name) { return (dir / name).string(); };
  // min-freq from the file admits nothing; the flag overrides it.
  REQUIRE(run({"preprocess", "--config", p("pre.toml"), "--corpus", p("raw.jsonl"), "--out", p("a.pmf"), "--vocab",
               p("a.json")})
              .code == 0);
  CHECK(Vocabulary::load(dir / "a.json").size() == Vocabulary::kSpecialCount);
  REQUIRE(run({"preprocess", "--config", p("pre.toml"), "--corpus", p("raw.jsonl"), "--out", p("b.pmf"), "--vocab",
               p("b.json"), "--min-freq", "1"})
              .code == 0);
  CHECK(Vocabulary::load(dir / "b.json").size() > Vocabulary::kSpecialCount);
  const auto b = read_encoded_corpus(dir / "b.pmf");
  CHECK(std::count(b.stream.ids.begin(), b.stream.ids.end(), Vocabulary::kStanzaSep) == 0);
}

TEST_CASE("coverage") {
  TempDir dir("cli-coverage");
  std::string raw;
  for (int i = 0; i < 4; ++i) raw += R"({"form": "A", "body": "一二。"})" "\n";
  raw += R"({"form": "B", "body": "一二。"})" "\n";
  write(dir / "raw.jsonl", raw);
  const auto r = run({"coverage", "--corpus", (dir / "raw.jsonl").string(), "--target-coverage", "0.8", "--out",
                      (dir / "cov.json").string()});
  REQUIRE(r.code == 0);
  CHECK(r.out.find("K(0.8) = 1") != std::string::npos);
  const auto j = nlohmann::json::parse(slurp(dir / "cov.json"));
  CHECK(j["k"] == 1);
  CHECK(j["ranks"][1]["cumulative"] == 1.0);
  CHECK(run({"coverage", "--corpus", (dir / "raw.jsonl").string(), "--target-coverage", "1.5"}).code == 1);
}
