#include "poemform/generator.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "poemform/utf8.hpp"

namespace poemform {

using nlohmann::json;

void GenerationParams::validate(std::size_t vocab_size) const {
  if (top_k < 1 || static_cast<std::size_t>(top_k) > vocab_size) {
    throw ValidationError("top_k must be in [1, " + std::to_string(vocab_size) + "]");
  }
  if (max_new_tokens < 1) throw ValidationError("max_new_tokens must be >= 1");
  if (count < 0) throw ValidationError("count must be >= 0");
}

std::vector<TokenId> build_prompt(std::string_view form_name, std::string_view title, const Vocabulary& vocab) {
  std::vector<TokenId> ids{Vocabulary::kCls};
  for (char32_t cp : utf8::decode(form_name)) ids.push_back(vocab.id_of(cp));
  ids.push_back(Vocabulary::kLabel1);
  for (char32_t cp : utf8::decode(title)) ids.push_back(vocab.id_of(cp));
  ids.push_back(Vocabulary::kLabel2);
  return ids;
}

template <typename T>
std::vector<TokenId> top_k_ids(std::span<const T> logits, int k) {
  std::vector<TokenId> ids(logits.size());
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<TokenId>(i);
  const std::size_t keep = std::min<std::size_t>(static_cast<std::size_t>(k), ids.size());
  std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(keep), ids.end(),
                    [&](TokenId a, TokenId b) { return logits[a] != logits[b] ? logits[a] > logits[b] : a < b; });
  ids.resize(keep);
  return ids;
}

template std::vector<TokenId> top_k_ids<float>(std::span<const float>, int);
template std::vector<TokenId> top_k_ids<double>(std::span<const double>, int);

Sample parse_generated(std::span<const TokenId> ids, const Vocabulary& vocab) {
  if (ids.empty() || ids.front() != Vocabulary::kCls) throw ValidationError("sequence does not start with CLS");
  if (ids.size() < 2 || ids.back() != Vocabulary::kEos) throw ValidationError("sequence is not terminated by EOS");
  for (std::size_t i = 1; i + 1 < ids.size(); ++i) {
    const TokenId id = ids[i];
    if (id == Vocabulary::kCls || id == Vocabulary::kEos || id == Vocabulary::kPad) {
      throw ValidationError("special token " + vocab.token_text(id) + " at position " + std::to_string(i));
    }
  }
  return parse(decode(ids, vocab));
}

GenerationResult generate(const lm::Parameters<float>& params, const Vocabulary& vocab,
                          std::span<const TokenId> prompt, const GenerationParams& gen, Rng& rng) {
  const auto& config = params.config();
  gen.validate(static_cast<std::size_t>(config.vocab_size));
  if (prompt.empty()) throw ValidationError("prompt is empty");
  if (prompt.size() + static_cast<std::size_t>(gen.max_new_tokens) > static_cast<std::size_t>(config.max_seq_len)) {
    throw ValidationError("prompt length " + std::to_string(prompt.size()) + " + max_new_tokens " +
                          std::to_string(gen.max_new_tokens) + " exceeds max_seq_len " +
                          std::to_string(config.max_seq_len));
  }
  GenerationResult result;
  result.raw.assign(prompt.begin(), prompt.end());
  result.prompt_len = prompt.size();

  lm::DecoderState<float> decoder(params);
  std::span<const float> logits;
  for (TokenId id : prompt) logits = decoder.push(id);
  for (int i = 0; i < gen.max_new_tokens; ++i) {
    const TokenId next = top_k_sample(logits, gen.top_k, rng);
    result.raw.push_back(next);
    if (next == Vocabulary::kEos) {
      result.terminated = true;
      break;
    }
    if (i + 1 < gen.max_new_tokens) logits = decoder.push(next);
  }
  result.raw_len = result.raw.size();
  result.text = decode(std::span<const TokenId>(result.raw).subspan(result.prompt_len), vocab);

  if (!result.terminated) {
    result.parse_error = "unterminated: no EOS within " + std::to_string(gen.max_new_tokens) + " tokens";
  } else {
    try {
      result.parsed = parse_generated(result.raw, vocab);
    } catch (const ValidationError& e) {
      result.parse_error = e.what();
    }
  }
  return result;
}

std::vector<GenerationResult> generate_many(const lm::Parameters<float>& params, const Vocabulary& vocab,
                                            std::string_view form_name, std::string_view title,
                                            const GenerationParams& gen) {
  gen.validate(static_cast<std::size_t>(params.config().vocab_size));
  const auto prompt = build_prompt(form_name, title, vocab);
  std::vector<GenerationResult> out;
  out.reserve(static_cast<std::size_t>(gen.count));
  for (int i = 0; i < gen.count; ++i) {
    Rng rng(mix_seed(gen.seed, static_cast<std::uint64_t>(i)));
    auto r = generate(params, vocab, prompt, gen, rng);
    r.form_name = std::string(form_name);
    r.title = std::string(title);
    out.push_back(std::move(r));
  }
  return out;
}

std::string to_json_line(const GenerationResult& result) {
  json j = json::object();
  j["form"] = result.form_name;
  j["title"] = result.title;
  j["body"] = result.parsed ? json(result.parsed->body_lines) : json::array();
  j["stanza_break"] =
      result.parsed && result.parsed->stanza_break ? json(*result.parsed->stanza_break) : json(nullptr);
  j["terminated"] = result.terminated;
  j["raw_len"] = result.raw_len;
  j["parse_ok"] = result.parse_ok();
  j["text"] = result.text;
  return j.dump();
}

GenerationResult from_json_line(std::string_view line) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::parse_error& e) {
    throw ValidationError(std::string("invalid JSON: ") + e.what());
  }
  GenerationResult r;
  try {
    r.form_name = j.at("form").get<std::string>();
    r.title = j.value("title", std::string());
    r.terminated = j.at("terminated").get<bool>();
    r.raw_len = j.value("raw_len", std::size_t{0});
    r.text = j.value("text", std::string());
    const bool ok = j.at("parse_ok").get<bool>();
    if (ok) {
      Sample s;
      s.form_name = r.form_name;
      s.title = r.title;
      s.body_lines = j.at("body").get<std::vector<std::string>>();
      if (j.contains("stanza_break") && !j["stanza_break"].is_null()) s.stanza_break = j["stanza_break"].get<int>();
      try {
        s.validate();
        r.parsed = std::move(s);
      } catch (const ValidationError& e) {
        r.parse_error = e.what();
      }
    } else {
      r.parse_error = "recorded as unparseable";
    }
  } catch (const json::exception& e) {
    throw ValidationError(std::string("generation record: ") + e.what());
  }
  return r;
}

std::vector<GenerationResult> read_generation_results(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open '" + path.string() + "'");
  std::vector<GenerationResult> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(from_json_line(line));
    } catch (const ValidationError& e) {
      throw FormatError(path.string(), line_no, "<record>", e.what());
    }
  }
  return out;
}

void write_generation_results(const std::filesystem::path& path, std::span<const GenerationResult> results) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw RuntimeFailure("cannot write '" + path.string() + "'");
  for (const auto& r : results) out << to_json_line(r) << '\n';
}

}  // namespace poemform
