#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "poemform/corpus.hpp"
#include "poemform/errors.hpp"
#include "poemform/model.hpp"
#include "poemform/rng.hpp"

namespace poemform {

struct GenerationParams {
  int top_k = 15;
  int max_new_tokens = 200;
  std::uint64_t seed = 0;
  int count = 1;

  void validate(std::size_t vocab_size) const;
};

// Ids of "[CLS]form#title*"; the model continues with the body.
std::vector<TokenId> build_prompt(std::string_view form_name, std::string_view title, const Vocabulary& vocab);

// Ids of the k largest logits, ties broken toward the lower id, in rank order.
template <typename T>
std::vector<TokenId> top_k_ids(std::span<const T> logits, int k);

// Samples from the softmax renormalized over the top-k logits (temperature 1).
// k = 1 is argmax.
template <typename T>
TokenId top_k_sample(std::span<const T> logits, int k, Rng& rng) {
  if (k < 1) throw ValidationError("top_k must be >= 1");
  for (T x : logits) {
    if (!std::isfinite(x)) throw RuntimeFailure("non-finite logit passed to the sampler");
  }
  const auto ids = top_k_ids(logits, k);
  if (ids.size() == 1) return ids.front();
  const double mx = static_cast<double>(logits[ids.front()]);
  std::vector<double> p(ids.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    p[i] = std::exp(static_cast<double>(logits[ids[i]]) - mx);
    sum += p[i];
  }
  double u = rng.uniform() * sum;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (u < p[i]) return ids[i];
    u -= p[i];
  }
  return ids.back();
}

struct GenerationResult {
  std::string form_name;
  std::string title;
  // Prompt followed by the sampled continuation. Empty for results read back from JSON Lines.
  std::vector<TokenId> raw;
  // Decoded continuation after the prompt, for inspection.
  std::string text;
  std::size_t raw_len = 0;
  std::size_t prompt_len = 0;
  bool terminated = false;
  std::optional<Sample> parsed;
  std::string parse_error;

  bool parse_ok() const { return parsed.has_value(); }
};

// Parses a generated id sequence. Only the leading CLS and final EOS may be
// special tokens other than the four separators.
Sample parse_generated(std::span<const TokenId> ids, const Vocabulary& vocab);

// Single continuation of `prompt` until EOS or the token budget runs out.
GenerationResult generate(const lm::Parameters<float>& params, const Vocabulary& vocab,
                          std::span<const TokenId> prompt, const GenerationParams& params_in, Rng& rng);

// params.count results; result i draws from its own stream seeded by (seed, i).
std::vector<GenerationResult> generate_many(const lm::Parameters<float>& params, const Vocabulary& vocab,
                                            std::string_view form_name, std::string_view title,
                                            const GenerationParams& gen);

// {"form","title","body","stanza_break","terminated","raw_len","parse_ok"}
std::string to_json_line(const GenerationResult& result);
GenerationResult from_json_line(std::string_view line);
std::vector<GenerationResult> read_generation_results(const std::filesystem::path& path);
void write_generation_results(const std::filesystem::path& path, std::span<const GenerationResult> results);

}  // namespace poemform
