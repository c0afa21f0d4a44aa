#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "poemform/corpus.hpp"
#include "poemform/form_registry.hpp"
#include "poemform/generator.hpp"

namespace poemform {

struct CheckOptions {
  // For models trained without the stanza label: compare line structure only.
  bool ignore_stanza_break = false;
};

struct FormDiff {
  // First differing slot of the body skeleton (0-based); for parse failures, 0.
  std::size_t slot = 0;
  // 1-based line of the expected skeleton holding that slot (0 past the end).
  int line = 0;
  std::string expected;  // slot kind or "END"
  std::string observed;  // slot kind, "END", or "PARSE_ERROR"
  std::string message;
};

struct FormCheckResult {
  FormSpec expected;
  std::vector<int> observed_lines;
  std::optional<int> observed_stanza_break;
  bool verdict = false;
  std::optional<FormDiff> diff;
};

// True iff line count, every line's character count and the stanza break match.
FormCheckResult check_form(const Sample& sample, const FormSpec& spec, const CheckOptions& options = {});
// Verdict false, diff pointing at the parse error.
FormCheckResult parse_failure_result(const FormSpec& spec, const std::string& error);

struct CorrectRateRow {
  std::string form;
  int body_length = 0;
  std::size_t generated = 0;
  std::size_t correct = 0;
  double rate = 0.0;
};

struct CorrectRateReport {
  std::string label;
  std::vector<CorrectRateRow> rows;  // ordered by body length, then name
  std::vector<std::string> warnings;

  const CorrectRateRow* find(std::string_view form) const;
  // "form,length_of_body,n_generated,n_correct,rate"
  std::string to_csv() const;
  std::string to_json() const;
  static CorrectRateReport from_json(std::string_view text);
  static CorrectRateReport from_csv(std::string_view text, std::string label = "");
};

// Unterminated and unparseable results count as incorrect. Forms listed in
// `expected_forms` with no results are omitted with a warning.
CorrectRateReport correct_rate(std::span<const GenerationResult> results, const FormRegistry& registry,
                               std::string label = "", const CheckOptions& options = {},
                               const std::vector<std::string>& expected_forms = {});

struct RateDelta {
  std::string form;
  double rate_a = 0.0;
  double rate_b = 0.0;
  double delta = 0.0;  // rate_b - rate_a
};

struct Comparison {
  std::vector<RateDelta> rows;
  int improved = 0;
  int worsened = 0;
  int unchanged = 0;
  std::vector<std::string> warnings;

  // "form,rate_a,rate_b,delta_points"
  std::string to_csv() const;
};

// Per-form deltas over the forms both reports cover.
Comparison ab_compare(const CorrectRateReport& a, const CorrectRateReport& b);

}  // namespace poemform
