#include "poemform/evaluator.hpp"

#include <algorithm>
#include <cstdio>
#include <map>
#include <sstream>

#include "json.hpp"
#include "poemform/errors.hpp"

namespace poemform {

namespace {

using nlohmann::json;

std::vector<SlotKind> observed_skeleton(const std::vector<int>& lines, std::optional<int> stanza_break) {
  std::vector<SlotKind> slots;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (i > 0) {
      const bool at_break = stanza_break && static_cast<int>(i) == *stanza_break;
      slots.push_back(at_break ? SlotKind::kStanzaSep : SlotKind::kLineSep);
    }
    slots.insert(slots.end(), static_cast<std::size_t>(lines[i]), SlotKind::kCharacter);
  }
  return slots;
}

FormDiff first_difference(const std::vector<SlotKind>& expected, const std::vector<SlotKind>& observed) {
  FormDiff diff;
  std::size_t i = 0;
  while (i < expected.size() && i < observed.size() && expected[i] == observed[i]) ++i;
  diff.slot = i;
  int line = 1;
  for (std::size_t k = 0; k < i && k < expected.size(); ++k) {
    if (expected[k] != SlotKind::kCharacter) ++line;
  }
  diff.line = i < expected.size() ? line : 0;
  diff.expected = i < expected.size() ? std::string(to_string(expected[i])) : "END";
  diff.observed = i < observed.size() ? std::string(to_string(observed[i])) : "END";
  diff.message = "slot " + std::to_string(i) + ": expected " + diff.expected + ", observed " + diff.observed;
  return diff;
}

std::string format_rate(double rate) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", rate);
  return buf;
}

}  // namespace

FormCheckResult check_form(const Sample& sample, const FormSpec& spec, const CheckOptions& options) {
  FormCheckResult result{spec, sample.line_lengths(), sample.stanza_break, false, std::nullopt};
  const bool lines_match = result.observed_lines == spec.line_lengths();
  const bool stanza_match = options.ignore_stanza_break || result.observed_stanza_break == spec.stanza_break();
  result.verdict = lines_match && stanza_match;
  if (!result.verdict) {
    std::optional<int> expected_break;
    std::optional<int> observed_break;
    if (!options.ignore_stanza_break) {
      expected_break = spec.stanza_break();
      observed_break = result.observed_stanza_break;
    }
    result.diff = first_difference(observed_skeleton(spec.line_lengths(), expected_break),
                                   observed_skeleton(result.observed_lines, observed_break));
  }
  return result;
}

FormCheckResult parse_failure_result(const FormSpec& spec, const std::string& error) {
  FormCheckResult result{spec, {}, std::nullopt, false, std::nullopt};
  FormDiff diff;
  diff.slot = 0;
  diff.line = 1;
  diff.expected = std::string(to_string(expected_token_skeleton(spec).front()));
  diff.observed = "PARSE_ERROR";
  diff.message = error;
  result.diff = diff;
  return result;
}

const CorrectRateRow* CorrectRateReport::find(std::string_view form) const {
  for (const auto& row : rows) {
    if (row.form == form) return &row;
  }
  return nullptr;
}

std::string CorrectRateReport::to_csv() const {
  std::string out = "form,length_of_body,n_generated,n_correct,rate\n";
  for (const auto& r : rows) {
    out += r.form + "," + std::to_string(r.body_length) + "," + std::to_string(r.generated) + "," +
           std::to_string(r.correct) + "," + format_rate(r.rate) + "\n";
  }
  return out;
}

std::string CorrectRateReport::to_json() const {
  json j = {{"label", label}, {"rows", json::array()}, {"warnings", warnings}};
  for (const auto& r : rows) {
    j["rows"].push_back({{"form", r.form},
                         {"length_of_body", r.body_length},
                         {"n_generated", r.generated},
                         {"n_correct", r.correct},
                         {"rate", r.rate}});
  }
  return j.dump(1);
}

CorrectRateReport CorrectRateReport::from_json(std::string_view text) {
  CorrectRateReport report;
  try {
    const json j = json::parse(text);
    report.label = j.value("label", std::string());
    for (const auto& r : j.at("rows")) {
      CorrectRateRow row;
      row.form = r.at("form").get<std::string>();
      row.body_length = r.value("length_of_body", 0);
      row.generated = r.at("n_generated").get<std::size_t>();
      row.correct = r.at("n_correct").get<std::size_t>();
      row.rate = r.at("rate").get<double>();
      report.rows.push_back(std::move(row));
    }
    if (j.contains("warnings")) report.warnings = j["warnings"].get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw ValidationError(std::string("correct-rate report: ") + e.what());
  }
  return report;
}

CorrectRateReport CorrectRateReport::from_csv(std::string_view text, std::string label) {
  CorrectRateReport report;
  report.label = std::move(label);
  std::istringstream in{std::string(text)};
  std::string line;
  if (!std::getline(in, line) || line.rfind("form,length_of_body,n_generated,n_correct,rate", 0) != 0) {
    throw ValidationError("correct-rate CSV has an unexpected header");
  }
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != 5) throw FormatError("<csv>", line_no, "<row>", "expected 5 columns");
    try {
      report.rows.push_back({cells[0], std::stoi(cells[1]), std::stoul(cells[2]), std::stoul(cells[3]),
                             std::stod(cells[4])});
    } catch (const std::exception&) {
      throw FormatError("<csv>", line_no, "<row>", "non-numeric value");
    }
  }
  return report;
}

CorrectRateReport correct_rate(std::span<const GenerationResult> results, const FormRegistry& registry,
                               std::string label, const CheckOptions& options,
                               const std::vector<std::string>& expected_forms) {
  std::map<std::string, CorrectRateRow> by_form;
  for (const auto& r : results) {
    const FormSpec& spec = registry.at(r.form_name);
    auto& row = by_form[r.form_name];
    row.form = r.form_name;
    row.body_length = spec.body_length();
    ++row.generated;
    if (r.terminated && r.parsed && check_form(*r.parsed, spec, options).verdict) ++row.correct;
  }
  CorrectRateReport report;
  report.label = std::move(label);
  for (const auto& name : expected_forms) {
    if (!by_form.contains(name)) {
      report.warnings.push_back("no generations for form '" + name + "'; omitted");
    }
  }
  for (auto& [name, row] : by_form) {
    row.rate = static_cast<double>(row.correct) / static_cast<double>(row.generated);
    report.rows.push_back(row);
  }
  std::sort(report.rows.begin(), report.rows.end(), [](const auto& a, const auto& b) {
    return a.body_length != b.body_length ? a.body_length < b.body_length : a.form < b.form;
  });
  return report;
}

std::string Comparison::to_csv() const {
  std::string out = "form,rate_a,rate_b,delta_points\n";
  for (const auto& r : rows) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%+.2f", r.delta * 100.0);
    out += r.form + "," + format_rate(r.rate_a) + "," + format_rate(r.rate_b) + "," + buf + "\n";
  }
  return out;
}

Comparison ab_compare(const CorrectRateReport& a, const CorrectRateReport& b) {
  Comparison cmp;
  for (const auto& row_a : a.rows) {
    const auto* row_b = b.find(row_a.form);
    if (!row_b) {
      cmp.warnings.push_back("form '" + row_a.form + "' only in the first report");
      continue;
    }
    RateDelta d{row_a.form, row_a.rate, row_b->rate, row_b->rate - row_a.rate};
    if (d.delta > 0) {
      ++cmp.improved;
    } else if (d.delta < 0) {
      ++cmp.worsened;
    } else {
      ++cmp.unchanged;
    }
    cmp.rows.push_back(std::move(d));
  }
  for (const auto& row_b : b.rows) {
    if (!a.find(row_b.form)) cmp.warnings.push_back("form '" + row_b.form + "' only in the second report");
  }
  if (cmp.rows.empty()) throw ValidationError("reports share no forms");
  return cmp;
}

}  // namespace poemform
