#include "poemform/form_registry.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "poemform/errors.hpp"
#include "poemform/utf8.hpp"

namespace poemform {

namespace {

using nlohmann::json;

// Separators of the serialized sample format may not appear in form names.
constexpr std::u32string_view kReservedInNames = U",#*&";

}  // namespace

std::string_view to_string(FormCategory category) {
  return category == FormCategory::kShi ? "SHI" : "CI";
}

FormCategory parse_category(std::string_view text) {
  if (text == "SHI") return FormCategory::kShi;
  if (text == "CI") return FormCategory::kCi;
  throw ValidationError("unknown form category '" + std::string(text) + "'");
}

std::optional<FormSpec::Violation> FormSpec::find_violation(const std::string& name,
                                                            FormCategory category,
                                                            const std::vector<int>& line_lengths,
                                                            std::optional<int> stanza_break) {
  if (name.empty()) return Violation{"name", "form name is empty"};
  for (char32_t cp : utf8::decode(name)) {
    if (kReservedInNames.find(cp) != std::u32string_view::npos) {
      return Violation{"name", "form name '" + name + "' contains reserved separator '" +
                                   utf8::encode(cp) + "'"};
    }
  }
  if (line_lengths.empty()) return Violation{"line_lengths", "form '" + name + "' has no lines"};
  for (std::size_t i = 0; i < line_lengths.size(); ++i) {
    if (line_lengths[i] < 1) {
      return Violation{"line_lengths", "form '" + name + "' line " + std::to_string(i + 1) +
                                           " has non-positive length " +
                                           std::to_string(line_lengths[i])};
    }
  }
  const int lines = static_cast<int>(line_lengths.size());
  if (stanza_break && (*stanza_break < 1 || *stanza_break >= lines)) {
    return Violation{"stanza_break", "form '" + name + "' stanza_break " +
                                         std::to_string(*stanza_break) + " out of range [1, " +
                                         std::to_string(lines - 1) + "]"};
  }
  if (category == FormCategory::kShi) {
    if (stanza_break) {
      return Violation{"stanza_break", "SHI form '" + name + "' cannot have a stanza break"};
    }
    for (int len : line_lengths) {
      if (len != line_lengths.front()) {
        return Violation{"line_lengths", "SHI form '" + name + "' must have equal line lengths"};
      }
    }
  }
  return std::nullopt;
}

FormSpec::FormSpec(std::string name, FormCategory category, std::vector<int> line_lengths,
                   std::optional<int> stanza_break)
    : name_(std::move(name)),
      category_(category),
      line_lengths_(std::move(line_lengths)),
      stanza_break_(stanza_break) {
  if (auto violation = find_violation(name_, category_, line_lengths_, stanza_break_)) {
    throw ValidationError(violation->message);
  }
}

int FormSpec::body_length() const {
  int total = 0;
  for (int len : line_lengths_) total += len;
  return total;
}

std::string_view to_string(SlotKind kind) {
  switch (kind) {
    case SlotKind::kCharacter: return "CHARACTER";
    case SlotKind::kLineSep: return "LINE_SEP";
    case SlotKind::kStanzaSep: return "STANZA_SEP";
  }
  return "?";
}

std::vector<SlotKind> expected_token_skeleton(const FormSpec& spec) {
  std::vector<SlotKind> slots;
  const auto& lines = spec.line_lengths();
  slots.reserve(static_cast<std::size_t>(spec.body_length() + spec.line_count()));
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (i > 0) {
      const bool at_break = spec.stanza_break() && static_cast<int>(i) == *spec.stanza_break();
      slots.push_back(at_break ? SlotKind::kStanzaSep : SlotKind::kLineSep);
    }
    slots.insert(slots.end(), static_cast<std::size_t>(lines[i]), SlotKind::kCharacter);
  }
  return slots;
}

std::vector<FormSpec> builtin_shi_forms() {
  return {
      FormSpec("Wuyan Jueju", FormCategory::kShi, std::vector<int>(4, 5)),
      FormSpec("Qiyan Jueju", FormCategory::kShi, std::vector<int>(4, 7)),
      FormSpec("Wuyan Lvshi", FormCategory::kShi, std::vector<int>(8, 5)),
      FormSpec("Qiyan Lvshi", FormCategory::kShi, std::vector<int>(8, 7)),
  };
}

FormRegistry::FormRegistry() {
  for (auto& spec : builtin_shi_forms()) add(std::move(spec));
}

void FormRegistry::add(FormSpec spec) {
  if (forms_.contains(spec.name())) {
    throw ValidationError("duplicate form name '" + spec.name() + "'");
  }
  auto name = spec.name();
  forms_.emplace(std::move(name), std::move(spec));
}

const FormSpec* FormRegistry::find(std::string_view name) const {
  auto it = forms_.find(name);
  return it == forms_.end() ? nullptr : &it->second;
}

const FormSpec& FormRegistry::at(std::string_view name) const {
  if (const auto* spec = find(name)) return *spec;
  throw ValidationError("unknown form '" + std::string(name) + "'");
}

std::vector<std::string> FormRegistry::names() const {
  std::vector<std::string> out;
  out.reserve(forms_.size());
  for (const auto& [name, spec] : forms_) out.push_back(name);
  return out;
}

std::vector<FormSpec> FormRegistry::specs() const {
  std::vector<FormSpec> out;
  out.reserve(forms_.size());
  for (const auto& [name, spec] : forms_) out.push_back(spec);
  return out;
}

FormRegistry parse_registry(std::string_view text, const std::string& source) {
  static const std::set<std::string> kFields = {"name", "category", "line_lengths", "stanza_break"};
  FormRegistry registry;
  std::set<std::string> seen_in_file;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    auto end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) {
      if (end == text.size()) break;
      continue;
    }

    json record;
    try {
      record = json::parse(line);
    } catch (const json::parse_error& e) {
      throw FormatError(source, line_no, "<record>", std::string("invalid JSON: ") + e.what());
    }
    if (!record.is_object()) throw FormatError(source, line_no, "<record>", "expected a JSON object");
    for (const auto& [key, value] : record.items()) {
      if (!kFields.contains(key)) throw FormatError(source, line_no, key, "unknown field");
    }

    if (!record.contains("name") || !record["name"].is_string()) {
      throw FormatError(source, line_no, "name", "missing or not a string");
    }
    if (!record.contains("category") || !record["category"].is_string()) {
      throw FormatError(source, line_no, "category", "missing or not a string");
    }
    if (!record.contains("line_lengths") || !record["line_lengths"].is_array()) {
      throw FormatError(source, line_no, "line_lengths", "missing or not an array");
    }
    std::vector<int> lengths;
    for (const auto& v : record["line_lengths"]) {
      if (!v.is_number_integer()) throw FormatError(source, line_no, "line_lengths", "entries must be integers");
      lengths.push_back(v.get<int>());
    }
    std::optional<int> stanza_break;
    if (record.contains("stanza_break") && !record["stanza_break"].is_null()) {
      if (!record["stanza_break"].is_number_integer()) {
        throw FormatError(source, line_no, "stanza_break", "must be an integer or null");
      }
      stanza_break = record["stanza_break"].get<int>();
    }

    const auto name = record["name"].get<std::string>();
    FormCategory category;
    try {
      category = parse_category(record["category"].get<std::string>());
    } catch (const ValidationError& e) {
      throw FormatError(source, line_no, "category", e.what());
    }
    if (auto violation = FormSpec::find_violation(name, category, lengths, stanza_break)) {
      throw FormatError(source, line_no, violation->field, violation->message);
    }
    FormSpec spec(name, category, std::move(lengths), stanza_break);

    if (!seen_in_file.insert(name).second) {
      throw FormatError(source, line_no, "name", "duplicate form name '" + name + "'");
    }
    if (const auto* existing = registry.find(name)) {
      if (!(*existing == spec)) {
        throw FormatError(source, line_no, "name", "redefines built-in form '" + name + "'");
      }
      continue;
    }
    registry.add(std::move(spec));
  }
  return registry;
}

FormRegistry load_registry(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open form registry '" + path.string() + "'");
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_registry(buffer.str(), path.string());
}

std::string format_registry(const FormRegistry& registry) {
  std::string out;
  for (const auto& spec : registry.specs()) {
    json record = json::object();
    record["name"] = spec.name();
    record["category"] = std::string(to_string(spec.category()));
    record["line_lengths"] = spec.line_lengths();
    record["stanza_break"] = spec.stanza_break() ? json(*spec.stanza_break()) : json(nullptr);
    out += record.dump();
    out += '\n';
  }
  return out;
}

void save_registry(const FormRegistry& registry, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw RuntimeFailure("cannot write form registry '" + path.string() + "'");
  out << format_registry(registry);
}

}  // namespace poemform
