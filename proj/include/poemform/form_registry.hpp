#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace poemform {

enum class FormCategory { kShi, kCi };

std::string_view to_string(FormCategory category);
FormCategory parse_category(std::string_view text);

// One poem form: characters per line (punctuation excluded) and an optional
// break after line `stanza_break` (1-based) splitting the body in two stanzas.
class FormSpec {
 public:
  // Validates every invariant; throws ValidationError.
  FormSpec(std::string name, FormCategory category, std::vector<int> line_lengths,
           std::optional<int> stanza_break = std::nullopt);

  const std::string& name() const { return name_; }
  FormCategory category() const { return category_; }
  const std::vector<int>& line_lengths() const { return line_lengths_; }
  std::optional<int> stanza_break() const { return stanza_break_; }
  int line_count() const { return static_cast<int>(line_lengths_.size()); }
  int body_length() const;

  struct Violation {
    std::string field;
    std::string message;
  };
  // First broken invariant of the given fields, if any.
  static std::optional<Violation> find_violation(const std::string& name, FormCategory category,
                                                 const std::vector<int>& line_lengths,
                                                 std::optional<int> stanza_break);

  friend bool operator==(const FormSpec&, const FormSpec&) = default;

 private:
  std::string name_;
  FormCategory category_;
  std::vector<int> line_lengths_;
  std::optional<int> stanza_break_;
};

enum class SlotKind { kCharacter, kLineSep, kStanzaSep };

std::string_view to_string(SlotKind kind);

// Body-token pattern demanded by `spec`, excluding the trailing EOS.
std::vector<SlotKind> expected_token_skeleton(const FormSpec& spec);

// Wuyan/Qiyan Jueju and Wuyan/Qiyan Lvshi.
std::vector<FormSpec> builtin_shi_forms();

// Immutable after construction; lookups are safe from any thread.
class FormRegistry {
 public:
  // Registry holding the built-in SHI forms only.
  FormRegistry();

  // Throws ValidationError on a duplicate name.
  void add(FormSpec spec);

  const FormSpec* find(std::string_view name) const;
  // Throws ValidationError when the name is unknown.
  const FormSpec& at(std::string_view name) const;
  bool contains(std::string_view name) const { return find(name) != nullptr; }

  std::size_t size() const { return forms_.size(); }
  std::vector<std::string> names() const;
  // All specs in name order.
  std::vector<FormSpec> specs() const;

  friend bool operator==(const FormRegistry&, const FormRegistry&) = default;

 private:
  std::map<std::string, FormSpec, std::less<>> forms_;
};

// JSON Lines: {"name", "category", "line_lengths", "stanza_break"} per line.
// Blank lines are skipped. Built-in SHI forms are always present; a record
// that repeats a built-in name must match it exactly.
FormRegistry parse_registry(std::string_view text, const std::string& source = "<memory>");
FormRegistry load_registry(const std::filesystem::path& path);

std::string format_registry(const FormRegistry& registry);
void save_registry(const FormRegistry& registry, const std::filesystem::path& path);

}  // namespace poemform
