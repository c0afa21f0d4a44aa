#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "poemform/form_registry.hpp"

namespace poemform {

using TokenId = std::uint32_t;

inline constexpr std::string_view kClsMarker = "[CLS]";
inline constexpr std::string_view kEosMarker = "[EOS]";
inline constexpr char32_t kLineSepChar = U',';
inline constexpr char32_t kLabel1Char = U'#';
inline constexpr char32_t kLabel2Char = U'*';
inline constexpr char32_t kStanzaSepChar = U'&';
// Glyph emitted when decoding UNK.
inline constexpr char32_t kUnkGlyph = U'�';

bool is_reserved_char(char32_t cp);

// One poem record. Text fields are UTF-8.
struct Sample {
  std::string form_name;
  std::string title;
  std::vector<std::string> body_lines;
  std::optional<int> stanza_break;

  // Throws ValidationError when an invariant is broken.
  void validate() const;
  std::vector<int> line_lengths() const;

  friend bool operator==(const Sample&, const Sample&) = default;
};

struct NormalizeOptions {
  std::u32string terminators = U"。，、；？！．,;?!";
};

// Splits a raw body at line-terminating punctuation. Whitespace is dropped and
// runs of punctuation collapse into a single break.
std::vector<std::string> normalize_punctuation(std::string_view raw_body,
                                               const NormalizeOptions& options = {});

// "[CLS]form#title*l1,l2&l3,l4[EOS]". With include_stanza_label=false the
// stanza break is rendered as an ordinary ','.
std::string serialize(const Sample& sample, const FormRegistry& registry, bool include_stanza_label);
// Same, without resolving the form name.
std::string serialize_unchecked(const Sample& sample, bool include_stanza_label);

// Inverse of serialize; throws ValidationError on malformed input.
Sample parse(std::string_view serialized);

class Vocabulary {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kUnk = 1;
  static constexpr TokenId kCls = 2;
  static constexpr TokenId kEos = 3;
  static constexpr TokenId kLineSep = 4;
  static constexpr TokenId kLabel1 = 5;
  static constexpr TokenId kLabel2 = 6;
  static constexpr TokenId kStanzaSep = 7;
  static constexpr TokenId kSpecialCount = 8;

  // Characters in id order starting at kSpecialCount.
  Vocabulary(std::vector<char32_t> characters, int min_frequency);

  // Counts characters of form names, titles and body lines; admits those with
  // frequency >= min_frequency. Ids follow descending frequency, ties by code point.
  static Vocabulary build(std::span<const Sample> samples, int min_frequency);

  std::size_t size() const { return kSpecialCount + characters_.size(); }
  int min_frequency() const { return min_frequency_; }
  const std::vector<char32_t>& characters() const { return characters_; }
  std::uint64_t hash() const { return hash_; }

  // UNK for characters outside the vocabulary.
  TokenId id_of(char32_t cp) const;
  bool contains(char32_t cp) const { return char_to_id_.contains(cp); }
  // Text of a token: "[CLS]", "[EOS]", "[PAD]", the UNK glyph, a separator, or the character.
  std::string token_text(TokenId id) const;

  std::string to_json() const;
  static Vocabulary from_json(std::string_view text);
  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) {
    return a.min_frequency_ == b.min_frequency_ && a.characters_ == b.characters_;
  }

 private:
  std::vector<char32_t> characters_;
  std::unordered_map<char32_t, TokenId> char_to_id_;
  int min_frequency_;
  std::uint64_t hash_;
};

// Concatenated samples; boundaries[i] is the offset of sample i's CLS.
struct TokenStream {
  std::vector<TokenId> ids;
  std::vector<std::size_t> boundaries;

  std::size_t sample_count() const { return boundaries.size(); }
  std::span<const TokenId> sample(std::size_t i) const;
  void append(std::span<const TokenId> sample_ids);
  // Throws ValidationError unless every slice is CLS ... EOS and boundaries increase.
  void validate() const;
};

std::vector<TokenId> encode(const Sample& sample, const Vocabulary& vocab, bool include_stanza_label = true);
TokenStream encode_corpus(std::span<const Sample> samples, const Vocabulary& vocab,
                          bool include_stanza_label = true);
// Tokenizes serialized text: the leading [CLS] and trailing [EOS] markers map to
// single tokens, every other code point to one token.
std::vector<TokenId> encode_serialized(std::string_view serialized, const Vocabulary& vocab);
std::string decode(std::span<const TokenId> ids, const Vocabulary& vocab);

// Encoded corpus file: "PMF1", u64 vocab hash, u64 sample count,
// u64 offsets[count + 1], u32 ids[]; all little-endian.
void write_encoded_corpus(const std::filesystem::path& path, const TokenStream& stream,
                          std::uint64_t vocab_hash);
struct EncodedCorpus {
  TokenStream stream;
  std::uint64_t vocab_hash = 0;
};
EncodedCorpus read_encoded_corpus(const std::filesystem::path& path);

// Raw corpus JSON Lines: {"form", "title", "body": string | [string], "stanza_break"}.
std::vector<Sample> parse_raw_corpus(std::string_view text, const std::string& source = "<memory>",
                                     const NormalizeOptions& options = {});
std::vector<Sample> load_raw_corpus(const std::filesystem::path& path, const NormalizeOptions& options = {});
std::string format_raw_corpus(std::span<const Sample> samples);

// Copies the registered stanza break into samples that carry none, when the
// line count matches the form. Returns the number of samples updated.
std::size_t fill_stanza_breaks(std::vector<Sample>& samples, const FormRegistry& registry);

struct CoverageReport {
  // (form, count) sorted by count descending, ties by name.
  std::vector<std::pair<std::string, std::size_t>> counts;
  // cumulative[r] = fraction of samples covered by the top r+1 forms.
  std::vector<double> cumulative;
  std::size_t total = 0;

  // Smallest 1-based rank whose cumulative fraction reaches target.
  std::size_t rank_for(double target) const;
};

CoverageReport coverage_report(std::span<const Sample> samples);
CoverageReport coverage_from_counts(const std::map<std::string, std::size_t>& counts);

}  // namespace poemform
