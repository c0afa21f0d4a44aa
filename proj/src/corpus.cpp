#include "poemform/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "poemform/errors.hpp"
#include "poemform/utf8.hpp"

namespace poemform {

namespace {

using nlohmann::json;

bool is_space(char32_t cp) {
  return cp == U' ' || cp == U'\t' || cp == U'\n' || cp == U'\r' || cp == U'　';
}

void check_text_field(std::string_view text, std::string_view what) {
  for (char32_t cp : utf8::decode(text)) {
    if (is_reserved_char(cp)) {
      throw ValidationError(std::string(what) + " contains reserved separator '" + utf8::encode(cp) +
                            "'");
    }
  }
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open '" + path.string() + "'");
  std::stringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

// FNV-1a over the id table.
std::uint64_t table_hash(const std::vector<char32_t>& characters) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](std::uint32_t value) {
    for (int i = 0; i < 4; ++i) {
      h ^= (value >> (8 * i)) & 0xFF;
      h *= 0x100000001b3ULL;
    }
  };
  mix(Vocabulary::kSpecialCount);
  for (char32_t cp : characters) mix(static_cast<std::uint32_t>(cp));
  return h;
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint64_t get_le(std::string_view data, std::size_t offset, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) {
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data[offset + i])) << (8 * i);
  }
  return v;
}

constexpr std::string_view kSpecialText[Vocabulary::kSpecialCount] = {
    "[PAD]", "[UNK]", "[CLS]", "[EOS]", ",", "#", "*", "&"};

}  // namespace

bool is_reserved_char(char32_t cp) {
  return cp == kLineSepChar || cp == kLabel1Char || cp == kLabel2Char || cp == kStanzaSepChar;
}

void Sample::validate() const {
  check_text_field(form_name, "form name");
  if (form_name.empty()) throw ValidationError("sample form name is empty");
  check_text_field(title, "title");
  if (body_lines.empty()) throw ValidationError("sample body has no lines");
  for (std::size_t i = 0; i < body_lines.size(); ++i) {
    if (body_lines[i].empty()) {
      throw ValidationError("sample body line " + std::to_string(i + 1) + " is empty");
    }
    check_text_field(body_lines[i], "body line " + std::to_string(i + 1));
  }
  if (stanza_break && (*stanza_break < 1 || *stanza_break >= static_cast<int>(body_lines.size()))) {
    throw ValidationError("sample stanza_break " + std::to_string(*stanza_break) + " out of range");
  }
}

std::vector<int> Sample::line_lengths() const {
  std::vector<int> out;
  out.reserve(body_lines.size());
  for (const auto& line : body_lines) out.push_back(static_cast<int>(utf8::length(line)));
  return out;
}

std::vector<std::string> normalize_punctuation(std::string_view raw_body, const NormalizeOptions& options) {
  std::vector<std::string> lines;
  std::u32string current;
  auto flush = [&] {
    if (!current.empty()) {
      lines.push_back(utf8::encode(current));
      current.clear();
    }
  };
  for (char32_t cp : utf8::decode(raw_body)) {
    if (options.terminators.find(cp) != std::u32string::npos) {
      flush();
    } else if (!is_space(cp)) {
      if (is_reserved_char(cp)) {
        throw ValidationError("body contains reserved separator '" + utf8::encode(cp) + "'");
      }
      current.push_back(cp);
    }
  }
  flush();
  if (lines.empty()) throw ValidationError("body is empty after normalization");
  return lines;
}

std::string serialize_unchecked(const Sample& sample, bool include_stanza_label) {
  sample.validate();
  std::string out(kClsMarker);
  out += sample.form_name;
  out += static_cast<char>(kLabel1Char);
  out += sample.title;
  out += static_cast<char>(kLabel2Char);
  for (std::size_t i = 0; i < sample.body_lines.size(); ++i) {
    if (i > 0) {
      const bool at_break = include_stanza_label && sample.stanza_break &&
                            static_cast<int>(i) == *sample.stanza_break;
      out += static_cast<char>(at_break ? kStanzaSepChar : kLineSepChar);
    }
    out += sample.body_lines[i];
  }
  out += kEosMarker;
  return out;
}

std::string serialize(const Sample& sample, const FormRegistry& registry, bool include_stanza_label) {
  if (!registry.contains(sample.form_name)) {
    throw ValidationError("sample form '" + sample.form_name + "' is not registered");
  }
  return serialize_unchecked(sample, include_stanza_label);
}

Sample parse(std::string_view serialized) {
  if (!serialized.starts_with(kClsMarker)) throw ValidationError("serialized sample does not start with [CLS]");
  serialized.remove_prefix(kClsMarker.size());
  if (!serialized.ends_with(kEosMarker)) throw ValidationError("serialized sample does not end with [EOS]");
  serialized.remove_suffix(kEosMarker.size());

  const std::u32string text = utf8::decode(serialized);
  const auto hash_pos = text.find(kLabel1Char);
  if (hash_pos == std::u32string::npos) throw ValidationError("serialized sample is missing '#'");
  const auto star_pos = text.find(kLabel2Char, hash_pos + 1);
  if (star_pos == std::u32string::npos) throw ValidationError("serialized sample is missing '*'");

  Sample sample;
  sample.form_name = utf8::encode(std::u32string_view(text).substr(0, hash_pos));
  sample.title = utf8::encode(std::u32string_view(text).substr(hash_pos + 1, star_pos - hash_pos - 1));

  std::u32string line;
  auto finish_line = [&] {
    if (line.empty()) {
      throw ValidationError("serialized sample has an empty body line at line " +
                            std::to_string(sample.body_lines.size() + 1));
    }
    sample.body_lines.push_back(utf8::encode(line));
    line.clear();
  };
  for (std::size_t i = star_pos + 1; i < text.size(); ++i) {
    const char32_t cp = text[i];
    if (cp == kLineSepChar) {
      finish_line();
    } else if (cp == kStanzaSepChar) {
      if (sample.stanza_break) throw ValidationError("serialized sample has more than one '&'");
      finish_line();
      sample.stanza_break = static_cast<int>(sample.body_lines.size());
    } else if (cp == kLabel1Char || cp == kLabel2Char) {
      throw ValidationError("serialized body contains label '" + utf8::encode(cp) + "'");
    } else {
      line.push_back(cp);
    }
  }
  finish_line();
  sample.validate();
  return sample;
}

Vocabulary::Vocabulary(std::vector<char32_t> characters, int min_frequency)
    : characters_(std::move(characters)), min_frequency_(min_frequency) {
  if (min_frequency_ < 1) throw ValidationError("min_frequency must be >= 1");
  for (std::size_t i = 0; i < characters_.size(); ++i) {
    const char32_t cp = characters_[i];
    if (is_reserved_char(cp)) {
      throw ValidationError("vocabulary character '" + utf8::encode(cp) + "' is a reserved separator");
    }
    if (!char_to_id_.emplace(cp, static_cast<TokenId>(kSpecialCount + i)).second) {
      throw ValidationError("vocabulary character '" + utf8::encode(cp) + "' appears twice");
    }
  }
  hash_ = table_hash(characters_);
}

Vocabulary Vocabulary::build(std::span<const Sample> samples, int min_frequency) {
  if (samples.empty()) throw ValidationError("cannot build a vocabulary from an empty corpus");
  if (min_frequency < 1) throw ValidationError("min_frequency must be >= 1");
  std::map<char32_t, std::size_t> freq;
  auto count = [&freq](std::string_view text) {
    for (char32_t cp : utf8::decode(text)) ++freq[cp];
  };
  for (const auto& s : samples) {
    s.validate();
    count(s.form_name);
    count(s.title);
    for (const auto& line : s.body_lines) count(line);
  }
  std::vector<std::pair<char32_t, std::size_t>> admitted;
  for (const auto& [cp, n] : freq) {
    if (n >= static_cast<std::size_t>(min_frequency)) admitted.emplace_back(cp, n);
  }
  std::stable_sort(admitted.begin(), admitted.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  std::vector<char32_t> chars;
  chars.reserve(admitted.size());
  for (const auto& [cp, n] : admitted) chars.push_back(cp);
  return Vocabulary(std::move(chars), min_frequency);
}

TokenId Vocabulary::id_of(char32_t cp) const {
  switch (cp) {
    case kLineSepChar: return kLineSep;
    case kLabel1Char: return kLabel1;
    case kLabel2Char: return kLabel2;
    case kStanzaSepChar: return kStanzaSep;
    default: break;
  }
  auto it = char_to_id_.find(cp);
  return it == char_to_id_.end() ? kUnk : it->second;
}

std::string Vocabulary::token_text(TokenId id) const {
  if (id == kUnk) return utf8::encode(kUnkGlyph);
  if (id < kSpecialCount) return std::string(kSpecialText[id]);
  if (id >= size()) throw ValidationError("token id " + std::to_string(id) + " outside vocabulary");
  return utf8::encode(characters_[id - kSpecialCount]);
}

std::string Vocabulary::to_json() const {
  json tokens = json::array();
  for (TokenId id = 0; id < size(); ++id) {
    const std::string text =
        id < kSpecialCount ? std::string(kSpecialText[id]) : utf8::encode(characters_[id - kSpecialCount]);
    tokens.push_back({{"id", id}, {"token", text}, {"special", id < kSpecialCount}});
  }
  json doc = {{"format", "poemform-vocab/1"},
              {"min_frequency", min_frequency_},
              {"hash", hash_},
              {"tokens", std::move(tokens)}};
  return doc.dump(1);
}

Vocabulary Vocabulary::from_json(std::string_view text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ValidationError(std::string("vocabulary is not valid JSON: ") + e.what());
  }
  if (!doc.is_object() || doc.value("format", "") != "poemform-vocab/1") {
    throw ValidationError("vocabulary file has an unknown format");
  }
  if (!doc.contains("tokens") || !doc["tokens"].is_array()) throw ValidationError("vocabulary has no token table");
  const auto& tokens = doc["tokens"];
  std::vector<std::optional<std::string>> by_id(tokens.size());
  for (const auto& entry : tokens) {
    if (!entry.is_object() || !entry.contains("id") || !entry["id"].is_number_unsigned() ||
        !entry.contains("token") || !entry["token"].is_string()) {
      throw ValidationError("vocabulary entry must have an unsigned 'id' and a string 'token'");
    }
    const auto id = entry["id"].get<std::size_t>();
    if (id >= by_id.size()) throw ValidationError("vocabulary id " + std::to_string(id) + " out of range");
    if (by_id[id]) throw ValidationError("vocabulary id " + std::to_string(id) + " assigned twice");
    by_id[id] = entry["token"].get<std::string>();
  }
  if (by_id.size() < kSpecialCount) throw ValidationError("vocabulary lacks the special tokens");
  for (TokenId id = 0; id < kSpecialCount; ++id) {
    if (*by_id[id] != kSpecialText[id]) {
      throw ValidationError("vocabulary id " + std::to_string(id) + " must be '" + std::string(kSpecialText[id]) + "'");
    }
  }
  std::vector<char32_t> chars;
  for (std::size_t id = kSpecialCount; id < by_id.size(); ++id) {
    const auto cps = utf8::decode(*by_id[id]);
    if (cps.size() != 1) {
      throw ValidationError("vocabulary id " + std::to_string(id) + " must hold exactly one character");
    }
    chars.push_back(cps[0]);
  }
  const int min_frequency = doc.value("min_frequency", 1);
  Vocabulary vocab(std::move(chars), min_frequency);
  if (doc.contains("hash") && doc["hash"].get<std::uint64_t>() != vocab.hash()) {
    throw ValidationError("vocabulary hash does not match its token table");
  }
  return vocab;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw RuntimeFailure("cannot write vocabulary '" + path.string() + "'");
  out << to_json() << '\n';
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) { return from_json(read_file(path)); }

std::span<const TokenId> TokenStream::sample(std::size_t i) const {
  const std::size_t begin = boundaries.at(i);
  const std::size_t end = i + 1 < boundaries.size() ? boundaries[i + 1] : ids.size();
  return std::span<const TokenId>(ids).subspan(begin, end - begin);
}

void TokenStream::append(std::span<const TokenId> sample_ids) {
  boundaries.push_back(ids.size());
  ids.insert(ids.end(), sample_ids.begin(), sample_ids.end());
}

void TokenStream::validate() const {
  if (boundaries.empty()) {
    if (!ids.empty()) throw ValidationError("token stream has ids but no sample boundaries");
    return;
  }
  if (boundaries.front() != 0) throw ValidationError("token stream must start at a sample boundary");
  for (std::size_t i = 0; i < boundaries.size(); ++i) {
    if (i > 0 && boundaries[i] <= boundaries[i - 1]) {
      throw ValidationError("token stream boundaries must be strictly increasing");
    }
    if (boundaries[i] >= ids.size()) throw ValidationError("token stream boundary past the end");
    const auto s = sample(i);
    if (s.size() < 2 || s.front() != Vocabulary::kCls || s.back() != Vocabulary::kEos) {
      throw ValidationError("token stream sample " + std::to_string(i) + " is not CLS ... EOS");
    }
  }
}

std::vector<TokenId> encode(const Sample& sample, const Vocabulary& vocab, bool include_stanza_label) {
  sample.validate();
  std::vector<TokenId> ids;
  ids.push_back(Vocabulary::kCls);
  for (char32_t cp : utf8::decode(sample.form_name)) ids.push_back(vocab.id_of(cp));
  ids.push_back(Vocabulary::kLabel1);
  for (char32_t cp : utf8::decode(sample.title)) ids.push_back(vocab.id_of(cp));
  ids.push_back(Vocabulary::kLabel2);
  for (std::size_t i = 0; i < sample.body_lines.size(); ++i) {
    if (i > 0) {
      const bool at_break = include_stanza_label && sample.stanza_break &&
                            static_cast<int>(i) == *sample.stanza_break;
      ids.push_back(at_break ? Vocabulary::kStanzaSep : Vocabulary::kLineSep);
    }
    for (char32_t cp : utf8::decode(sample.body_lines[i])) ids.push_back(vocab.id_of(cp));
  }
  ids.push_back(Vocabulary::kEos);
  return ids;
}

TokenStream encode_corpus(std::span<const Sample> samples, const Vocabulary& vocab, bool include_stanza_label) {
  TokenStream stream;
  for (const auto& s : samples) stream.append(encode(s, vocab, include_stanza_label));
  return stream;
}

std::vector<TokenId> encode_serialized(std::string_view serialized, const Vocabulary& vocab) {
  std::vector<TokenId> ids;
  if (serialized.starts_with(kClsMarker)) {
    ids.push_back(Vocabulary::kCls);
    serialized.remove_prefix(kClsMarker.size());
  }
  const bool has_eos = serialized.ends_with(kEosMarker);
  if (has_eos) serialized.remove_suffix(kEosMarker.size());
  for (char32_t cp : utf8::decode(serialized)) ids.push_back(vocab.id_of(cp));
  if (has_eos) ids.push_back(Vocabulary::kEos);
  return ids;
}

std::string decode(std::span<const TokenId> ids, const Vocabulary& vocab) {
  std::string out;
  for (TokenId id : ids) out += vocab.token_text(id);
  return out;
}

void write_encoded_corpus(const std::filesystem::path& path, const TokenStream& stream,
                          std::uint64_t vocab_hash) {
  stream.validate();
  std::string bytes = "PMF1";
  put_u64(bytes, vocab_hash);
  put_u64(bytes, stream.sample_count());
  for (std::size_t b : stream.boundaries) put_u64(bytes, b);
  put_u64(bytes, stream.ids.size());
  for (TokenId id : stream.ids) put_u32(bytes, id);

  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw RuntimeFailure("cannot write encoded corpus '" + tmp + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw RuntimeFailure("short write to '" + tmp + "'");
  }
  std::filesystem::rename(tmp, path);
}

EncodedCorpus read_encoded_corpus(const std::filesystem::path& path) {
  const std::string data = read_file(path);
  const std::string name = path.string();
  if (data.size() < 20 || data.compare(0, 4, "PMF1") != 0) {
    throw ValidationError("'" + name + "' is not an encoded corpus (bad magic)");
  }
  EncodedCorpus corpus;
  corpus.vocab_hash = get_le(data, 4, 8);
  const std::uint64_t count = get_le(data, 12, 8);
  const std::size_t header = 20 + 8 * (count + 1);
  if (count > data.size() / 8 || data.size() < header) {
    throw ValidationError("'" + name + "' has a truncated offsets table");
  }
  for (std::uint64_t i = 0; i < count; ++i) {
    corpus.stream.boundaries.push_back(static_cast<std::size_t>(get_le(data, 20 + 8 * i, 8)));
  }
  const std::uint64_t total = get_le(data, 20 + 8 * count, 8);
  if (data.size() != header + 4 * total) {
    throw ValidationError("'" + name + "' size does not match its offsets table");
  }
  corpus.stream.ids.resize(total);
  for (std::uint64_t i = 0; i < total; ++i) {
    corpus.stream.ids[i] = static_cast<TokenId>(get_le(data, header + 4 * i, 4));
  }
  corpus.stream.validate();
  return corpus;
}

std::vector<Sample> parse_raw_corpus(std::string_view text, const std::string& source,
                                     const NormalizeOptions& options) {
  std::vector<Sample> samples;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    auto end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    const std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;

    json record;
    try {
      record = json::parse(line);
    } catch (const json::parse_error& e) {
      throw FormatError(source, line_no, "<record>", std::string("invalid JSON: ") + e.what());
    }
    if (!record.is_object()) throw FormatError(source, line_no, "<record>", "expected a JSON object");
    Sample s;
    if (!record.contains("form") || !record["form"].is_string()) {
      throw FormatError(source, line_no, "form", "missing or not a string");
    }
    s.form_name = record["form"].get<std::string>();
    if (record.contains("title")) {
      if (!record["title"].is_string()) throw FormatError(source, line_no, "title", "not a string");
      s.title = record["title"].get<std::string>();
    }
    if (!record.contains("body")) throw FormatError(source, line_no, "body", "missing");
    try {
      const auto& body = record["body"];
      if (body.is_string()) {
        s.body_lines = normalize_punctuation(body.get<std::string>(), options);
      } else if (body.is_array()) {
        for (const auto& entry : body) {
          if (!entry.is_string()) throw ValidationError("body entries must be strings");
          auto parts = normalize_punctuation(entry.get<std::string>(), options);
          if (parts.size() != 1) throw ValidationError("body entry splits into " + std::to_string(parts.size()) + " lines");
          s.body_lines.push_back(std::move(parts.front()));
        }
      } else {
        throw ValidationError("must be a string or an array of strings");
      }
    } catch (const FormatError&) {
      throw;
    } catch (const ValidationError& e) {
      throw FormatError(source, line_no, "body", e.what());
    }
    if (record.contains("stanza_break") && !record["stanza_break"].is_null()) {
      if (!record["stanza_break"].is_number_integer()) {
        throw FormatError(source, line_no, "stanza_break", "must be an integer or null");
      }
      s.stanza_break = record["stanza_break"].get<int>();
    }
    try {
      s.validate();
    } catch (const ValidationError& e) {
      throw FormatError(source, line_no, "<record>", e.what());
    }
    samples.push_back(std::move(s));
  }
  return samples;
}

std::vector<Sample> load_raw_corpus(const std::filesystem::path& path, const NormalizeOptions& options) {
  return parse_raw_corpus(read_file(path), path.string(), options);
}

std::string format_raw_corpus(std::span<const Sample> samples) {
  std::string out;
  for (const auto& s : samples) {
    json record = {{"form", s.form_name},
                   {"title", s.title},
                   {"body", s.body_lines},
                   {"stanza_break", s.stanza_break ? json(*s.stanza_break) : json(nullptr)}};
    out += record.dump();
    out += '\n';
  }
  return out;
}

std::size_t fill_stanza_breaks(std::vector<Sample>& samples, const FormRegistry& registry) {
  std::size_t updated = 0;
  for (auto& s : samples) {
    if (s.stanza_break) continue;
    const auto* spec = registry.find(s.form_name);
    if (spec && spec->stanza_break() && spec->line_count() == static_cast<int>(s.body_lines.size())) {
      s.stanza_break = spec->stanza_break();
      ++updated;
    }
  }
  return updated;
}

std::size_t CoverageReport::rank_for(double target) const {
  for (std::size_t r = 0; r < cumulative.size(); ++r) {
    if (cumulative[r] >= target) return r + 1;
  }
  return cumulative.size();
}

CoverageReport coverage_from_counts(const std::map<std::string, std::size_t>& counts) {
  CoverageReport report;
  for (const auto& [name, n] : counts) {
    if (n == 0) continue;
    report.counts.emplace_back(name, n);
    report.total += n;
  }
  std::stable_sort(report.counts.begin(), report.counts.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  std::size_t running = 0;
  for (const auto& [name, n] : report.counts) {
    running += n;
    report.cumulative.push_back(static_cast<double>(running) / static_cast<double>(report.total));
  }
  return report;
}

CoverageReport coverage_report(std::span<const Sample> samples) {
  std::map<std::string, std::size_t> counts;
  for (const auto& s : samples) ++counts[s.form_name];
  return coverage_from_counts(counts);
}

}  // namespace poemform
