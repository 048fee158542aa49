#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "dispatcher/errors.hpp"

// Text ingestion: end-of-sentence marking, char/word tokenisation, vocabulary.
namespace dispatcher {

inline constexpr std::string_view kUnkToken = "<UNK>";
inline constexpr std::string_view kEosToken = "<EOS>";
inline constexpr std::size_t kUnkId = 0;
inline constexpr std::size_t kEosId = 1;

enum class TokenizerMode { kChar, kWord };

inline std::string to_string(TokenizerMode mode) { return mode == TokenizerMode::kChar ? "char" : "word"; }

inline TokenizerMode parse_tokenizer_mode(const std::string& name) {
  if (name == "char") return TokenizerMode::kChar;
  if (name == "word") return TokenizerMode::kWord;
  throw ContractError("unknown tokenizer '" + name + "' (expected char or word)");
}

enum class Split { kTrain, kValid, kTest };

inline std::string to_string(Split split) {
  switch (split) {
    case Split::kTrain: return "train";
    case Split::kValid: return "valid";
    case Split::kTest: return "test";
  }
  return "?";
}

namespace detail {

// Length of the UTF-8 sequence starting at text[i]; throws on malformed input.
inline std::size_t utf8_sequence_length(std::string_view text, std::size_t i) {
  const auto lead = static_cast<unsigned char>(text[i]);
  std::size_t len = 0;
  std::uint32_t cp = 0;
  if (lead < 0x80) return 1;
  if ((lead & 0xe0) == 0xc0) { len = 2; cp = lead & 0x1f; }
  else if ((lead & 0xf0) == 0xe0) { len = 3; cp = lead & 0x0f; }
  else if ((lead & 0xf8) == 0xf0) { len = 4; cp = lead & 0x07; }
  else throw DataError("invalid UTF-8 lead byte at offset " + std::to_string(i));
  if (i + len > text.size()) throw DataError("truncated UTF-8 sequence at offset " + std::to_string(i));
  for (std::size_t k = 1; k < len; ++k) {
    const auto cont = static_cast<unsigned char>(text[i + k]);
    if ((cont & 0xc0) != 0x80) {
      throw DataError("invalid UTF-8 continuation byte at offset " + std::to_string(i + k));
    }
    cp = (cp << 6) | (cont & 0x3f);
  }
  const bool overlong = (len == 2 && cp < 0x80) || (len == 3 && cp < 0x800) || (len == 4 && cp < 0x10000);
  if (overlong || cp > 0x10ffff || (cp >= 0xd800 && cp <= 0xdfff)) {
    throw DataError("invalid UTF-8 code point at offset " + std::to_string(i));
  }
  return len;
}

inline bool is_space(char c) {
  return c == ' ' || c == '\t' || c == '\r' || c == '\f' || c == '\v';
}

}  // namespace detail

// Surface tokens of `text`. Word mode splits on whitespace; char mode yields
// one token per Unicode scalar value. Every newline-terminated line ends with
// <EOS>.
inline std::vector<std::string> preprocess(std::string_view text, TokenizerMode mode) {
  std::vector<std::string> out;
  std::size_t i = 0;
  std::string word;
  while (i < text.size()) {
    const char c = text[i];
    if (c == '\n') {
      if (!word.empty()) out.push_back(std::move(word)), word.clear();
      out.emplace_back(kEosToken);
      ++i;
      continue;
    }
    const std::size_t len = detail::utf8_sequence_length(text, i);
    if (mode == TokenizerMode::kChar) {
      out.emplace_back(text.substr(i, len));
    } else if (len == 1 && detail::is_space(c)) {
      if (!word.empty()) out.push_back(std::move(word)), word.clear();
    } else {
      word.append(text.substr(i, len));
    }
    i += len;
  }
  if (!word.empty()) out.push_back(std::move(word));
  return out;
}

// Inverse of preprocess up to whitespace normalisation in word mode.
inline std::string detokenize(const std::vector<std::string>& tokens, TokenizerMode mode) {
  std::string out;
  bool line_start = true;
  for (const auto& t : tokens) {
    if (t == kEosToken) {
      out.push_back('\n');
      line_start = true;
      continue;
    }
    if (mode == TokenizerMode::kWord && !line_start) out.push_back(' ');
    out += t;
    line_start = false;
  }
  return out;
}

// Token <-> id bijection with <UNK> = 0 and <EOS> = 1.
class Vocab {
 public:
  Vocab() : Vocab(std::vector<std::string>{}) {}

  // `tokens` excludes the two reserved entries.
  explicit Vocab(const std::vector<std::string>& tokens) {
    insert(std::string(kUnkToken));
    insert(std::string(kEosToken));
    for (const auto& t : tokens) {
      if (t == kUnkToken || t == kEosToken) continue;
      if (index_.count(t)) throw DataError("duplicate vocabulary entry '" + t + "'");
      insert(t);
    }
  }

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(std::size_t id) const {
    if (id >= tokens_.size()) throw DataError("token id " + std::to_string(id) + " out of range");
    return tokens_[id];
  }
  std::size_t id(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? kUnkId : it->second;
  }
  bool contains(const std::string& token) const { return index_.count(token) != 0; }
  const std::vector<std::string>& tokens() const { return tokens_; }

  std::vector<std::size_t> encode(const std::vector<std::string>& tokens) const {
    std::vector<std::size_t> ids;
    ids.reserve(tokens.size());
    for (const auto& t : tokens) ids.push_back(id(t));
    return ids;
  }

  std::vector<std::string> decode(const std::vector<std::size_t>& ids) const {
    std::vector<std::string> out;
    out.reserve(ids.size());
    for (std::size_t i : ids) out.push_back(token(i));
    return out;
  }

  // One token per line, line index = id.
  void save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write vocabulary " + path.string());
    for (const auto& t : tokens_) out << t << '\n';
  }

  static Vocab load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open vocabulary " + path.string());
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) lines.push_back(line);
    if (lines.size() < 2 || lines[0] != kUnkToken || lines[1] != kEosToken) {
      throw DataError(path.string() + ": vocabulary must start with <UNK> and <EOS>");
    }
    return Vocab(std::vector<std::string>(lines.begin() + 2, lines.end()));
  }

 private:
  void insert(std::string t) {
    index_.emplace(t, tokens_.size());
    tokens_.push_back(std::move(t));
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Most frequent tokens with count >= min_count, ties broken lexicographically,
// capped so the vocabulary (including <UNK> and <EOS>) has at most max_size
// entries. max_size == 0 means no cap.
inline Vocab build_vocab(const std::vector<std::string>& stream, std::size_t min_count,
                         std::size_t max_size) {
  if (stream.empty()) throw DataError("build_vocab: empty token stream");
  if (max_size != 0 && max_size < 2) {
    throw ContractError("build_vocab: max_size must leave room for <UNK> and <EOS>");
  }
  std::map<std::string, std::size_t> counts;
  for (const auto& t : stream) {
    if (t != kEosToken && t != kUnkToken) ++counts[t];
  }
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> kept;
  for (const auto& [token, count] : ranked) {
    if (count < min_count) continue;
    if (max_size != 0 && kept.size() + 2 >= max_size) break;
    kept.push_back(token);
  }
  return Vocab(kept);
}

struct TokenStream {
  std::vector<std::size_t> ids;
  Split split = Split::kTrain;
};

inline double oov_rate(const std::vector<std::string>& tokens, const Vocab& vocab) {
  if (tokens.empty()) return 0.0;
  std::size_t unknown = 0;
  for (const auto& t : tokens) unknown += (t != kUnkToken && !vocab.contains(t)) ? 1 : 0;
  return static_cast<double>(unknown) / static_cast<double>(tokens.size());
}

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// `<base>.<split>.txt`
inline std::filesystem::path split_path(const std::filesystem::path& base, Split split) {
  return base.string() + "." + to_string(split) + ".txt";
}

inline std::vector<std::string> load_split_tokens(const std::filesystem::path& base, Split split,
                                                  TokenizerMode mode) {
  const auto path = split_path(base, split);
  try {
    return preprocess(read_text_file(path), mode);
  } catch (const DataError& e) {
    const std::string what = e.what();
    if (what.find(path.string()) != std::string::npos) throw;
    throw DataError(path.string() + ": " + what);
  }
}

inline TokenStream load_split(const std::filesystem::path& base, Split split, TokenizerMode mode,
                              const Vocab& vocab) {
  return {vocab.encode(load_split_tokens(base, split, mode)), split};
}

}  // namespace dispatcher
