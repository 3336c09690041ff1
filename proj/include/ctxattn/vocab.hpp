#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "ctxattn/numerics.hpp"

namespace ctxattn {

using TokenId = std::uint32_t;

// Closed whitespace vocabulary. The first four ids are reserved.
class Vocabulary {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kBos = 1;
  static constexpr TokenId kEos = 2;
  static constexpr TokenId kSep = 3;
  static constexpr TokenId kFirstWord = 4;
  static constexpr std::string_view kSepToken = "[SEP]";

  Vocabulary() {
    for (std::string_view s : {"<pad>", "<bos>", "<eos>", "[SEP]"}) add(std::string(s));
  }

  explicit Vocabulary(const std::vector<std::string>& tokens) {
    if (tokens.size() < 4 || tokens[0] != "<pad>" || tokens[1] != "<bos>" ||
        tokens[2] != "<eos>" || tokens[3] != kSepToken)
      throw Error("vocabulary must start with <pad> <bos> <eos> [SEP]");
    for (const auto& t : tokens) add(t);
  }

  TokenId add(const std::string& token) {
    if (token.empty() || token.find_first_of(" \t\n") != std::string::npos)
      throw Error("vocabulary token must be a non-empty word: '" + token + "'");
    auto [it, inserted] = index_.try_emplace(token, static_cast<TokenId>(tokens_.size()));
    if (inserted) tokens_.push_back(token);
    return it->second;
  }

  bool contains(std::string_view token) const { return index_.count(std::string(token)) > 0; }

  TokenId id(std::string_view token) const {
    auto it = index_.find(std::string(token));
    if (it == index_.end()) throw Error("token not in vocabulary: '" + std::string(token) + "'");
    return it->second;
  }

  const std::string& token(TokenId id) const {
    if (id >= tokens_.size()) throw Error("token id out of range: " + std::to_string(id));
    return tokens_[id];
  }

  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  std::vector<TokenId> encode(std::span<const std::string> words) const {
    std::vector<TokenId> out;
    out.reserve(words.size());
    for (const auto& w : words) out.push_back(id(w));
    return out;
  }

  std::vector<std::string> decode(std::span<const TokenId> ids) const {
    std::vector<std::string> out;
    out.reserve(ids.size());
    for (TokenId t : ids) out.push_back(token(t));
    return out;
  }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.tokens_ == b.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

// Whitespace tokenization; detokenize(tokenize(s)) == s for single-spaced s.
inline std::vector<std::string> tokenize(std::string_view s) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && s[i] == ' ') ++i;
    std::size_t j = i;
    while (j < s.size() && s[j] != ' ') ++j;
    if (j > i) out.emplace_back(s.substr(i, j - i));
    i = j;
  }
  return out;
}

inline std::string detokenize(std::span<const std::string> words) {
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) out += ' ';
    out += words[i];
  }
  return out;
}

}  // namespace ctxattn
