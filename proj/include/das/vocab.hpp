#pragma once

// Closed whitespace vocabulary with [PAD]/[UNK]/[MASK] specials.

#include <cstddef>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "das/autodiff.hpp"

namespace das {

class Vocabulary {
 public:
  static constexpr std::size_t pad_id = 0;
  static constexpr std::size_t unk_id = 1;
  static constexpr std::size_t mask_id = 2;
  static constexpr std::size_t n_special = 3;

  Vocabulary() : Vocabulary(std::vector<std::string>{}) {}

  // `words` excludes the specials, which always occupy ids 0..2.
  explicit Vocabulary(const std::vector<std::string>& words) {
    tokens_ = {"[PAD]", "[UNK]", "[MASK]"};
    for (const auto& w : words) {
      if (index_.count(w) || w == "[PAD]" || w == "[UNK]" || w == "[MASK]") {
        throw Error("Vocabulary: duplicate token '" + w + "'");
      }
      index_[w] = tokens_.size();
      tokens_.push_back(w);
    }
    for (std::size_t i = 0; i < n_special; ++i) index_[tokens_[i]] = i;
  }

  static Vocabulary from_tokens(const std::vector<std::string>& all_tokens) {
    if (all_tokens.size() < n_special || all_tokens[0] != "[PAD]" || all_tokens[1] != "[UNK]" ||
        all_tokens[2] != "[MASK]") {
      throw Error("Vocabulary: token list must start with [PAD] [UNK] [MASK]");
    }
    return Vocabulary(std::vector<std::string>(all_tokens.begin() + n_special, all_tokens.end()));
  }

  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  const std::string& token(std::size_t id) const { return tokens_.at(id); }

  std::size_t id(const std::string& word) const {
    auto it = index_.find(word);
    return it == index_.end() ? unk_id : it->second;
  }

  std::vector<std::size_t> encode(const std::string& text) const {
    std::istringstream in(text);
    std::vector<std::size_t> ids;
    for (std::string w; in >> w;) ids.push_back(id(w));
    return ids;
  }

  std::string decode(const std::vector<std::size_t>& ids) const {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (i) out += ' ';
      out += token(ids[i]);
    }
    return out;
  }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace das
