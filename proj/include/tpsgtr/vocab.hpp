#pragma once

#include <algorithm>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "tpsgtr/errors.hpp"

namespace tpsgtr {

inline constexpr const char* kBosToken = "<bos>";
inline constexpr const char* kEosToken = "<eos>";

// Token table. Specials occupy the lowest ids so an untrained model's
// tie-broken argmax never emits <eos> first.
struct Vocab {
  std::vector<std::string> words;
  std::map<std::string, int> index;

  int bos() const { return 0; }
  int eos() const { return 1; }

  int id(const std::string& word) const {
    auto it = index.find(word);
    if (it == index.end()) throw ArgumentError("token '" + word + "' not in vocabulary");
    return it->second;
  }

  const std::string& word(int id) const {
    if (id < 0 || id >= static_cast<int>(words.size())) {
      throw ArgumentError("token id " + std::to_string(id) + " out of range");
    }
    return words[id];
  }

  bool contains(const std::string& word) const { return index.count(word) != 0; }
  std::size_t size() const { return words.size(); }

  static Vocab from_words(std::vector<std::string> words) {
    Vocab v;
    v.words = std::move(words);
    for (std::size_t i = 0; i < v.words.size(); ++i) {
      if (!v.index.emplace(v.words[i], static_cast<int>(i)).second) {
        throw ArgumentError("duplicate vocabulary word '" + v.words[i] + "'");
      }
    }
    if (v.words.size() < 2 || v.words[0] != kBosToken || v.words[1] != kEosToken) {
      throw ArgumentError("vocabulary must start with " + std::string(kBosToken) + ", " + kEosToken);
    }
    return v;
  }

  // Specials first, then all distinct caption tokens in sorted order.
  template <typename Records>
  static Vocab build(const Records& records) {
    std::set<std::string> tokens;
    for (const auto& rec : records) {
      for (const auto& caption : rec.captions) {
        for (const auto& tok : caption) tokens.insert(tok);
      }
    }
    tokens.erase(kBosToken);
    tokens.erase(kEosToken);
    std::vector<std::string> words{kBosToken, kEosToken};
    words.insert(words.end(), tokens.begin(), tokens.end());
    return from_words(std::move(words));
  }
};

}  // namespace tpsgtr
