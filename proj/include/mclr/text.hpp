#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mclr/error.hpp"
#include "mclr/tensor.hpp"

namespace mclr {

inline constexpr int kMaxTokens = 16;  // including BOS
inline constexpr int kMaxWords = kMaxTokens - 1;

class Vocabulary {
 public:
  static constexpr int kBos = 0;
  static constexpr int kUnk = 1;

  Vocabulary() = default;
  explicit Vocabulary(std::vector<std::string> words) : words_(std::move(words)) {
    if (words_.size() < 2 || words_[kBos] != "<bos>" || words_[kUnk] != "<unk>") {
      throw DataError("vocabulary must start with <bos>, <unk>");
    }
    for (std::size_t i = 0; i < words_.size(); ++i) {
      if (!index_.emplace(words_[i], static_cast<int>(i)).second) throw DataError("duplicate vocabulary word '" + words_[i] + "'");
    }
  }

  // The closed prompt vocabulary every corpus template draws from.
  static const Vocabulary& standard() {
    static const Vocabulary v({"<bos>", "<unk>", "a",     "man",    "person",  "woman",   "the",     "walks",
                               "runs",  "jumps", "waves", "squats", "sits",    "stands",  "dances",  "walking",
                               "running", "jumping", "forward", "once", "twice", "two",   "three",   "four",
                               "five",  "six",   "times", "then",   "and",     "down",    "still",   "in",
                               "place", "his",   "hand",  "slowly", "quickly", "happily", "up",      "while"});
    return v;
  }

  int size() const { return static_cast<int>(words_.size()); }
  const std::vector<std::string>& words() const { return words_; }
  const std::string& word(int id) const { return words_.at(static_cast<std::size_t>(id)); }

  int id(const std::string& w) const {
    auto it = index_.find(w);
    return it == index_.end() ? kUnk : it->second;
  }

  bool contains(const std::string& w) const { return index_.count(w) != 0; }

  // FNV-1a over the NUL-separated word list; stored in checkpoints.
  std::uint64_t hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& w : words_) {
      for (unsigned char c : w) {
        h ^= c;
        h *= 0x100000001b3ULL;
      }
      h ^= 0;
      h *= 0x100000001b3ULL;
    }
    return h;
  }

 private:
  std::vector<std::string> words_;
  std::map<std::string, int> index_;
};

inline bool is_action_word(const std::string& w) {
  static const std::set<std::string> verbs = {"walks", "runs",   "jumps",   "waves",   "squats",  "sits",
                                              "stands", "dances", "walking", "running", "jumping"};
  return verbs.count(w) != 0;
}

struct PromptTokens {
  std::vector<std::string> words;  // surface words, BOS excluded
  std::vector<int> ids;            // ids[0] == BOS
  std::vector<int> verb_indices;   // positions in `words`

  int length() const { return static_cast<int>(ids.size()); }

  // Attention column of word `word_index` (BOS occupies column 0).
  static int column_of(int word_index) { return 1 + word_index; }
};

// Lower-cases, strips punctuation, splits on whitespace and prepends BOS.
inline PromptTokens tokenize(const std::string& prompt, const Vocabulary& vocab = Vocabulary::standard()) {
  std::string cleaned;
  cleaned.reserve(prompt.size());
  for (unsigned char c : prompt) {
    if (std::isalnum(c) || c == '\'' || c == '<' || c == '>' || c == '_') {
      cleaned.push_back(static_cast<char>(std::tolower(c)));
    } else {
      cleaned.push_back(' ');
    }
  }
  PromptTokens t;
  std::istringstream in(cleaned);
  for (std::string w; in >> w;) t.words.push_back(w);
  if (t.words.empty()) throw RangeError("tokenize: empty prompt");
  if (static_cast<int>(t.words.size()) > kMaxWords) {
    throw RangeError("tokenize: prompt has " + std::to_string(t.words.size()) + " words; at most " +
                     std::to_string(kMaxWords) + " allowed");
  }
  t.ids.push_back(Vocabulary::kBos);
  for (std::size_t i = 0; i < t.words.size(); ++i) {
    t.ids.push_back(vocab.id(t.words[i]));
    if (is_action_word(t.words[i])) t.verb_indices.push_back(static_cast<int>(i));
  }
  return t;
}

// BOS-only sequence; the unconditional input for classifier-free guidance.
inline PromptTokens null_tokens() {
  PromptTokens t;
  t.ids.push_back(Vocabulary::kBos);
  return t;
}

// Row i = table[ids[i]] + positional[i].
template <class S>
Mat<S> embed(const PromptTokens& tokens, const Mat<S>& table, const Mat<S>& positional) {
  if (tokens.length() > positional.rows()) throw RangeError("embed: too many tokens");
  Mat<S> out(tokens.length(), table.cols());
  for (int i = 0; i < tokens.length(); ++i) {
    const int id = tokens.ids[static_cast<std::size_t>(i)];
    if (id < 0 || id >= table.rows()) throw RangeError("embed: token id out of range");
    out.row(i) = table.row(id) + positional.row(i);
  }
  return out;
}

}  // namespace mclr
