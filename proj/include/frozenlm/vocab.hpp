#pragma once

#include <algorithm>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "frozenlm/common.hpp"

namespace frozenlm {

// Whitespace symbol table. No subword merges: synthetic tasks need exact
// string control, and recall/EM checks assume token == word.
class Vocabulary {
 public:
  static constexpr int pad_id = 0;
  static constexpr int eos_id = 1;
  static constexpr int unk_id = 2;
  static constexpr int sep_id = 3;

  static const std::vector<std::string>& specials() {
    static const std::vector<std::string> s = {"<pad>", "<eos>", "<unk>", "<sep>"};
    return s;
  }

  Vocabulary() = default;

  // Builds from corpus lines: specials first, then tokens by descending
  // frequency (ties alphabetical), truncated to max_size.
  static Vocabulary build(const std::vector<std::string>& lines, size_t max_size) {
    std::unordered_map<std::string, int64_t> freq;
    for (const auto& line : lines)
      for (auto& tok : split_whitespace(line)) ++freq[tok];
    std::vector<std::pair<std::string, int64_t>> sorted(freq.begin(), freq.end());
    std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) {
      if (a.second != b.second) return a.second > b.second;
      return a.first < b.first;
    });
    Vocabulary v;
    for (const auto& s : specials()) v.push(s);
    for (const auto& [tok, n] : sorted) {
      if (v.tokens_.size() >= max_size) break;
      if (!v.index_.count(tok)) v.push(tok);
    }
    return v;
  }

  static Vocabulary from_tokens(const std::vector<std::string>& toks) {
    Vocabulary v;
    for (const auto& s : specials()) v.push(s);
    for (const auto& t : toks)
      if (!v.index_.count(t)) v.push(t);
    return v;
  }

  int size() const { return int(tokens_.size()); }

  int id(const std::string& tok) const {
    auto it = index_.find(tok);
    return it == index_.end() ? unk_id : it->second;
  }

  bool contains(const std::string& tok) const { return index_.count(tok) != 0; }

  const std::string& token(int id) const { return tokens_.at(size_t(id)); }

  std::vector<int> encode(std::string_view text) const {
    std::vector<int> ids;
    for (auto& tok : split_whitespace(text)) ids.push_back(id(tok));
    return ids;
  }

  std::string decode(std::span<const int> ids) const {
    std::vector<std::string> toks;
    for (int i : ids) toks.push_back(token(i));
    return join(toks);
  }

  // vocabulary file: one token per line, specials first
  void save(const std::string& path) const {
    std::string out;
    for (const auto& t : tokens_) {
      out += t;
      out += '\n';
    }
    write_text(path, out);
  }

  static Vocabulary load(const std::string& path) {
    Vocabulary v;
    for (const auto& line : read_lines(path))
      if (!line.empty()) v.push(line);
    for (size_t i = 0; i < specials().size(); ++i)
      if (v.tokens_.size() <= i || v.tokens_[i] != specials()[i])
        throw std::runtime_error("vocabulary file must list specials first");
    return v;
  }

 private:
  void push(const std::string& tok) {
    index_[tok] = int(tokens_.size());
    tokens_.push_back(tok);
  }
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

}  // namespace frozenlm
