// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "mote/error.hpp"
#include "mote/registry.hpp"

namespace mote {

/// Word-level vocabulary with reserved PAD and UNK ids.
class Vocabulary {
 public:
  static constexpr std::uint32_t kPad = 0;
  static constexpr std::uint32_t kUnk = 1;

  Vocabulary() {
    words_ = {"<pad>", "<unk>"};
    ids_["<pad>"] = kPad;
    ids_["<unk>"] = kUnk;
  }

  std::uint32_t add(const std::string& word) {
    auto it = ids_.find(word);
    if (it != ids_.end()) return it->second;
    const auto id = static_cast<std::uint32_t>(words_.size());
    words_.push_back(word);
    ids_[word] = id;
    return id;
  }

  std::uint32_t id(const std::string& word) const {
    auto it = ids_.find(word);
    return it == ids_.end() ? kUnk : it->second;
  }

  bool contains(const std::string& word) const { return ids_.count(word) > 0; }
  const std::string& word(std::uint32_t id) const { return words_.at(id); }
  std::size_t size() const { return words_.size(); }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("vocabulary: cannot write '" + path + "'");
    for (std::size_t i = 0; i < words_.size(); ++i)
      out << i << ' ' << words_[i] << '\n';
    if (!out) throw IoError("vocabulary: write failed for '" + path + "'");
  }

  static Vocabulary load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("vocabulary: cannot read '" + path + "'");
    Vocabulary v;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty()) continue;
      std::istringstream ss(line);
      std::uint32_t id;
      std::string word;
      if (!(ss >> id >> word))
        throw ParseError("vocabulary: malformed line " + std::to_string(line_no));
      if (id < 2) continue;  // reserved entries
      if (id != v.size())
        throw ParseError("vocabulary: non-contiguous id at line " +
                         std::to_string(line_no));
      v.add(word);
    }
    return v;
  }

 private:
  std::vector<std::string> words_;
  std::map<std::string, std::uint32_t> ids_;
};

/// Lowercased whitespace tokenization with exact lookup; misses map to UNK.
inline std::vector<std::uint32_t> tokenize(const Vocabulary& vocab,
                                           std::string_view text) {
  std::vector<std::uint32_t> out;
  std::string word;
  auto flush = [&] {
    if (!word.empty()) {
      out.push_back(vocab.id(word));
      word.clear();
    }
  };
  for (char ch : text) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      flush();
    } else {
      word.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    }
  }
  flush();
  return out;
}

inline std::string detokenize(const Vocabulary& vocab,
                              const std::vector<std::uint32_t>& ids) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += vocab.word(ids[i]);
  }
  return out;
}

/// Instruction concatenation: prefix tokens followed by the sequence.
inline std::vector<std::uint32_t> prefix_instruction(
    const Vocabulary& vocab, const std::string& prefix_text,
    const std::vector<std::uint32_t>& sequence, std::size_t max_seq_len) {
  std::vector<std::uint32_t> out = tokenize(vocab, prefix_text);
  out.insert(out.end(), sequence.begin(), sequence.end());
  if (out.size() > max_seq_len)
    throw LengthError("sequence of " + std::to_string(out.size()) +
                      " tokens (including instruction) exceeds max length " +
                      std::to_string(max_seq_len));
  return out;
}

/// Seeds a vocabulary with every word of every registered instruction, so
/// prefixes never tokenize to UNK.
inline Vocabulary vocabulary_with_instructions(const TaskRegistry& registry) {
  Vocabulary v;
  for (const TaskEntry& e : registry) {
    std::istringstream ss(e.prefix_text);
    std::string word;
    while (ss >> word) {
      std::transform(word.begin(), word.end(), word.begin(), [](unsigned char c) {
        return static_cast<char>(std::tolower(c));
      });
      v.add(word);
    }
  }
  return v;
}

}  // namespace mote
