#pragma once

// Word-level tokenizer and lookup-table text encoder, plus the head/tail
// decomposition of a C x M embedding used for personalization.

#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "hiper/errors.hpp"
#include "hiper/random.hpp"
#include "hiper/tensor.hpp"

namespace hiper {

inline constexpr std::size_t kPadId = 0;
inline constexpr const char* kPadWord = "<pad>";

class Vocab {
 public:
  Vocab() : words_{kPadWord} {}

  // Ids are assigned densely in the given order, starting at 1.
  explicit Vocab(const std::vector<std::string>& words) : Vocab() {
    for (const auto& w : words) add(w);
  }

  std::size_t add(const std::string& word) {
    if (word.empty() || word == kPadWord) throw VocabularyError("vocab: invalid word '" + word + "'");
    if (auto it = ids_.find(word); it != ids_.end()) return it->second;
    ids_.emplace(word, words_.size());
    words_.push_back(word);
    return words_.size() - 1;
  }

  std::size_t size() const { return words_.size(); }
  bool contains(const std::string& word) const { return ids_.count(word) != 0; }

  std::size_t id(const std::string& word) const {
    auto it = ids_.find(word);
    if (it == ids_.end()) throw VocabularyError("vocab: unknown word '" + word + "'");
    return it->second;
  }

  const std::string& word(std::size_t id) const { return words_.at(id); }
  const std::vector<std::string>& words() const { return words_; }

  // Newline-delimited "word<TAB>id"; the pad token is implicit.
  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("vocab: cannot write " + path);
    for (std::size_t i = 1; i < words_.size(); ++i) out << words_[i] << '\t' << i << '\n';
  }

  static Vocab load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("vocab: cannot read " + path);
    std::map<std::size_t, std::string> by_id;
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      auto tab = line.find('\t');
      if (tab == std::string::npos) throw FormatError("vocab: malformed line '" + line + "'");
      by_id[std::stoul(line.substr(tab + 1))] = line.substr(0, tab);
    }
    Vocab v;
    std::size_t expect = 1;
    for (const auto& [id, word] : by_id) {
      if (id != expect++) throw FormatError("vocab: ids are not dense");
      v.add(word);
    }
    return v;
  }

  bool operator==(const Vocab& other) const { return words_ == other.words_; }

 private:
  std::vector<std::string> words_;
  std::map<std::string, std::size_t> ids_;
};

inline std::vector<std::string> split_words(const std::string& text) {
  std::istringstream is(text);
  std::vector<std::string> out;
  for (std::string w; is >> w;) out.push_back(w);
  return out;
}

struct TokenSequence {
  std::vector<std::size_t> ids;

  std::size_t length() const { return ids.size(); }
  std::size_t content_length() const {
    std::size_t n = 0;
    while (n < ids.size() && ids[n] != kPadId) ++n;
    return n;
  }
  std::size_t pad_count() const { return ids.size() - content_length(); }
};

inline TokenSequence tokenize(const std::string& prompt, const Vocab& vocab, std::size_t max_len) {
  auto words = split_words(prompt);
  if (words.size() > max_len)
    throw LengthError("tokenize: prompt has " + std::to_string(words.size()) + " words, limit is " +
                      std::to_string(max_len));
  TokenSequence seq;
  seq.ids.assign(max_len, kPadId);
  for (std::size_t i = 0; i < words.size(); ++i) seq.ids[i] = vocab.id(words[i]);
  return seq;
}

enum class Provenance { encoded, optimized, composite };

struct TextEmbedding {
  Tensor mat;  // [C, M]
  Provenance provenance = Provenance::encoded;

  std::size_t dim() const { return mat.dim(0); }
  std::size_t tokens() const { return mat.dim(1); }
};

// Differentiable lookup: column i = table[:, ids[i]].
inline Tensor embed_tokens(const TokenSequence& seq, const Tensor& table) { return gather_columns(table, seq.ids); }

inline TextEmbedding encode(const std::string& prompt, const Vocab& vocab, const Tensor& table, std::size_t max_len) {
  if (table.rank() != 2 || table.dim(1) != vocab.size())
    throw DimensionError("encode: table " + shape_str(table.shape()) + " does not match vocabulary of " +
                         std::to_string(vocab.size()));
  auto seq = tokenize(prompt, vocab, max_len);
  NoGradGuard no_grad;
  return {embed_tokens(seq, table), Provenance::encoded};
}

struct EmbeddingSplit {
  Tensor head;  // [C, M - N]
  Tensor tail;  // [C, N]
  std::size_t n = 0;
};

inline EmbeddingSplit split_embedding(const TextEmbedding& e, std::size_t n) {
  const std::size_t m = e.tokens();
  if (n > m) throw ParameterError("split_embedding: N=" + std::to_string(n) + " exceeds M=" + std::to_string(m));
  NoGradGuard no_grad;
  return {slice(e.mat, 1, 0, m - n), slice(e.mat, 1, m - n, m), n};
}

// [head_tgt, alpha * tail]
inline TextEmbedding compose(const Tensor& head_tgt, const Tensor& hiper_tail, double alpha) {
  if (head_tgt.rank() != 2 || hiper_tail.rank() != 2 || head_tgt.dim(0) != hiper_tail.dim(0))
    throw DimensionError("compose: shape mismatch " + shape_str(head_tgt.shape()) + " vs " +
                         shape_str(hiper_tail.shape()));
  if (alpha < 0.0) throw ParameterError("compose: calibration factor must be >= 0");
  NoGradGuard no_grad;
  return {concat({head_tgt, scale(hiper_tail, alpha)}, 1), Provenance::composite};
}

enum class TailInit { pad_copy, gaussian };

inline Tensor init_hiper(const TextEmbedding& e_src, std::size_t n, TailInit mode, double stddev, Rng& rng) {
  if (n > e_src.tokens())
    throw ParameterError("init_hiper: N=" + std::to_string(n) + " exceeds M=" + std::to_string(e_src.tokens()));
  Tensor tail;
  if (mode == TailInit::pad_copy) {
    tail = split_embedding(e_src, n).tail.clone();
  } else {
    tail = Tensor::randn({e_src.dim(), n}, rng, stddev);
  }
  tail.set_requires_grad(true);
  return tail;
}

}  // namespace hiper
