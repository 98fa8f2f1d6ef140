#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "jemha/ops.hpp"
#include "jemha/tensor.hpp"

namespace jemha {

inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;
inline constexpr int kUnk = 3;

// Token ids with the four reserved entries fixed at 0..3. Non-reserved
// tokens map bijectively; construction from a corpus is deterministic
// (lexicographic insertion of every token meeting min_count).
class Vocab {
 public:
  Vocab();

  static Vocab from_corpus(const std::vector<std::string>& sentences, int min_count = 1);

  int add(const std::string& token);  // returns existing id when known
  int id_of(const std::string& token) const;  // UNK when missing
  bool contains(const std::string& token) const;
  const std::string& token_of(int id) const;
  int size() const { return static_cast<int>(to_token_.size()); }

  // "token\tid" lines, sorted by token.
  std::string serialize() const;
  static Vocab deserialize(const std::string& text);

 private:
  std::unordered_map<std::string, int> to_id_;
  std::vector<std::string> to_token_;
};

// Lowercase, punctuation to spaces, whitespace split.
std::vector<std::string> clean_tokens(const std::string& text);

struct TokenSequence {
  std::vector<int> ids;  // unpadded, never empty
  int max_len = 0;

  // ids then PAD up to max_len.
  std::vector<int> padded() const;
  // index past the last non-PAD token
  int length() const;
};

// Cleaned tokens truncated to max_len and mapped through the vocab;
// text that cleans to nothing becomes [UNK].
TokenSequence tokenize(const std::string& text, const Vocab& vocab, int max_len);

std::string render_tokens(const std::vector<int>& ids, const Vocab& vocab);

struct EmbeddingTable {
  Tensor table;  // |V| × dim; row 0 (PAD) stays zero
  int dim = 0;

  static EmbeddingTable init(int vocab_size, int dim, Rng& rng, double sd = 0.02);
};

// Overwrites rows of in-vocab tokens from "token v1 .. v<dim>" lines;
// returns the number of rows replaced. Malformed lines raise an error
// naming the line number. The PAD row is never touched.
int load_word_vectors(const std::string& path, const Vocab& vocab, EmbeddingTable& table);

struct QuestionEncoderParams {
  EmbeddingTable embed;
  Tensor w, b;  // word_dim -> d affine (projection path)
  // Optional recurrent encoder over the word vectors instead of the
  // per-token projection.
  bool use_gru = false;
  RecurrentCellParams gru;

  static QuestionEncoderParams make(int vocab_size, int word_dim, int d, bool use_gru, Rng& rng);
  std::vector<Tensor> parameters() const;
};

struct EncodedQuestion {
  Tensor q;                        // max_len × d
  std::vector<std::uint8_t> mask;  // 1 for real tokens
  int length = 0;
};

EncodedQuestion embed_question(const TokenSequence& seq, const QuestionEncoderParams& p);

struct ExpressionEncoderParams {
  EmbeddingTable embed;
  RecurrentCellParams gru;  // word_dim -> hidden
  Tensor w, b;              // hidden -> d

  static ExpressionEncoderParams make(int vocab_size, int word_dim, int hidden, int d, Rng& rng);
  std::vector<Tensor> parameters() const;
};

// Final GRU hidden state at the last non-PAD step, affinely mapped to d.
Tensor embed_expression(const TokenSequence& seq, const ExpressionEncoderParams& p);

// Stacks M expressions to X_c (M × d), running the GRU stepwise over the
// whole batch.
Tensor embed_expressions(const std::vector<TokenSequence>& seqs, const ExpressionEncoderParams& p);

}  // namespace jemha
