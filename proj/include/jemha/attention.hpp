#pragma once

#include <cstdint>
#include <vector>

#include "jemha/ops.hpp"
#include "jemha/tensor.hpp"
#include "jemha/text.hpp"

namespace jemha {

// softmax(Q·Kᵀ/√d_k)·V. key_mask marks attendable key rows (empty = all);
// a query with every key masked is an error.
Tensor scaled_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        const std::vector<std::uint8_t>& key_mask = {});

struct MhaParams {
  std::vector<Tensor> w_q, w_k, w_v;  // per head, d × (d/h)
  Tensor w_o;                         // d × d
  int heads = 0;
  int d = 0;

  static MhaParams make(int d, int heads, Rng& rng);
  std::vector<Tensor> parameters() const;
};

Tensor mha(const Tensor& q_in, const Tensor& k_in, const Tensor& v_in, const MhaParams& p,
           const std::vector<std::uint8_t>& key_mask = {});

struct LayerNormParams {
  Tensor gain, bias;

  static LayerNormParams make(int d);
  std::vector<Tensor> parameters() const;
};

struct JemhaBlockParams {
  MhaParams q_mha, o_mha, c_mha;
  FfnParams o_ffn, c_ffn;
  LayerNormParams o_ln1, o_ln2, c_ln1, c_ln2;
  // Variant with residual + LayerNorm on the question stream; the literal
  // recursion leaves Q bare.
  bool q_residual = false;
  LayerNormParams q_ln;

  static JemhaBlockParams make(int d, int heads, int d_ff, bool q_residual, Rng& rng);
  std::vector<Tensor> parameters() const;
};

// One recursion state. x_o / x_c may be undefined when the corresponding
// input stream is ablated; the block then skips that branch.
struct JemhaState {
  Tensor q;    // N × d
  Tensor x_o;  // M × d
  Tensor x_c;  // M × d
  int step = 0;
};

// Q' = MHA(Q,Q,Q); H = LN(MHA(X,Q,Q)+X); X' = LN(FFN(H)+H) for both the
// o and c branches, each attending to the incoming Q. q_mask masks PAD
// question tokens out of every attention.
JemhaState jemha_block(const JemhaState& s, const JemhaBlockParams& p, const std::vector<std::uint8_t>& q_mask = {});

struct JemhaStackParams {
  std::vector<JemhaBlockParams> blocks;  // unshared per recursion

  static JemhaStackParams make(int d, int heads, int d_ff, int t, bool q_residual, Rng& rng);
  std::vector<Tensor> parameters() const;
};

JemhaState jemha_stack(const JemhaState& s0, const JemhaStackParams& p, const std::vector<std::uint8_t>& q_mask = {});

struct FuseResult {
  Tensor fused;    // d
  Tensor weights;  // m, sums to 1
};

// (softmax(FFN_1(F)))ᵀ·F with optional row mask.
FuseResult attend_fuse(const Tensor& f, const FfnParams& scorer, const std::vector<std::uint8_t>& row_mask = {});

struct AnswerHead {
  FfnParams q_scorer, c_scorer, o_scorer;  // FFN_1 fusion scorers
  FfnParams project;                       // d -> answer vocab

  static AnswerHead make(int d, int d_ff, int answer_vocab, Rng& rng);
  std::vector<Tensor> parameters() const;
};

// FFN_|dict|(q ⊙ (x_c + x_o))
Tensor answer_logits(const Tensor& q, const Tensor& x_c, const Tensor& x_o, const AnswerHead& head);

struct VqaConfig {
  int d = 128;
  int heads = 8;
  int t = 6;
  int d_ff = 512;
  int word_dim = 300;
  int expr_hidden = 512;
  int question_max_len = 14;
  int expression_max_len = 20;
  int max_objects = 36;
  bool question_gru = false;
  bool q_residual = false;
  bool use_visual = true;   // X_o stream
  bool use_textual = true;  // X_c stream
};

struct VqaModelParams {
  VqaConfig config;
  QuestionEncoderParams question;
  ExpressionEncoderParams expression;
  Tensor obj_w, obj_b;  // object feature projection d_v -> d
  JemhaStackParams stack;
  AnswerHead head;
  int d_v = 0;
  int answer_vocab = 0;

  static VqaModelParams make(const VqaConfig& config, int question_vocab, int expression_vocab, int d_v,
                             int answer_vocab, Rng& rng);
  std::vector<Tensor> parameters() const;
};

struct VqaOutput {
  Tensor logits;                       // answer_vocab
  Tensor q_fused, o_fused, c_fused;    // d each; ablated streams come back zero
  std::vector<double> object_weights;  // X_o fusion weights (explanation export)
};

VqaOutput vqa_forward(const std::vector<std::vector<double>>& object_features, const TokenSequence& question,
                      const std::vector<TokenSequence>& expressions, const VqaModelParams& p);

}  // namespace jemha
