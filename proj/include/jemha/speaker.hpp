#pragma once

#include <utility>
#include <vector>

#include "jemha/ops.hpp"
#include "jemha/scene.hpp"
#include "jemha/tensor.hpp"
#include "jemha/text.hpp"

namespace jemha {

// Referring-expression generator: an LSTM over [v_i; w_t] with the
// scene-context projection W_m owned here as part of θ.
struct SpeakerParams {
  Tensor w_m;  // (3·d_v+10) × ctx_dim
  EmbeddingTable embed;
  RecurrentCellParams lstm;  // input word_dim + ctx_dim
  Tensor proj_w, proj_b;     // hidden → vocab
  int vocab_size = 0;
  int word_dim = 0;
  int ctx_dim = 0;
  int hidden = 0;

  static SpeakerParams make(int vocab_size, int word_dim, int d_v, int ctx_dim, int hidden, Rng& rng);
  std::vector<Tensor> parameters() const;
};

struct MmiConfig {
  double lambda1 = 1.0, lambda2 = 1.0;
  double m1 = 0.1, m2 = 0.1;
};

// Consistency evaluator F(w_1:T, v_i): sentence LSTM + two-layer MLP
// over [sentence; v_i], squashed to (0,1).
struct ReinforcerParams {
  EmbeddingTable embed;
  RecurrentCellParams lstm;  // word_dim → hidden
  Tensor w1, b1, w2, b2;     // (hidden + ctx_dim) → mlp_hidden → 1
  int hidden = 0;
  int ctx_dim = 0;

  static ReinforcerParams make(int vocab_size, int word_dim, int ctx_dim, int hidden, int mlp_hidden, Rng& rng);
  std::vector<Tensor> parameters() const;
};

// Joint-embedding listener: expression GRU and visual projection meet in
// one space, scored by cosine.
struct ListenerParams {
  EmbeddingTable embed;
  RecurrentCellParams gru;  // word_dim → hidden
  Tensor expr_w, expr_b;    // hidden → joint_dim
  Tensor vis_w, vis_b;      // ctx_dim → joint_dim
  double margin = 0.1;

  static ListenerParams make(int vocab_size, int word_dim, int ctx_dim, int hidden, int joint_dim, Rng& rng);
  std::vector<Tensor> parameters() const;
};

struct BeamHypothesis {
  std::vector<int> ids;
  double logprob = 0.0;
  bool finished = false;
};

struct SampledExpression {
  std::vector<int> ids;     // ends with EOS unless capped at max_len
  Tensor logprob;           // total log-prob, differentiable through θ
};

// v_i for one target through the speaker's W_m.
Tensor speaker_context(const Scene& scene, int target_id, const SpeakerParams& p, int k = 20,
                       double iou_threshold = 0.7, bool zero_local_context = false);

// One decoder step on x_t = [v_i; w_t]; returns vocab logits and the
// next state. State starts at zeros with w_0 = BOS.
std::pair<Tensor, LstmState> decode_step(const Tensor& v_i, const Tensor& w_t, const LstmState& state,
                                         const SpeakerParams& p);

// −Σ_t log P(r_t | r_<t, v_i; θ), teacher forced over the unpadded ids.
Tensor generation_nll(const TokenSequence& r, const Tensor& v_i, const SpeakerParams& p);

// λ1·max(0, M1 + logP(r_i|v_k) − logP(r_i|v_i)) + λ2·max(0, M2 + logP(r_j|v_i) − logP(r_i|v_i))
Tensor mmi_margin_loss(const Tensor& logp_ri_vi, const Tensor& logp_ri_vk, const Tensor& logp_rj_vi,
                       const MmiConfig& cfg);

// Pre-sigmoid consistency score (for binary training targets).
Tensor reward_logit(const std::vector<int>& ids, const Tensor& v_i, const ReinforcerParams& p);
// F(w_1:T, v_i) ∈ (0,1).
Tensor reward_score(const std::vector<int>& ids, const Tensor& v_i, const ReinforcerParams& p);

std::vector<SampledExpression> sample_expressions(const Tensor& v_i, const SpeakerParams& p, Rng& rng, int n = 3,
                                                  int max_len = 20, double temperature = 1.0);

// −(1/n)·Σ (F_s − baseline)·log P(w_1:T | v_i; θ), rewards detached.
Tensor policy_gradient_loss(const std::vector<SampledExpression>& samples, const std::vector<double>& rewards,
                            double baseline);

// One training example; v_k undefined means no positive pair was found
// and the margin terms are skipped.
struct SpeakerExample {
  Tensor v_i;
  TokenSequence r_i;
  Tensor v_k;
  TokenSequence r_j;
};

struct SpeakerLossConfig {
  MmiConfig mmi;
  double lambda_r = 1.0;
  int n_samples = 3;
  int max_len = 20;
};

struct SpeakerLossParts {
  Tensor total;
  double generation = 0.0;
  double margin = 0.0;
  double policy = 0.0;
};

// L_s¹ + L_s² + λ_r · policy surrogate over the batch. Rewards come from
// the reinforcer with gradients blocked; baseline is the batch mean.
SpeakerLossParts speaker_loss(const std::vector<SpeakerExample>& batch, const SpeakerParams& p,
                              const ReinforcerParams& reinforcer, const SpeakerLossConfig& cfg, Rng& rng);

// Length-capped beam search; EOS or the cap retires a hypothesis. Ranked
// by total log-prob, ties lexicographic. Returns at most `beam` results.
std::vector<BeamHypothesis> beam_search(const Tensor& v_i, const SpeakerParams& p, int beam = 10, int max_len = 20);

// Cosine similarity of the two joint-space embeddings.
Tensor listener_score(const std::vector<int>& ids, const Tensor& v_i, const ListenerParams& p);

// Bidirectional margin ranking against in-batch negatives, mean over pairs.
Tensor listener_rank_loss(const std::vector<std::vector<int>>& exprs, const std::vector<Tensor>& vs,
                          const ListenerParams& p);

// argmax over candidates of α·softmax-normalized log-prob + (1−α)·listener score.
BeamHypothesis rerank(const std::vector<BeamHypothesis>& candidates, const Tensor& v_i, const ListenerParams& listener,
                      double alpha = 0.5);

enum class ComprehendMode { speaker, reinforcer };

// Picks the object whose context best explains the expression: teacher-forced
// log P(r|v_i) in speaker mode, F(r, v_i) in reinforcer mode. Ties → lower id.
int comprehend(const TokenSequence& expr, const Scene& scene, ComprehendMode mode, const SpeakerParams& sp,
               const ReinforcerParams& rp, int k = 20, double iou_threshold = 0.7);

}  // namespace jemha
