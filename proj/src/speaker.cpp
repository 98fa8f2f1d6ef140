#include "jemha/speaker.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "jemha/rng.hpp"

namespace jemha {

SpeakerParams SpeakerParams::make(int vocab_size, int word_dim, int d_v, int ctx_dim, int hidden, Rng& rng) {
  SpeakerParams p;
  p.vocab_size = vocab_size;
  p.word_dim = word_dim;
  p.ctx_dim = ctx_dim;
  p.hidden = hidden;
  const int concat_dim = 3 * d_v + 10;
  p.w_m = Tensor::randn({concat_dim, ctx_dim}, rng, 1.0 / std::sqrt(static_cast<double>(concat_dim)), true);
  p.embed = EmbeddingTable::init(vocab_size, word_dim, rng);
  p.lstm = RecurrentCellParams::lstm(word_dim + ctx_dim, hidden, rng);
  p.proj_w = Tensor::randn({hidden, vocab_size}, rng, 1.0 / std::sqrt(static_cast<double>(hidden)), true);
  p.proj_b = Tensor::zeros({vocab_size}, true);
  return p;
}

std::vector<Tensor> SpeakerParams::parameters() const {
  std::vector<Tensor> out = {w_m, embed.table};
  for (const auto& g : lstm.gates) {
    out.push_back(g.w_x);
    out.push_back(g.w_h);
    out.push_back(g.b);
  }
  out.push_back(proj_w);
  out.push_back(proj_b);
  return out;
}

ReinforcerParams ReinforcerParams::make(int vocab_size, int word_dim, int ctx_dim, int hidden, int mlp_hidden,
                                        Rng& rng) {
  ReinforcerParams p;
  p.hidden = hidden;
  p.ctx_dim = ctx_dim;
  p.embed = EmbeddingTable::init(vocab_size, word_dim, rng);
  p.lstm = RecurrentCellParams::lstm(word_dim, hidden, rng);
  const int joint = hidden + ctx_dim;
  p.w1 = Tensor::randn({joint, mlp_hidden}, rng, 1.0 / std::sqrt(static_cast<double>(joint)), true);
  p.b1 = Tensor::zeros({mlp_hidden}, true);
  p.w2 = Tensor::randn({mlp_hidden, 1}, rng, 1.0 / std::sqrt(static_cast<double>(mlp_hidden)), true);
  p.b2 = Tensor::zeros({1}, true);
  return p;
}

std::vector<Tensor> ReinforcerParams::parameters() const {
  std::vector<Tensor> out = {embed.table};
  for (const auto& g : lstm.gates) {
    out.push_back(g.w_x);
    out.push_back(g.w_h);
    out.push_back(g.b);
  }
  out.push_back(w1);
  out.push_back(b1);
  out.push_back(w2);
  out.push_back(b2);
  return out;
}

ListenerParams ListenerParams::make(int vocab_size, int word_dim, int ctx_dim, int hidden, int joint_dim, Rng& rng) {
  ListenerParams p;
  p.embed = EmbeddingTable::init(vocab_size, word_dim, rng);
  p.gru = RecurrentCellParams::gru(word_dim, hidden, rng);
  p.expr_w = Tensor::randn({hidden, joint_dim}, rng, 1.0 / std::sqrt(static_cast<double>(hidden)), true);
  p.expr_b = Tensor::zeros({joint_dim}, true);
  p.vis_w = Tensor::randn({ctx_dim, joint_dim}, rng, 1.0 / std::sqrt(static_cast<double>(ctx_dim)), true);
  p.vis_b = Tensor::zeros({joint_dim}, true);
  return p;
}

std::vector<Tensor> ListenerParams::parameters() const {
  std::vector<Tensor> out = {embed.table};
  for (const auto& g : gru.gates) {
    out.push_back(g.w_x);
    out.push_back(g.w_h);
    out.push_back(g.b);
  }
  out.push_back(expr_w);
  out.push_back(expr_b);
  out.push_back(vis_w);
  out.push_back(vis_b);
  return out;
}

Tensor speaker_context(const Scene& scene, int target_id, const SpeakerParams& p, int k, double iou_threshold,
                       bool zero_local_context) {
  return context_bundle(scene, target_id, p.w_m, k, iou_threshold, zero_local_context).v;
}

namespace {

Tensor embed_token(const EmbeddingTable& table, int id) {
  return reshape(embedding_lookup(table.table, {id}), {table.dim});
}

}  // namespace

std::pair<Tensor, LstmState> decode_step(const Tensor& v_i, const Tensor& w_t, const LstmState& state,
                                         const SpeakerParams& p) {
  Tensor x = concat({v_i, w_t}, 0);
  LstmState next = lstm_step(x, state, p.lstm);
  return {linear(next.h, p.proj_w, p.proj_b), next};
}

Tensor generation_nll(const TokenSequence& r, const Tensor& v_i, const SpeakerParams& p) {
  if (r.ids.empty()) throw std::invalid_argument("generation_nll: empty sequence");
  LstmState state = LstmState::zeros(p.hidden);
  Tensor nll = Tensor::scalar(0.0);
  int prev = kBos;
  for (int target : r.ids) {
    if (target == kPad) break;
    auto [logits, next] = decode_step(v_i, embed_token(p.embed, prev), state, p);
    nll = sub(nll, slice(log_softmax(logits), target, target + 1));
    state = next;
    prev = target;
  }
  return nll;
}

Tensor mmi_margin_loss(const Tensor& logp_ri_vi, const Tensor& logp_ri_vk, const Tensor& logp_rj_vi,
                       const MmiConfig& cfg) {
  Tensor h1 = relu(add_scalar(sub(logp_ri_vk, logp_ri_vi), cfg.m1));
  Tensor h2 = relu(add_scalar(sub(logp_rj_vi, logp_ri_vi), cfg.m2));
  return add(mul_scalar(h1, cfg.lambda1), mul_scalar(h2, cfg.lambda2));
}

Tensor reward_logit(const std::vector<int>& ids, const Tensor& v_i, const ReinforcerParams& p) {
  if (ids.empty()) throw std::invalid_argument("reward_logit: empty sequence");
  LstmState state = LstmState::zeros(p.hidden);
  for (int id : ids) state = lstm_step(embed_token(p.embed, id), state, p.lstm);
  Tensor joint = concat({state.h, v_i}, 0);
  return linear(relu(linear(joint, p.w1, p.b1)), p.w2, p.b2);
}

Tensor reward_score(const std::vector<int>& ids, const Tensor& v_i, const ReinforcerParams& p) {
  return sigmoid(reward_logit(ids, v_i, p));
}

std::vector<SampledExpression> sample_expressions(const Tensor& v_i, const SpeakerParams& p, Rng& rng, int n,
                                                  int max_len, double temperature) {
  if (n < 1 || max_len < 1) throw std::invalid_argument("sample_expressions: bad n or max_len");
  std::vector<SampledExpression> out;
  out.reserve(static_cast<std::size_t>(n));
  const double inv_t = 1.0 / temperature;
  for (int s = 0; s < n; ++s) {
    SampledExpression se;
    se.logprob = Tensor::scalar(0.0);
    LstmState state = LstmState::zeros(p.hidden);
    int prev = kBos;
    while (static_cast<int>(se.ids.size()) < max_len) {
      auto [logits, next] = decode_step(v_i, embed_token(p.embed, prev), state, p);
      Tensor lp = log_softmax(mul_scalar(logits, inv_t));
      const double u = rng.uniform();
      double cdf = 0.0;
      int pick = p.vocab_size - 1;
      for (int i = 0; i < p.vocab_size; ++i) {
        cdf += std::exp(lp.at(i));
        if (u < cdf) {
          pick = i;
          break;
        }
      }
      se.ids.push_back(pick);
      se.logprob = add(se.logprob, slice(lp, pick, pick + 1));
      state = next;
      prev = pick;
      if (pick == kEos) break;
    }
    out.push_back(std::move(se));
  }
  return out;
}

Tensor policy_gradient_loss(const std::vector<SampledExpression>& samples, const std::vector<double>& rewards,
                            double baseline) {
  if (samples.size() != rewards.size()) {
    throw std::invalid_argument("policy_gradient_loss: " + std::to_string(samples.size()) + " samples vs " +
                                std::to_string(rewards.size()) + " rewards");
  }
  Tensor loss = Tensor::scalar(0.0);
  if (samples.empty()) return loss;
  const double inv_n = 1.0 / static_cast<double>(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    loss = add(loss, mul_scalar(samples[i].logprob, -(rewards[i] - baseline) * inv_n));
  }
  return loss;
}

SpeakerLossParts speaker_loss(const std::vector<SpeakerExample>& batch, const SpeakerParams& p,
                              const ReinforcerParams& reinforcer, const SpeakerLossConfig& cfg, Rng& rng) {
  if (batch.empty()) throw std::invalid_argument("speaker_loss: empty batch");
  SpeakerLossParts parts;
  Tensor generation = Tensor::scalar(0.0);
  Tensor margin = Tensor::scalar(0.0);
  std::vector<Tensor> nll_ri_vi;
  nll_ri_vi.reserve(batch.size());
  for (const auto& ex : batch) {
    Tensor nll = generation_nll(ex.r_i, ex.v_i, p);
    nll_ri_vi.push_back(nll);
    generation = add(generation, nll);
  }
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& ex = batch[i];
    if (!ex.v_k.defined()) continue;
    Tensor logp_ri_vi = mul_scalar(nll_ri_vi[i], -1.0);
    Tensor logp_ri_vk = mul_scalar(generation_nll(ex.r_i, ex.v_k, p), -1.0);
    Tensor logp_rj_vi = mul_scalar(generation_nll(ex.r_j, ex.v_i, p), -1.0);
    margin = add(margin, mmi_margin_loss(logp_ri_vi, logp_ri_vk, logp_rj_vi, cfg.mmi));
  }

  Tensor policy = Tensor::scalar(0.0);
  if (cfg.lambda_r != 0.0) {
    std::vector<std::vector<SampledExpression>> all_samples;
    std::vector<std::vector<double>> all_rewards;
    double reward_sum = 0.0;
    std::size_t reward_count = 0;
    for (const auto& ex : batch) {
      auto samples = sample_expressions(ex.v_i, p, rng, cfg.n_samples, cfg.max_len);
      std::vector<double> rewards;
      {
        NoGradGuard ng;
        for (const auto& s : samples) rewards.push_back(reward_score(s.ids, ex.v_i, reinforcer).item());
      }
      for (double r : rewards) reward_sum += r;
      reward_count += rewards.size();
      all_samples.push_back(std::move(samples));
      all_rewards.push_back(std::move(rewards));
    }
    const double baseline = reward_sum / static_cast<double>(reward_count);
    for (std::size_t i = 0; i < batch.size(); ++i) {
      policy = add(policy, policy_gradient_loss(all_samples[i], all_rewards[i], baseline));
    }
    policy = mul_scalar(policy, cfg.lambda_r);
  }

  parts.generation = generation.item();
  parts.margin = margin.item();
  parts.policy = policy.item();
  parts.total = add(add(generation, margin), policy);
  return parts;
}

namespace {

struct LiveHyp {
  std::vector<int> ids;
  double logprob = 0.0;
  LstmState state;
  int prev = kBos;
};

bool better(double lp_a, const std::vector<int>& ids_a, double lp_b, const std::vector<int>& ids_b) {
  if (lp_a != lp_b) return lp_a > lp_b;
  return std::lexicographical_compare(ids_a.begin(), ids_a.end(), ids_b.begin(), ids_b.end());
}

}  // namespace

std::vector<BeamHypothesis> beam_search(const Tensor& v_i, const SpeakerParams& p, int beam, int max_len) {
  if (beam < 1 || max_len < 1) throw std::invalid_argument("beam_search: bad beam or max_len");
  NoGradGuard ng;
  std::vector<LiveHyp> live(1);
  live[0].state = LstmState::zeros(p.hidden);
  std::vector<BeamHypothesis> pool;

  for (int step = 0; step < max_len && !live.empty(); ++step) {
    struct Candidate {
      std::vector<int> ids;
      double logprob;
      LstmState state;
      int tok;
    };
    std::vector<Candidate> cands;
    cands.reserve(live.size() * static_cast<std::size_t>(p.vocab_size));
    for (auto& hyp : live) {
      auto [logits, next] = decode_step(v_i, embed_token(p.embed, hyp.prev), hyp.state, p);
      Tensor lp = log_softmax(logits);
      for (int tok = 0; tok < p.vocab_size; ++tok) {
        Candidate c;
        c.ids = hyp.ids;
        c.ids.push_back(tok);
        c.logprob = hyp.logprob + lp.at(tok);
        c.state = next;
        c.tok = tok;
        cands.push_back(std::move(c));
      }
    }
    std::sort(cands.begin(), cands.end(),
              [](const Candidate& a, const Candidate& b) { return better(a.logprob, a.ids, b.logprob, b.ids); });
    if (static_cast<int>(cands.size()) > beam) cands.resize(static_cast<std::size_t>(beam));

    live.clear();
    for (auto& c : cands) {
      if (c.tok == kEos || static_cast<int>(c.ids.size()) == max_len) {
        pool.push_back({std::move(c.ids), c.logprob, true});
      } else {
        LiveHyp h;
        h.ids = std::move(c.ids);
        h.logprob = c.logprob;
        h.state = std::move(c.state);
        h.prev = c.tok;
        live.push_back(std::move(h));
      }
    }
  }

  std::sort(pool.begin(), pool.end(),
            [](const BeamHypothesis& a, const BeamHypothesis& b) { return better(a.logprob, a.ids, b.logprob, b.ids); });
  if (static_cast<int>(pool.size()) > beam) pool.resize(static_cast<std::size_t>(beam));
  return pool;
}

namespace {

Tensor listener_expr_embed(const std::vector<int>& ids, const ListenerParams& p) {
  if (ids.empty()) throw std::invalid_argument("listener_score: empty sequence");
  const int hidden = p.gru.gates[0].w_h.rows();
  Tensor h = Tensor::zeros({hidden});
  for (int id : ids) h = gru_step(embed_token(p.embed, id), h, p.gru);
  return linear(h, p.expr_w, p.expr_b);
}

}  // namespace

Tensor listener_score(const std::vector<int>& ids, const Tensor& v_i, const ListenerParams& p) {
  return cosine_similarity(listener_expr_embed(ids, p), linear(v_i, p.vis_w, p.vis_b));
}

Tensor listener_rank_loss(const std::vector<std::vector<int>>& exprs, const std::vector<Tensor>& vs,
                          const ListenerParams& p) {
  if (exprs.size() != vs.size() || exprs.size() < 2) {
    throw std::invalid_argument("listener_rank_loss: need >= 2 matched pairs");
  }
  const std::size_t n = exprs.size();
  std::vector<Tensor> e(n), u(n);
  for (std::size_t i = 0; i < n; ++i) {
    e[i] = listener_expr_embed(exprs[i], p);
    u[i] = linear(vs[i], p.vis_w, p.vis_b);
  }
  auto score = [&](std::size_t i, std::size_t j) { return cosine_similarity(e[i], u[j]); };
  Tensor loss = Tensor::scalar(0.0);
  int terms = 0;
  for (std::size_t i = 0; i < n; ++i) {
    Tensor pos = score(i, i);
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      loss = add(loss, relu(add_scalar(sub(score(i, j), pos), p.margin)));
      loss = add(loss, relu(add_scalar(sub(score(j, i), pos), p.margin)));
      terms += 2;
    }
  }
  return mul_scalar(loss, 1.0 / static_cast<double>(terms));
}

BeamHypothesis rerank(const std::vector<BeamHypothesis>& candidates, const Tensor& v_i, const ListenerParams& listener,
                      double alpha) {
  if (candidates.empty()) throw std::invalid_argument("rerank: no candidates");
  NoGradGuard ng;
  double max_lp = candidates[0].logprob;
  for (const auto& c : candidates) max_lp = std::max(max_lp, c.logprob);
  double z = 0.0;
  for (const auto& c : candidates) z += std::exp(c.logprob - max_lp);

  std::size_t best = 0;
  double best_score = -1e300;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const double norm_lp = std::exp(candidates[i].logprob - max_lp) / z;
    const double sim = listener_score(candidates[i].ids, v_i, listener).item();
    const double s = alpha * norm_lp + (1.0 - alpha) * sim;
    if (s > best_score) {
      best_score = s;
      best = i;
    }
  }
  return candidates[best];
}

int comprehend(const TokenSequence& expr, const Scene& scene, ComprehendMode mode, const SpeakerParams& sp,
               const ReinforcerParams& rp, int k, double iou_threshold) {
  if (scene.objects.empty()) throw std::invalid_argument("comprehend: empty scene");
  NoGradGuard ng;
  int best_id = -1;
  double best_score = -1e300;
  for (const auto& obj : scene.objects) {
    Tensor v = speaker_context(scene, obj.id, sp, k, iou_threshold);
    double s = 0.0;
    if (mode == ComprehendMode::speaker) {
      s = -generation_nll(expr, v, sp).item();
    } else {
      s = reward_score(expr.ids, v, rp).item();
    }
    if (best_id == -1 || s > best_score || (s == best_score && obj.id < best_id)) {
      best_score = s;
      best_id = obj.id;
    }
  }
  return best_id;
}

}  // namespace jemha
