#include "jemha/attention.hpp"

#include <cmath>
#include <stdexcept>

#include "jemha/rng.hpp"

namespace jemha {

Tensor scaled_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        const std::vector<std::uint8_t>& key_mask) {
  if (q.ndim() != 2 || k.ndim() != 2 || v.ndim() != 2 || q.cols() != k.cols() || k.rows() != v.rows()) {
    throw std::invalid_argument("scaled_attention: shapes " + shape_str(q.shape()) + ", " + shape_str(k.shape()) +
                                ", " + shape_str(v.shape()));
  }
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  Tensor scores = mul_scalar(matmul(q, transpose(k)), inv_sqrt_dk);
  Tensor weights = key_mask.empty() ? softmax(scores) : masked_softmax(scores, key_mask);
  return matmul(weights, v);
}

MhaParams MhaParams::make(int d, int heads, Rng& rng) {
  if (heads < 1 || d % heads != 0) {
    throw std::invalid_argument("mha: heads " + std::to_string(heads) + " must divide d " + std::to_string(d));
  }
  MhaParams p;
  p.heads = heads;
  p.d = d;
  const int dk = d / heads;
  const double sd = 1.0 / std::sqrt(static_cast<double>(d));
  for (int h = 0; h < heads; ++h) {
    p.w_q.push_back(Tensor::randn({d, dk}, rng, sd, true));
    p.w_k.push_back(Tensor::randn({d, dk}, rng, sd, true));
    p.w_v.push_back(Tensor::randn({d, dk}, rng, sd, true));
  }
  p.w_o = Tensor::randn({d, d}, rng, sd, true);
  return p;
}

std::vector<Tensor> MhaParams::parameters() const {
  std::vector<Tensor> out;
  for (int h = 0; h < heads; ++h) {
    out.push_back(w_q[static_cast<std::size_t>(h)]);
    out.push_back(w_k[static_cast<std::size_t>(h)]);
    out.push_back(w_v[static_cast<std::size_t>(h)]);
  }
  out.push_back(w_o);
  return out;
}

Tensor mha(const Tensor& q_in, const Tensor& k_in, const Tensor& v_in, const MhaParams& p,
           const std::vector<std::uint8_t>& key_mask) {
  if (q_in.cols() != p.d || k_in.cols() != p.d || v_in.cols() != p.d) {
    throw std::invalid_argument("mha: inputs " + shape_str(q_in.shape()) + ", " + shape_str(k_in.shape()) + ", " +
                                shape_str(v_in.shape()) + " vs d " + std::to_string(p.d));
  }
  std::vector<Tensor> heads;
  heads.reserve(static_cast<std::size_t>(p.heads));
  for (int h = 0; h < p.heads; ++h) {
    const auto i = static_cast<std::size_t>(h);
    heads.push_back(scaled_attention(matmul(q_in, p.w_q[i]), matmul(k_in, p.w_k[i]), matmul(v_in, p.w_v[i]),
                                     key_mask));
  }
  Tensor cat = p.heads == 1 ? heads[0] : concat(heads, 1);
  return matmul(cat, p.w_o);
}

LayerNormParams LayerNormParams::make(int d) {
  return {Tensor::full({d}, 1.0, true), Tensor::zeros({d}, true)};
}

std::vector<Tensor> LayerNormParams::parameters() const { return {gain, bias}; }

JemhaBlockParams JemhaBlockParams::make(int d, int heads, int d_ff, bool q_residual, Rng& rng) {
  JemhaBlockParams p;
  p.q_mha = MhaParams::make(d, heads, rng);
  p.o_mha = MhaParams::make(d, heads, rng);
  p.c_mha = MhaParams::make(d, heads, rng);
  p.o_ffn = FfnParams::make(d, d_ff, d, rng);
  p.c_ffn = FfnParams::make(d, d_ff, d, rng);
  p.o_ln1 = LayerNormParams::make(d);
  p.o_ln2 = LayerNormParams::make(d);
  p.c_ln1 = LayerNormParams::make(d);
  p.c_ln2 = LayerNormParams::make(d);
  p.q_residual = q_residual;
  if (q_residual) p.q_ln = LayerNormParams::make(d);
  return p;
}

std::vector<Tensor> JemhaBlockParams::parameters() const {
  std::vector<Tensor> out;
  auto append = [&out](const std::vector<Tensor>& more) { out.insert(out.end(), more.begin(), more.end()); };
  append(q_mha.parameters());
  append(o_mha.parameters());
  append(c_mha.parameters());
  append({o_ffn.w1, o_ffn.b1, o_ffn.w2, o_ffn.b2});
  append({c_ffn.w1, c_ffn.b1, c_ffn.w2, c_ffn.b2});
  append(o_ln1.parameters());
  append(o_ln2.parameters());
  append(c_ln1.parameters());
  append(c_ln2.parameters());
  if (q_residual) append(q_ln.parameters());
  return out;
}

namespace {

// H = LN1(MHA(X, Q, Q) + X); X' = LN2(FFN(H) + H)
Tensor branch(const Tensor& x, const Tensor& q, const MhaParams& mha_p, const FfnParams& ffn_p,
              const LayerNormParams& ln1, const LayerNormParams& ln2, const std::vector<std::uint8_t>& q_mask) {
  Tensor h = layer_norm(add(mha(x, q, q, mha_p, q_mask), x), ln1.gain, ln1.bias);
  return layer_norm(add(ffn(h, ffn_p), h), ln2.gain, ln2.bias);
}

}  // namespace

JemhaState jemha_block(const JemhaState& s, const JemhaBlockParams& p, const std::vector<std::uint8_t>& q_mask) {
  JemhaState next;
  next.step = s.step + 1;
  Tensor q_next = mha(s.q, s.q, s.q, p.q_mha, q_mask);
  next.q = p.q_residual ? layer_norm(add(q_next, s.q), p.q_ln.gain, p.q_ln.bias) : q_next;
  if (s.x_o.defined()) next.x_o = branch(s.x_o, s.q, p.o_mha, p.o_ffn, p.o_ln1, p.o_ln2, q_mask);
  if (s.x_c.defined()) next.x_c = branch(s.x_c, s.q, p.c_mha, p.c_ffn, p.c_ln1, p.c_ln2, q_mask);
  return next;
}

JemhaStackParams JemhaStackParams::make(int d, int heads, int d_ff, int t, bool q_residual, Rng& rng) {
  if (t < 1) throw std::invalid_argument("jemha_stack: t must be >= 1");
  JemhaStackParams p;
  for (int i = 0; i < t; ++i) p.blocks.push_back(JemhaBlockParams::make(d, heads, d_ff, q_residual, rng));
  return p;
}

std::vector<Tensor> JemhaStackParams::parameters() const {
  std::vector<Tensor> out;
  for (const auto& b : blocks) {
    auto more = b.parameters();
    out.insert(out.end(), more.begin(), more.end());
  }
  return out;
}

JemhaState jemha_stack(const JemhaState& s0, const JemhaStackParams& p, const std::vector<std::uint8_t>& q_mask) {
  JemhaState s = s0;
  for (const auto& block : p.blocks) s = jemha_block(s, block, q_mask);
  return s;
}

FuseResult attend_fuse(const Tensor& f, const FfnParams& scorer, const std::vector<std::uint8_t>& row_mask) {
  if (f.ndim() != 2) throw std::invalid_argument("attend_fuse: input is not 2-d, shape " + shape_str(f.shape()));
  Tensor scores = transpose(ffn(f, scorer));  // 1 × m
  Tensor weights = row_mask.empty() ? softmax(scores) : masked_softmax(scores, row_mask);
  FuseResult out;
  out.fused = reshape(matmul(weights, f), {f.cols()});
  out.weights = reshape(weights, {f.rows()});
  return out;
}

AnswerHead AnswerHead::make(int d, int d_ff, int answer_vocab, Rng& rng) {
  AnswerHead h;
  h.q_scorer = FfnParams::make(d, d_ff, 1, rng);
  h.c_scorer = FfnParams::make(d, d_ff, 1, rng);
  h.o_scorer = FfnParams::make(d, d_ff, 1, rng);
  h.project = FfnParams::make(d, d_ff, answer_vocab, rng);
  return h;
}

std::vector<Tensor> AnswerHead::parameters() const {
  std::vector<Tensor> out;
  for (const auto* f : {&q_scorer, &c_scorer, &o_scorer, &project}) {
    out.push_back(f->w1);
    out.push_back(f->b1);
    out.push_back(f->w2);
    out.push_back(f->b2);
  }
  return out;
}

Tensor answer_logits(const Tensor& q, const Tensor& x_c, const Tensor& x_o, const AnswerHead& head) {
  return ffn(mul(q, add(x_c, x_o)), head.project);
}

VqaModelParams VqaModelParams::make(const VqaConfig& config, int question_vocab, int expression_vocab, int d_v,
                                    int answer_vocab, Rng& rng) {
  VqaModelParams p;
  p.config = config;
  p.d_v = d_v;
  p.answer_vocab = answer_vocab;
  p.question = QuestionEncoderParams::make(question_vocab, config.word_dim, config.d, config.question_gru, rng);
  p.expression = ExpressionEncoderParams::make(expression_vocab, config.word_dim, config.expr_hidden, config.d, rng);
  p.obj_w = Tensor::randn({d_v, config.d}, rng, 1.0 / std::sqrt(static_cast<double>(d_v)), true);
  p.obj_b = Tensor::zeros({config.d}, true);
  p.stack = JemhaStackParams::make(config.d, config.heads, config.d_ff, config.t, config.q_residual, rng);
  p.head = AnswerHead::make(config.d, config.d_ff, answer_vocab, rng);
  return p;
}

std::vector<Tensor> VqaModelParams::parameters() const {
  std::vector<Tensor> out;
  auto append = [&out](const std::vector<Tensor>& more) { out.insert(out.end(), more.begin(), more.end()); };
  if (config.use_textual) append(expression.parameters());
  if (config.use_visual) append({obj_w, obj_b});
  append(question.parameters());
  append(stack.parameters());
  append(head.parameters());
  return out;
}

VqaOutput vqa_forward(const std::vector<std::vector<double>>& object_features, const TokenSequence& question,
                      const std::vector<TokenSequence>& expressions, const VqaModelParams& p) {
  const auto& cfg = p.config;
  if (!cfg.use_visual && !cfg.use_textual) {
    throw std::invalid_argument("vqa_forward: both streams ablated");
  }
  const int m = static_cast<int>(object_features.size());
  if (m == 0) throw std::invalid_argument("vqa_forward: zero objects");
  if (m > cfg.max_objects) {
    throw std::invalid_argument("vqa_forward: " + std::to_string(m) + " objects exceed cap " +
                                std::to_string(cfg.max_objects));
  }

  EncodedQuestion eq = embed_question(question, p.question);

  JemhaState s0;
  s0.q = eq.q;
  if (cfg.use_visual) {
    std::vector<double> flat;
    flat.reserve(static_cast<std::size_t>(m) * static_cast<std::size_t>(p.d_v));
    for (const auto& f : object_features) {
      if (static_cast<int>(f.size()) != p.d_v) {
        throw std::invalid_argument("vqa_forward: object feature dim " + std::to_string(f.size()) + " vs " +
                                    std::to_string(p.d_v));
      }
      flat.insert(flat.end(), f.begin(), f.end());
    }
    s0.x_o = linear(Tensor({m, p.d_v}, std::move(flat)), p.obj_w, p.obj_b);
  }
  if (cfg.use_textual) {
    if (static_cast<int>(expressions.size()) != m) {
      throw std::invalid_argument("vqa_forward: " + std::to_string(expressions.size()) + " expressions for " +
                                  std::to_string(m) + " objects");
    }
    s0.x_c = embed_expressions(expressions, p.expression);
  }

  JemhaState st = jemha_stack(s0, p.stack, eq.mask);

  VqaOutput out;
  FuseResult qf = attend_fuse(st.q, p.head.q_scorer, eq.mask);
  out.q_fused = qf.fused;
  if (cfg.use_visual) {
    FuseResult of = attend_fuse(st.x_o, p.head.o_scorer);
    out.o_fused = of.fused;
    out.object_weights = of.weights.values();
  } else {
    out.o_fused = Tensor::zeros({cfg.d});
  }
  if (cfg.use_textual) {
    out.c_fused = attend_fuse(st.x_c, p.head.c_scorer).fused;
  } else {
    out.c_fused = Tensor::zeros({cfg.d});
  }
  out.logits = answer_logits(out.q_fused, out.c_fused, out.o_fused, p.head);
  return out;
}

}  // namespace jemha
