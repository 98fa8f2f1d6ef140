#pragma once

#include <cstdint>
#include <vector>

#include "jemha/tensor.hpp"

namespace jemha {

class Rng;

// Differentiable primitives. Every function here runs eagerly and, when a
// tape is active and an input requires grad, records one backward closure.
// Tensors are rank 1 or 2; "rows" of a 1-d tensor means the whole vector.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double c);
Tensor mul_scalar(const Tensor& a, double c);

// C[m×n] = A[m×k] · B[k×n]
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, std::vector<int> shape);

Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& a, int lo, int hi);        // 1-d range
Tensor slice_cols(const Tensor& a, int lo, int hi);   // 2-d column range
Tensor row_select(const Tensor& a, int row);          // 2-d -> 1-d

// Rows of `table` selected by id; gradient accumulates into the rows.
Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids);
// v[i] = A[i, ids[i]]
Tensor gather_cols(const Tensor& a, const std::vector<int>& ids);

Tensor relu(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor sqrt(const Tensor& a);

Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);

// b broadcast over rows of x.
Tensor add_rowwise(const Tensor& x, const Tensor& b);
// out[i,:] = x[i,:] * s[i]
Tensor scale_rows(const Tensor& x, const Tensor& s);

// Row-wise stable softmax over the last axis. Non-finite input is a
// domain error.
Tensor softmax(const Tensor& a);
Tensor log_softmax(const Tensor& a);
// keep[j] == 0 excludes column j from every row's softmax (weight 0).
// A row with no kept column is an error.
Tensor masked_softmax(const Tensor& a, const std::vector<std::uint8_t>& keep);

// Per row: (x - mean) / sqrt(pop_var + eps) * gain + bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

// Mean over elements of the numerically stable binary cross-entropy
// between sigmoid(logits) and soft targets in [0,1].
Tensor bce_with_logits_mean(const Tensor& logits, const std::vector<double>& targets);

// ---- composites ----

// x·W + b; accepts a single vector or a matrix of row vectors.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

Tensor dot(const Tensor& a, const Tensor& b);
Tensor cosine_similarity(const Tensor& a, const Tensor& b);

struct GateParams {
  Tensor w_x, w_h, b;
};

// Per-gate weights for recurrent cells. Gate order is fixed:
// LSTM input/forget/output/candidate, GRU update/reset/candidate.
struct RecurrentCellParams {
  std::vector<GateParams> gates;
  int input_dim = 0;
  int hidden_dim = 0;

  static RecurrentCellParams lstm(int input_dim, int hidden_dim, Rng& rng);
  static RecurrentCellParams gru(int input_dim, int hidden_dim, Rng& rng);
};

struct LstmState {
  Tensor h, c;
  static LstmState zeros(int hidden_dim);
  static LstmState zeros(int batch, int hidden_dim);
};

// c' = f⊙c + i⊙g, h' = o⊙tanh(c'); i,f,o sigmoid gates, g tanh candidate.
LstmState lstm_step(const Tensor& x, const LstmState& s, const RecurrentCellParams& p);

// h' = (1-z)⊙h + z⊙h~ with h~ = tanh(Wx·x + Wh·(r⊙h) + b).
Tensor gru_step(const Tensor& x, const Tensor& h, const RecurrentCellParams& p);

struct FfnParams {
  Tensor w1, b1, w2, b2;
  static FfnParams make(int d_in, int d_hidden, int d_out, Rng& rng);
  int out_dim() const { return w2.cols(); }
};

// Two affine layers with a ReLU between them.
Tensor ffn(const Tensor& x, const FfnParams& p);

}  // namespace jemha
