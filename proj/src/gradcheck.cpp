#include "jemha/gradcheck.hpp"

#include <cmath>
#include <stdexcept>

#include "jemha/ops.hpp"
#include "jemha/rng.hpp"

namespace jemha {

namespace {

// coords[i] empty means "test every coordinate of input i".
double grad_check_impl(const TensorProgram& f, std::vector<Tensor>& inputs, double eps,
                       const std::vector<std::vector<std::size_t>>* coords) {
  std::vector<std::vector<double>> analytic(inputs.size());
  {
    Tape tape;
    Tensor y = f(inputs);
    if (y.numel() != 1) {
      throw std::invalid_argument("grad_check: program output has shape " + shape_str(y.shape()) + ", want scalar");
    }
    for (const auto& rec : tape.records()) {
      for (double v : rec.output.values()) {
        if (!std::isfinite(v)) throw std::domain_error(std::string("grad_check: non-finite value out of ") + rec.op);
      }
    }
    tape.compute_gradients(y);
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      if (!inputs[i].requires_grad()) continue;
      const auto* g = tape.grad_of(inputs[i]);
      analytic[i] = g ? *g : std::vector<double>(inputs[i].numel(), 0.0);
    }
  }

  NoGradGuard no_grad;
  double max_rel = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (analytic[i].empty()) continue;
    auto& vals = inputs[i].values();
    auto test_coord = [&](std::size_t k) {
      const double saved = vals[k];
      vals[k] = saved + eps;
      const double up = f(inputs).item();
      vals[k] = saved - eps;
      const double down = f(inputs).item();
      vals[k] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = analytic[i][k];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
      max_rel = std::max(max_rel, rel);
    };
    if (coords && !(*coords)[i].empty()) {
      for (std::size_t k : (*coords)[i]) test_coord(k);
    } else {
      for (std::size_t k = 0; k < vals.size(); ++k) test_coord(k);
    }
  }
  return max_rel;
}

}  // namespace

double grad_check(const TensorProgram& f, std::vector<Tensor> inputs, double eps) {
  return grad_check_impl(f, inputs, eps, nullptr);
}

double grad_check_sampled(const TensorProgram& f, std::vector<Tensor> inputs, std::size_t max_coords, Rng& rng,
                          double eps) {
  std::vector<std::vector<std::size_t>> coords(inputs.size());
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const std::size_t n = inputs[i].numel();
    if (n <= max_coords) continue;  // empty list = full sweep
    std::vector<std::size_t> all(n);
    for (std::size_t k = 0; k < n; ++k) all[k] = k;
    for (std::size_t k = 0; k < max_coords; ++k) {
      std::swap(all[k], all[static_cast<std::size_t>(rng.randint(static_cast<int>(k), static_cast<int>(n)))]);
    }
    coords[i].assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(max_coords));
  }
  return grad_check_impl(f, inputs, eps, &coords);
}

namespace {

std::vector<int> rand_shape(Rng& rng) {
  if (rng.bernoulli(0.5)) return {rng.randint(1, 6)};
  return {rng.randint(1, 6), rng.randint(1, 6)};
}

// Inputs for kinked ops (ReLU, max-based reductions) stay clear of the
// kink so central differences see a smooth function.
Tensor randn_away_from_zero(std::vector<int> shape, Rng& rng, double margin = 0.05) {
  Tensor t = Tensor::randn(std::move(shape), rng, 1.0, true);
  for (auto& v : t.values()) {
    if (std::abs(v) < margin) v = v < 0.0 ? v - margin : v + margin;
  }
  return t;
}

// Fixed random cotangent turning any output into a scalar objective that
// exercises every output coordinate.  Coordinates are kept away from zero:
// a tiny cotangent scales a whole gradient path below the ~1e-11 noise
// floor of central differences, where relative error is meaningless.
TensorProgram weighted(std::function<Tensor(const std::vector<Tensor>&)> g, const Tensor& out_like, Rng& rng) {
  Tensor w = Tensor::randn(out_like.shape(), rng, 1.0);
  for (auto& v : w.values()) {
    if (std::abs(v) < 0.3) v = v < 0.0 ? v - 0.3 : v + 0.3;
  }
  return [g = std::move(g), w](const std::vector<Tensor>& in) { return sum_all(mul(g(in), w)); };
}

double check_unary(Rng& rng, const std::function<Tensor(const Tensor&)>& op, Tensor a) {
  Tensor probe;
  {
    NoGradGuard ng;
    probe = op(a);
  }
  auto g = [op](const std::vector<Tensor>& in) { return op(in[0]); };
  return grad_check(weighted(g, probe, rng), {a});
}

double check_binary(Rng& rng, const std::function<Tensor(const Tensor&, const Tensor&)>& op, Tensor a, Tensor b) {
  Tensor probe;
  {
    NoGradGuard ng;
    probe = op(a, b);
  }
  auto g = [op](const std::vector<Tensor>& in) { return op(in[0], in[1]); };
  return grad_check(weighted(g, probe, rng), {a, b});
}

}  // namespace

const std::vector<RegisteredOp>& op_registry() {
  static const std::vector<RegisteredOp> registry = [] {
    std::vector<RegisteredOp> ops;
    auto addop = [&ops](std::string name, std::function<double(Rng&)> check) {
      ops.push_back({std::move(name), std::move(check)});
    };

    addop("add", [](Rng& rng) {
      auto s = rand_shape(rng);
      return check_binary(rng, [](const Tensor& a, const Tensor& b) { return add(a, b); },
                          Tensor::randn(s, rng, 1.0, true), Tensor::randn(s, rng, 1.0, true));
    });
    addop("sub", [](Rng& rng) {
      auto s = rand_shape(rng);
      return check_binary(rng, [](const Tensor& a, const Tensor& b) { return sub(a, b); },
                          Tensor::randn(s, rng, 1.0, true), Tensor::randn(s, rng, 1.0, true));
    });
    addop("mul", [](Rng& rng) {
      auto s = rand_shape(rng);
      return check_binary(rng, [](const Tensor& a, const Tensor& b) { return mul(a, b); },
                          Tensor::randn(s, rng, 1.0, true), Tensor::randn(s, rng, 1.0, true));
    });
    addop("div", [](Rng& rng) {
      auto s = rand_shape(rng);
      Tensor b = Tensor::randn(s, rng, 1.0, true);
      for (auto& v : b.values()) v = (v < 0.0 ? -1.0 : 1.0) * (0.5 + std::abs(v));
      // the numerator multiplies into the denominator gradient
      return check_binary(rng, [](const Tensor& x, const Tensor& y) { return div(x, y); },
                          randn_away_from_zero(s, rng, 0.3), b);
    });
    addop("add_scalar", [](Rng& rng) {
      const double c = rng.uniform(-2.0, 2.0);
      return check_unary(rng, [c](const Tensor& a) { return add_scalar(a, c); },
                         Tensor::randn(rand_shape(rng), rng, 1.0, true));
    });
    addop("mul_scalar", [](Rng& rng) {
      const double c = rng.uniform(-2.0, 2.0);
      return check_unary(rng, [c](const Tensor& a) { return mul_scalar(a, c); },
                         Tensor::randn(rand_shape(rng), rng, 1.0, true));
    });
    addop("matmul", [](Rng& rng) {
      const int m = rng.randint(1, 5), k = rng.randint(1, 5), n = rng.randint(1, 5);
      return check_binary(rng, [](const Tensor& a, const Tensor& b) { return matmul(a, b); },
                          Tensor::randn({m, k}, rng, 1.0, true), Tensor::randn({k, n}, rng, 1.0, true));
    });
    addop("transpose", [](Rng& rng) {
      return check_unary(rng, [](const Tensor& a) { return transpose(a); },
                         Tensor::randn({rng.randint(1, 5), rng.randint(1, 5)}, rng, 1.0, true));
    });
    addop("reshape", [](Rng& rng) {
      const int r = rng.randint(1, 5), c = rng.randint(1, 5);
      return check_unary(rng, [r, c](const Tensor& a) { return reshape(a, {r * c}); },
                         Tensor::randn({r, c}, rng, 1.0, true));
    });
    addop("concat", [](Rng& rng) {
      const int axis = rng.randint(0, 2);
      const int shared = rng.randint(1, 5);
      auto part = [&](int extent) {
        return axis == 0 ? Tensor::randn({extent, shared}, rng, 1.0, true)
                         : Tensor::randn({shared, extent}, rng, 1.0, true);
      };
      Tensor a = part(rng.randint(1, 4)), b = part(rng.randint(1, 4)), c = part(rng.randint(1, 4));
      Tensor probe;
      {
        NoGradGuard ng;
        probe = concat({a, b, c}, axis);
      }
      auto g = [axis](const std::vector<Tensor>& in) { return concat(in, axis); };
      return grad_check(weighted(g, probe, rng), {a, b, c});
    });
    addop("slice", [](Rng& rng) {
      const int n = rng.randint(2, 8);
      const int lo = rng.randint(0, n - 1), hi = rng.randint(lo + 1, n + 1);
      return check_unary(rng, [lo, hi](const Tensor& a) { return slice(a, lo, hi); },
                         Tensor::randn({n}, rng, 1.0, true));
    });
    addop("slice_cols", [](Rng& rng) {
      const int r = rng.randint(1, 5), c = rng.randint(2, 6);
      const int lo = rng.randint(0, c - 1), hi = rng.randint(lo + 1, c + 1);
      return check_unary(rng, [lo, hi](const Tensor& a) { return slice_cols(a, lo, hi); },
                         Tensor::randn({r, c}, rng, 1.0, true));
    });
    addop("row_select", [](Rng& rng) {
      const int r = rng.randint(1, 5), c = rng.randint(1, 5);
      const int row = rng.randint(0, r);
      return check_unary(rng, [row](const Tensor& a) { return row_select(a, row); },
                         Tensor::randn({r, c}, rng, 1.0, true));
    });
    addop("embedding_lookup", [](Rng& rng) {
      const int v = rng.randint(2, 6), e = rng.randint(1, 5), n = rng.randint(1, 7);
      std::vector<int> ids(static_cast<std::size_t>(n));
      for (auto& id : ids) id = rng.randint(0, v);  // repeats exercise accumulation
      return check_unary(rng, [ids](const Tensor& t) { return embedding_lookup(t, ids); },
                         Tensor::randn({v, e}, rng, 1.0, true));
    });
    addop("gather_cols", [](Rng& rng) {
      const int r = rng.randint(1, 5), c = rng.randint(1, 5);
      std::vector<int> ids(static_cast<std::size_t>(r));
      for (auto& id : ids) id = rng.randint(0, c);
      return check_unary(rng, [ids](const Tensor& a) { return gather_cols(a, ids); },
                         Tensor::randn({r, c}, rng, 1.0, true));
    });
    addop("relu", [](Rng& rng) {
      return check_unary(rng, [](const Tensor& a) { return relu(a); }, randn_away_from_zero(rand_shape(rng), rng));
    });
    addop("tanh", [](Rng& rng) {
      return check_unary(rng, [](const Tensor& a) { return tanh(a); }, Tensor::randn(rand_shape(rng), rng, 1.0, true));
    });
    addop("sigmoid", [](Rng& rng) {
      return check_unary(rng, [](const Tensor& a) { return sigmoid(a); },
                         Tensor::randn(rand_shape(rng), rng, 1.0, true));
    });
    addop("sqrt", [](Rng& rng) {
      Tensor a = Tensor::randn(rand_shape(rng), rng, 1.0, true);
      for (auto& v : a.values()) v = 0.2 + std::abs(v);
      return check_unary(rng, [](const Tensor& x) { return jemha::sqrt(x); }, a);
    });
    addop("sum_all", [](Rng& rng) {
      return grad_check([](const std::vector<Tensor>& in) { return sum_all(in[0]); },
                        {Tensor::randn(rand_shape(rng), rng, 1.0, true)});
    });
    addop("mean_all", [](Rng& rng) {
      return grad_check([](const std::vector<Tensor>& in) { return mean_all(in[0]); },
                        {Tensor::randn(rand_shape(rng), rng, 1.0, true)});
    });
    addop("add_rowwise", [](Rng& rng) {
      const int r = rng.randint(1, 5), c = rng.randint(1, 5);
      return check_binary(rng, [](const Tensor& x, const Tensor& b) { return add_rowwise(x, b); },
                          Tensor::randn({r, c}, rng, 1.0, true), Tensor::randn({c}, rng, 1.0, true));
    });
    addop("scale_rows", [](Rng& rng) {
      const int r = rng.randint(1, 5), c = rng.randint(1, 5);
      return check_binary(rng, [](const Tensor& x, const Tensor& s) { return scale_rows(x, s); },
                          Tensor::randn({r, c}, rng, 1.0, true), Tensor::randn({r}, rng, 1.0, true));
    });
    addop("softmax", [](Rng& rng) {
      // sd 1: larger logits saturate rows and the probe gradient under-
      // flows past what central differences can resolve in float64
      return check_unary(rng, [](const Tensor& a) { return softmax(a); },
                         Tensor::randn(rand_shape(rng), rng, 1.0, true));
    });
    addop("log_softmax", [](Rng& rng) {
      return check_unary(rng, [](const Tensor& a) { return log_softmax(a); },
                         Tensor::randn(rand_shape(rng), rng, 2.0, true));
    });
    addop("masked_softmax", [](Rng& rng) {
      const int r = rng.randint(1, 5), c = rng.randint(1, 6);
      std::vector<std::uint8_t> keep(static_cast<std::size_t>(c));
      for (auto& k : keep) k = rng.bernoulli(0.6) ? 1 : 0;
      keep[static_cast<std::size_t>(rng.randint(0, c))] = 1;
      return check_unary(rng, [keep](const Tensor& a) { return masked_softmax(a, keep); },
                         Tensor::randn({r, c}, rng, 2.0, true));
    });
    addop("layer_norm", [](Rng& rng) {
      const int r = rng.randint(1, 5), d = rng.randint(2, 6);
      // redraw rows with tiny spread: the 1/sigma factor turns them into
      // near-singular points that central differences cannot resolve
      Tensor x = Tensor::randn({r, d}, rng, 1.0, true);
      auto spread_ok = [&] {
        const auto& v = x.values();
        for (int i = 0; i < r; ++i) {
          double mean = 0.0;
          for (int j = 0; j < d; ++j) mean += v[i * d + j];
          mean /= d;
          double var = 0.0;
          for (int j = 0; j < d; ++j) var += (v[i * d + j] - mean) * (v[i * d + j] - mean);
          if (var / d < 0.09) return false;
        }
        return true;
      };
      while (!spread_ok()) x = Tensor::randn({r, d}, rng, 1.0, true);
      Tensor gain = randn_away_from_zero({d}, rng, 0.3);
      Tensor bias = Tensor::randn({d}, rng, 0.5, true);
      Tensor probe;
      {
        NoGradGuard ng;
        probe = layer_norm(x, gain, bias);
      }
      auto g = [](const std::vector<Tensor>& in) { return layer_norm(in[0], in[1], in[2]); };
      return grad_check(weighted(g, probe, rng), {x, gain, bias});
    });
    addop("bce_with_logits", [](Rng& rng) {
      auto s = rand_shape(rng);
      Tensor logits = Tensor::randn(s, rng, 1.5, true);
      std::vector<double> targets(logits.numel());
      for (auto& tgt : targets) tgt = rng.uniform();
      return grad_check([targets](const std::vector<Tensor>& in) { return bce_with_logits_mean(in[0], targets); },
                        {logits});
    });
    addop("linear", [](Rng& rng) {
      const int m = rng.randint(1, 4), d_in = rng.randint(1, 4), d_out = rng.randint(1, 4);
      Tensor x = rng.bernoulli(0.5) ? Tensor::randn({m, d_in}, rng, 1.0, true) : Tensor::randn({d_in}, rng, 1.0, true);
      Tensor w = Tensor::randn({d_in, d_out}, rng, 1.0, true);
      Tensor b = Tensor::randn({d_out}, rng, 1.0, true);
      Tensor probe;
      {
        NoGradGuard ng;
        probe = linear(x, w, b);
      }
      auto g = [](const std::vector<Tensor>& in) { return linear(in[0], in[1], in[2]); };
      return grad_check(weighted(g, probe, rng), {x, w, b});
    });
    addop("ffn", [](Rng& rng) {
      const int m = rng.randint(1, 4), d_in = rng.randint(1, 4);
      FfnParams p = FfnParams::make(d_in, rng.randint(1, 5), rng.randint(1, 4), rng);
      for (auto& v : p.b1.values()) v = rng.uniform(-0.5, 0.5);
      Tensor x = Tensor::randn({m, d_in}, rng, 1.0, true);
      Tensor probe;
      {
        NoGradGuard ng;
        probe = ffn(x, p);
      }
      auto g = [p](const std::vector<Tensor>& in) { return ffn(in[0], p); };
      return grad_check(weighted(g, probe, rng), {x, p.w1, p.b1, p.w2, p.b2});
    });
    addop("lstm_step", [](Rng& rng) {
      const int d_in = rng.randint(1, 4), d_h = rng.randint(1, 4);
      RecurrentCellParams p = RecurrentCellParams::lstm(d_in, d_h, rng);
      // state coords multiply into every gate-weight gradient; near-zero
      // draws push those products under the finite-difference noise floor
      Tensor x = randn_away_from_zero({d_in}, rng, 0.3);
      LstmState s{randn_away_from_zero({d_h}, rng, 0.3), randn_away_from_zero({d_h}, rng, 0.3)};
      std::vector<Tensor> inputs = {x, s.h, s.c};
      for (const auto& gate : p.gates) {
        inputs.push_back(gate.w_x);
        inputs.push_back(gate.w_h);
        inputs.push_back(gate.b);
      }
      Tensor probe;
      {
        NoGradGuard ng;
        LstmState next = lstm_step(x, s, p);
        probe = concat({next.h, next.c}, 0);
      }
      auto g = [x, s, p](const std::vector<Tensor>&) {
        LstmState next = lstm_step(x, s, p);
        return concat({next.h, next.c}, 0);
      };
      return grad_check(weighted(g, probe, rng), inputs);
    });
    addop("gru_step", [](Rng& rng) {
      const int d_in = rng.randint(1, 4), d_h = rng.randint(1, 4);
      RecurrentCellParams p = RecurrentCellParams::gru(d_in, d_h, rng);
      Tensor x = randn_away_from_zero({d_in}, rng, 0.3);
      Tensor h = randn_away_from_zero({d_h}, rng, 0.3);
      std::vector<Tensor> inputs = {x, h};
      for (const auto& gate : p.gates) {
        inputs.push_back(gate.w_x);
        inputs.push_back(gate.w_h);
        inputs.push_back(gate.b);
      }
      Tensor probe;
      {
        NoGradGuard ng;
        probe = gru_step(x, h, p);
      }
      auto g = [x, h, p](const std::vector<Tensor>&) { return gru_step(x, h, p); };
      return grad_check(weighted(g, probe, rng), inputs);
    });
    addop("cosine_similarity", [](Rng& rng) {
      const int n = rng.randint(2, 6);
      Tensor a = randn_away_from_zero({n}, rng, 0.2);
      Tensor b = randn_away_from_zero({n}, rng, 0.2);
      return grad_check([](const std::vector<Tensor>& in) { return cosine_similarity(in[0], in[1]); }, {a, b});
    });

    return ops;
  }();
  return registry;
}

}  // namespace jemha
