#include "jemha/optim.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace jemha {

Adam::Adam(std::vector<Tensor> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  if (!(cfg_.lr > 0.0)) throw std::invalid_argument("adam: lr must be positive");
  if (!(cfg_.beta1 >= 0.0 && cfg_.beta1 < 1.0) || !(cfg_.beta2 >= 0.0 && cfg_.beta2 < 1.0)) {
    throw std::invalid_argument("adam: betas must lie in [0,1)");
  }
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const Tensor& p : params_) {
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

void Adam::step(const std::vector<std::vector<double>>& grads) {
  if (grads.size() != params_.size()) {
    throw std::invalid_argument("adam: " + std::to_string(grads.size()) + " gradients for " +
                                std::to_string(params_.size()) + " parameters");
  }
  double sq_norm = 0.0;
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (grads[i].size() != params_[i].numel()) {
      throw std::invalid_argument("adam: gradient " + std::to_string(i) + " has wrong size");
    }
    for (double g : grads[i]) {
      if (!std::isfinite(g)) {
        ++skipped_;
        return;
      }
      sq_norm += g * g;
    }
  }
  double scale = 1.0;
  if (cfg_.grad_clip > 0.0) {
    const double norm = std::sqrt(sq_norm);
    if (norm > cfg_.grad_clip) scale = cfg_.grad_clip / norm;
  }

  ++steps_;
  double lr = cfg_.lr;
  if (cfg_.warmup_steps > 0 && steps_ < cfg_.warmup_steps) {
    lr *= static_cast<double>(steps_) / static_cast<double>(cfg_.warmup_steps);
  }
  const double c1 = cfg_.bias_correction ? 1.0 - std::pow(cfg_.beta1, static_cast<double>(steps_)) : 1.0;
  const double c2 = cfg_.bias_correction ? 1.0 - std::pow(cfg_.beta2, static_cast<double>(steps_)) : 1.0;

  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& vals = params_[i].values();
    auto& m = m_[i];
    auto& v = v_[i];
    const auto& g = grads[i];
    for (std::size_t j = 0; j < vals.size(); ++j) {
      const double gj = g[j] * scale;
      m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * gj;
      v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * gj * gj;
      vals[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + cfg_.eps);
    }
  }
}

void Adam::step(const Tape& tape) { step(collect_grads(tape, params_)); }

std::vector<std::vector<double>> collect_grads(const Tape& tape, const std::vector<Tensor>& params) {
  std::vector<std::vector<double>> out;
  out.reserve(params.size());
  for (const Tensor& p : params) {
    const std::vector<double>* g = tape.grad_of(p);
    out.push_back(g ? *g : std::vector<double>(p.numel(), 0.0));
  }
  return out;
}

double speaker_lr(double lr0, long iteration, long every, double factor) {
  if (every <= 0) throw std::invalid_argument("speaker_lr: decay interval must be positive");
  return lr0 * std::pow(factor, static_cast<double>(iteration / every));
}

double vqa_lr(double lr0, int epoch, int hold, int every, double factor) {
  if (every <= 0) throw std::invalid_argument("vqa_lr: decay interval must be positive");
  if (epoch <= hold) return lr0;
  const int over = epoch - hold;
  return lr0 * std::pow(factor, static_cast<double>((over + every - 1) / every));
}

}  // namespace jemha
