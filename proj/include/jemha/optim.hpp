#pragma once

#include <vector>

#include "jemha/tensor.hpp"

namespace jemha {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double grad_clip = 0.0;  // global-norm cap; 0 disables
  bool bias_correction = true;
  long warmup_steps = 0;  // linear lr ramp over the first steps
};

// Adaptive moment optimizer owning the moment state for a fixed parameter
// list. A step with any non-finite gradient is skipped entirely (params,
// moments and step count untouched) and counted.
class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamConfig cfg);

  // Gradients aligned with the parameter list, one vector per tensor.
  void step(const std::vector<std::vector<double>>& grads);
  // Pulls tape-local gradients (after compute_gradients); params the tape
  // never saw get zero gradient.
  void step(const Tape& tape);

  void set_lr(double lr) { cfg_.lr = lr; }
  double lr() const { return cfg_.lr; }
  long steps() const { return steps_; }
  int skipped() const { return skipped_; }
  const std::vector<Tensor>& params() const { return params_; }

 private:
  std::vector<Tensor> params_;
  AdamConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  long steps_ = 0;
  int skipped_ = 0;
};

// Collects tape-local gradients for each parameter (zeros when absent).
std::vector<std::vector<double>> collect_grads(const Tape& tape, const std::vector<Tensor>& params);

// lr0 halved every `every` iterations (iteration counts from 0).
double speaker_lr(double lr0, long iteration, long every = 500, double factor = 0.5);

// lr0 through epoch `hold` (1-indexed), then ×factor per `every` epochs.
double vqa_lr(double lr0, int epoch, int hold = 10, int every = 2, double factor = 0.2);

}  // namespace jemha
