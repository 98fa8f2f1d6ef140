#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

namespace jemha {

class Rng;

// Dense float64 tensor. Values are row-major; rank is 1 or 2 (all the
// pipeline needs). A Tensor is a cheap handle onto shared storage:
// copies alias the same data. Values are treated as immutable once the
// tensor has entered a tape; only `grad` accumulates afterwards, and
// parameters are mutated by the optimizer between steps.
struct TensorData {
  std::vector<int> shape;
  std::vector<double> values;
  bool requires_grad = false;
  std::vector<double> grad;  // empty until a backward pass populates it
  std::uint64_t id = 0;      // creation order, process-wide
};

class Tensor {
 public:
  Tensor() = default;
  Tensor(std::vector<int> shape, std::vector<double> values, bool requires_grad = false);

  static Tensor scalar(double v, bool requires_grad = false);
  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor full(std::vector<int> shape, double v, bool requires_grad = false);
  static Tensor randn(std::vector<int> shape, Rng& rng, double sd, bool requires_grad = false);

  bool defined() const { return p_ != nullptr; }
  const std::vector<int>& shape() const { return p_->shape; }
  int ndim() const { return static_cast<int>(p_->shape.size()); }
  int dim(int i) const { return p_->shape[static_cast<std::size_t>(i)]; }
  std::size_t numel() const { return p_->values.size(); }
  int rows() const;  // 2-d only
  int cols() const;  // 2-d only

  const std::vector<double>& values() const { return p_->values; }
  std::vector<double>& values() { return p_->values; }
  bool requires_grad() const { return p_->requires_grad; }
  void set_requires_grad(bool b) { p_->requires_grad = b; }

  // Gradient accumulator; allocated zero-filled on first access.
  std::vector<double>& grad();
  bool has_grad() const { return !p_->grad.empty(); }
  void zero_grad();

  double item() const;                // scalar tensors only
  double at(int i) const { return p_->values[static_cast<std::size_t>(i)]; }
  double at(int i, int j) const;

  // Detached copy of the values (no grad history, fresh storage).
  Tensor detach_copy() const;

  TensorData* data() const { return p_.get(); }
  std::uint64_t id() const { return p_->id; }

 private:
  std::shared_ptr<TensorData> p_;
};

std::string shape_str(const std::vector<int>& shape);

// Reverse-mode tape. Ops record themselves on the innermost active tape
// while any of their inputs requires grad; backward() sweeps the records
// in reverse and flushes accumulated gradients into TensorData::grad.
// A tape is confined to one thread; distinct tapes may run concurrently.
class Tape {
 public:
  struct Record {
    const char* op;
    std::vector<Tensor> inputs;
    Tensor output;
    // Accumulates input gradients given this tape's buffer for `output`.
    std::function<void(Tape&)> backward;
  };

  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* current();

  void record(Record rec) { records_.push_back(std::move(rec)); }
  std::size_t size() const { return records_.size(); }
  const std::vector<Record>& records() const { return records_; }

  // Reverse sweep from a scalar loss, then flush every accumulated
  // gradient into the corresponding tensor's grad (additively).
  void backward(const Tensor& loss);

  // Reverse sweep only; results stay tape-local (see grad_of).
  void compute_gradients(const Tensor& loss);

  const std::vector<double>* grad_of(const Tensor& t) const;
  std::vector<double>& grad_buffer(const TensorData* d, std::size_t n);

 private:
  void flush();

  std::vector<Record> records_;
  std::unordered_map<const TensorData*, std::vector<double>> grads_;
  Tape* prev_ = nullptr;
};

// RAII guard that suspends recording on the current thread (forward-only
// evaluation inside a training step, e.g. sampling or reward scoring).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();

 private:
  Tape* saved_;
};

}  // namespace jemha
