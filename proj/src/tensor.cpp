#include "jemha/tensor.hpp"

#include <atomic>
#include <sstream>
#include <stdexcept>

#include "jemha/rng.hpp"

namespace jemha {

namespace {

std::atomic<std::uint64_t> g_next_id{1};

thread_local Tape* g_current_tape = nullptr;

std::size_t shape_numel(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw std::invalid_argument("tensor: non-positive dim in shape " + shape_str(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

}  // namespace

std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

Tensor::Tensor(std::vector<int> shape, std::vector<double> values, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  if (n != values.size()) {
    throw std::invalid_argument("tensor: shape " + shape_str(shape) + " wants " + std::to_string(n) +
                                " values, got " + std::to_string(values.size()));
  }
  p_ = std::make_shared<TensorData>();
  p_->shape = std::move(shape);
  p_->values = std::move(values);
  p_->requires_grad = requires_grad;
  p_->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
}

Tensor Tensor::scalar(double v, bool requires_grad) { return Tensor({1}, {v}, requires_grad); }

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::full(std::vector<int> shape, double v, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, v), requires_grad);
}

Tensor Tensor::randn(std::vector<int> shape, Rng& rng, double sd, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal(0.0, sd);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

int Tensor::rows() const {
  if (ndim() != 2) throw std::invalid_argument("rows(): tensor is not 2-d, shape " + shape_str(shape()));
  return dim(0);
}

int Tensor::cols() const {
  if (ndim() != 2) throw std::invalid_argument("cols(): tensor is not 2-d, shape " + shape_str(shape()));
  return dim(1);
}

std::vector<double>& Tensor::grad() {
  if (p_->grad.empty()) p_->grad.assign(p_->values.size(), 0.0);
  return p_->grad;
}

void Tensor::zero_grad() {
  if (!p_->grad.empty()) std::fill(p_->grad.begin(), p_->grad.end(), 0.0);
}

double Tensor::item() const {
  if (numel() != 1) throw std::invalid_argument("item(): tensor has " + std::to_string(numel()) + " elements");
  return p_->values[0];
}

double Tensor::at(int i, int j) const {
  return p_->values[static_cast<std::size_t>(i) * static_cast<std::size_t>(cols()) + static_cast<std::size_t>(j)];
}

Tensor Tensor::detach_copy() const { return Tensor(p_->shape, p_->values, false); }

Tape::Tape() {
  prev_ = g_current_tape;
  g_current_tape = this;
}

Tape::~Tape() { g_current_tape = prev_; }

Tape* Tape::current() { return g_current_tape; }

std::vector<double>& Tape::grad_buffer(const TensorData* d, std::size_t n) {
  auto it = grads_.find(d);
  if (it == grads_.end()) it = grads_.emplace(d, std::vector<double>(n, 0.0)).first;
  return it->second;
}

const std::vector<double>* Tape::grad_of(const Tensor& t) const {
  auto it = grads_.find(t.data());
  return it == grads_.end() ? nullptr : &it->second;
}

void Tape::compute_gradients(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw std::invalid_argument("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  }
  grads_.clear();
  grad_buffer(loss.data(), 1)[0] = 1.0;
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    if (it->backward) it->backward(*this);
  }
}

void Tape::flush() {
  for (auto& [data, g] : grads_) {
    auto* d = const_cast<TensorData*>(data);
    if (!d->requires_grad) continue;
    if (d->grad.empty()) d->grad.assign(d->values.size(), 0.0);
    for (std::size_t i = 0; i < g.size(); ++i) d->grad[i] += g[i];
  }
}

void Tape::backward(const Tensor& loss) {
  compute_gradients(loss);
  flush();
}

NoGradGuard::NoGradGuard() {
  saved_ = g_current_tape;
  g_current_tape = nullptr;
}

NoGradGuard::~NoGradGuard() { g_current_tape = saved_; }

}  // namespace jemha
