#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "docplug/util.hpp"

namespace docplug {

// Counts floating-point work by tag. Convention: only matrix products are
// counted, at 2*m*k*n per matmul. Softmax, norms, biases and activations are
// excluded; the analytic cost model uses the same convention.
class FlopCounter {
 public:
  void add(uint64_t flops);
  void reset();
  uint64_t total() const { return total_; }
  const std::map<std::string, uint64_t>& per_tag() const { return per_tag_; }
  uint64_t tagged(const std::string& tag) const;
  // Sum of tags sharing a prefix, e.g. "enc." aggregates all encoder layers.
  uint64_t tagged_prefix(const std::string& prefix) const;

 private:
  uint64_t total_ = 0;
  std::map<std::string, uint64_t> per_tag_;
};

FlopCounter& flop_counter();

// Scoped FLOP tag; nested scopes concatenate with '.'.
class FlopScope {
 public:
  explicit FlopScope(const std::string& tag);
  ~FlopScope();
  FlopScope(const FlopScope&) = delete;
  FlopScope& operator=(const FlopScope&) = delete;
};

// Disables graph construction inside the scope. Forward values are
// unaffected; results simply carry no backward edges.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

bool grad_enabled();

struct TensorNode;

// Dense row-major tensor of doubles with reverse-mode autodiff. A Tensor is
// a cheap shared handle; values are immutable after construction except for
// gradient accumulation on leaves.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor full(std::vector<int> shape, double value, bool requires_grad = false);
  static Tensor from_data(std::vector<int> shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor scalar(double v);
  // N(mean, stddev) entries drawn from rng in row-major order.
  static Tensor randn(std::vector<int> shape, Rng& rng, double stddev, double mean = 0.0,
                      bool requires_grad = false);
  static Tensor uniform(std::vector<int> shape, Rng& rng, double lo, double hi,
                        bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const std::vector<int>& shape() const;
  int ndim() const;
  int dim(int i) const;
  int64_t numel() const;
  bool requires_grad() const;
  const std::vector<double>& data() const;
  double item() const;  // scalar only
  double at(int r, int c) const;

  bool has_grad() const;
  const std::vector<double>& grad() const;  // throws if absent
  void zero_grad();

  const std::string& name() const;
  void set_name(const std::string& n);

  // In-place update for optimizers; only valid on leaf parameters.
  void apply_update(const std::vector<double>& new_data);
  // Rounds stored values through f32, matching checkpoint/plugin precision.
  void quantize_f32();

  TensorNode* node() const { return node_.get(); }
  std::shared_ptr<TensorNode> node_ptr() const { return node_; }

  explicit Tensor(std::shared_ptr<TensorNode> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<TensorNode> node_;
};

struct TensorNode {
  std::vector<int> shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::vector<double> grad;  // empty until populated by backward
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward_fn;
  uint64_t node_id = 0;
  std::string name;

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  std::vector<double>& ensure_grad();
};

// --- forward primitives (each registers its backward rule) ---

// [m x k] . [k x n] -> [m x n]; adds exactly 2*m*k*n to the flop counter.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);  // 2-D
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // elementwise
Tensor scale(const Tensor& a, double c);
// [m x n] + [n] broadcast over rows
Tensor add_rowvec(const Tensor& a, const Tensor& v);
// [m x n] * [n] broadcast over rows
Tensor mul_rowvec(const Tensor& a, const Tensor& v);
Tensor relu(const Tensor& a);
// softmax over the last axis; rows sum to 1 within 1e-12 at 64-bit
Tensor softmax_rows(const Tensor& a);
// zero-mean unit-variance per row (eps added to variance); no scale/shift
Tensor layer_norm_rows(const Tensor& a, double eps = 1e-6);
// rows of table [V x d] selected by ids -> [len(ids) x d]
Tensor embedding(const Tensor& table, const std::vector<int>& ids);
Tensor concat(const std::vector<Tensor>& parts, int axis);  // 2-D, axis 0 or 1
Tensor slice_rows(const Tensor& a, int r0, int len);
Tensor slice_cols(const Tensor& a, int c0, int len);
// mean over rows of -log softmax(logits)[target]; logits [n x v]
Tensor cross_entropy_rows(const Tensor& logits, const std::vector<int>& targets);
Tensor sum_all(const Tensor& a);  // -> scalar

// Populates grad on every node reachable from loss; deterministic order.
void backward(const Tensor& loss);

struct GradCheckReport {
  double max_rel_error = 0.0;
  bool deterministic = true;
  bool passed = false;
  // (param name, max rel error within that param)
  std::vector<std::pair<std::string, double>> per_param;
};

// Central-difference check: (f(t+eps e) - f(t-eps e)) / 2 eps vs analytic
// gradients of f(). f must be deterministic and return a scalar.
GradCheckReport grad_check(const std::function<Tensor()>& f, const std::vector<Tensor>& params,
                           double step = 1e-5, double tol = 1e-4);

}  // namespace docplug
