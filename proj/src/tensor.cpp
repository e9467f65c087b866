#include "docplug/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <unordered_set>

namespace docplug {

namespace {

thread_local FlopCounter g_flops;
thread_local std::vector<std::string> g_tag_stack;
thread_local bool g_grad_enabled = true;
std::atomic<uint64_t> g_next_node_id{1};

std::string current_tag() {
  if (g_tag_stack.empty()) return "untagged";
  return g_tag_stack.back();
}

int64_t shape_numel(const std::vector<int>& shape) {
  int64_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw ShapeError("non-positive dimension in shape");
    n *= d;
  }
  return n;
}

std::shared_ptr<TensorNode> make_node(std::vector<int> shape, std::vector<double> data) {
  auto n = std::make_shared<TensorNode>();
  if (shape_numel(shape) != static_cast<int64_t>(data.size())) {
    throw ShapeError("data length does not match shape");
  }
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->node_id = g_next_node_id.fetch_add(1, std::memory_order_relaxed);
  return n;
}

// Wires the result into the graph when grad is enabled and any input needs it.
Tensor make_result(std::vector<int> shape, std::vector<double> data,
                   std::vector<std::shared_ptr<TensorNode>> parents,
                   std::function<void(TensorNode&)> bw) {
  auto n = make_node(std::move(shape), std::move(data));
  bool needs = false;
  if (g_grad_enabled) {
    for (const auto& p : parents) {
      if (p && p->requires_grad) {
        needs = true;
        break;
      }
    }
  }
  if (needs) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backward_fn = std::move(bw);
  }
  return Tensor(n);
}

void check_2d(const Tensor& t, const char* what) {
  if (!t.defined() || t.ndim() != 2) throw ShapeError(std::string(what) + ": expected 2-D tensor");
}

// Raw C = A.B used only inside backward rules; tagged separately so forward
// cost accounting stays untouched.
void raw_matmul_acc(const std::vector<double>& a, const std::vector<double>& b,
                    std::vector<double>& c, int m, int k, int n, bool transpose_a,
                    bool transpose_b) {
  g_flops.add(2ull * m * k * n);
  for (int i = 0; i < m; ++i) {
    for (int kk = 0; kk < k; ++kk) {
      double av = transpose_a ? a[static_cast<size_t>(kk) * m + i] : a[static_cast<size_t>(i) * k + kk];
      if (av == 0.0) continue;
      const double* brow = transpose_b ? nullptr : &b[static_cast<size_t>(kk) * n];
      double* crow = &c[static_cast<size_t>(i) * n];
      if (!transpose_b) {
        for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
      } else {
        for (int j = 0; j < n; ++j) crow[j] += av * b[static_cast<size_t>(j) * k + kk];
      }
    }
  }
}

}  // namespace

void FlopCounter::add(uint64_t flops) {
  total_ += flops;
  per_tag_[current_tag()] += flops;
}

void FlopCounter::reset() {
  total_ = 0;
  per_tag_.clear();
}

uint64_t FlopCounter::tagged(const std::string& tag) const {
  auto it = per_tag_.find(tag);
  return it == per_tag_.end() ? 0 : it->second;
}

uint64_t FlopCounter::tagged_prefix(const std::string& prefix) const {
  uint64_t sum = 0;
  for (const auto& [tag, v] : per_tag_) {
    if (tag.rfind(prefix, 0) == 0) sum += v;
  }
  return sum;
}

FlopCounter& flop_counter() { return g_flops; }

FlopScope::FlopScope(const std::string& tag) {
  if (g_tag_stack.empty()) {
    g_tag_stack.push_back(tag);
  } else {
    g_tag_stack.push_back(g_tag_stack.back() + "." + tag);
  }
}

FlopScope::~FlopScope() { g_tag_stack.pop_back(); }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

bool grad_enabled() { return g_grad_enabled; }

std::vector<double>& TensorNode::ensure_grad() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
  return grad;
}

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  int64_t n = shape_numel(shape);
  auto node = make_node(std::move(shape), std::vector<double>(static_cast<size_t>(n), 0.0));
  node->requires_grad = requires_grad && g_grad_enabled;
  return Tensor(node);
}

Tensor Tensor::full(std::vector<int> shape, double value, bool requires_grad) {
  int64_t n = shape_numel(shape);
  auto node = make_node(std::move(shape), std::vector<double>(static_cast<size_t>(n), value));
  node->requires_grad = requires_grad && g_grad_enabled;
  return Tensor(node);
}

Tensor Tensor::from_data(std::vector<int> shape, std::vector<double> data, bool requires_grad) {
  auto node = make_node(std::move(shape), std::move(data));
  node->requires_grad = requires_grad && g_grad_enabled;
  return Tensor(node);
}

Tensor Tensor::scalar(double v) { return from_data({1}, {v}); }

Tensor Tensor::randn(std::vector<int> shape, Rng& rng, double stddev, double mean,
                     bool requires_grad) {
  int64_t n = shape_numel(shape);
  std::vector<double> data(static_cast<size_t>(n));
  for (auto& v : data) v = rng.normal(mean, stddev);
  return from_data(std::move(shape), std::move(data), requires_grad);
}

Tensor Tensor::uniform(std::vector<int> shape, Rng& rng, double lo, double hi,
                       bool requires_grad) {
  int64_t n = shape_numel(shape);
  std::vector<double> data(static_cast<size_t>(n));
  for (auto& v : data) v = rng.uniform(lo, hi);
  return from_data(std::move(shape), std::move(data), requires_grad);
}

const std::vector<int>& Tensor::shape() const { return node_->shape; }
int Tensor::ndim() const { return static_cast<int>(node_->shape.size()); }
int Tensor::dim(int i) const { return node_->shape.at(static_cast<size_t>(i)); }
int64_t Tensor::numel() const { return node_->numel(); }
bool Tensor::requires_grad() const { return node_->requires_grad; }
const std::vector<double>& Tensor::data() const { return node_->data; }

double Tensor::item() const {
  if (numel() != 1) throw UsageError("item() on non-scalar tensor");
  return node_->data[0];
}

double Tensor::at(int r, int c) const {
  check_2d(*this, "at");
  return node_->data[static_cast<size_t>(r) * dim(1) + c];
}

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

const std::vector<double>& Tensor::grad() const {
  if (!has_grad()) throw UsageError("gradient absent on tensor '" + node_->name + "'");
  return node_->grad;
}

void Tensor::zero_grad() { node_->grad.clear(); }

const std::string& Tensor::name() const { return node_->name; }
void Tensor::set_name(const std::string& n) { node_->name = n; }

void Tensor::apply_update(const std::vector<double>& new_data) {
  if (node_->backward_fn) throw UsageError("apply_update on non-leaf tensor");
  if (new_data.size() != node_->data.size()) throw ShapeError("apply_update size mismatch");
  node_->data = new_data;
}

void Tensor::quantize_f32() {
  if (node_->backward_fn) throw UsageError("quantize_f32 on non-leaf tensor");
  for (auto& v : node_->data) v = static_cast<double>(static_cast<float>(v));
}

// ---------------------------------------------------------------------------
// primitives

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_2d(a, "matmul lhs");
  check_2d(b, "matmul rhs");
  int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  if (k != k2) {
    throw ShapeError("matmul inner dimensions disagree: " + std::to_string(k) + " vs " +
                     std::to_string(k2));
  }
  g_flops.add(2ull * m * k * n);
  std::vector<double> out(static_cast<size_t>(m) * n, 0.0);
  const auto& ad = a.data();
  const auto& bd = b.data();
  for (int i = 0; i < m; ++i) {
    const double* arow = &ad[static_cast<size_t>(i) * k];
    double* crow = &out[static_cast<size_t>(i) * n];
    for (int kk = 0; kk < k; ++kk) {
      double av = arow[kk];
      const double* brow = &bd[static_cast<size_t>(kk) * n];
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  auto an = a.node_ptr();
  auto bn = b.node_ptr();
  return make_result(
      {m, n}, std::move(out), {an, bn}, [an, bn, m, k, n](TensorNode& self) {
        FlopScope fs("backward");
        if (an->requires_grad) {
          raw_matmul_acc(self.grad, bn->data, an->ensure_grad(), m, n, k, false, true);
        }
        if (bn->requires_grad) {
          raw_matmul_acc(an->data, self.grad, bn->ensure_grad(), k, m, n, true, false);
        }
      });
}

Tensor transpose(const Tensor& a) {
  check_2d(a, "transpose");
  int m = a.dim(0), n = a.dim(1);
  std::vector<double> out(static_cast<size_t>(m) * n);
  const auto& ad = a.data();
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) out[static_cast<size_t>(j) * m + i] = ad[static_cast<size_t>(i) * n + j];
  }
  auto an = a.node_ptr();
  return make_result({n, m}, std::move(out), {an}, [an, m, n](TensorNode& self) {
    if (!an->requires_grad) return;
    auto& g = an->ensure_grad();
    for (int i = 0; i < m; ++i) {
      for (int j = 0; j < n; ++j) g[static_cast<size_t>(i) * n + j] += self.grad[static_cast<size_t>(j) * m + i];
    }
  });
}

namespace {

void check_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) throw ShapeError(std::string(what) + ": shape mismatch");
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  std::vector<double> out(a.data());
  const auto& bd = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] += bd[i];
  auto an = a.node_ptr();
  auto bn = b.node_ptr();
  return make_result(a.shape(), std::move(out), {an, bn}, [an, bn](TensorNode& self) {
    if (an->requires_grad) {
      auto& g = an->ensure_grad();
      for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (bn->requires_grad) {
      auto& g = bn->ensure_grad();
      for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  std::vector<double> out(a.data());
  const auto& bd = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] -= bd[i];
  auto an = a.node_ptr();
  auto bn = b.node_ptr();
  return make_result(a.shape(), std::move(out), {an, bn}, [an, bn](TensorNode& self) {
    if (an->requires_grad) {
      auto& g = an->ensure_grad();
      for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (bn->requires_grad) {
      auto& g = bn->ensure_grad();
      for (size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  std::vector<double> out(a.data());
  const auto& bd = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] *= bd[i];
  auto an = a.node_ptr();
  auto bn = b.node_ptr();
  return make_result(a.shape(), std::move(out), {an, bn}, [an, bn](TensorNode& self) {
    if (an->requires_grad) {
      auto& g = an->ensure_grad();
      for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bn->data[i];
    }
    if (bn->requires_grad) {
      auto& g = bn->ensure_grad();
      for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * an->data[i];
    }
  });
}

Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.data());
  for (auto& v : out) v *= c;
  auto an = a.node_ptr();
  return make_result(a.shape(), std::move(out), {an}, [an, c](TensorNode& self) {
    if (!an->requires_grad) return;
    auto& g = an->ensure_grad();
    for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * c;
  });
}

Tensor add_rowvec(const Tensor& a, const Tensor& v) {
  check_2d(a, "add_rowvec");
  if (v.ndim() != 1 || v.dim(0) != a.dim(1)) throw ShapeError("add_rowvec: vector length mismatch");
  int m = a.dim(0), n = a.dim(1);
  std::vector<double> out(a.data());
  const auto& vd = v.data();
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) out[static_cast<size_t>(i) * n + j] += vd[j];
  }
  auto an = a.node_ptr();
  auto vn = v.node_ptr();
  return make_result(a.shape(), std::move(out), {an, vn}, [an, vn, m, n](TensorNode& self) {
    if (an->requires_grad) {
      auto& g = an->ensure_grad();
      for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (vn->requires_grad) {
      auto& g = vn->ensure_grad();
      for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) g[j] += self.grad[static_cast<size_t>(i) * n + j];
      }
    }
  });
}

Tensor mul_rowvec(const Tensor& a, const Tensor& v) {
  check_2d(a, "mul_rowvec");
  if (v.ndim() != 1 || v.dim(0) != a.dim(1)) throw ShapeError("mul_rowvec: vector length mismatch");
  int m = a.dim(0), n = a.dim(1);
  std::vector<double> out(a.data());
  const auto& vd = v.data();
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) out[static_cast<size_t>(i) * n + j] *= vd[j];
  }
  auto an = a.node_ptr();
  auto vn = v.node_ptr();
  return make_result(a.shape(), std::move(out), {an, vn}, [an, vn, m, n](TensorNode& self) {
    if (an->requires_grad) {
      auto& g = an->ensure_grad();
      for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
          g[static_cast<size_t>(i) * n + j] += self.grad[static_cast<size_t>(i) * n + j] * vn->data[j];
        }
      }
    }
    if (vn->requires_grad) {
      auto& g = vn->ensure_grad();
      for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
          g[j] += self.grad[static_cast<size_t>(i) * n + j] * an->data[static_cast<size_t>(i) * n + j];
        }
      }
    }
  });
}

Tensor relu(const Tensor& a) {
  std::vector<double> out(a.data());
  for (auto& v : out) v = v > 0.0 ? v : 0.0;
  auto an = a.node_ptr();
  return make_result(a.shape(), std::move(out), {an}, [an](TensorNode& self) {
    if (!an->requires_grad) return;
    auto& g = an->ensure_grad();
    for (size_t i = 0; i < g.size(); ++i) {
      if (an->data[i] > 0.0) g[i] += self.grad[i];
    }
  });
}

Tensor softmax_rows(const Tensor& a) {
  check_2d(a, "softmax_rows");
  int m = a.dim(0), n = a.dim(1);
  if (n == 0) throw InputError("softmax over empty axis");
  std::vector<double> out(static_cast<size_t>(m) * n);
  const auto& ad = a.data();
  for (int i = 0; i < m; ++i) {
    const double* row = &ad[static_cast<size_t>(i) * n];
    double mx = row[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    double* orow = &out[static_cast<size_t>(i) * n];
    for (int j = 0; j < n; ++j) {
      orow[j] = std::exp(row[j] - mx);
      sum += orow[j];
    }
    for (int j = 0; j < n; ++j) orow[j] /= sum;
  }
  auto an = a.node_ptr();
  return make_result(a.shape(), std::move(out), {an}, [an, m, n](TensorNode& self) {
    if (!an->requires_grad) return;
    auto& g = an->ensure_grad();
    for (int i = 0; i < m; ++i) {
      const double* y = &self.data[static_cast<size_t>(i) * n];
      const double* dy = &self.grad[static_cast<size_t>(i) * n];
      double dot = 0.0;
      for (int j = 0; j < n; ++j) dot += y[j] * dy[j];
      for (int j = 0; j < n; ++j) g[static_cast<size_t>(i) * n + j] += y[j] * (dy[j] - dot);
    }
  });
}

Tensor layer_norm_rows(const Tensor& a, double eps) {
  check_2d(a, "layer_norm_rows");
  int m = a.dim(0), n = a.dim(1);
  if (n == 0) throw InputError("layer norm over empty axis");
  std::vector<double> out(static_cast<size_t>(m) * n);
  std::vector<double> inv_sigma(static_cast<size_t>(m));
  const auto& ad = a.data();
  for (int i = 0; i < m; ++i) {
    const double* row = &ad[static_cast<size_t>(i) * n];
    double mean = 0.0;
    for (int j = 0; j < n; ++j) mean += row[j];
    mean /= n;
    double var = 0.0;
    for (int j = 0; j < n; ++j) {
      double d = row[j] - mean;
      var += d * d;
    }
    var /= n;
    double is = 1.0 / std::sqrt(var + eps);
    inv_sigma[static_cast<size_t>(i)] = is;
    for (int j = 0; j < n; ++j) out[static_cast<size_t>(i) * n + j] = (row[j] - mean) * is;
  }
  auto an = a.node_ptr();
  return make_result(a.shape(), std::move(out), {an},
                     [an, m, n, inv_sigma = std::move(inv_sigma)](TensorNode& self) {
                       if (!an->requires_grad) return;
                       auto& g = an->ensure_grad();
                       for (int i = 0; i < m; ++i) {
                         const double* xh = &self.data[static_cast<size_t>(i) * n];
                         const double* dy = &self.grad[static_cast<size_t>(i) * n];
                         double mean_dy = 0.0, mean_dyxh = 0.0;
                         for (int j = 0; j < n; ++j) {
                           mean_dy += dy[j];
                           mean_dyxh += dy[j] * xh[j];
                         }
                         mean_dy /= n;
                         mean_dyxh /= n;
                         double is = inv_sigma[static_cast<size_t>(i)];
                         for (int j = 0; j < n; ++j) {
                           g[static_cast<size_t>(i) * n + j] +=
                               is * (dy[j] - mean_dy - xh[j] * mean_dyxh);
                         }
                       }
                     });
}

Tensor embedding(const Tensor& table, const std::vector<int>& ids) {
  check_2d(table, "embedding table");
  int v = table.dim(0), d = table.dim(1);
  if (ids.empty()) throw InputError("embedding: empty id list");
  for (int id : ids) {
    if (id < 0 || id >= v) {
      throw InputError("embedding id " + std::to_string(id) + " out of range [0, " +
                       std::to_string(v) + ")");
    }
  }
  int m = static_cast<int>(ids.size());
  std::vector<double> out(static_cast<size_t>(m) * d);
  const auto& td = table.data();
  for (int i = 0; i < m; ++i) {
    std::copy_n(&td[static_cast<size_t>(ids[static_cast<size_t>(i)]) * d], d,
                &out[static_cast<size_t>(i) * d]);
  }
  auto tn = table.node_ptr();
  return make_result({m, d}, std::move(out), {tn}, [tn, ids, d](TensorNode& self) {
    if (!tn->requires_grad) return;
    auto& g = tn->ensure_grad();
    for (size_t i = 0; i < ids.size(); ++i) {
      for (int j = 0; j < d; ++j) {
        g[static_cast<size_t>(ids[i]) * d + j] += self.grad[i * d + j];
      }
    }
  });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw InputError("concat: no parts");
  if (axis != 0 && axis != 1) throw ShapeError("concat: axis must be 0 or 1");
  for (const auto& p : parts) check_2d(p, "concat part");
  int fixed = parts[0].dim(1 - axis);
  int total = 0;
  for (const auto& p : parts) {
    if (p.dim(1 - axis) != fixed) throw ShapeError("concat: mismatched shapes");
    total += p.dim(axis);
  }
  int m = axis == 0 ? total : fixed;
  int n = axis == 0 ? fixed : total;
  std::vector<double> out(static_cast<size_t>(m) * n);
  std::vector<std::shared_ptr<TensorNode>> parents;
  parents.reserve(parts.size());
  int offset = 0;
  for (const auto& p : parts) {
    const auto& pd = p.data();
    int pm = p.dim(0), pn = p.dim(1);
    if (axis == 0) {
      std::copy(pd.begin(), pd.end(), out.begin() + static_cast<size_t>(offset) * n);
      offset += pm;
    } else {
      for (int i = 0; i < pm; ++i) {
        std::copy_n(&pd[static_cast<size_t>(i) * pn], pn,
                    &out[static_cast<size_t>(i) * n + offset]);
      }
      offset += pn;
    }
    parents.push_back(p.node_ptr());
  }
  return make_result({m, n}, std::move(out), std::move(parents), [axis, n](TensorNode& self) {
    int offset = 0;
    for (auto& pn_ : self.parents) {
      int pm = pn_->shape[0], pw = pn_->shape[1];
      if (pn_->requires_grad) {
        auto& g = pn_->ensure_grad();
        if (axis == 0) {
          for (int i = 0; i < pm; ++i) {
            for (int j = 0; j < pw; ++j) {
              g[static_cast<size_t>(i) * pw + j] +=
                  self.grad[static_cast<size_t>(offset + i) * n + j];
            }
          }
        } else {
          for (int i = 0; i < pm; ++i) {
            for (int j = 0; j < pw; ++j) {
              g[static_cast<size_t>(i) * pw + j] +=
                  self.grad[static_cast<size_t>(i) * n + offset + j];
            }
          }
        }
      }
      offset += axis == 0 ? pm : pw;
    }
  });
}

Tensor slice_rows(const Tensor& a, int r0, int len) {
  check_2d(a, "slice_rows");
  int m = a.dim(0), n = a.dim(1);
  if (r0 < 0 || len < 0 || r0 + len > m) throw ShapeError("slice_rows out of range");
  std::vector<double> out(static_cast<size_t>(len) * n);
  std::copy_n(&a.data()[static_cast<size_t>(r0) * n], static_cast<size_t>(len) * n, out.begin());
  auto an = a.node_ptr();
  return make_result({len, n}, std::move(out), {an}, [an, r0, len, n](TensorNode& self) {
    if (!an->requires_grad) return;
    auto& g = an->ensure_grad();
    for (int i = 0; i < len; ++i) {
      for (int j = 0; j < n; ++j) {
        g[static_cast<size_t>(r0 + i) * n + j] += self.grad[static_cast<size_t>(i) * n + j];
      }
    }
  });
}

Tensor slice_cols(const Tensor& a, int c0, int len) {
  check_2d(a, "slice_cols");
  int m = a.dim(0), n = a.dim(1);
  if (c0 < 0 || len < 0 || c0 + len > n) throw ShapeError("slice_cols out of range");
  std::vector<double> out(static_cast<size_t>(m) * len);
  const auto& ad = a.data();
  for (int i = 0; i < m; ++i) {
    std::copy_n(&ad[static_cast<size_t>(i) * n + c0], len, &out[static_cast<size_t>(i) * len]);
  }
  auto an = a.node_ptr();
  return make_result({m, len}, std::move(out), {an}, [an, c0, len, m, n](TensorNode& self) {
    if (!an->requires_grad) return;
    auto& g = an->ensure_grad();
    for (int i = 0; i < m; ++i) {
      for (int j = 0; j < len; ++j) {
        g[static_cast<size_t>(i) * n + c0 + j] += self.grad[static_cast<size_t>(i) * len + j];
      }
    }
  });
}

Tensor cross_entropy_rows(const Tensor& logits, const std::vector<int>& targets) {
  check_2d(logits, "cross_entropy logits");
  int m = logits.dim(0), v = logits.dim(1);
  if (static_cast<int>(targets.size()) != m) {
    throw ShapeError("cross_entropy: target count does not match logit rows");
  }
  if (m == 0) throw InputError("cross_entropy: no rows");
  for (int t : targets) {
    if (t < 0 || t >= v) {
      throw InputError("cross_entropy target " + std::to_string(t) + " outside vocabulary of " +
                       std::to_string(v));
    }
  }
  // keep row softmax for the backward rule
  std::vector<double> probs(static_cast<size_t>(m) * v);
  const auto& ld = logits.data();
  double loss = 0.0;
  for (int i = 0; i < m; ++i) {
    const double* row = &ld[static_cast<size_t>(i) * v];
    double mx = row[0];
    for (int j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    double* prow = &probs[static_cast<size_t>(i) * v];
    for (int j = 0; j < v; ++j) {
      prow[j] = std::exp(row[j] - mx);
      sum += prow[j];
    }
    for (int j = 0; j < v; ++j) prow[j] /= sum;
    loss -= std::log(prow[targets[static_cast<size_t>(i)]]);
  }
  loss /= m;
  auto ln = logits.node_ptr();
  return make_result({1}, {loss}, {ln},
                     [ln, targets, probs = std::move(probs), m, v](TensorNode& self) {
                       if (!ln->requires_grad) return;
                       double upstream = self.grad[0];
                       auto& g = ln->ensure_grad();
                       double inv_m = 1.0 / m;
                       for (int i = 0; i < m; ++i) {
                         for (int j = 0; j < v; ++j) {
                           double p = probs[static_cast<size_t>(i) * v + j];
                           double onehot = j == targets[static_cast<size_t>(i)] ? 1.0 : 0.0;
                           g[static_cast<size_t>(i) * v + j] += upstream * inv_m * (p - onehot);
                         }
                       }
                     });
}

Tensor sum_all(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  auto an = a.node_ptr();
  return make_result({1}, {s}, {an}, [an](TensorNode& self) {
    if (!an->requires_grad) return;
    auto& g = an->ensure_grad();
    for (auto& v : g) v += self.grad[0];
  });
}

// ---------------------------------------------------------------------------

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw UsageError("backward requires a scalar loss");
  }
  if (!loss.requires_grad()) {
    throw UsageError("backward: loss does not reach any parameter with requires_grad");
  }
  // Collect the reachable subgraph, then replay in reverse creation order.
  // Node ids are strictly increasing from parents to children, so sorting by
  // id descending is a deterministic topological order.
  std::vector<TensorNode*> reachable;
  std::unordered_set<TensorNode*> seen;
  std::vector<TensorNode*> stack{loss.node()};
  seen.insert(loss.node());
  while (!stack.empty()) {
    TensorNode* cur = stack.back();
    stack.pop_back();
    reachable.push_back(cur);
    for (const auto& p : cur->parents) {
      if (p && p->requires_grad && seen.insert(p.get()).second) {
        stack.push_back(p.get());
      }
    }
  }
  std::sort(reachable.begin(), reachable.end(),
            [](TensorNode* a, TensorNode* b) { return a->node_id > b->node_id; });
  loss.node()->ensure_grad()[0] += 1.0;
  for (TensorNode* node : reachable) {
    if (node->backward_fn && !node->grad.empty()) {
      node->backward_fn(*node);
    }
  }
}

GradCheckReport grad_check(const std::function<Tensor()>& f, const std::vector<Tensor>& params,
                           double step, double tol) {
  if (step <= 0.0) throw UsageError("grad_check: step must be positive");
  GradCheckReport report;

  auto eval = [&]() -> double {
    NoGradGuard ng;
    Tensor out = f();
    if (out.numel() != 1) throw UsageError("grad_check: f must return a scalar");
    return out.item();
  };
  double base1 = eval();
  double base2 = eval();
  if (base1 != base2) {
    report.deterministic = false;
    report.max_rel_error = std::numeric_limits<double>::infinity();
    return report;
  }

  for (const auto& p : params) p.node()->grad.clear();
  Tensor loss = f();
  if (loss.requires_grad()) backward(loss);  // constant f: analytic grads stay zero

  for (const auto& p : params) {
    TensorNode* node = p.node();
    std::vector<double> analytic =
        node->grad.empty() ? std::vector<double>(node->data.size(), 0.0) : node->grad;
    double param_max = 0.0;
    for (size_t i = 0; i < node->data.size(); ++i) {
      double saved = node->data[i];
      node->data[i] = saved + step;
      double up = eval();
      node->data[i] = saved - step;
      double down = eval();
      node->data[i] = saved;
      double numeric = (up - down) / (2.0 * step);
      double denom = std::max(1e-6, std::abs(analytic[i]) + std::abs(numeric));
      double rel = std::abs(analytic[i] - numeric) / denom;
      param_max = std::max(param_max, rel);
    }
    report.per_param.emplace_back(node->name.empty() ? "<unnamed>" : node->name, param_max);
    report.max_rel_error = std::max(report.max_rel_error, param_max);
  }
  for (const auto& p : params) p.node()->grad.clear();
  report.passed = report.deterministic && report.max_rel_error < tol;
  return report;
}

}  // namespace docplug
