#include "mrg/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <mutex>
#include <sstream>
#include <unordered_set>

namespace mrg {

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (auto s : shape) n *= s;
  return n;
}

namespace {

thread_local std::uint64_t g_seq = 0;
thread_local bool g_grad_enabled = true;

std::atomic<bool> g_fault_active{false};
std::mutex g_fault_mutex;
std::string g_fault_op;

bool fault_matches(const char* op) {
  if (!g_fault_active.load(std::memory_order_relaxed)) return false;
  std::lock_guard lock(g_fault_mutex);
  return g_fault_op == op;
}

void check_shape(bool ok, const char* op, const Shape& a, const Shape& b) {
  if (!ok) {
    throw ShapeError(std::string(op) + ": incompatible shapes " + shape_string(a) + " and " +
                     shape_string(b));
  }
}

void require_matrix(const char* op, const Shape& s) {
  if (s.size() != 2) throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_string(s));
}

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

template <typename T>
Tensor<T> record(Shape shape, std::vector<T> value, const char* op, std::vector<NodePtr<T>> parents,
                 std::function<void(Node<T>&)> backward) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  node->seq = ++g_seq;
  const bool any = g_grad_enabled && std::any_of(parents.begin(), parents.end(),
                               [](const NodePtr<T>& p) { return p->requires_grad; });
  if (any) {
    node->requires_grad = true;
    node->parents = std::move(parents);
    node->backward = std::move(backward);
  }
  return Tensor<T>(std::move(node));
}

template <typename T>
bool wants(const NodePtr<T>& p) {
  return p->requires_grad;
}

template <typename T>
T stable_sigmoid(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

struct AxisSplit {
  std::size_t outer, extent, inner;
};

AxisSplit split_axis(const Shape& s, std::size_t axis) {
  AxisSplit a{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) a.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) a.inner *= s[i];
  return a;
}

}  // namespace

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

namespace testing {
void inject_adjoint_fault(std::string op) {
  std::lock_guard lock(g_fault_mutex);
  g_fault_op = std::move(op);
  g_fault_active = true;
}
void clear_adjoint_fault() {
  std::lock_guard lock(g_fault_mutex);
  g_fault_op.clear();
  g_fault_active = false;
}
}  // namespace testing

// ---- Tensor ----------------------------------------------------------------

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T fill, bool requires_grad) {
  const auto n = shape_size(shape);
  return from(std::move(shape), std::vector<T>(n, fill), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> values, bool requires_grad) {
  for (auto d : shape) {
    if (d == 0) throw ShapeError("tensor extents must be positive, got " + shape_string(shape));
  }
  if (shape.empty() || shape_size(shape) != values.size()) {
    throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape " +
                     shape_string(shape));
  }
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  node->seq = ++g_seq;
  return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T v, bool requires_grad) {
  return from({1}, {v}, requires_grad);
}

template <typename T>
std::size_t Tensor<T>::rows() const {
  return rank() == 2 ? shape()[0] : 1;
}

template <typename T>
std::size_t Tensor<T>::cols() const {
  return rank() == 2 ? shape()[1] : shape()[0];
}

template <typename T>
T Tensor<T>::item() const {
  if (size() != 1) throw ShapeError("item() on non-scalar tensor " + shape_string(shape()));
  return node_->value[0];
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return from(shape(), node_->value, false);
}

template <typename T>
void Tensor<T>::backward() const {
  if (size() != 1) throw ShapeError("backward() needs a scalar root, got " + shape_string(shape()));
  const T one[] = {T(1)};
  backward(one);
}

template <typename T>
void Tensor<T>::backward(std::span<const T> seed) const {
  if (seed.size() != size()) throw ShapeError("backward seed has " + std::to_string(seed.size()) + " values for " + shape_string(shape()));
  if (!node_->requires_grad) throw std::logic_error("backward() on a tensor with no recorded inputs");

  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<Node<T>*> stack{node_.get()};
  seen.insert(node_.get());
  while (!stack.empty()) {
    Node<T>* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (auto& p : n->parents) {
      if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
    }
  }
  std::sort(order.begin(), order.end(), [](const Node<T>* a, const Node<T>* b) { return a->seq > b->seq; });

  for (Node<T>* n : order) {
    if (!n->is_leaf()) n->grad.assign(n->value.size(), T(0));
  }
  auto& root = node_->ensure_grad();
  for (std::size_t i = 0; i < seed.size(); ++i) root[i] += seed[i];

  for (Node<T>* n : order) {
    if (!n->backward) continue;
    if (fault_matches(n->op)) {
      for (auto& g : n->grad) g *= T(1.5);
    }
    n->backward(*n);
  }
}

// ---- ops -------------------------------------------------------------------

namespace {

// Fixed 8-lane accumulation order.
template <typename T>
T dot(const T* a, const T* b, std::size_t n) {
  T acc[8] = {};
  std::size_t j = 0;
  for (; j + 8 <= n; j += 8)
    for (std::size_t l = 0; l < 8; ++l) acc[l] += a[j + l] * b[j + l];
  T s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
  for (; j < n; ++j) s += a[j] * b[j];
  return s;
}

}  // namespace

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_matrix("matmul", a.shape());
  require_matrix("matmul", b.shape());
  check_shape(a.cols() == b.rows(), "matmul", a.shape(), b.shape());
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<T> out(m * n, T(0));
  const T* A = a.values().data();
  const T* B = b.values().data();
  for (std::size_t i = 0; i < m; ++i) {
    T* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = A[i * k + p];
      if (av == T(0)) continue;
      const T* brow = B + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
  return record<T>({m, n}, std::move(out), "matmul", {a.node_ptr(), b.node_ptr()},
                   [m, k, n](Node<T>& self) {
                     auto& pa = self.parents[0];
                     auto& pb = self.parents[1];
                     const T* G = self.grad.data();
                     if (wants(pa)) {
                       auto& ga = pa->ensure_grad();
                       const T* B = pb->value.data();
                       for (std::size_t i = 0; i < m; ++i) {
                         for (std::size_t p = 0; p < k; ++p) {
                           ga[i * k + p] += dot(G + i * n, B + p * n, n);
                         }
                       }
                     }
                     if (wants(pb)) {
                       auto& gb = pb->ensure_grad();
                       const T* A = pa->value.data();
                       for (std::size_t i = 0; i < m; ++i) {
                         const T* grow = G + i * n;
                         for (std::size_t p = 0; p < k; ++p) {
                           const T av = A[i * k + p];
                           if (av == T(0)) continue;
                           T* gbrow = gb.data() + p * n;
                           for (std::size_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
                         }
                       }
                     }
                   });
}

namespace {

template <typename T, typename F, typename DA, typename DB>
Tensor<T> binary(const char* op, const Tensor<T>& a, const Tensor<T>& b, F f, DA da, DB db) {
  check_shape(a.shape() == b.shape(), op, a.shape(), b.shape());
  const auto n = a.size();
  std::vector<T> out(n);
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t i = 0; i < n; ++i) out[i] = f(av[i], bv[i]);
  return record<T>(a.shape(), std::move(out), op, {a.node_ptr(), b.node_ptr()},
                   [da, db](Node<T>& self) {
                     auto& pa = self.parents[0];
                     auto& pb = self.parents[1];
                     const auto n = self.grad.size();
                     if (wants(pa)) {
                       auto& g = pa->ensure_grad();
                       for (std::size_t i = 0; i < n; ++i)
                         g[i] += da(self.grad[i], pa->value[i], pb->value[i]);
                     }
                     if (wants(pb)) {
                       auto& g = pb->ensure_grad();
                       for (std::size_t i = 0; i < n; ++i)
                         g[i] += db(self.grad[i], pa->value[i], pb->value[i]);
                     }
                   });
}

template <typename T, typename F, typename D>
Tensor<T> unary(const char* op, const Tensor<T>& x, F f, D d) {
  const auto n = x.size();
  std::vector<T> out(n);
  const auto xv = x.values();
  for (std::size_t i = 0; i < n; ++i) out[i] = f(xv[i]);
  return record<T>(x.shape(), std::move(out), op, {x.node_ptr()}, [d](Node<T>& self) {
    auto& px = self.parents[0];
    auto& g = px->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += d(self.grad[i], px->value[i], self.value[i]);
  });
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary<T>("add", a, b, [](T x, T y) { return x + y; }, [](T g, T, T) { return g; },
                   [](T g, T, T) { return g; });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary<T>("sub", a, b, [](T x, T y) { return x - y; }, [](T g, T, T) { return g; },
                   [](T g, T, T) { return -g; });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary<T>("mul", a, b, [](T x, T y) { return x * y; }, [](T g, T, T y) { return g * y; },
                   [](T g, T x, T) { return g * x; });
}

template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  const std::size_t m = x.rows(), n = x.cols();
  check_shape(bias.size() == n && bias.rows() == 1, "add_bias", x.shape(), bias.shape());
  std::vector<T> out(x.values().begin(), x.values().end());
  const auto bv = bias.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += bv[j];
  return record<T>(x.shape(), std::move(out), "add_bias", {x.node_ptr(), bias.node_ptr()},
                   [m, n](Node<T>& self) {
                     auto& px = self.parents[0];
                     auto& pb = self.parents[1];
                     if (wants(px)) {
                       auto& g = px->ensure_grad();
                       for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                     }
                     if (wants(pb)) {
                       auto& g = pb->ensure_grad();
                       for (std::size_t i = 0; i < m; ++i)
                         for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j];
                     }
                   });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T s) {
  return unary<T>("scale", x, [s](T v) { return v * s; }, [s](T g, T, T) { return g * s; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T s) {
  return unary<T>("add_scalar", x, [s](T v) { return v + s; }, [](T g, T, T) { return g; });
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& x) {
  return unary<T>("tanh", x, [](T v) { return std::tanh(v); },
                  [](T g, T, T y) { return g * (T(1) - y * y); });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return unary<T>("sigmoid", x, [](T v) { return stable_sigmoid(v); },
                  [](T g, T, T y) { return g * y * (T(1) - y); });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  if (axis >= x.rank()) throw ShapeError("softmax: axis out of range for " + shape_string(x.shape()));
  const auto s = split_axis(x.shape(), axis);
  std::vector<T> out(x.size());
  const auto xv = x.values();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.extent * s.inner + in;
      T mx = xv[base];
      for (std::size_t k = 1; k < s.extent; ++k) mx = std::max(mx, xv[base + k * s.inner]);
      T total = T(0);
      for (std::size_t k = 0; k < s.extent; ++k) {
        const T e = std::exp(xv[base + k * s.inner] - mx);
        out[base + k * s.inner] = e;
        total += e;
      }
      for (std::size_t k = 0; k < s.extent; ++k) out[base + k * s.inner] /= total;
    }
  }
  return record<T>(x.shape(), std::move(out), "softmax", {x.node_ptr()}, [s](Node<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    const auto& y = self.value;
    const auto& dy = self.grad;
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        const std::size_t base = o * s.extent * s.inner + in;
        T dot = T(0);
        for (std::size_t k = 0; k < s.extent; ++k) dot += dy[base + k * s.inner] * y[base + k * s.inner];
        for (std::size_t k = 0; k < s.extent; ++k) {
          const auto i = base + k * s.inner;
          g[i] += y[i] * (dy[i] - dot);
        }
      }
    }
  });
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& x, std::size_t axis) {
  if (axis >= x.rank()) throw ShapeError("log_softmax: axis out of range for " + shape_string(x.shape()));
  const auto s = split_axis(x.shape(), axis);
  std::vector<T> out(x.size());
  const auto xv = x.values();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.extent * s.inner + in;
      T mx = xv[base];
      for (std::size_t k = 1; k < s.extent; ++k) mx = std::max(mx, xv[base + k * s.inner]);
      T total = T(0);
      for (std::size_t k = 0; k < s.extent; ++k) total += std::exp(xv[base + k * s.inner] - mx);
      const T lse = mx + std::log(total);
      for (std::size_t k = 0; k < s.extent; ++k) out[base + k * s.inner] = xv[base + k * s.inner] - lse;
    }
  }
  return record<T>(x.shape(), std::move(out), "log_softmax", {x.node_ptr()}, [s](Node<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        const std::size_t base = o * s.extent * s.inner + in;
        T total = T(0);
        for (std::size_t k = 0; k < s.extent; ++k) total += self.grad[base + k * s.inner];
        for (std::size_t k = 0; k < s.extent; ++k) {
          const auto i = base + k * s.inner;
          g[i] += self.grad[i] - std::exp(self.value[i]) * total;
        }
      }
    }
  });
}

template <typename T>
Tensor<T> concat(std::span<const Tensor<T>> parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  if (parts.size() == 1) return parts[0];
  const bool vectors = parts[0].rank() == 1;
  if (vectors && axis != 0) throw ShapeError("concat: vectors only concatenate along axis 0");
  if (!vectors) require_matrix("concat", parts[0].shape());
  if (axis > 1) throw ShapeError("concat: axis must be 0 or 1");

  std::vector<NodePtr<T>> parents;
  std::vector<std::size_t> extents;
  const std::size_t fixed = vectors ? 1 : (axis == 0 ? parts[0].cols() : parts[0].rows());
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != parts[0].rank()) throw ShapeError("concat: mixed ranks");
    if (!vectors) {
      const std::size_t other = axis == 0 ? p.cols() : p.rows();
      check_shape(other == fixed, "concat", parts[0].shape(), p.shape());
    }
    const std::size_t e = vectors ? p.size() : (axis == 0 ? p.rows() : p.cols());
    extents.push_back(e);
    total += e;
    parents.push_back(p.node_ptr());
  }

  Shape shape = vectors ? Shape{total} : (axis == 0 ? Shape{total, fixed} : Shape{fixed, total});
  std::vector<T> out;
  out.reserve(shape_size(shape));
  if (vectors || axis == 0) {
    for (const auto& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
    return record<T>(std::move(shape), std::move(out), "concat", std::move(parents), [](Node<T>& self) {
      std::size_t offset = 0;
      for (auto& p : self.parents) {
        const auto n = p->value.size();
        if (wants(p)) {
          auto& g = p->ensure_grad();
          for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[offset + i];
        }
        offset += n;
      }
    });
  }
  out.resize(fixed * total);
  {
    std::size_t col = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
      const auto pv = parts[k].values();
      const auto w = extents[k];
      for (std::size_t r = 0; r < fixed; ++r)
        for (std::size_t c = 0; c < w; ++c) out[r * total + col + c] = pv[r * w + c];
      col += w;
    }
  }
  return record<T>(std::move(shape), std::move(out), "concat", std::move(parents),
                   [extents, fixed, total](Node<T>& self) {
                     std::size_t col = 0;
                     for (std::size_t k = 0; k < self.parents.size(); ++k) {
                       auto& p = self.parents[k];
                       const auto w = extents[k];
                       if (wants(p)) {
                         auto& g = p->ensure_grad();
                         for (std::size_t r = 0; r < fixed; ++r)
                           for (std::size_t c = 0; c < w; ++c) g[r * w + c] += self.grad[r * total + col + c];
                       }
                       col += w;
                     }
                   });
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t length) {
  require_matrix("slice", x.shape());
  const std::size_t m = x.rows(), n = x.cols();
  const std::size_t extent = axis == 0 ? m : n;
  if (axis > 1 || length == 0 || start + length > extent) {
    throw ShapeError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") on axis " + std::to_string(axis) + " of " + shape_string(x.shape()));
  }
  const auto xv = x.values();
  if (axis == 0) {
    std::vector<T> out(xv.begin() + start * n, xv.begin() + (start + length) * n);
    return record<T>({length, n}, std::move(out), "slice", {x.node_ptr()}, [start, n](Node<T>& self) {
      auto& g = self.parents[0]->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[start * n + i] += self.grad[i];
    });
  }
  std::vector<T> out(m * length);
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < length; ++c) out[r * length + c] = xv[r * n + start + c];
  return record<T>({m, length}, std::move(out), "slice", {x.node_ptr()}, [m, n, start, length](Node<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < length; ++c) g[r * n + start + c] += self.grad[r * length + c];
  });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
  require_matrix("transpose", x.shape());
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<T> out(m * n);
  const auto xv = x.values();
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) out[c * m + r] = xv[r * n + c];
  return record<T>({n, m}, std::move(out), "transpose", {x.node_ptr()}, [m, n](Node<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < n; ++c) g[r * n + c] += self.grad[c * m + r];
  });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  check_shape(shape_size(shape) == x.size(), "reshape", x.shape(), shape);
  std::vector<T> out(x.values().begin(), x.values().end());
  return record<T>(std::move(shape), std::move(out), "reshape", {x.node_ptr()}, [](Node<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& table, std::span<const std::size_t> rows) {
  require_matrix("gather_rows", table.shape());
  if (rows.empty()) throw ShapeError("gather_rows: empty index list");
  const std::size_t n = table.cols();
  const auto tv = table.values();
  std::vector<T> out(rows.size() * n);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= table.rows()) {
      throw std::out_of_range("gather_rows: row " + std::to_string(rows[i]) + " outside table of " +
                              std::to_string(table.rows()) + " rows");
    }
    std::copy_n(tv.begin() + rows[i] * n, n, out.begin() + i * n);
  }
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return record<T>({rows.size(), n}, std::move(out), "gather_rows", {table.node_ptr()},
                   [idx = std::move(idx), n](Node<T>& self) {
                     auto& g = self.parents[0]->ensure_grad();
                     for (std::size_t i = 0; i < idx.size(); ++i)
                       for (std::size_t c = 0; c < n; ++c) g[idx[i] * n + c] += self.grad[i * n + c];
                   });
}

template <typename T>
Tensor<T> mean_pool(const Tensor<T>& x, std::size_t axis, const Mask& mask) {
  require_matrix("mean_pool", x.shape());
  const std::size_t m = x.rows(), n = x.cols();
  if (axis > 1) throw ShapeError("mean_pool: axis must be 0 or 1");
  const std::size_t extent = axis == 0 ? m : n;
  if (mask.size() != extent) {
    throw ShapeError("mean_pool: mask length " + std::to_string(mask.size()) + " does not match axis extent " +
                     std::to_string(extent));
  }
  const auto count = static_cast<std::size_t>(std::count_if(mask.begin(), mask.end(), [](auto v) { return v != 0; }));
  if (count == 0) throw std::invalid_argument("mean_pool: every position along the pooled axis is masked");
  const T inv = T(1) / static_cast<T>(count);
  const auto xv = x.values();
  if (axis == 0) {
    std::vector<T> out(n, T(0));
    for (std::size_t r = 0; r < m; ++r) {
      if (!mask[r]) continue;
      for (std::size_t c = 0; c < n; ++c) out[c] += xv[r * n + c];
    }
    for (auto& v : out) v *= inv;
    return record<T>({1, n}, std::move(out), "mean_pool", {x.node_ptr()}, [mask, m, n, inv](Node<T>& self) {
      auto& g = self.parents[0]->ensure_grad();
      for (std::size_t r = 0; r < m; ++r) {
        if (!mask[r]) continue;
        for (std::size_t c = 0; c < n; ++c) g[r * n + c] += self.grad[c] * inv;
      }
    });
  }
  std::vector<T> out(m, T(0));
  for (std::size_t r = 0; r < m; ++r) {
    for (std::size_t c = 0; c < n; ++c)
      if (mask[c]) out[r] += xv[r * n + c];
    out[r] *= inv;
  }
  return record<T>({m, 1}, std::move(out), "mean_pool", {x.node_ptr()}, [mask, m, n, inv](Node<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < n; ++c)
        if (mask[c]) g[r * n + c] += self.grad[r] * inv;
  });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
  const std::size_t m = x.rows(), n = x.cols();
  check_shape(gain.size() == n && bias.size() == n, "layer_norm", x.shape(), gain.shape());
  const auto xv = x.values();
  const auto gv = gain.values();
  const auto bv = bias.values();
  std::vector<T> out(m * n), xhat(m * n), inv_std(m);
  for (std::size_t r = 0; r < m; ++r) {
    T mu = T(0);
    for (std::size_t c = 0; c < n; ++c) mu += xv[r * n + c];
    mu /= static_cast<T>(n);
    T var = T(0);
    for (std::size_t c = 0; c < n; ++c) {
      const T d = xv[r * n + c] - mu;
      var += d * d;
    }
    var /= static_cast<T>(n);
    inv_std[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t c = 0; c < n; ++c) {
      const auto i = r * n + c;
      xhat[i] = (xv[i] - mu) * inv_std[r];
      out[i] = gv[c] * xhat[i] + bv[c];
    }
  }
  return record<T>(x.shape(), std::move(out), "layer_norm", {x.node_ptr(), gain.node_ptr(), bias.node_ptr()},
                   [m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& self) {
                     auto& px = self.parents[0];
                     auto& pg = self.parents[1];
                     auto& pb = self.parents[2];
                     const auto& dy = self.grad;
                     if (wants(pg)) {
                       auto& g = pg->ensure_grad();
                       for (std::size_t i = 0; i < m * n; ++i) g[i % n] += dy[i] * xhat[i];
                     }
                     if (wants(pb)) {
                       auto& g = pb->ensure_grad();
                       for (std::size_t i = 0; i < m * n; ++i) g[i % n] += dy[i];
                     }
                     if (wants(px)) {
                       auto& g = px->ensure_grad();
                       const auto& gv = pg->value;
                       for (std::size_t r = 0; r < m; ++r) {
                         T mean_d = T(0), mean_dx = T(0);
                         for (std::size_t c = 0; c < n; ++c) {
                           const T d = dy[r * n + c] * gv[c];
                           mean_d += d;
                           mean_dx += d * xhat[r * n + c];
                         }
                         mean_d /= static_cast<T>(n);
                         mean_dx /= static_cast<T>(n);
                         for (std::size_t c = 0; c < n; ++c) {
                           const auto i = r * n + c;
                           const T d = dy[i] * gv[c];
                           g[i] += inv_std[r] * (d - mean_d - xhat[i] * mean_dx);
                         }
                       }
                     }
                   });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T total = T(0);
  for (auto v : x.values()) total += v;
  return record<T>({1}, {total}, "sum", {x.node_ptr()}, [](Node<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (auto& v : g) v += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  T total = T(0);
  for (auto v : x.values()) total += v;
  const T inv = T(1) / static_cast<T>(x.size());
  return record<T>({1}, {total * inv}, "mean", {x.node_ptr()}, [inv](Node<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (auto& v : g) v += self.grad[0] * inv;
  });
}

template <typename T>
Tensor<T> nll_loss(const Tensor<T>& logits, std::span<const std::size_t> targets) {
  const std::size_t m = logits.rows(), n = logits.cols();
  if (targets.size() != m) {
    throw ShapeError("nll_loss: " + std::to_string(targets.size()) + " targets for logits " +
                     shape_string(logits.shape()));
  }
  const auto xv = logits.values();
  std::vector<T> probs(m * n);
  T total = T(0);
  for (std::size_t r = 0; r < m; ++r) {
    if (targets[r] >= n) throw std::out_of_range("nll_loss: target id outside the logit width");
    const T* row = xv.data() + r * n;
    const T mx = *std::max_element(row, row + n);
    T z = T(0);
    for (std::size_t c = 0; c < n; ++c) z += std::exp(row[c] - mx);
    const T lse = mx + std::log(z);
    for (std::size_t c = 0; c < n; ++c) probs[r * n + c] = std::exp(row[c] - lse);
    total += lse - row[targets[r]];
  }
  std::vector<std::size_t> tgt(targets.begin(), targets.end());
  return record<T>({1}, {total}, "nll_loss", {logits.node_ptr()},
                   [probs = std::move(probs), tgt = std::move(tgt), n](Node<T>& self) {
                     auto& g = self.parents[0]->ensure_grad();
                     const T up = self.grad[0];
                     for (std::size_t i = 0; i < probs.size(); ++i) g[i] += up * probs[i];
                     for (std::size_t r = 0; r < tgt.size(); ++r) g[r * n + tgt[r]] -= up;
                   });
}

template <typename T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, std::span<const std::uint8_t> targets, const Mask& mask) {
  const auto n = logits.size();
  if (targets.size() != n || mask.size() != n) {
    throw ShapeError("bce_with_logits: targets/mask length must match logits " + shape_string(logits.shape()));
  }
  const auto count = static_cast<std::size_t>(std::count_if(mask.begin(), mask.end(), [](auto v) { return v != 0; }));
  if (count == 0) throw std::invalid_argument("bce_with_logits: no unmasked positions");
  const T inv = T(1) / static_cast<T>(count);
  const auto xv = logits.values();
  T total = T(0);
  for (std::size_t i = 0; i < n; ++i) {
    if (!mask[i]) continue;
    const T x = xv[i];
    const T y = targets[i] ? T(1) : T(0);
    total += std::max(x, T(0)) - x * y + std::log1p(std::exp(-std::abs(x)));
  }
  std::vector<std::uint8_t> tgt(targets.begin(), targets.end());
  return record<T>({1}, {total * inv}, "bce_with_logits", {logits.node_ptr()},
                   [tgt = std::move(tgt), mask, inv](Node<T>& self) {
                     auto& px = self.parents[0];
                     auto& g = px->ensure_grad();
                     const T up = self.grad[0] * inv;
                     for (std::size_t i = 0; i < g.size(); ++i) {
                       if (!mask[i]) continue;
                       const T y = tgt[i] ? T(1) : T(0);
                       g[i] += up * (stable_sigmoid(px->value[i]) - y);
                     }
                   });
}

template <typename T>
Tensor<T> mask_bias(const Mask& mask, std::size_t rows) {
  const auto n = mask.size();
  std::vector<T> v(rows * n);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < n; ++c) v[r * n + c] = mask[c] ? T(0) : static_cast<T>(kMaskedLogit);
  return Tensor<T>::from({rows, n}, std::move(v));
}

template <typename T>
Tensor<T> row_mask(const Mask& mask, std::size_t cols) {
  const auto m = mask.size();
  std::vector<T> v(m * cols);
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < cols; ++c) v[r * cols + c] = mask[r] ? T(1) : T(0);
  return Tensor<T>::from({m, cols}, std::move(v));
}

#define MRG_INSTANTIATE(T)                                                                            \
  template class Tensor<T>;                                                                           \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                         \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                         \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                         \
  template Tensor<T> add_bias(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> scale(const Tensor<T>&, T);                                                      \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                                 \
  template Tensor<T> tanh(const Tensor<T>&);                                                          \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                       \
  template Tensor<T> softmax(const Tensor<T>&, std::size_t);                                          \
  template Tensor<T> log_softmax(const Tensor<T>&, std::size_t);                                      \
  template Tensor<T> concat(std::span<const Tensor<T>>, std::size_t);                                 \
  template Tensor<T> slice(const Tensor<T>&, std::size_t, std::size_t, std::size_t);                  \
  template Tensor<T> transpose(const Tensor<T>&);                                                     \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                                \
  template Tensor<T> gather_rows(const Tensor<T>&, std::span<const std::size_t>);                     \
  template Tensor<T> mean_pool(const Tensor<T>&, std::size_t, const Mask&);                           \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);             \
  template Tensor<T> sum(const Tensor<T>&);                                                           \
  template Tensor<T> mean(const Tensor<T>&);                                                          \
  template Tensor<T> nll_loss(const Tensor<T>&, std::span<const std::size_t>);                        \
  template Tensor<T> bce_with_logits(const Tensor<T>&, std::span<const std::uint8_t>, const Mask&);   \
  template Tensor<T> mask_bias(const Mask&, std::size_t);                                             \
  template Tensor<T> row_mask(const Mask&, std::size_t);

MRG_INSTANTIATE(float)
MRG_INSTANTIATE(double)

#undef MRG_INSTANTIATE

}  // namespace mrg
