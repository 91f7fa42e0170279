#pragma once

// Dense tensors with reverse-mode automatic differentiation.
//
// A Tensor is a cheap handle to a shared Node. Primitives create a new Node
// that remembers its parents and a closure that pushes the node's gradient
// back into them. backward() orders the reachable nodes topologically and
// runs the closures once each, in reverse.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "adaptcast/common.hpp"

namespace adaptcast::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

[[noreturn]] inline void shape_fail(const char* op, const Shape& a,
                                    const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) +
                   " and " + shape_str(b));
}

template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until a gradient reaches this node
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  bool is_leaf() const { return !backward; }
  T* ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad.data();
  }
};

namespace detail {
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

// Disables graph recording on this thread while alive.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(std::exchange(detail::grad_mode(), false)) {}
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Tensor from(Shape shape, std::vector<T> values,
                     bool requires_grad = false) {
    if (numel(shape) != values.size())
      throw ShapeError("tensor: " + std::to_string(values.size()) +
                       " values for shape " + shape_str(shape));
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }
  static Tensor full(Shape shape, T v, bool requires_grad = false) {
    const auto n = numel(shape);
    return from(std::move(shape), std::vector<T>(n, v), requires_grad);
  }
  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), T(0), requires_grad);
  }
  static Tensor scalar(T v) { return from({}, {v}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t size() const { return node_->value.size(); }

  std::span<const T> data() const { return node_->value; }
  std::span<T> mutable_data() { return node_->value; }
  const std::vector<T>& values() const { return node_->value; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return {node_->ensure_grad(), size()}; }
  void zero_grad() { node_->grad.clear(); }

  bool requires_grad() const { return node_->requires_grad; }
  const char* op() const { return node_->op; }

  T item() const {
    if (size() != 1)
      throw ContractError("item(): tensor of shape " + shape_str(shape()) +
                          " is not a scalar");
    return node_->value[0];
  }

  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

namespace detail {

template <class T>
bool any_requires_grad(std::initializer_list<const Tensor<T>*> ins) {
  if (!grad_mode()) return false;
  for (auto* t : ins)
    if (t->defined() && t->requires_grad()) return true;
  return false;
}

// Builds the output node. `bw` is attached only when some input needs grad.
template <class T>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> value,
                      std::vector<Tensor<T>> inputs,
                      std::function<void(Node<T>&)> bw) {
  auto n = std::make_shared<Node<T>>();
  n->op = op;
  n->shape = std::move(shape);
  n->value = std::move(value);
  bool needs = false;
  if (grad_mode())
    for (const auto& in : inputs)
      if (in.defined() && in.requires_grad()) needs = true;
  if (needs) {
    n->requires_grad = true;
    for (auto& in : inputs) n->parents.push_back(in.node());
    n->backward = std::move(bw);
  }
  return Tensor<T>(std::move(n));
}

template <class T>
void accumulate(Node<T>& parent, std::size_t i, T g) {
  if (!parent.requires_grad) return;
  parent.ensure_grad()[i] += g;
}

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapC = Eigen::Map<const RowMat<T>>;
template <class T>
using MapM = Eigen::Map<RowMat<T>>;

// Index maps from each output element to its source element in a and b under
// right-aligned broadcasting.
struct BroadcastPlan {
  Shape out;
  std::vector<std::size_t> ia, ib;
};

inline BroadcastPlan plan_broadcast(const char* op, const Shape& a,
                                    const Shape& b) {
  BroadcastPlan p;
  const std::size_t r = std::max(a.size(), b.size());
  Shape pa(r, 1), pb(r, 1);
  std::copy(a.begin(), a.end(), pa.begin() + (r - a.size()));
  std::copy(b.begin(), b.end(), pb.begin() + (r - b.size()));
  p.out.resize(r);
  for (std::size_t i = 0; i < r; ++i) {
    if (pa[i] != pb[i] && pa[i] != 1 && pb[i] != 1) shape_fail(op, a, b);
    p.out[i] = std::max(pa[i], pb[i]);
  }
  std::vector<std::size_t> sa(r), sb(r);
  std::size_t acc_a = 1, acc_b = 1;
  for (std::size_t i = r; i-- > 0;) {
    sa[i] = pa[i] == 1 ? 0 : acc_a;
    sb[i] = pb[i] == 1 ? 0 : acc_b;
    acc_a *= pa[i];
    acc_b *= pb[i];
  }
  const std::size_t n = numel(p.out);
  p.ia.resize(n);
  p.ib.resize(n);
  std::vector<std::size_t> idx(r, 0);
  std::size_t oa = 0, ob = 0;
  for (std::size_t k = 0; k < n; ++k) {
    p.ia[k] = oa;
    p.ib[k] = ob;
    for (std::size_t d = r; d-- > 0;) {
      if (++idx[d] < p.out[d]) {
        oa += sa[d];
        ob += sb[d];
        break;
      }
      oa -= sa[d] * (p.out[d] - 1);
      ob -= sb[d] * (p.out[d] - 1);
      idx[d] = 0;
    }
  }
  return p;
}

enum class BinOp { kAdd, kSub, kMul, kDiv };

template <class T>
Tensor<T> binary(const char* name, BinOp op, const Tensor<T>& a,
                 const Tensor<T>& b) {
  auto apply = [op](T x, T y) {
    switch (op) {
      case BinOp::kAdd: return x + y;
      case BinOp::kSub: return x - y;
      case BinOp::kMul: return x * y;
      case BinOp::kDiv: return x / y;
    }
    return T(0);
  };
  const auto& av = a.values();
  const auto& bv = b.values();
  if (a.shape() == b.shape()) {
    std::vector<T> out(av.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = apply(av[i], bv[i]);
    return make_result<T>(
        name, a.shape(), std::move(out), {a, b}, [op](Node<T>& self) {
          auto& pa = *self.parents[0];
          auto& pb = *self.parents[1];
          const std::size_t n = self.grad.size();
          if (pa.requires_grad) {
            T* ga = pa.ensure_grad();
            for (std::size_t i = 0; i < n; ++i) {
              const T g = self.grad[i];
              switch (op) {
                case BinOp::kAdd:
                case BinOp::kSub: ga[i] += g; break;
                case BinOp::kMul: ga[i] += g * pb.value[i]; break;
                case BinOp::kDiv: ga[i] += g / pb.value[i]; break;
              }
            }
          }
          if (pb.requires_grad) {
            T* gb = pb.ensure_grad();
            for (std::size_t i = 0; i < n; ++i) {
              const T g = self.grad[i];
              switch (op) {
                case BinOp::kAdd: gb[i] += g; break;
                case BinOp::kSub: gb[i] -= g; break;
                case BinOp::kMul: gb[i] += g * pa.value[i]; break;
                case BinOp::kDiv:
                  gb[i] -= g * pa.value[i] / (pb.value[i] * pb.value[i]);
                  break;
              }
            }
          }
        });
  }
  auto plan = std::make_shared<BroadcastPlan>(
      plan_broadcast(name, a.shape(), b.shape()));
  std::vector<T> out(plan->ia.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = apply(av[plan->ia[i]], bv[plan->ib[i]]);
  return make_result<T>(
      name, plan->out, std::move(out), {a, b}, [op, plan](Node<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        T* ga = pa.requires_grad ? pa.ensure_grad() : nullptr;
        T* gb = pb.requires_grad ? pb.ensure_grad() : nullptr;
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
          const T g = self.grad[i];
          const T x = pa.value[plan->ia[i]];
          const T y = pb.value[plan->ib[i]];
          switch (op) {
            case BinOp::kAdd:
              if (ga) ga[plan->ia[i]] += g;
              if (gb) gb[plan->ib[i]] += g;
              break;
            case BinOp::kSub:
              if (ga) ga[plan->ia[i]] += g;
              if (gb) gb[plan->ib[i]] -= g;
              break;
            case BinOp::kMul:
              if (ga) ga[plan->ia[i]] += g * y;
              if (gb) gb[plan->ib[i]] += g * x;
              break;
            case BinOp::kDiv:
              if (ga) ga[plan->ia[i]] += g / y;
              if (gb) gb[plan->ib[i]] -= g * x / (y * y);
              break;
          }
        }
      });
}

template <class T, class F, class DF>
Tensor<T> unary(const char* name, const Tensor<T>& x, F f, DF df) {
  const auto& xv = x.values();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xv[i]);
  return make_result<T>(name, x.shape(), std::move(out), {x},
                        [df](Node<T>& self) {
                          auto& p = *self.parents[0];
                          T* g = p.ensure_grad();
                          for (std::size_t i = 0; i < self.grad.size(); ++i)
                            g[i] += self.grad[i] * df(p.value[i], self.value[i]);
                        });
}

// Splits `shape` around `axis` into (outer, dim, inner) extents.
inline std::tuple<std::size_t, std::size_t, std::size_t> split_axis(
    const char* op, const Shape& shape, std::size_t axis) {
  if (axis >= shape.size())
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) +
                     " out of range for shape " + shape_str(shape));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  return {outer, shape[axis], inner};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic (numpy-style broadcasting)

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary("add", detail::BinOp::kAdd, a, b);
}
template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary("sub", detail::BinOp::kSub, a, b);
}
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary("mul", detail::BinOp::kMul, a, b);
}
template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary("div", detail::BinOp::kDiv, a, b);
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T s) {
  return detail::unary<T>(
      "scale", x, [s](T v) { return v * s; }, [s](T, T) { return s; });
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::unary<T>(
      "relu", x, [](T v) { return v > T(0) ? v : T(0); },
      [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary<T>(
      "sigmoid", x,
      [](T v) {
        return v >= T(0) ? T(1) / (T(1) + std::exp(-v))
                         : std::exp(v) / (T(1) + std::exp(v));
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Tensor<T> tanh(const Tensor<T>& x) {
  return detail::unary<T>(
      "tanh", x, [](T v) { return std::tanh(v); },
      [](T, T y) { return T(1) - y * y; });
}

template <class T>
Tensor<T> square(const Tensor<T>& x) {
  return detail::unary<T>(
      "square", x, [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

template <class T>
Tensor<T> sqrt(const Tensor<T>& x) {
  return detail::unary<T>(
      "sqrt", x, [](T v) { return std::sqrt(v); },
      [](T, T y) { return T(0.5) / y; });
}

// Identity forward; backward multiplies the incoming gradient by -lambda.
template <class T>
Tensor<T> grad_reverse(const Tensor<T>& x, T lambda) {
  return detail::unary<T>(
      "grad_reverse", x, [](T v) { return v; },
      [lambda](T, T) { return -lambda; });
}

// Same values, no gradient path.
template <class T>
Tensor<T> detach(const Tensor<T>& x) {
  return Tensor<T>::from(x.shape(), x.values(), false);
}

// ---------------------------------------------------------------------------
// Linear algebra

// [m,k]x[k,n], [b,m,k]x[b,k,n], or [...,m,k]x[k,n].
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  using detail::MapC;
  using detail::MapM;
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa.size() < 2 || sb.size() < 2) shape_fail("matmul", sa, sb);
  std::size_t batch = 1, m, k, n;
  Shape out_shape;
  if (sb.size() == 2) {
    k = sa.back();
    if (sb[0] != k) shape_fail("matmul", sa, sb);
    m = a.size() / k;
    n = sb[1];
    out_shape = sa;
    out_shape.back() = n;
  } else if (sa.size() == 3 && sb.size() == 3) {
    if (sa[0] != sb[0] || sa[2] != sb[1]) shape_fail("matmul", sa, sb);
    batch = sa[0];
    m = sa[1];
    k = sa[2];
    n = sb[2];
    out_shape = {batch, m, n};
  } else {
    shape_fail("matmul", sa, sb);
  }
  const bool shared_b = sb.size() == 2;
  std::vector<T> out(batch * m * n);
  for (std::size_t i = 0; i < batch; ++i) {
    MapC<T> A(a.values().data() + i * m * k, m, k);
    MapC<T> B(b.values().data() + (shared_b ? 0 : i * k * n), k, n);
    MapM<T>(out.data() + i * m * n, m, n).noalias() = A * B;
  }
  return detail::make_result<T>(
      "matmul", std::move(out_shape), std::move(out), {a, b},
      [batch, m, k, n, shared_b](Node<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        for (std::size_t i = 0; i < batch; ++i) {
          MapC<T> G(self.grad.data() + i * m * n, m, n);
          MapC<T> A(pa.value.data() + i * m * k, m, k);
          const std::size_t boff = shared_b ? 0 : i * k * n;
          MapC<T> B(pb.value.data() + boff, k, n);
          if (pa.requires_grad)
            MapM<T>(pa.ensure_grad() + i * m * k, m, k).noalias() +=
                G * B.transpose();
          if (pb.requires_grad)
            MapM<T>(pb.ensure_grad() + boff, k, n).noalias() +=
                A.transpose() * G;
        }
      });
}

// Channels-last 1-D convolution (cross-correlation).
// x: [B, L, Cin], w: [K, Cin, Cout] -> [B, L, Cout]. "Same" padding: zeros
// totalling (K-1)*dilation, the extra one on the left when odd.
template <class T>
Tensor<T> conv1d(const Tensor<T>& x, const Tensor<T>& w,
                 std::size_t dilation = 1) {
  using detail::MapC;
  using detail::MapM;
  if (x.rank() != 3 || w.rank() != 3 || x.dim(2) != w.dim(1) || dilation == 0)
    shape_fail("conv1d", x.shape(), w.shape());
  const std::size_t B = x.dim(0), L = x.dim(1), Cin = x.dim(2);
  const std::size_t K = w.dim(0), Cout = w.dim(2);
  const std::size_t pad_total = (K - 1) * dilation;
  const std::ptrdiff_t pad_left = static_cast<std::ptrdiff_t>((pad_total + 1) / 2);
  const std::size_t cols_w = K * Cin;
  auto cols = std::make_shared<std::vector<T>>(B * L * cols_w, T(0));
  const auto& xv = x.values();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < L; ++t) {
      T* row = cols->data() + (b * L + t) * cols_w;
      for (std::size_t kk = 0; kk < K; ++kk) {
        const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t) - pad_left +
                                   static_cast<std::ptrdiff_t>(kk * dilation);
        if (src < 0 || src >= static_cast<std::ptrdiff_t>(L)) continue;
        std::copy_n(xv.data() + (b * L + static_cast<std::size_t>(src)) * Cin,
                    Cin, row + kk * Cin);
      }
    }
  std::vector<T> out(B * L * Cout);
  MapM<T>(out.data(), B * L, Cout).noalias() =
      MapC<T>(cols->data(), B * L, cols_w) *
      MapC<T>(w.values().data(), cols_w, Cout);
  return detail::make_result<T>(
      "conv1d", {B, L, Cout}, std::move(out), {x, w},
      [=](Node<T>& self) {
        auto& px = *self.parents[0];
        auto& pw = *self.parents[1];
        MapC<T> G(self.grad.data(), B * L, Cout);
        if (pw.requires_grad)
          MapM<T>(pw.ensure_grad(), cols_w, Cout).noalias() +=
              MapC<T>(cols->data(), B * L, cols_w).transpose() * G;
        if (px.requires_grad) {
          detail::RowMat<T> dcols = G * MapC<T>(pw.value.data(), cols_w, Cout).transpose();
          T* gx = px.ensure_grad();
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t t = 0; t < L; ++t)
              for (std::size_t kk = 0; kk < K; ++kk) {
                const std::ptrdiff_t src =
                    static_cast<std::ptrdiff_t>(t) - pad_left +
                    static_cast<std::ptrdiff_t>(kk * dilation);
                if (src < 0 || src >= static_cast<std::ptrdiff_t>(L)) continue;
                T* dst = gx + (b * L + static_cast<std::size_t>(src)) * Cin;
                const T* s = dcols.data() + (b * L + t) * cols_w + kk * Cin;
                for (std::size_t c = 0; c < Cin; ++c) dst[c] += s[c];
              }
        }
      });
}

// ---------------------------------------------------------------------------
// Normalization and probability

template <class T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  const auto [outer, dim, inner] = detail::split_axis("softmax", x.shape(), axis);
  const auto& xv = x.values();
  std::vector<T> out(xv.size());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * dim * inner + i;
      T mx = xv[base];
      for (std::size_t d = 1; d < dim; ++d) mx = std::max(mx, xv[base + d * inner]);
      T sum = 0;
      for (std::size_t d = 0; d < dim; ++d) {
        out[base + d * inner] = std::exp(xv[base + d * inner] - mx);
        sum += out[base + d * inner];
      }
      for (std::size_t d = 0; d < dim; ++d) out[base + d * inner] /= sum;
    }
  return detail::make_result<T>(
      "softmax", x.shape(), std::move(out), {x},
      [outer, dim, inner](Node<T>& self) {
        T* g = self.parents[0]->ensure_grad();
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t i = 0; i < inner; ++i) {
            const std::size_t base = o * dim * inner + i;
            T dot = 0;
            for (std::size_t d = 0; d < dim; ++d)
              dot += self.grad[base + d * inner] * self.value[base + d * inner];
            for (std::size_t d = 0; d < dim; ++d) {
              const std::size_t j = base + d * inner;
              g[j] += self.value[j] * (self.grad[j] - dot);
            }
          }
      });
}

// Mean cross-entropy of softmax(logits) against integer labels.
// logits: [N, K]; labels in [0, K).
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size())
    throw ShapeError("cross_entropy: logits " + shape_str(logits.shape()) +
                     " vs " + std::to_string(labels.size()) + " labels");
  const std::size_t N = logits.dim(0), K = logits.dim(1);
  for (int l : labels)
    if (l < 0 || static_cast<std::size_t>(l) >= K)
      throw LabelError("cross_entropy: label " + std::to_string(l) +
                       " outside [0, " + std::to_string(K) + ")");
  auto probs = std::make_shared<std::vector<T>>(N * K);
  auto lab = std::make_shared<std::vector<int>>(labels.begin(), labels.end());
  const auto& v = logits.values();
  T loss = 0;
  for (std::size_t r = 0; r < N; ++r) {
    const T* row = v.data() + r * K;
    const T mx = *std::max_element(row, row + K);
    T sum = 0;
    for (std::size_t c = 0; c < K; ++c) sum += std::exp(row[c] - mx);
    const T lse = mx + std::log(sum);
    for (std::size_t c = 0; c < K; ++c)
      (*probs)[r * K + c] = std::exp(row[c] - lse);
    loss += lse - row[(*lab)[r]];
  }
  loss /= static_cast<T>(N);
  return detail::make_result<T>(
      "cross_entropy", {}, {loss}, {logits}, [N, K, probs, lab](Node<T>& self) {
        T* g = self.parents[0]->ensure_grad();
        const T up = self.grad[0] / static_cast<T>(N);
        for (std::size_t r = 0; r < N; ++r)
          for (std::size_t c = 0; c < K; ++c) {
            const T onehot = static_cast<int>(c) == (*lab)[r] ? T(1) : T(0);
            g[r * K + c] += up * ((*probs)[r * K + c] - onehot);
          }
      });
}

// Inverted dropout: kept units are scaled by 1/(1-p) at train time.
template <class T>
Tensor<T> dropout(const Tensor<T>& x, double p, bool train, Rng& rng) {
  if (!train || p <= 0.0) return x;
  if (p >= 1.0) throw ConfigError("dropout: p must be < 1", "dropout");
  std::bernoulli_distribution keep(1.0 - p);
  const T s = static_cast<T>(1.0 / (1.0 - p));
  auto mask = std::make_shared<std::vector<T>>(x.size());
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    (*mask)[i] = keep(rng) ? s : T(0);
    out[i] = x.values()[i] * (*mask)[i];
  }
  return detail::make_result<T>("dropout", x.shape(), std::move(out), {x},
                                [mask](Node<T>& self) {
                                  T* g = self.parents[0]->ensure_grad();
                                  for (std::size_t i = 0; i < self.grad.size(); ++i)
                                    g[i] += self.grad[i] * (*mask)[i];
                                });
}

template <class T>
struct BatchNormState {
  std::vector<T> running_mean;
  std::vector<T> running_var;
  double momentum = 0.1;
  double eps = 1e-5;
  bool frozen = false;  // running statistics are not updated when set

  explicit BatchNormState(std::size_t channels = 0)
      : running_mean(channels, T(0)), running_var(channels, T(1)) {}
};

// Normalizes each channel (last axis) over all remaining elements.
// Train mode uses batch statistics and updates `state` unless frozen;
// eval mode uses the running statistics.
template <class T>
Tensor<T> batchnorm1d(const Tensor<T>& x, const Tensor<T>& gamma,
                      const Tensor<T>& beta, BatchNormState<T>& state,
                      bool train) {
  const std::size_t C = x.shape().empty() ? 0 : x.shape().back();
  if (C == 0 || gamma.size() != C || beta.size() != C ||
      state.running_mean.size() != C)
    shape_fail("batchnorm1d", x.shape(), gamma.shape());
  const std::size_t M = x.size() / C;
  const auto& xv = x.values();
  auto xhat = std::make_shared<std::vector<T>>(x.size());
  auto inv_std = std::make_shared<std::vector<T>>(C);
  std::vector<T> mean(C, T(0)), var(C, T(0));
  if (train) {
    if (M < 2)
      throw ShapeError("batchnorm1d: train mode needs more than one value per channel");
    for (std::size_t i = 0; i < M; ++i)
      for (std::size_t c = 0; c < C; ++c) mean[c] += xv[i * C + c];
    for (auto& m : mean) m /= static_cast<T>(M);
    for (std::size_t i = 0; i < M; ++i)
      for (std::size_t c = 0; c < C; ++c) {
        const T d = xv[i * C + c] - mean[c];
        var[c] += d * d;
      }
    for (auto& v : var) v /= static_cast<T>(M);
    if (!state.frozen) {
      const T mo = static_cast<T>(state.momentum);
      for (std::size_t c = 0; c < C; ++c) {
        state.running_mean[c] = (T(1) - mo) * state.running_mean[c] + mo * mean[c];
        const T unbiased = var[c] * static_cast<T>(M) / static_cast<T>(M - 1);
        state.running_var[c] = (T(1) - mo) * state.running_var[c] + mo * unbiased;
      }
    }
  } else {
    mean = state.running_mean;
    var = state.running_var;
  }
  for (std::size_t c = 0; c < C; ++c)
    (*inv_std)[c] = T(1) / std::sqrt(var[c] + static_cast<T>(state.eps));
  std::vector<T> out(x.size());
  const auto& g = gamma.values();
  const auto& b = beta.values();
  for (std::size_t i = 0; i < M; ++i)
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t j = i * C + c;
      (*xhat)[j] = (xv[j] - mean[c]) * (*inv_std)[c];
      out[j] = g[c] * (*xhat)[j] + b[c];
    }
  return detail::make_result<T>(
      "batchnorm1d", x.shape(), std::move(out), {x, gamma, beta},
      [=](Node<T>& self) {
        auto& px = *self.parents[0];
        auto& pg = *self.parents[1];
        auto& pb = *self.parents[2];
        const auto& dy = self.grad;
        std::vector<T> sum_dy(C, T(0)), sum_dy_xhat(C, T(0));
        for (std::size_t i = 0; i < M; ++i)
          for (std::size_t c = 0; c < C; ++c) {
            sum_dy[c] += dy[i * C + c];
            sum_dy_xhat[c] += dy[i * C + c] * (*xhat)[i * C + c];
          }
        if (pg.requires_grad) {
          T* gg = pg.ensure_grad();
          for (std::size_t c = 0; c < C; ++c) gg[c] += sum_dy_xhat[c];
        }
        if (pb.requires_grad) {
          T* gb = pb.ensure_grad();
          for (std::size_t c = 0; c < C; ++c) gb[c] += sum_dy[c];
        }
        if (!px.requires_grad) return;
        T* gx = px.ensure_grad();
        const T Mt = static_cast<T>(M);
        for (std::size_t i = 0; i < M; ++i)
          for (std::size_t c = 0; c < C; ++c) {
            const std::size_t j = i * C + c;
            const T gam = pg.value[c];
            if (train)
              gx[j] += gam * (*inv_std)[c] *
                       (dy[j] - sum_dy[c] / Mt - (*xhat)[j] * sum_dy_xhat[c] / Mt);
            else
              gx[j] += gam * (*inv_std)[c] * dy[j];
          }
      });
}

// Normalizes over the last axis of each row.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, double eps = 1e-5) {
  const std::size_t D = x.shape().empty() ? 0 : x.shape().back();
  if (D == 0 || gamma.size() != D || beta.size() != D)
    shape_fail("layer_norm", x.shape(), gamma.shape());
  const std::size_t R = x.size() / D;
  const auto& xv = x.values();
  auto xhat = std::make_shared<std::vector<T>>(x.size());
  auto inv_std = std::make_shared<std::vector<T>>(R);
  std::vector<T> out(x.size());
  for (std::size_t r = 0; r < R; ++r) {
    const T* row = xv.data() + r * D;
    T mean = 0, var = 0;
    for (std::size_t d = 0; d < D; ++d) mean += row[d];
    mean /= static_cast<T>(D);
    for (std::size_t d = 0; d < D; ++d) var += (row[d] - mean) * (row[d] - mean);
    var /= static_cast<T>(D);
    (*inv_std)[r] = T(1) / std::sqrt(var + static_cast<T>(eps));
    for (std::size_t d = 0; d < D; ++d) {
      (*xhat)[r * D + d] = (row[d] - mean) * (*inv_std)[r];
      out[r * D + d] = gamma.values()[d] * (*xhat)[r * D + d] + beta.values()[d];
    }
  }
  return detail::make_result<T>(
      "layer_norm", x.shape(), std::move(out), {x, gamma, beta},
      [=](Node<T>& self) {
        auto& px = *self.parents[0];
        auto& pg = *self.parents[1];
        auto& pb = *self.parents[2];
        const auto& dy = self.grad;
        T* gg = pg.requires_grad ? pg.ensure_grad() : nullptr;
        T* gb = pb.requires_grad ? pb.ensure_grad() : nullptr;
        T* gx = px.requires_grad ? px.ensure_grad() : nullptr;
        std::vector<T> dxhat(D);
        for (std::size_t r = 0; r < R; ++r) {
          T s1 = 0, s2 = 0;
          for (std::size_t d = 0; d < D; ++d) {
            const std::size_t j = r * D + d;
            if (gg) gg[d] += dy[j] * (*xhat)[j];
            if (gb) gb[d] += dy[j];
            dxhat[d] = dy[j] * pg.value[d];
            s1 += dxhat[d];
            s2 += dxhat[d] * (*xhat)[j];
          }
          if (!gx) continue;
          const T Dt = static_cast<T>(D);
          for (std::size_t d = 0; d < D; ++d) {
            const std::size_t j = r * D + d;
            gx[j] += (*inv_std)[r] * (dxhat[d] - s1 / Dt - (*xhat)[j] * s2 / Dt);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Reductions

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T s = 0;
  for (T v : x.values()) s += v;
  return detail::make_result<T>("sum", {}, {s}, {x}, [](Node<T>& self) {
    T* g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < self.parents[0]->value.size(); ++i)
      g[i] += self.grad[0];
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.size()));
}

// Sum over `axis`, which is removed from the shape.
template <class T>
Tensor<T> sum(const Tensor<T>& x, std::size_t axis) {
  const auto [outer, dim, inner] = detail::split_axis("sum", x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  std::vector<T> out(outer * inner, T(0));
  const auto& xv = x.values();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t d = 0; d < dim; ++d)
      for (std::size_t i = 0; i < inner; ++i)
        out[o * inner + i] += xv[(o * dim + d) * inner + i];
  return detail::make_result<T>(
      "sum_axis", std::move(out_shape), std::move(out), {x},
      [outer, dim, inner](Node<T>& self) {
        T* g = self.parents[0]->ensure_grad();
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t d = 0; d < dim; ++d)
            for (std::size_t i = 0; i < inner; ++i)
              g[(o * dim + d) * inner + i] += self.grad[o * inner + i];
      });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x, std::size_t axis) {
  const auto dim = x.shape().at(axis);
  return scale(sum(x, axis), T(1) / static_cast<T>(dim));
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.size()) shape_fail("reshape", x.shape(), shape);
  return detail::make_result<T>("reshape", std::move(shape), x.values(), {x},
                                [](Node<T>& self) {
                                  T* g = self.parents[0]->ensure_grad();
                                  for (std::size_t i = 0; i < self.grad.size(); ++i)
                                    g[i] += self.grad[i];
                                });
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, std::size_t axis) {
  if (xs.empty()) throw ShapeError("concat: no inputs");
  Shape out_shape = xs[0].shape();
  if (axis >= out_shape.size())
    throw ShapeError("concat: axis out of range for " + shape_str(out_shape));
  std::size_t total = 0;
  for (const auto& t : xs) {
    Shape a = t.shape(), b = xs[0].shape();
    if (a.size() != b.size()) shape_fail("concat", a, b);
    a[axis] = b[axis] = 0;
    if (a != b) shape_fail("concat", t.shape(), xs[0].shape());
    total += t.dim(axis);
  }
  out_shape[axis] = total;
  const auto [outer, unused, inner] = detail::split_axis("concat", out_shape, axis);
  (void)unused;
  std::vector<T> out(numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& t : xs) {
    offsets.push_back(off);
    const std::size_t d = t.dim(axis);
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(t.values().data() + o * d * inner, d * inner,
                  out.data() + (o * total + off) * inner);
    off += d;
  }
  return detail::make_result<T>(
      "concat", std::move(out_shape), std::move(out), xs,
      [outer = outer, inner = inner, total, offsets, axis](Node<T>& self) {
        for (std::size_t k = 0; k < self.parents.size(); ++k) {
          auto& p = *self.parents[k];
          if (!p.requires_grad) continue;
          const std::size_t d = p.shape[axis];
          T* g = p.ensure_grad();
          for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t j = 0; j < d * inner; ++j)
              g[o * d * inner + j] +=
                  self.grad[(o * total + offsets[k]) * inner + j];
        }
      });
}

template <class T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t start,
                std::size_t length) {
  const auto [outer, dim, inner] = detail::split_axis("slice", x.shape(), axis);
  if (start + length > dim)
    throw ShapeError("slice: [" + std::to_string(start) + ", " +
                     std::to_string(start + length) + ") exceeds axis extent " +
                     std::to_string(dim) + " of " + shape_str(x.shape()));
  Shape out_shape = x.shape();
  out_shape[axis] = length;
  std::vector<T> out(outer * length * inner);
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(x.values().data() + (o * dim + start) * inner, length * inner,
                out.data() + o * length * inner);
  return detail::make_result<T>(
      "slice", std::move(out_shape), std::move(out), {x},
      [outer = outer, dim = dim, inner = inner, start, length](Node<T>& self) {
        T* g = self.parents[0]->ensure_grad();
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t j = 0; j < length * inner; ++j)
            g[(o * dim + start) * inner + j] += self.grad[o * length * inner + j];
      });
}

// General axis permutation: out.shape[i] = x.shape[perm[i]].
template <class T>
Tensor<T> transpose(const Tensor<T>& x, std::vector<std::size_t> perm) {
  const std::size_t r = x.rank();
  {
    std::vector<std::size_t> check = perm;
    std::sort(check.begin(), check.end());
    for (std::size_t i = 0; i < check.size(); ++i)
      if (check.size() != r || check[i] != i)
        throw ShapeError("transpose: invalid permutation for " +
                         shape_str(x.shape()));
  }
  Shape out_shape(r);
  std::vector<std::size_t> in_strides(r);
  std::size_t acc = 1;
  for (std::size_t i = r; i-- > 0;) {
    in_strides[i] = acc;
    acc *= x.dim(i);
  }
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = x.dim(perm[i]);
  const std::size_t n = x.size();
  auto src = std::make_shared<std::vector<std::size_t>>(n);
  std::vector<std::size_t> idx(r, 0);
  std::size_t off = 0;
  for (std::size_t k = 0; k < n; ++k) {
    (*src)[k] = off;
    for (std::size_t d = r; d-- > 0;) {
      const std::size_t st = in_strides[perm[d]];
      if (++idx[d] < out_shape[d]) {
        off += st;
        break;
      }
      off -= st * (out_shape[d] - 1);
      idx[d] = 0;
    }
  }
  std::vector<T> out(n);
  for (std::size_t k = 0; k < n; ++k) out[k] = x.values()[(*src)[k]];
  return detail::make_result<T>("transpose", std::move(out_shape), std::move(out),
                                {x}, [src](Node<T>& self) {
                                  T* g = self.parents[0]->ensure_grad();
                                  for (std::size_t k = 0; k < self.grad.size(); ++k)
                                    g[(*src)[k]] += self.grad[k];
                                });
}

// ---------------------------------------------------------------------------
// Losses built from primitives

template <class T>
Tensor<T> mse_loss(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) shape_fail("mse_loss", a.shape(), b.shape());
  return mean(square(sub(a, b)));
}

// ---------------------------------------------------------------------------
// Graph and backward pass

// Topologically ordered record of the nodes that feed `root` and require
// gradients. Parents always precede children.
template <class T>
class Graph {
 public:
  static Graph build(const Tensor<T>& root) {
    Graph g;
    if (!root.defined() || !root.requires_grad()) return g;
    std::unordered_set<const Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    stack.emplace_back(root.node().get(), 0);
    seen.insert(root.node().get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        Node<T>* p = node->parents[next++].get();
        if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        continue;
      }
      g.order_.push_back(node);
      stack.pop_back();
    }
    return g;
  }

  const std::vector<Node<T>*>& order() const { return order_; }
  std::size_t size() const { return order_.size(); }

 private:
  std::vector<Node<T>*> order_;
};

// Accumulates d(loss)/d(leaf) into every reachable leaf that requires grad.
// Intermediate gradients are reset on each call, so repeated calls add up
// only on leaves.
template <class T>
void backward(const Tensor<T>& loss) {
  if (loss.size() != 1)
    throw ContractError("backward: loss must be a scalar, got shape " +
                        shape_str(loss.shape()));
  if (!loss.requires_grad()) return;
  const auto graph = Graph<T>::build(loss);
  for (Node<T>* n : graph.order())
    if (!n->is_leaf()) n->grad.assign(n->value.size(), T(0));
  loss.node()->ensure_grad()[0] += T(1);
  const auto& order = graph.order();
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if (!(*it)->is_leaf()) (*it)->backward(**it);
}

// ---------------------------------------------------------------------------
// Adam

template <class T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

template <class T>
struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t step = 0;
  std::vector<std::vector<T>> m, v;
};

// One bias-corrected Adam update over `params` using their accumulated
// gradients. Parameters without a gradient are left untouched.
template <class T>
void adam_step(std::span<NamedTensor<T>> params, AdamState<T>& state,
               double lr) {
  if (state.m.empty()) {
    state.m.resize(params.size());
    state.v.resize(params.size());
  }
  if (state.m.size() != params.size())
    throw ShapeError("adam_step: state tracks " + std::to_string(state.m.size()) +
                     " parameters, got " + std::to_string(params.size()));
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    for (T g : p.tensor.grad())
      if (!std::isfinite(static_cast<double>(g)))
        throw OptimizerError("adam_step: non-finite gradient in " + p.name, p.name);
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& t = params[k].tensor;
    if (!t.has_grad()) continue;
    auto& m = state.m[k];
    auto& v = state.v[k];
    if (m.empty()) {
      m.assign(t.size(), T(0));
      v.assign(t.size(), T(0));
    }
    if (m.size() != t.size())
      throw ShapeError("adam_step: moment shape mismatch for " + params[k].name);
    auto w = t.mutable_data();
    auto g = t.grad();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = static_cast<double>(g[i]);
      const double mi = state.beta1 * static_cast<double>(m[i]) + (1.0 - state.beta1) * gi;
      const double vi = state.beta2 * static_cast<double>(v[i]) + (1.0 - state.beta2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double update = lr * (mi / bc1) / (std::sqrt(vi / bc2) + state.eps);
      w[i] = static_cast<T>(static_cast<double>(w[i]) - update);
    }
  }
}

template <class T>
void zero_grad(std::span<NamedTensor<T>> params) {
  for (auto& p : params) p.tensor.zero_grad();
}

}  // namespace adaptcast::ad
