#include "m3d/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <sstream>

namespace m3d {

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

namespace {

std::atomic<bool> g_check_finite{false};

template <class T>
void check_finite_op(const char* op, const std::vector<T>& vals) {
  if (!g_check_finite.load(std::memory_order_relaxed)) return;
  for (std::size_t i = 0; i < vals.size(); ++i) {
    if (!std::isfinite(vals[i])) {
      throw NumericError(std::string(op) + ": non-finite value at flat index " +
                         std::to_string(i));
    }
  }
}

template <class T>
void accumulate(std::vector<T>& dst, const std::vector<T>& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

// Splits a shape at `axis` into (outer, extent, inner) strides for loops
// that walk one axis of a row-major buffer.
struct AxisView {
  std::size_t outer, extent, inner;
};

AxisView axis_view(const Shape& s, std::size_t axis) {
  AxisView v{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) v.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) v.inner *= s[i];
  return v;
}

void require_axis(const Shape& s, std::size_t axis, const char* op) {
  if (axis >= s.size()) {
    throw ValidationError(std::string(op) + ": axis " + std::to_string(axis) +
                          " out of bounds for shape " + shape_str(s));
  }
}

// Suffix broadcast: the smaller operand's shape must be a trailing slice of
// the larger's (a scalar matches anything). Returns the tile length of the
// smaller operand; out shape is the larger shape.
struct Broadcast {
  bool a_small = false;   // true if a is the tiled operand
  std::size_t small_n = 0;
  std::size_t large_n = 0;
};

bool is_suffix(const Shape& small, const Shape& large) {
  if (small.size() > large.size()) return false;
  std::size_t off = large.size() - small.size();
  for (std::size_t i = 0; i < small.size(); ++i) {
    if (small[i] != large[off + i]) return false;
  }
  return true;
}

Broadcast broadcast_of(const Shape& a, const Shape& b, const char* op) {
  std::size_t na = shape_numel(a), nb = shape_numel(b);
  Broadcast r;
  if (a == b) {
    r.a_small = false;
    r.small_n = r.large_n = na;
    return r;
  }
  if (nb == 1 || is_suffix(b, a)) {
    r.a_small = false;
    r.small_n = nb;
    r.large_n = na;
    return r;
  }
  if (na == 1 || is_suffix(a, b)) {
    r.a_small = true;
    r.small_n = na;
    r.large_n = nb;
    return r;
  }
  throw ValidationError(std::string(op) + ": shapes " + shape_str(a) + " and " +
                        shape_str(b) + " do not broadcast");
}

}  // namespace

void set_check_finite(bool enabled) { g_check_finite.store(enabled); }
bool check_finite_enabled() { return g_check_finite.load(); }

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> make_tensor(Shape shape, std::vector<T> values, bool tracked) {
  if (shape_numel(shape) != values.size()) {
    throw ValidationError("tensor: shape " + shape_str(shape) + " expects " +
                          std::to_string(shape_numel(shape)) + " values, got " +
                          std::to_string(values.size()));
  }
  auto n = std::make_shared<detail::Node<T>>();
  n->shape = std::move(shape);
  n->val = std::move(values);
  n->tracked = tracked;
  return Tensor<T>(std::move(n));
}

template <class T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool tracked) {
  std::vector<T> v(shape_numel(shape), T(0));
  return make_tensor<T>(std::move(shape), std::move(v), tracked);
}

template <class T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool tracked) {
  std::vector<T> v(shape_numel(shape), value);
  return make_tensor<T>(std::move(shape), std::move(v), tracked);
}

template <class T>
Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> values, bool tracked) {
  return make_tensor<T>(std::move(shape), std::move(values), tracked);
}

template <class T>
Tensor<T> Tensor<T>::scalar(T value, bool tracked) {
  return make_tensor<T>(Shape{}, std::vector<T>{value}, tracked);
}

template <class T>
T Tensor<T>::item() const {
  if (numel() != 1) {
    throw ValidationError("item: tensor of shape " + shape_str(shape()) +
                          " is not a scalar");
  }
  return node_->val[0];
}

template <class T>
Tensor<T> Tensor<T>::clone() const {
  return make_tensor<T>(node_->shape, node_->val, false);
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

namespace {
template <class T>
Tape<T>*& current_tape_slot() {
  thread_local Tape<T>* slot = nullptr;
  return slot;
}
}  // namespace

template <class T>
Tape<T>::Tape() {
  prev_ = current_tape_slot<T>();
  current_tape_slot<T>() = this;
}

template <class T>
Tape<T>::~Tape() {
  current_tape_slot<T>() = prev_;
}

template <class T>
Tape<T>* Tape<T>::current() {
  return current_tape_slot<T>();
}

template <class T>
void Tape<T>::record(std::function<void()> fn) {
  steps_.push_back(std::move(fn));
}

template <class T>
std::vector<T>& Tape<T>::grad_buf(const detail::Node<T>* n) {
  auto it = grads_.find(n);
  if (it == grads_.end()) {
    it = grads_.emplace(n, std::vector<T>(n->val.size(), T(0))).first;
  }
  return it->second;
}

template <class T>
const std::vector<T>* Tape<T>::find_grad(const detail::Node<T>* n) const {
  auto it = grads_.find(n);
  return it == grads_.end() ? nullptr : &it->second;
}

template <class T>
void Tape<T>::backward(const Tensor<T>& loss) {
  if (consumed_) {
    throw ValidationError("backward: tape already consumed; rebuild the forward pass");
  }
  if (!loss.defined() || loss.numel() != 1) {
    throw ValidationError("backward: loss must be a defined scalar tensor");
  }
  if (steps_.empty()) {
    throw ValidationError("backward: tape is empty");
  }
  consumed_ = true;
  grad_buf(loss.node().get()).assign(1, T(1));
  for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
}

template <class T>
std::vector<T> Tape<T>::grad(const Tensor<T>& t) const {
  if (const auto* g = find_grad(t.node().get())) return *g;
  return std::vector<T>(t.numel(), T(0));
}

// ---------------------------------------------------------------------------
// Op plumbing
// ---------------------------------------------------------------------------

namespace {

template <class T>
bool any_tracked(std::initializer_list<const Tensor<T>*> ins) {
  if (!Tape<T>::current()) return false;
  for (const auto* t : ins) {
    if (t->tracked()) return true;
  }
  return false;
}

// Elementwise binary op with suffix broadcasting. dfa/dfb produce local
// partials given (a_val, b_val, out_val).
template <class T, class F, class DFA, class DFB>
Tensor<T> binary_op(const char* name, const Tensor<T>& a, const Tensor<T>& b,
                    F f, DFA dfa, DFB dfb) {
  Broadcast bc = broadcast_of(a.shape(), b.shape(), name);
  const Shape& out_shape = bc.a_small ? b.shape() : a.shape();
  const auto av = a.data();
  const auto bv = b.data();
  std::vector<T> out(bc.large_n);
  if (bc.a_small) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i % bc.small_n], bv[i]);
  } else if (bc.small_n == bc.large_n) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i], bv[i % bc.small_n]);
  } else {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i], bv[i % bc.small_n]);
  }
  check_finite_op(name, out);
  auto y = make_tensor<T>(out_shape, std::move(out), false);
  if (any_tracked<T>({&a, &b})) {
    y.set_tracked(true);
    auto* tape = Tape<T>::current();
    auto an = a.node(), bn = b.node(), yn = y.node();
    tape->record([tape, an, bn, yn, bc, dfa, dfb]() {
      const auto& gy = tape->grad_buf(yn.get());
      if (an->tracked) {
        auto& ga = tape->grad_buf(an.get());
        for (std::size_t i = 0; i < gy.size(); ++i) {
          std::size_t ia = bc.a_small ? i % bc.small_n : i;
          std::size_t ib = bc.a_small ? i : i % bc.small_n;
          ga[ia] += gy[i] * dfa(an->val[ia], bn->val[ib], yn->val[i]);
        }
      }
      if (bn->tracked) {
        auto& gb = tape->grad_buf(bn.get());
        for (std::size_t i = 0; i < gy.size(); ++i) {
          std::size_t ia = bc.a_small ? i % bc.small_n : i;
          std::size_t ib = bc.a_small ? i : i % bc.small_n;
          gb[ib] += gy[i] * dfb(an->val[ia], bn->val[ib], yn->val[i]);
        }
      }
    });
  }
  return y;
}

// Elementwise unary op. df produces the local derivative from (x, y).
template <class T, class F, class DF>
Tensor<T> unary_op(const char* name, const Tensor<T>& x, F f, DF df) {
  const auto xv = x.data();
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xv[i]);
  check_finite_op(name, out);
  auto y = make_tensor<T>(x.shape(), std::move(out), false);
  if (any_tracked<T>({&x})) {
    y.set_tracked(true);
    auto* tape = Tape<T>::current();
    auto xn = x.node(), yn = y.node();
    tape->record([tape, xn, yn, df]() {
      const auto& gy = tape->grad_buf(yn.get());
      auto& gx = tape->grad_buf(xn.get());
      for (std::size_t i = 0; i < gy.size(); ++i) {
        gx[i] += gy[i] * df(xn->val[i], yn->val[i]);
      }
    });
  }
  return y;
}

template <class T>
T sigmoid(T x) {
  return x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
}

template <class T>
T softplus_val(T x) {
  return x > T(0) ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op<T>(
      "add", a, b, [](T x, T y) { return x + y; },
      [](T, T, T) { return T(1); }, [](T, T, T) { return T(1); });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op<T>(
      "sub", a, b, [](T x, T y) { return x - y; },
      [](T, T, T) { return T(1); }, [](T, T, T) { return T(-1); });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op<T>(
      "mul", a, b, [](T x, T y) { return x * y; },
      [](T, T y, T) { return y; }, [](T x, T, T) { return x; });
}

template <class T>
Tensor<T> divide(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op<T>(
      "div", a, b, [](T x, T y) { return x / y; },
      [](T, T y, T) { return T(1) / y; },
      [](T, T y, T out) { return -out / y; });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
  return unary_op<T>(
      "add_scalar", a, [c](T x) { return x + c; }, [](T, T) { return T(1); });
}

template <class T>
Tensor<T> mul_scalar(const Tensor<T>& a, T c) {
  return unary_op<T>(
      "mul_scalar", a, [c](T x) { return x * c; }, [c](T, T) { return c; });
}

template <class T>
Tensor<T> neg(const Tensor<T>& a) {
  return unary_op<T>(
      "neg", a, [](T x) { return -x; }, [](T, T) { return T(-1); });
}

template <class T>
Tensor<T> exp(const Tensor<T>& a) {
  return unary_op<T>(
      "exp", a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <class T>
Tensor<T> sqrt(const Tensor<T>& a) {
  return unary_op<T>(
      "sqrt", a, [](T x) { return std::sqrt(x); },
      [](T, T y) { return T(0.5) / y; });
}

template <class T>
Tensor<T> recip(const Tensor<T>& a) {
  return unary_op<T>(
      "recip", a, [](T x) { return T(1) / x; }, [](T, T y) { return -y * y; });
}

template <class T>
Tensor<T> softplus(const Tensor<T>& a) {
  return unary_op<T>(
      "softplus", a, [](T x) { return softplus_val(x); },
      [](T x, T) { return sigmoid(x); });
}

template <class T>
Tensor<T> silu(const Tensor<T>& a) {
  return unary_op<T>(
      "silu", a, [](T x) { return x * sigmoid(x); },
      [](T x, T) {
        T s = sigmoid(x);
        return s * (T(1) + x * (T(1) - s));
      });
}

template <class T>
Tensor<T> gelu(const Tensor<T>& a) {
  return unary_op<T>(
      "gelu", a,
      [](T x) { return T(0.5) * x * (T(1) + std::erf(x * T(kInvSqrt2))); },
      [](T x, T) {
        T cdf = T(0.5) * (T(1) + std::erf(x * T(kInvSqrt2)));
        T pdf = T(kInvSqrt2Pi) * std::exp(T(-0.5) * x * x);
        return cdf + x * pdf;
      });
}

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
  return unary_op<T>(
      "relu", a, [](T x) { return x > T(0) ? x : T(0); },
      [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <class T>
Tensor<T> mul_prefix(const Tensor<T>& x, const Tensor<T>& s) {
  const Shape& xs = x.shape();
  const Shape& ss = s.shape();
  if (ss.size() > xs.size() ||
      !std::equal(ss.begin(), ss.end(), xs.begin())) {
    throw ValidationError("mul_prefix: shape " + shape_str(ss) +
                          " is not a prefix of " + shape_str(xs));
  }
  std::size_t rows = s.numel();
  std::size_t cols = x.numel() / std::max<std::size_t>(rows, 1);
  const auto xv = x.data();
  const auto sv = s.data();
  std::vector<T> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = xv[r * cols + c] * sv[r];
  }
  check_finite_op("mul_prefix", out);
  auto y = make_tensor<T>(xs, std::move(out), false);
  if (any_tracked<T>({&x, &s})) {
    y.set_tracked(true);
    auto* tape = Tape<T>::current();
    auto xn = x.node(), sn = s.node(), yn = y.node();
    tape->record([tape, xn, sn, yn, rows, cols]() {
      const auto& gy = tape->grad_buf(yn.get());
      if (xn->tracked) {
        auto& gx = tape->grad_buf(xn.get());
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += gy[r * cols + c] * sn->val[r];
        }
      }
      if (sn->tracked) {
        auto& gs = tape->grad_buf(sn.get());
        for (std::size_t r = 0; r < rows; ++r) {
          T acc = T(0);
          for (std::size_t c = 0; c < cols; ++c) acc += gy[r * cols + c] * xn->val[r * cols + c];
          gs[r] += acc;
        }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

namespace {

// c[m,n] += a[m,p] * b[p,n]
template <class T>
void mm_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t p, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* ai = a + i * p;
    T* ci = c + i * n;
    for (std::size_t k = 0; k < p; ++k) {
      T av = ai[k];
      const T* bk = b + k * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bk[j];
    }
  }
}

// ga[m,p] += gy[m,n] * b[p,n]^T
template <class T>
void mm_grad_a(const T* gy, const T* b, T* ga, std::size_t m, std::size_t p, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* gyi = gy + i * n;
    T* gai = ga + i * p;
    for (std::size_t k = 0; k < p; ++k) {
      const T* bk = b + k * n;
      T acc = T(0);
      for (std::size_t j = 0; j < n; ++j) acc += gyi[j] * bk[j];
      gai[k] += acc;
    }
  }
}

// gb[p,n] += a[m,p]^T * gy[m,n]
template <class T>
void mm_grad_b(const T* a, const T* gy, T* gb, std::size_t m, std::size_t p, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* ai = a + i * p;
    const T* gyi = gy + i * n;
    for (std::size_t k = 0; k < p; ++k) {
      T av = ai[k];
      T* gbk = gb + k * n;
      for (std::size_t j = 0; j < n; ++j) gbk[j] += av * gyi[j];
    }
  }
}

}  // namespace

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.size() < 2 || bs.size() < 2) {
    throw ValidationError("matmul: operands must have >=2 dims, got " +
                          shape_str(as) + " and " + shape_str(bs));
  }
  std::size_t m = as[as.size() - 2], p = as[as.size() - 1];
  std::size_t p2 = bs[bs.size() - 2], n = bs[bs.size() - 1];
  if (p != p2) {
    throw ValidationError("matmul: inner dims mismatch " + shape_str(as) +
                          " x " + shape_str(bs));
  }
  Shape abatch(as.begin(), as.end() - 2), bbatch(bs.begin(), bs.end() - 2);
  if (!abatch.empty() && !bbatch.empty() && abatch != bbatch) {
    throw ValidationError("matmul: batch dims mismatch " + shape_str(as) +
                          " x " + shape_str(bs));
  }
  const Shape& batch = abatch.empty() ? bbatch : abatch;
  std::size_t nb = shape_numel(batch);
  bool a_batched = !abatch.empty();
  bool b_batched = !bbatch.empty();

  Shape out_shape = batch;
  out_shape.push_back(m);
  out_shape.push_back(n);
  std::vector<T> out(nb * m * n, T(0));
  const T* ap = a.data().data();
  const T* bp = b.data().data();
  for (std::size_t s = 0; s < nb; ++s) {
    mm_acc(ap + (a_batched ? s * m * p : 0), bp + (b_batched ? s * p * n : 0),
           out.data() + s * m * n, m, p, n);
  }
  check_finite_op("matmul", out);
  auto y = make_tensor<T>(std::move(out_shape), std::move(out), false);
  if (any_tracked<T>({&a, &b})) {
    y.set_tracked(true);
    auto* tape = Tape<T>::current();
    auto an = a.node(), bn = b.node(), yn = y.node();
    tape->record([tape, an, bn, yn, m, p, n, nb, a_batched, b_batched]() {
      const auto& gy = tape->grad_buf(yn.get());
      if (an->tracked) {
        auto& ga = tape->grad_buf(an.get());
        for (std::size_t s = 0; s < nb; ++s) {
          mm_grad_a(gy.data() + s * m * n,
                    bn->val.data() + (b_batched ? s * p * n : 0),
                    ga.data() + (a_batched ? s * m * p : 0), m, p, n);
        }
      }
      if (bn->tracked) {
        auto& gb = tape->grad_buf(bn.get());
        for (std::size_t s = 0; s < nb; ++s) {
          mm_grad_b(an->val.data() + (a_batched ? s * m * p : 0),
                    gy.data() + s * m * n,
                    gb.data() + (b_batched ? s * p * n : 0), m, p, n);
        }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// layernorm / softmax
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gamma,
                    const Tensor<T>& beta, T eps) {
  if (eps <= T(0)) throw ValidationError("layernorm: eps must be > 0");
  if (x.ndim() < 1) throw ValidationError("layernorm: rank-0 input");
  std::size_t c = x.shape().back();
  if (gamma.numel() != c || beta.numel() != c) {
    throw ValidationError("layernorm: gamma/beta must have " + std::to_string(c) +
                          " entries");
  }
  std::size_t rows = x.numel() / c;
  const auto xv = x.data();
  const auto gv = gamma.data();
  const auto bv = beta.data();
  std::vector<T> out(x.numel());
  std::vector<T> xhat(x.numel());
  std::vector<T> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv.data() + r * c;
    T mean = T(0);
    for (std::size_t i = 0; i < c; ++i) mean += row[i];
    mean /= T(c);
    T var = T(0);
    for (std::size_t i = 0; i < c; ++i) {
      T d = row[i] - mean;
      var += d * d;
    }
    var /= T(c);
    T inv = T(1) / std::sqrt(var + eps);
    inv_std[r] = inv;
    for (std::size_t i = 0; i < c; ++i) {
      T xh = (row[i] - mean) * inv;
      xhat[r * c + i] = xh;
      out[r * c + i] = gv[i] * xh + bv[i];
    }
  }
  check_finite_op("layernorm", out);
  auto y = make_tensor<T>(x.shape(), std::move(out), false);
  if (any_tracked<T>({&x, &gamma, &beta})) {
    y.set_tracked(true);
    auto* tape = Tape<T>::current();
    auto xn = x.node(), gn = gamma.node(), bn = beta.node(), yn = y.node();
    tape->record([tape, xn, gn, bn, yn, rows, c, xhat = std::move(xhat),
                  inv_std = std::move(inv_std)]() {
      const auto& gy = tape->grad_buf(yn.get());
      if (xn->tracked) {
        auto& gx = tape->grad_buf(xn.get());
        for (std::size_t r = 0; r < rows; ++r) {
          const T* gyr = gy.data() + r * c;
          const T* xhr = xhat.data() + r * c;
          T sum_h = T(0), sum_hx = T(0);
          for (std::size_t i = 0; i < c; ++i) {
            T h = gn->val[i] * gyr[i];
            sum_h += h;
            sum_hx += h * xhr[i];
          }
          T mh = sum_h / T(c), mhx = sum_hx / T(c);
          for (std::size_t i = 0; i < c; ++i) {
            T h = gn->val[i] * gyr[i];
            gx[r * c + i] += inv_std[r] * (h - mh - xhr[i] * mhx);
          }
        }
      }
      if (gn->tracked) {
        auto& gg = tape->grad_buf(gn.get());
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t i = 0; i < c; ++i) gg[i] += gy[r * c + i] * xhat[r * c + i];
        }
      }
      if (bn->tracked) {
        auto& gb = tape->grad_buf(bn.get());
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t i = 0; i < c; ++i) gb[i] += gy[r * c + i];
        }
      }
    });
  }
  return y;
}

template <class T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  require_axis(x.shape(), axis, "softmax");
  AxisView v = axis_view(x.shape(), axis);
  const auto xv = x.data();
  std::vector<T> out(x.numel());
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t in = 0; in < v.inner; ++in) {
      std::size_t base = o * v.extent * v.inner + in;
      T mx = xv[base];
      for (std::size_t i = 1; i < v.extent; ++i) mx = std::max(mx, xv[base + i * v.inner]);
      T sum = T(0);
      for (std::size_t i = 0; i < v.extent; ++i) {
        T e = std::exp(xv[base + i * v.inner] - mx);
        out[base + i * v.inner] = e;
        sum += e;
      }
      for (std::size_t i = 0; i < v.extent; ++i) out[base + i * v.inner] /= sum;
    }
  }
  check_finite_op("softmax", out);
  auto y = make_tensor<T>(x.shape(), std::move(out), false);
  if (any_tracked<T>({&x})) {
    y.set_tracked(true);
    auto* tape = Tape<T>::current();
    auto xn = x.node(), yn = y.node();
    tape->record([tape, xn, yn, v]() {
      const auto& gy = tape->grad_buf(yn.get());
      auto& gx = tape->grad_buf(xn.get());
      for (std::size_t o = 0; o < v.outer; ++o) {
        for (std::size_t in = 0; in < v.inner; ++in) {
          std::size_t base = o * v.extent * v.inner + in;
          T dot = T(0);
          for (std::size_t i = 0; i < v.extent; ++i) {
            std::size_t idx = base + i * v.inner;
            dot += gy[idx] * yn->val[idx];
          }
          for (std::size_t i = 0; i < v.extent; ++i) {
            std::size_t idx = base + i * v.inner;
            gx[idx] += yn->val[idx] * (gy[idx] - dot);
          }
        }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Structural ops
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> flip(const Tensor<T>& x, std::size_t axis) {
  require_axis(x.shape(), axis, "flip");
  AxisView v = axis_view(x.shape(), axis);
  const auto xv = x.data();
  std::vector<T> out(x.numel());
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t i = 0; i < v.extent; ++i) {
      const T* src = xv.data() + (o * v.extent + i) * v.inner;
      T* dst = out.data() + (o * v.extent + (v.extent - 1 - i)) * v.inner;
      std::copy(src, src + v.inner, dst);
    }
  }
  auto y = make_tensor<T>(x.shape(), std::move(out), false);
  if (any_tracked<T>({&x})) {
    y.set_tracked(true);
    auto* tape = Tape<T>::current();
    auto xn = x.node(), yn = y.node();
    tape->record([tape, xn, yn, v]() {
      const auto& gy = tape->grad_buf(yn.get());
      auto& gx = tape->grad_buf(xn.get());
      for (std::size_t o = 0; o < v.outer; ++o) {
        for (std::size_t i = 0; i < v.extent; ++i) {
          const T* src = gy.data() + (o * v.extent + (v.extent - 1 - i)) * v.inner;
          T* dst = gx.data() + (o * v.extent + i) * v.inner;
          for (std::size_t k = 0; k < v.inner; ++k) dst[k] += src[k];
        }
      }
    });
  }
  return y;
}

template <class T>
Tensor<T> concat(const Tensor<T>& a, const Tensor<T>& b, std::size_t axis) {
  require_axis(a.shape(), axis, "concat");
  if (a.ndim() != b.ndim()) {
    throw ValidationError("concat: rank mismatch " + shape_str(a.shape()) +
                          " vs " + shape_str(b.shape()));
  }
  for (std::size_t i = 0; i < a.ndim(); ++i) {
    if (i != axis && a.shape()[i] != b.shape()[i]) {
      throw ValidationError("concat: shapes " + shape_str(a.shape()) + " and " +
                            shape_str(b.shape()) + " differ off axis " +
                            std::to_string(axis));
    }
  }
  AxisView va = axis_view(a.shape(), axis);
  AxisView vb = axis_view(b.shape(), axis);
  Shape out_shape = a.shape();
  out_shape[axis] = va.extent + vb.extent;
  const auto av = a.data();
  const auto bv = b.data();
  std::vector<T> out(shape_numel(out_shape));
  std::size_t row_a = va.extent * va.inner;
  std::size_t row_b = vb.extent * vb.inner;
  for (std::size_t o = 0; o < va.outer; ++o) {
    T* dst = out.data() + o * (row_a + row_b);
    std::copy(av.data() + o * row_a, av.data() + (o + 1) * row_a, dst);
    std::copy(bv.data() + o * row_b, bv.data() + (o + 1) * row_b, dst + row_a);
  }
  auto y = make_tensor<T>(std::move(out_shape), std::move(out), false);
  if (any_tracked<T>({&a, &b})) {
    y.set_tracked(true);
    auto* tape = Tape<T>::current();
    auto an = a.node(), bn = b.node(), yn = y.node();
    std::size_t outer = va.outer;
    tape->record([tape, an, bn, yn, outer, row_a, row_b]() {
      const auto& gy = tape->grad_buf(yn.get());
      if (an->tracked) {
        auto& ga = tape->grad_buf(an.get());
        for (std::size_t o = 0; o < outer; ++o) {
          const T* src = gy.data() + o * (row_a + row_b);
          for (std::size_t k = 0; k < row_a; ++k) ga[o * row_a + k] += src[k];
        }
      }
      if (bn->tracked) {
        auto& gb = tape->grad_buf(bn.get());
        for (std::size_t o = 0; o < outer; ++o) {
          const T* src = gy.data() + o * (row_a + row_b) + row_a;
          for (std::size_t k = 0; k < row_b; ++k) gb[o * row_b + k] += src[k];
        }
      }
    });
  }
  return y;
}

template <class T>
Tensor<T> gather(const Tensor<T>& x, const std::vector<std::size_t>& indices,
                 std::size_t axis) {
  require_axis(x.shape(), axis, "gather");
  AxisView v = axis_view(x.shape(), axis);
  for (std::size_t idx : indices) {
    if (idx >= v.extent) {
      throw ValidationError("gather: index " + std::to_string(idx) +
                            " out of range for axis extent " +
                            std::to_string(v.extent));
    }
  }
  Shape out_shape = x.shape();
  out_shape[axis] = indices.size();
  const auto xv = x.data();
  std::vector<T> out(shape_numel(out_shape));
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t i = 0; i < indices.size(); ++i) {
      const T* src = xv.data() + (o * v.extent + indices[i]) * v.inner;
      T* dst = out.data() + (o * indices.size() + i) * v.inner;
      std::copy(src, src + v.inner, dst);
    }
  }
  auto y = make_tensor<T>(std::move(out_shape), std::move(out), false);
  if (any_tracked<T>({&x})) {
    y.set_tracked(true);
    auto* tape = Tape<T>::current();
    auto xn = x.node(), yn = y.node();
    tape->record([tape, xn, yn, v, indices]() {
      const auto& gy = tape->grad_buf(yn.get());
      auto& gx = tape->grad_buf(xn.get());
      for (std::size_t o = 0; o < v.outer; ++o) {
        for (std::size_t i = 0; i < indices.size(); ++i) {
          const T* src = gy.data() + (o * indices.size() + i) * v.inner;
          T* dst = gx.data() + (o * v.extent + indices[i]) * v.inner;
          for (std::size_t k = 0; k < v.inner; ++k) dst[k] += src[k];
        }
      }
    });
  }
  return y;
}

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape new_shape) {
  if (shape_numel(new_shape) != x.numel()) {
    throw ValidationError("reshape: cannot view " + shape_str(x.shape()) +
                          " as " + shape_str(new_shape));
  }
  std::vector<T> out(x.data().begin(), x.data().end());
  auto y = make_tensor<T>(std::move(new_shape), std::move(out), false);
  if (any_tracked<T>({&x})) {
    y.set_tracked(true);
    auto* tape = Tape<T>::current();
    auto xn = x.node(), yn = y.node();
    tape->record([tape, xn, yn]() {
      const auto& gy = tape->grad_buf(yn.get());
      auto& gx = tape->grad_buf(xn.get());
      accumulate(gx, gy);
    });
  }
  return y;
}

template <class T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
  const Shape& s = x.shape();
  if (perm.size() != s.size()) {
    throw ValidationError("permute: perm size " + std::to_string(perm.size()) +
                          " != rank " + std::to_string(s.size()));
  }
  std::vector<bool> seen(s.size(), false);
  for (std::size_t p : perm) {
    if (p >= s.size() || seen[p]) throw ValidationError("permute: invalid permutation");
    seen[p] = true;
  }
  Shape out_shape(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) out_shape[i] = s[perm[i]];

  std::vector<std::size_t> in_strides(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) in_strides[i - 1] = in_strides[i] * s[i];
  // Stride in the input buffer for each output axis.
  std::vector<std::size_t> map_strides(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) map_strides[i] = in_strides[perm[i]];

  const auto xv = x.data();
  std::vector<T> out(x.numel());
  std::vector<std::size_t> idx(s.size(), 0);
  for (std::size_t o = 0; o < out.size(); ++o) {
    std::size_t src = 0;
    for (std::size_t i = 0; i < s.size(); ++i) src += idx[i] * map_strides[i];
    out[o] = xv[src];
    for (std::size_t i = s.size(); i-- > 0;) {
      if (++idx[i] < out_shape[i]) break;
      idx[i] = 0;
    }
  }
  auto y = make_tensor<T>(std::move(out_shape), std::move(out), false);
  if (any_tracked<T>({&x})) {
    y.set_tracked(true);
    auto* tape = Tape<T>::current();
    auto xn = x.node(), yn = y.node();
    Shape oshape = y.shape();
    tape->record([tape, xn, yn, map_strides, oshape]() {
      const auto& gy = tape->grad_buf(yn.get());
      auto& gx = tape->grad_buf(xn.get());
      std::vector<std::size_t> idx(oshape.size(), 0);
      for (std::size_t o = 0; o < gy.size(); ++o) {
        std::size_t src = 0;
        for (std::size_t i = 0; i < oshape.size(); ++i) src += idx[i] * map_strides[i];
        gx[src] += gy[o];
        for (std::size_t i = oshape.size(); i-- > 0;) {
          if (++idx[i] < oshape[i]) break;
          idx[i] = 0;
        }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

namespace {

template <class T>
Shape drop_axis(const Tensor<T>& x, std::size_t axis, const char* op) {
  require_axis(x.shape(), axis, op);
  Shape out = x.shape();
  out.erase(out.begin() + static_cast<std::ptrdiff_t>(axis));
  return out;
}

}  // namespace

template <class T>
Tensor<T> reduce_sum(const Tensor<T>& x, std::size_t axis) {
  Shape out_shape = drop_axis(x, axis, "reduce_sum");
  AxisView v = axis_view(x.shape(), axis);
  const auto xv = x.data();
  std::vector<T> out(shape_numel(out_shape), T(0));
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t i = 0; i < v.extent; ++i) {
      const T* src = xv.data() + (o * v.extent + i) * v.inner;
      T* dst = out.data() + o * v.inner;
      for (std::size_t k = 0; k < v.inner; ++k) dst[k] += src[k];
    }
  }
  auto y = make_tensor<T>(std::move(out_shape), std::move(out), false);
  if (any_tracked<T>({&x})) {
    y.set_tracked(true);
    auto* tape = Tape<T>::current();
    auto xn = x.node(), yn = y.node();
    tape->record([tape, xn, yn, v]() {
      const auto& gy = tape->grad_buf(yn.get());
      auto& gx = tape->grad_buf(xn.get());
      for (std::size_t o = 0; o < v.outer; ++o) {
        for (std::size_t i = 0; i < v.extent; ++i) {
          T* dst = gx.data() + (o * v.extent + i) * v.inner;
          const T* src = gy.data() + o * v.inner;
          for (std::size_t k = 0; k < v.inner; ++k) dst[k] += src[k];
        }
      }
    });
  }
  return y;
}

template <class T>
Tensor<T> reduce_mean(const Tensor<T>& x, std::size_t axis) {
  require_axis(x.shape(), axis, "reduce_mean");
  T inv = T(1) / T(x.shape()[axis]);
  return mul_scalar(reduce_sum(x, axis), inv);
}

template <class T>
Tensor<T> reduce_var(const Tensor<T>& x, std::size_t axis) {
  Shape out_shape = drop_axis(x, axis, "reduce_var");
  AxisView v = axis_view(x.shape(), axis);
  const auto xv = x.data();
  std::size_t n_out = shape_numel(out_shape);
  std::vector<T> mean(n_out, T(0));
  std::vector<T> out(n_out, T(0));
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t i = 0; i < v.extent; ++i) {
      const T* src = xv.data() + (o * v.extent + i) * v.inner;
      for (std::size_t k = 0; k < v.inner; ++k) mean[o * v.inner + k] += src[k];
    }
  }
  for (auto& m : mean) m /= T(v.extent);
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t i = 0; i < v.extent; ++i) {
      const T* src = xv.data() + (o * v.extent + i) * v.inner;
      for (std::size_t k = 0; k < v.inner; ++k) {
        T d = src[k] - mean[o * v.inner + k];
        out[o * v.inner + k] += d * d;
      }
    }
  }
  for (auto& s : out) s /= T(v.extent);
  auto y = make_tensor<T>(std::move(out_shape), std::move(out), false);
  if (any_tracked<T>({&x})) {
    y.set_tracked(true);
    auto* tape = Tape<T>::current();
    auto xn = x.node(), yn = y.node();
    tape->record([tape, xn, yn, v, mean = std::move(mean)]() {
      const auto& gy = tape->grad_buf(yn.get());
      auto& gx = tape->grad_buf(xn.get());
      T scale = T(2) / T(v.extent);
      for (std::size_t o = 0; o < v.outer; ++o) {
        for (std::size_t i = 0; i < v.extent; ++i) {
          std::size_t base = (o * v.extent + i) * v.inner;
          for (std::size_t k = 0; k < v.inner; ++k) {
            gx[base + k] += gy[o * v.inner + k] * scale *
                            (xn->val[base + k] - mean[o * v.inner + k]);
          }
        }
      }
    });
  }
  return y;
}

template <class T>
Tensor<T> reduce_max(const Tensor<T>& x, std::size_t axis) {
  Shape out_shape = drop_axis(x, axis, "reduce_max");
  AxisView v = axis_view(x.shape(), axis);
  const auto xv = x.data();
  std::size_t n_out = shape_numel(out_shape);
  std::vector<T> out(n_out);
  std::vector<std::size_t> argmax(n_out, 0);
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t k = 0; k < v.inner; ++k) {
      std::size_t best = 0;
      T bv = xv[o * v.extent * v.inner + k];
      for (std::size_t i = 1; i < v.extent; ++i) {
        T cand = xv[(o * v.extent + i) * v.inner + k];
        if (cand > bv) {
          bv = cand;
          best = i;
        }
      }
      out[o * v.inner + k] = bv;
      argmax[o * v.inner + k] = best;
    }
  }
  auto y = make_tensor<T>(std::move(out_shape), std::move(out), false);
  if (any_tracked<T>({&x})) {
    y.set_tracked(true);
    auto* tape = Tape<T>::current();
    auto xn = x.node(), yn = y.node();
    tape->record([tape, xn, yn, v, argmax = std::move(argmax)]() {
      const auto& gy = tape->grad_buf(yn.get());
      auto& gx = tape->grad_buf(xn.get());
      for (std::size_t o = 0; o < v.outer; ++o) {
        for (std::size_t k = 0; k < v.inner; ++k) {
          std::size_t i = argmax[o * v.inner + k];
          gx[(o * v.extent + i) * v.inner + k] += gy[o * v.inner + k];
        }
      }
    });
  }
  return y;
}

template <class T>
Tensor<T> sum_all(const Tensor<T>& x) {
  const auto xv = x.data();
  T acc = T(0);
  for (T v : xv) acc += v;
  auto y = Tensor<T>::scalar(acc);
  if (any_tracked<T>({&x})) {
    y.set_tracked(true);
    auto* tape = Tape<T>::current();
    auto xn = x.node(), yn = y.node();
    tape->record([tape, xn, yn]() {
      const auto& gy = tape->grad_buf(yn.get());
      auto& gx = tape->grad_buf(xn.get());
      for (auto& g : gx) g += gy[0];
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Losses / regularization
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::size_t label) {
  if (logits.ndim() != 1) {
    throw ValidationError("cross_entropy: expected rank-1 logits, got " +
                          shape_str(logits.shape()));
  }
  std::size_t n = logits.numel();
  if (label >= n) {
    throw ValidationError("cross_entropy: label " + std::to_string(label) +
                          " out of range for " + std::to_string(n) + " classes");
  }
  const auto lv = logits.data();
  T mx = lv[0];
  for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, lv[i]);
  T sum = T(0);
  for (std::size_t i = 0; i < n; ++i) sum += std::exp(lv[i] - mx);
  T loss = mx + std::log(sum) - lv[label];
  check_finite_op("cross_entropy", std::vector<T>{loss});
  auto y = Tensor<T>::scalar(loss);
  if (any_tracked<T>({&logits})) {
    y.set_tracked(true);
    auto* tape = Tape<T>::current();
    auto ln = logits.node(), yn = y.node();
    tape->record([tape, ln, yn, label, mx, sum, n]() {
      const auto& gy = tape->grad_buf(yn.get());
      auto& gl = tape->grad_buf(ln.get());
      for (std::size_t i = 0; i < n; ++i) {
        T p = std::exp(ln->val[i] - mx) / sum;
        gl[i] += gy[0] * (p - (i == label ? T(1) : T(0)));
      }
    });
  }
  return y;
}

template <class T>
Tensor<T> dropout(const Tensor<T>& x, T rate, std::mt19937_64& rng, bool training) {
  if (rate < T(0) || rate >= T(1)) {
    throw ValidationError("dropout: rate must be in [0,1)");
  }
  if (!training || rate == T(0)) return x;
  std::uniform_real_distribution<T> unif(T(0), T(1));
  T keep = T(1) - rate;
  T scale = T(1) / keep;
  std::vector<T> mask(x.numel());
  for (auto& m : mask) m = unif(rng) < keep ? scale : T(0);
  const auto xv = x.data();
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * mask[i];
  auto y = make_tensor<T>(x.shape(), std::move(out), false);
  if (any_tracked<T>({&x})) {
    y.set_tracked(true);
    auto* tape = Tape<T>::current();
    auto xn = x.node(), yn = y.node();
    tape->record([tape, xn, yn, mask = std::move(mask)]() {
      const auto& gy = tape->grad_buf(yn.get());
      auto& gx = tape->grad_buf(xn.get());
      for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * mask[i];
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Depthwise causal conv over the scan axis
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> conv1d_depthwise_causal(const Tensor<T>& x, const Tensor<T>& w,
                                  const Tensor<T>& b) {
  if (x.ndim() != 2 || w.ndim() != 2 || b.ndim() != 1) {
    throw ValidationError("conv1d: expected x[L,C], w[C,d], b[C]");
  }
  std::size_t len = x.shape()[0], c = x.shape()[1];
  std::size_t d = w.shape()[1];
  if (w.shape()[0] != c || b.numel() != c) {
    throw ValidationError("conv1d: channel mismatch, x " + shape_str(x.shape()) +
                          " w " + shape_str(w.shape()));
  }
  const auto xv = x.data();
  const auto wv = w.data();
  const auto bv = b.data();
  std::vector<T> out(x.numel());
  for (std::size_t t = 0; t < len; ++t) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      T acc = bv[ch];
      std::size_t jmax = std::min(d, t + 1);
      for (std::size_t j = 0; j < jmax; ++j) acc += wv[ch * d + j] * xv[(t - j) * c + ch];
      out[t * c + ch] = acc;
    }
  }
  check_finite_op("conv1d_depthwise_causal", out);
  auto y = make_tensor<T>(x.shape(), std::move(out), false);
  if (any_tracked<T>({&x, &w, &b})) {
    y.set_tracked(true);
    auto* tape = Tape<T>::current();
    auto xn = x.node(), wn = w.node(), bn = b.node(), yn = y.node();
    tape->record([tape, xn, wn, bn, yn, len, c, d]() {
      const auto& gy = tape->grad_buf(yn.get());
      if (xn->tracked) {
        auto& gx = tape->grad_buf(xn.get());
        for (std::size_t t = 0; t < len; ++t) {
          for (std::size_t ch = 0; ch < c; ++ch) {
            T acc = T(0);
            std::size_t jmax = std::min(d, len - t);
            for (std::size_t j = 0; j < jmax; ++j) acc += wn->val[ch * d + j] * gy[(t + j) * c + ch];
            gx[t * c + ch] += acc;
          }
        }
      }
      if (wn->tracked) {
        auto& gw = tape->grad_buf(wn.get());
        for (std::size_t t = 0; t < len; ++t) {
          for (std::size_t ch = 0; ch < c; ++ch) {
            std::size_t jmax = std::min(d, t + 1);
            for (std::size_t j = 0; j < jmax; ++j) gw[ch * d + j] += gy[t * c + ch] * xn->val[(t - j) * c + ch];
          }
        }
      }
      if (bn->tracked) {
        auto& gb = tape->grad_buf(bn.get());
        for (std::size_t t = 0; t < len; ++t) {
          for (std::size_t ch = 0; ch < c; ++ch) gb[ch] += gy[t * c + ch];
        }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Explicit instantiations
// ---------------------------------------------------------------------------

#define M3D_INSTANTIATE_TENSOR(T)                                              \
  template class Tensor<T>;                                                    \
  template class Tape<T>;                                                      \
  template Tensor<T> make_tensor(Shape, std::vector<T>, bool);                 \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                  \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                  \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                  \
  template Tensor<T> divide(const Tensor<T>&, const Tensor<T>&);               \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                          \
  template Tensor<T> mul_scalar(const Tensor<T>&, T);                          \
  template Tensor<T> neg(const Tensor<T>&);                                    \
  template Tensor<T> exp(const Tensor<T>&);                                    \
  template Tensor<T> sqrt(const Tensor<T>&);                                   \
  template Tensor<T> recip(const Tensor<T>&);                                  \
  template Tensor<T> softplus(const Tensor<T>&);                               \
  template Tensor<T> silu(const Tensor<T>&);                                   \
  template Tensor<T> gelu(const Tensor<T>&);                                   \
  template Tensor<T> relu(const Tensor<T>&);                                   \
  template Tensor<T> mul_prefix(const Tensor<T>&, const Tensor<T>&);           \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);               \
  template Tensor<T> layernorm(const Tensor<T>&, const Tensor<T>&,             \
                               const Tensor<T>&, T);                           \
  template Tensor<T> softmax(const Tensor<T>&, std::size_t);                   \
  template Tensor<T> flip(const Tensor<T>&, std::size_t);                      \
  template Tensor<T> concat(const Tensor<T>&, const Tensor<T>&, std::size_t);  \
  template Tensor<T> gather(const Tensor<T>&, const std::vector<std::size_t>&, \
                            std::size_t);                                      \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                         \
  template Tensor<T> permute(const Tensor<T>&, const std::vector<std::size_t>&); \
  template Tensor<T> reduce_sum(const Tensor<T>&, std::size_t);                \
  template Tensor<T> reduce_mean(const Tensor<T>&, std::size_t);               \
  template Tensor<T> reduce_var(const Tensor<T>&, std::size_t);                \
  template Tensor<T> reduce_max(const Tensor<T>&, std::size_t);                \
  template Tensor<T> sum_all(const Tensor<T>&);                                \
  template Tensor<T> cross_entropy(const Tensor<T>&, std::size_t);             \
  template Tensor<T> dropout(const Tensor<T>&, T, std::mt19937_64&, bool);     \
  template Tensor<T> conv1d_depthwise_causal(const Tensor<T>&, const Tensor<T>&, \
                                             const Tensor<T>&);

M3D_INSTANTIATE_TENSOR(float)
M3D_INSTANTIATE_TENSOR(double)

#undef M3D_INSTANTIATE_TENSOR

}  // namespace m3d
