#include "tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_map>

namespace cmnas {

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) {
    if (d <= 0) throw Error("tensor shape extents must be positive");
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << "]";
  return os.str();
}

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
  return constant(shape, 0.0, requires_grad);
}

Tensor Tensor::constant(const Shape& shape, double value, bool requires_grad) {
  auto node = std::make_shared<TensorNode>();
  node->shape = shape;
  node->values.assign(static_cast<std::size_t>(shape_numel(shape)), value);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_values({1}, {value}, requires_grad);
}

Tensor Tensor::from_values(const Shape& shape, std::vector<double> values, bool requires_grad) {
  if (static_cast<std::int64_t>(values.size()) != shape_numel(shape))
    throw Error("from_values: data length does not match shape " + shape_str(shape));
  auto node = std::make_shared<TensorNode>();
  node->shape = shape;
  node->values = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

const Shape& Tensor::shape() const {
  if (!node_) throw Error("undefined tensor");
  return node_->shape;
}

std::int64_t Tensor::numel() const { return static_cast<std::int64_t>(values().size()); }

std::int64_t Tensor::dim(int i) const {
  const auto& s = shape();
  if (i < 0 || static_cast<std::size_t>(i) >= s.size()) throw Error("dim index out of range");
  return s[static_cast<std::size_t>(i)];
}

bool Tensor::is_scalar() const { return defined() && numel() == 1; }

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool value) {
  if (!node_) throw Error("undefined tensor");
  node_->requires_grad = value;
}

std::vector<double>& Tensor::values() {
  if (!node_) throw Error("undefined tensor");
  return node_->values;
}

const std::vector<double>& Tensor::values() const {
  if (!node_) throw Error("undefined tensor");
  return node_->values;
}

double Tensor::item() const {
  if (!is_scalar()) throw Error("item() requires a scalar tensor");
  return values()[0];
}

std::vector<double> Tensor::grad() const {
  if (!node_) throw Error("undefined tensor");
  if (node_->grad.empty()) return std::vector<double>(values().size(), 0.0);
  return node_->grad;
}

void Tensor::zero_grad() {
  if (!node_) throw Error("undefined tensor");
  node_->grad.assign(node_->values.size(), 0.0);
}

// ---------------------------------------------------------------------------
// OpStats
// ---------------------------------------------------------------------------

namespace {
thread_local OpStats* g_active_stats = nullptr;
thread_local Tape* g_active_tape = nullptr;
}  // namespace

OpStats::OpStats() {
  prev_ = g_active_stats;
  g_active_stats = this;
}

OpStats::~OpStats() { g_active_stats = prev_; }

OpStats* OpStats::active() { return g_active_stats; }

void OpStats::report(const char* op, std::int64_t output_elems, std::int64_t macs) {
  if (g_active_stats) g_active_stats->entries_.push_back({op, output_elems, macs});
}

std::int64_t OpStats::total_macs() const {
  std::int64_t t = 0;
  for (const auto& e : entries_) t += e.macs;
  return t;
}

std::int64_t OpStats::count(std::string_view op) const {
  std::int64_t t = 0;
  for (const auto& e : entries_)
    if (e.op == op) ++t;
  return t;
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

Tape::Tape() {
  prev_ = g_active_tape;
  g_active_tape = this;
}

Tape::~Tape() { g_active_tape = prev_; }

Tape* Tape::active() { return g_active_tape; }

void Tape::record(const char* op, const std::vector<std::shared_ptr<TensorNode>>& inputs,
                  std::shared_ptr<TensorNode> output, std::function<void()> backward_fn) {
  for (const auto& in : inputs) {
    if (in->requires_grad && seen_.insert(in.get()).second) nodes_.push_back(in);
  }
  outputs_.insert(output.get());
  if (seen_.insert(output.get()).second) nodes_.push_back(output);
  records_.push_back({op, std::move(backward_fn)});
}

void Tape::backward(const Tensor& loss) {
  if (backward_done_) throw Error("backward: tape already consumed; run a new forward pass");
  if (!loss.defined() || !loss.is_scalar()) throw Error("backward: loss must be a scalar tensor");
  if (!loss.requires_grad() || outputs_.find(loss.node()) == outputs_.end())
    throw Error("backward: loss was not produced by operations on this tape");
  backward_done_ = true;

  for (const auto& n : nodes_)
    if (n->requires_grad) n->grad.assign(n->values.size(), 0.0);
  loss.node()->grad.assign(1, 1.0);

  for (auto it = records_.rbegin(); it != records_.rend(); ++it) it->backward_fn();

  for (const auto& n : nodes_) {
    for (double g : n->grad)
      if (!std::isfinite(g)) throw Error("backward: non-finite gradient encountered");
  }
}

// ---------------------------------------------------------------------------
// Primitive helpers
// ---------------------------------------------------------------------------

namespace {

void check_defined(const char* op, const Tensor& t) {
  if (!t.defined()) throw Error(std::string(op) + ": undefined tensor operand");
}

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  check_defined(op, a);
  check_defined(op, b);
  if (a.shape() != b.shape())
    throw Error(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                shape_str(b.shape()));
}

void check_finite(const char* op, const std::vector<double>& vals) {
  for (double v : vals)
    if (!std::isfinite(v)) throw Error(std::string(op) + ": non-finite value in forward output");
}

bool any_requires_grad(std::initializer_list<const Tensor*> ts) {
  for (const auto* t : ts)
    if (t->requires_grad()) return true;
  return false;
}

// Finalize a primitive: finite-check, op stats, tape record.
Tensor finish(const char* op, const Shape& shape, std::vector<double> vals,
              std::initializer_list<const Tensor*> inputs, std::int64_t macs,
              const std::function<std::function<void()>(std::shared_ptr<TensorNode>)>&
                  make_backward) {
  check_finite(op, vals);
  OpStats::report(op, static_cast<std::int64_t>(vals.size()), macs);
  bool rg = Tape::active() != nullptr && any_requires_grad(inputs);
  Tensor out = Tensor::from_values(shape, std::move(vals), rg);
  if (rg) {
    std::vector<std::shared_ptr<TensorNode>> in_nodes;
    for (const auto* t : inputs) in_nodes.push_back(t->node_ptr());
    Tape::active()->record(op, in_nodes, out.node_ptr(), make_backward(out.node_ptr()));
  }
  return out;
}

void accumulate(TensorNode* n, std::size_t i, double g) {
  if (n->requires_grad) n->grad[i] += g;
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape("add", a, b);
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i];
  return finish("add", a.shape(), std::move(out), {&a, &b}, 0, [&](auto on) {
    return [an = a.node_ptr(), bn = b.node_ptr(), on] {
      const auto& g = on->grad;
      for (std::size_t i = 0; i < g.size(); ++i) {
        accumulate(an.get(), i, g[i]);
        accumulate(bn.get(), i, g[i]);
      }
    };
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape("sub", a, b);
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] - bv[i];
  return finish("sub", a.shape(), std::move(out), {&a, &b}, 0, [&](auto on) {
    return [an = a.node_ptr(), bn = b.node_ptr(), on] {
      const auto& g = on->grad;
      for (std::size_t i = 0; i < g.size(); ++i) {
        accumulate(an.get(), i, g[i]);
        accumulate(bn.get(), i, -g[i]);
      }
    };
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape("mul", a, b);
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i];
  return finish("mul", a.shape(), std::move(out), {&a, &b},
                static_cast<std::int64_t>(av.size()), [&](auto on) {
                  return [an = a.node_ptr(), bn = b.node_ptr(), on] {
                    const auto& g = on->grad;
                    for (std::size_t i = 0; i < g.size(); ++i) {
                      accumulate(an.get(), i, g[i] * bn->values[i]);
                      accumulate(bn.get(), i, g[i] * an->values[i]);
                    }
                  };
                });
}

Tensor div(const Tensor& a, const Tensor& b) {
  check_same_shape("div", a, b);
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] / bv[i];
  return finish("div", a.shape(), std::move(out), {&a, &b},
                static_cast<std::int64_t>(av.size()), [&](auto on) {
                  return [an = a.node_ptr(), bn = b.node_ptr(), on] {
                    const auto& g = on->grad;
                    for (std::size_t i = 0; i < g.size(); ++i) {
                      double inv = 1.0 / bn->values[i];
                      accumulate(an.get(), i, g[i] * inv);
                      accumulate(bn.get(), i, -g[i] * an->values[i] * inv * inv);
                    }
                  };
                });
}

Tensor scale(const Tensor& a, double c) {
  check_defined("scale", a);
  const auto& av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * c;
  return finish("scale", a.shape(), std::move(out), {&a}, static_cast<std::int64_t>(av.size()),
                [&](auto on) {
                  return [an = a.node_ptr(), on, c] {
                    const auto& g = on->grad;
                    for (std::size_t i = 0; i < g.size(); ++i) accumulate(an.get(), i, g[i] * c);
                  };
                });
}

Tensor add_scalar(const Tensor& a, double c) {
  check_defined("add_scalar", a);
  const auto& av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + c;
  return finish("add_scalar", a.shape(), std::move(out), {&a}, 0, [&](auto on) {
    return [an = a.node_ptr(), on] {
      const auto& g = on->grad;
      for (std::size_t i = 0; i < g.size(); ++i) accumulate(an.get(), i, g[i]);
    };
  });
}

Tensor relu(const Tensor& a) {
  check_defined("relu", a);
  const auto& av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] > 0.0 ? av[i] : 0.0;
  return finish("relu", a.shape(), std::move(out), {&a}, 0, [&](auto on) {
    return [an = a.node_ptr(), on] {
      const auto& g = on->grad;
      for (std::size_t i = 0; i < g.size(); ++i)
        if (an->values[i] > 0.0) accumulate(an.get(), i, g[i]);
    };
  });
}

Tensor exp(const Tensor& a) {
  check_defined("exp", a);
  const auto& av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = std::exp(av[i]);
  return finish("exp", a.shape(), std::move(out), {&a}, static_cast<std::int64_t>(av.size()),
                [&](auto on) {
                  return [an = a.node_ptr(), on] {
                    const auto& g = on->grad;
                    for (std::size_t i = 0; i < g.size(); ++i)
                      accumulate(an.get(), i, g[i] * on->values[i]);
                  };
                });
}

Tensor log(const Tensor& a) {
  check_defined("log", a);
  const auto& av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) {
    if (av[i] <= 0.0) throw Error("log: input must be strictly positive");
    out[i] = std::log(av[i]);
  }
  return finish("log", a.shape(), std::move(out), {&a}, static_cast<std::int64_t>(av.size()),
                [&](auto on) {
                  return [an = a.node_ptr(), on] {
                    const auto& g = on->grad;
                    for (std::size_t i = 0; i < g.size(); ++i)
                      accumulate(an.get(), i, g[i] / an->values[i]);
                  };
                });
}

Tensor sqrt(const Tensor& a) {
  check_defined("sqrt", a);
  const auto& av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) {
    if (av[i] < 0.0) throw Error("sqrt: input must be non-negative");
    out[i] = std::sqrt(av[i]);
  }
  return finish("sqrt", a.shape(), std::move(out), {&a}, static_cast<std::int64_t>(av.size()),
                [&](auto on) {
                  return [an = a.node_ptr(), on] {
                    const auto& g = on->grad;
                    for (std::size_t i = 0; i < g.size(); ++i)
                      accumulate(an.get(), i, g[i] * 0.5 / on->values[i]);
                  };
                });
}

Tensor sqrt_clamped(const Tensor& a) {
  check_defined("sqrt_clamped", a);
  const auto& av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] > 0.0 ? std::sqrt(av[i]) : 0.0;
  return finish("sqrt_clamped", a.shape(), std::move(out), {&a},
                static_cast<std::int64_t>(av.size()), [&](auto on) {
                  return [an = a.node_ptr(), on] {
                    const auto& g = on->grad;
                    for (std::size_t i = 0; i < g.size(); ++i)
                      if (an->values[i] > 0.0) accumulate(an.get(), i, g[i] * 0.5 / on->values[i]);
                  };
                });
}

Tensor pow(const Tensor& a, double p) {
  check_defined("pow", a);
  const auto& av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = std::pow(av[i], p);
  return finish("pow", a.shape(), std::move(out), {&a}, static_cast<std::int64_t>(av.size()),
                [&](auto on) {
                  return [an = a.node_ptr(), on, p] {
                    const auto& g = on->grad;
                    for (std::size_t i = 0; i < g.size(); ++i)
                      accumulate(an.get(), i, g[i] * p * std::pow(an->values[i], p - 1.0));
                  };
                });
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

namespace {

// C[m,n] += A[m,k] * B[k,n]; ikj order so the inner loop is contiguous.
#if defined(__GNUC__) || defined(__clang__)
#define CMNAS_GEMM_VEC 1
typedef double v4d __attribute__((vector_size(32)));
static inline v4d v4load(const double* p) {
  v4d v;
  __builtin_memcpy(&v, p, sizeof(v));
  return v;
}
static inline void v4store(double* p, v4d v) { __builtin_memcpy(p, &v, sizeof(v)); }
static inline v4d v4splat(double x) { return v4d{x, x, x, x}; }
#endif

// Register-tiled axpy GEMM core shared by gemm_acc and gemm_tn_acc.
// Computes C[m,n] += A' * B where element (i,p) of A' is aelem(i, p) and row p
// of B starts at B + p * bstride. Each C element accumulates in strict p order,
// so results match the naive triple loop bit for bit.
template <typename AIdx>
static void gemm_axpy_core(const double* B, double* C, std::int64_t m, std::int64_t k,
                           std::int64_t n, std::int64_t bstride, AIdx aelem) {
#ifdef CMNAS_GEMM_VEC
  constexpr std::int64_t MI = 4, NJ = 12;
  std::int64_t mfull = m - m % MI;
  std::int64_t nfull = n - n % NJ;
  for (std::int64_t i0 = 0; i0 < mfull; i0 += MI) {
    for (std::int64_t j0 = 0; j0 < nfull; j0 += NJ) {
      double* c0 = C + (i0 + 0) * n + j0;
      double* c1 = C + (i0 + 1) * n + j0;
      double* c2 = C + (i0 + 2) * n + j0;
      double* c3 = C + (i0 + 3) * n + j0;
      v4d a00 = v4load(c0), a01 = v4load(c0 + 4), a02 = v4load(c0 + 8);
      v4d a10 = v4load(c1), a11 = v4load(c1 + 4), a12 = v4load(c1 + 8);
      v4d a20 = v4load(c2), a21 = v4load(c2 + 4), a22 = v4load(c2 + 8);
      v4d a30 = v4load(c3), a31 = v4load(c3 + 4), a32 = v4load(c3 + 8);
      for (std::int64_t p = 0; p < k; ++p) {
        const double* bp = B + p * bstride + j0;
        v4d b0 = v4load(bp), b1 = v4load(bp + 4), b2 = v4load(bp + 8);
        v4d s0 = v4splat(aelem(i0 + 0, p));
        a00 += s0 * b0;
        a01 += s0 * b1;
        a02 += s0 * b2;
        v4d s1 = v4splat(aelem(i0 + 1, p));
        a10 += s1 * b0;
        a11 += s1 * b1;
        a12 += s1 * b2;
        v4d s2 = v4splat(aelem(i0 + 2, p));
        a20 += s2 * b0;
        a21 += s2 * b1;
        a22 += s2 * b2;
        v4d s3 = v4splat(aelem(i0 + 3, p));
        a30 += s3 * b0;
        a31 += s3 * b1;
        a32 += s3 * b2;
      }
      v4store(c0, a00), v4store(c0 + 4, a01), v4store(c0 + 8, a02);
      v4store(c1, a10), v4store(c1 + 4, a11), v4store(c1 + 8, a12);
      v4store(c2, a20), v4store(c2 + 4, a21), v4store(c2 + 8, a22);
      v4store(c3, a30), v4store(c3 + 4, a31), v4store(c3 + 8, a32);
    }
    if (nfull < n) {
      for (std::int64_t p = 0; p < k; ++p) {
        const double* bp = B + p * bstride;
        for (std::int64_t ii = 0; ii < MI; ++ii) {
          double av = aelem(i0 + ii, p);
          double* crow = C + (i0 + ii) * n;
          for (std::int64_t j = nfull; j < n; ++j) crow[j] += av * bp[j];
        }
      }
    }
  }
  std::int64_t itail = mfull;
#else
  std::int64_t itail = 0;
#endif
  for (std::int64_t i = itail; i < m; ++i) {
    double* crow = C + i * n;
    for (std::int64_t p = 0; p < k; ++p) {
      double av = aelem(i, p);
      const double* bp = B + p * bstride;
      for (std::int64_t j = 0; j < n; ++j) crow[j] += av * bp[j];
    }
  }
}

void gemm_acc(const double* A, const double* B, double* C, std::int64_t m, std::int64_t k,
              std::int64_t n) {
  gemm_axpy_core(B, C, m, k, n, n,
                 [A, k](std::int64_t i, std::int64_t p) { return A[i * k + p]; });
}

// C[m,n] += A[m,k] * B[n,k]^T. The reduction runs four-lane partial sums that
// are combined lane by lane at the end, so the rounding differs slightly from
// the naive dot product but is fixed for a given build.
void gemm_nt_acc(const double* A, const double* B, double* C, std::int64_t m, std::int64_t k,
                 std::int64_t n) {
#ifdef CMNAS_GEMM_VEC
  constexpr std::int64_t MI = 4, NJ = 2;
  std::int64_t mfull = m - m % MI;
  std::int64_t nfull = n - n % NJ;
  std::int64_t kfull = k - k % 4;
  for (std::int64_t i0 = 0; i0 < mfull; i0 += MI) {
    for (std::int64_t j0 = 0; j0 < nfull; j0 += NJ) {
      const double* a0 = A + (i0 + 0) * k;
      const double* a1 = A + (i0 + 1) * k;
      const double* a2 = A + (i0 + 2) * k;
      const double* a3 = A + (i0 + 3) * k;
      const double* b0 = B + (j0 + 0) * k;
      const double* b1 = B + (j0 + 1) * k;
      v4d s00{}, s01{}, s10{}, s11{}, s20{}, s21{}, s30{}, s31{};
      for (std::int64_t p = 0; p < kfull; p += 4) {
        v4d vb0 = v4load(b0 + p), vb1 = v4load(b1 + p);
        v4d va0 = v4load(a0 + p), va1 = v4load(a1 + p);
        v4d va2 = v4load(a2 + p), va3 = v4load(a3 + p);
        s00 += va0 * vb0;
        s01 += va0 * vb1;
        s10 += va1 * vb0;
        s11 += va1 * vb1;
        s20 += va2 * vb0;
        s21 += va2 * vb1;
        s30 += va3 * vb0;
        s31 += va3 * vb1;
      }
      auto finish_dot = [&](v4d s, const double* ar, const double* br) {
        double acc = ((s[0] + s[1]) + (s[2] + s[3]));
        for (std::int64_t p = kfull; p < k; ++p) acc += ar[p] * br[p];
        return acc;
      };
      C[(i0 + 0) * n + j0 + 0] += finish_dot(s00, a0, b0);
      C[(i0 + 0) * n + j0 + 1] += finish_dot(s01, a0, b1);
      C[(i0 + 1) * n + j0 + 0] += finish_dot(s10, a1, b0);
      C[(i0 + 1) * n + j0 + 1] += finish_dot(s11, a1, b1);
      C[(i0 + 2) * n + j0 + 0] += finish_dot(s20, a2, b0);
      C[(i0 + 2) * n + j0 + 1] += finish_dot(s21, a2, b1);
      C[(i0 + 3) * n + j0 + 0] += finish_dot(s30, a3, b0);
      C[(i0 + 3) * n + j0 + 1] += finish_dot(s31, a3, b1);
    }
    for (std::int64_t j = nfull; j < n; ++j)
      for (std::int64_t ii = 0; ii < MI; ++ii) {
        const double* arow = A + (i0 + ii) * k;
        const double* brow = B + j * k;
        double acc = 0.0;
        for (std::int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
        C[(i0 + ii) * n + j] += acc;
      }
  }
  std::int64_t itail = mfull;
#else
  std::int64_t itail = 0;
#endif
  for (std::int64_t i = itail; i < m; ++i) {
    const double* arow = A + i * k;
    for (std::int64_t j = 0; j < n; ++j) {
      const double* brow = B + j * k;
      double acc = 0.0;
      for (std::int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      C[i * n + j] += acc;
    }
  }
}

// C[k,n] += A[m,k]^T * B[m,n]
void gemm_tn_acc(const double* A, const double* B, double* C, std::int64_t m, std::int64_t k,
                 std::int64_t n) {
  gemm_axpy_core(B, C, k, m, n, n,
                 [A, k](std::int64_t i, std::int64_t p) { return A[p * k + i]; });
}

void check_matrix(const char* op, const Tensor& t) {
  check_defined(op, t);
  if (t.shape().size() != 2) throw Error(std::string(op) + ": expected a 2-D tensor");
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_matrix("matmul", a);
  check_matrix("matmul", b);
  std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) throw Error("matmul: inner dimensions disagree");
  std::vector<double> out(static_cast<std::size_t>(m * n), 0.0);
  gemm_acc(a.values().data(), b.values().data(), out.data(), m, k, n);
  return finish("matmul", {m, n}, std::move(out), {&a, &b}, m * k * n, [&](auto on) {
    return [an = a.node_ptr(), bn = b.node_ptr(), on, m, k, n] {
      const auto& g = on->grad;
      if (an->requires_grad) gemm_nt_acc(g.data(), bn->values.data(), an->grad.data(), m, n, k);
      if (bn->requires_grad) gemm_tn_acc(an->values.data(), g.data(), bn->grad.data(), m, k, n);
    };
  });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  check_matrix("matmul_nt", a);
  check_matrix("matmul_nt", b);
  std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k) throw Error("matmul_nt: inner dimensions disagree");
  std::vector<double> out(static_cast<std::size_t>(m * n), 0.0);
  gemm_nt_acc(a.values().data(), b.values().data(), out.data(), m, k, n);
  return finish("matmul_nt", {m, n}, std::move(out), {&a, &b}, m * k * n, [&](auto on) {
    return [an = a.node_ptr(), bn = b.node_ptr(), on, m, k, n] {
      const auto& g = on->grad;
      // dA = G * B ; dB = G^T * A
      if (an->requires_grad) gemm_acc(g.data(), bn->values.data(), an->grad.data(), m, n, k);
      if (bn->requires_grad) gemm_tn_acc(g.data(), an->values.data(), bn->grad.data(), m, n, k);
    };
  });
}

// ---------------------------------------------------------------------------
// Convolution / pooling
// ---------------------------------------------------------------------------

namespace {

struct ConvDims {
  std::int64_t n, cin, h, w, cout, kh, kw, hout, wout;
  int stride, pad;
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, int stride, int pad) {
  if (x.shape().size() != 4) throw Error("conv2d: input must be [n,c,h,w]");
  if (w.shape().size() != 4) throw Error("conv2d: weight must be [cout,cin,kh,kw]");
  ConvDims d;
  d.n = x.dim(0);
  d.cin = x.dim(1);
  d.h = x.dim(2);
  d.w = x.dim(3);
  d.cout = w.dim(0);
  d.kh = w.dim(2);
  d.kw = w.dim(3);
  d.stride = stride;
  d.pad = pad;
  if (w.dim(1) != d.cin) throw Error("conv2d: channel mismatch");
  if (d.kh != d.kw || (d.kh != 1 && d.kh != 3 && d.kh != 7))
    throw Error("conv2d: kernel must be square with size 1, 3 or 7");
  if (stride != 1 && stride != 2) throw Error("conv2d: stride must be 1 or 2");
  if (pad < 0) throw Error("conv2d: negative padding");
  d.hout = (d.h + 2 * pad - d.kh) / stride + 1;
  d.wout = (d.w + 2 * pad - d.kw) / stride + 1;
  if (d.hout <= 0 || d.wout <= 0) throw Error("conv2d: output would be empty");
  return d;
}

// cols: [cin*kh*kw, hout*wout] for one image.
void im2col(const double* img, const ConvDims& d, double* cols) {
  std::int64_t col_w = d.hout * d.wout;
  for (std::int64_t c = 0; c < d.cin; ++c) {
    for (std::int64_t ki = 0; ki < d.kh; ++ki) {
      for (std::int64_t kj = 0; kj < d.kw; ++kj) {
        double* dst = cols + ((c * d.kh + ki) * d.kw + kj) * col_w;
        for (std::int64_t oy = 0; oy < d.hout; ++oy) {
          std::int64_t iy = oy * d.stride + ki - d.pad;
          for (std::int64_t ox = 0; ox < d.wout; ++ox) {
            std::int64_t ix = ox * d.stride + kj - d.pad;
            double v = 0.0;
            if (iy >= 0 && iy < d.h && ix >= 0 && ix < d.w) v = img[(c * d.h + iy) * d.w + ix];
            dst[oy * d.wout + ox] = v;
          }
        }
      }
    }
  }
}

void col2im_acc(const double* cols, const ConvDims& d, double* img) {
  std::int64_t col_w = d.hout * d.wout;
  for (std::int64_t c = 0; c < d.cin; ++c) {
    for (std::int64_t ki = 0; ki < d.kh; ++ki) {
      for (std::int64_t kj = 0; kj < d.kw; ++kj) {
        const double* src = cols + ((c * d.kh + ki) * d.kw + kj) * col_w;
        for (std::int64_t oy = 0; oy < d.hout; ++oy) {
          std::int64_t iy = oy * d.stride + ki - d.pad;
          if (iy < 0 || iy >= d.h) continue;
          for (std::int64_t ox = 0; ox < d.wout; ++ox) {
            std::int64_t ix = ox * d.stride + kj - d.pad;
            if (ix < 0 || ix >= d.w) continue;
            img[(c * d.h + iy) * d.w + ix] += src[oy * d.wout + ox];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int pad) {
  ConvDims d = conv_dims(x, w, stride, pad);
  std::int64_t ksize = d.cin * d.kh * d.kw;
  std::int64_t col_w = d.hout * d.wout;
  std::int64_t macs = d.n * d.cout * col_w * ksize;
  const double* xv = x.values().data();
  const double* wv = w.values().data();

  // 1x1 stride-1 convolutions are plain per-image GEMMs on the raw layout.
  bool pointwise = (d.kh == 1 && d.stride == 1 && d.pad == 0);
  std::vector<double> out(static_cast<std::size_t>(d.n * d.cout * col_w), 0.0);
  if (pointwise) {
    for (std::int64_t i = 0; i < d.n; ++i)
      gemm_acc(wv, xv + i * d.cin * col_w, out.data() + i * d.cout * col_w, d.cout, d.cin,
               col_w);
  } else {
    // One batched im2col buffer: [ksize, n * col_w], image-major columns.
    std::vector<double> cols(static_cast<std::size_t>(ksize * d.n * col_w));
    std::vector<double> tmp(static_cast<std::size_t>(ksize * col_w));
    for (std::int64_t i = 0; i < d.n; ++i) {
      im2col(xv + i * d.cin * d.h * d.w, d, tmp.data());
      for (std::int64_t r = 0; r < ksize; ++r)
        std::copy_n(tmp.data() + r * col_w, col_w, cols.data() + r * d.n * col_w + i * col_w);
    }
    // out laid out [cout, n*col_w] first, then regrouped to [n, cout, col_w].
    std::vector<double> packed(static_cast<std::size_t>(d.cout * d.n * col_w), 0.0);
    gemm_acc(wv, cols.data(), packed.data(), d.cout, ksize, d.n * col_w);
    for (std::int64_t i = 0; i < d.n; ++i)
      for (std::int64_t co = 0; co < d.cout; ++co)
        std::copy_n(packed.data() + co * d.n * col_w + i * col_w, col_w,
                    out.data() + (i * d.cout + co) * col_w);
  }
  return finish("conv2d", {d.n, d.cout, d.hout, d.wout}, std::move(out), {&x, &w}, macs,
                [&](auto on) {
                  return [xn = x.node_ptr(), wn = w.node_ptr(), on, d, ksize, col_w,
                          pointwise] {
                    const auto& g = on->grad;
                    if (pointwise) {
                      for (std::int64_t i = 0; i < d.n; ++i) {
                        const double* gimg = g.data() + i * d.cout * col_w;
                        if (wn->requires_grad)
                          gemm_nt_acc(gimg, xn->values.data() + i * d.cin * col_w,
                                      wn->grad.data(), d.cout, col_w, d.cin);
                        if (xn->requires_grad)
                          gemm_tn_acc(wn->values.data(), gimg,
                                      xn->grad.data() + i * d.cin * col_w, d.cout, d.cin,
                                      col_w);
                      }
                      return;
                    }
                    // Regroup grad to [cout, n*col_w] and rebuild the batched cols.
                    std::vector<double> gpacked(
                        static_cast<std::size_t>(d.cout * d.n * col_w));
                    for (std::int64_t i = 0; i < d.n; ++i)
                      for (std::int64_t co = 0; co < d.cout; ++co)
                        std::copy_n(g.data() + (i * d.cout + co) * col_w, col_w,
                                    gpacked.data() + co * d.n * col_w + i * col_w);
                    if (wn->requires_grad) {
                      std::vector<double> cols(static_cast<std::size_t>(ksize * d.n * col_w));
                      std::vector<double> tmp(static_cast<std::size_t>(ksize * col_w));
                      for (std::int64_t i = 0; i < d.n; ++i) {
                        im2col(xn->values.data() + i * d.cin * d.h * d.w, d, tmp.data());
                        for (std::int64_t r = 0; r < ksize; ++r)
                          std::copy_n(tmp.data() + r * col_w, col_w,
                                      cols.data() + r * d.n * col_w + i * col_w);
                      }
                      gemm_nt_acc(gpacked.data(), cols.data(), wn->grad.data(), d.cout,
                                  d.n * col_w, ksize);
                    }
                    if (xn->requires_grad) {
                      std::vector<double> dcols(static_cast<std::size_t>(ksize * d.n * col_w),
                                                0.0);
                      gemm_tn_acc(wn->values.data(), gpacked.data(), dcols.data(), d.cout,
                                  ksize, d.n * col_w);
                      std::vector<double> tmp(static_cast<std::size_t>(ksize * col_w));
                      for (std::int64_t i = 0; i < d.n; ++i) {
                        for (std::int64_t r = 0; r < ksize; ++r)
                          std::copy_n(dcols.data() + r * d.n * col_w + i * col_w, col_w,
                                      tmp.data() + r * col_w);
                        col2im_acc(tmp.data(), d, xn->grad.data() + i * d.cin * d.h * d.w);
                      }
                    }
                  };
                });
}

Tensor maxpool2d(const Tensor& x, int kernel, int stride) {
  check_defined("maxpool2d", x);
  if (x.shape().size() != 4) throw Error("maxpool2d: input must be [n,c,h,w]");
  if (kernel < 1 || stride < 1) throw Error("maxpool2d: kernel and stride must be positive");
  std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  std::int64_t hout = (h - kernel) / stride + 1;
  std::int64_t wout = (w - kernel) / stride + 1;
  if (hout <= 0 || wout <= 0) throw Error("maxpool2d: output would be empty");
  const auto& xv = x.values();
  std::vector<double> out(static_cast<std::size_t>(n * c * hout * wout));
  std::vector<std::int64_t> argmax(out.size());
  std::int64_t o = 0;
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const double* plane = xv.data() + (i * c + ch) * h * w;
      std::int64_t base = (i * c + ch) * h * w;
      for (std::int64_t oy = 0; oy < hout; ++oy)
        for (std::int64_t ox = 0; ox < wout; ++ox, ++o) {
          double best = -std::numeric_limits<double>::infinity();
          std::int64_t bi = -1;
          for (std::int64_t ky = 0; ky < kernel; ++ky)
            for (std::int64_t kx = 0; kx < kernel; ++kx) {
              std::int64_t iy = oy * stride + ky, ix = ox * stride + kx;
              double v = plane[iy * w + ix];
              if (v > best) {
                best = v;
                bi = base + iy * w + ix;
              }
            }
          out[static_cast<std::size_t>(o)] = best;
          argmax[static_cast<std::size_t>(o)] = bi;
        }
    }
  return finish("maxpool2d", {n, c, hout, wout}, std::move(out), {&x}, 0, [&](auto on) {
    return [xn = x.node_ptr(), on, argmax = std::move(argmax)] {
      const auto& g = on->grad;
      for (std::size_t i = 0; i < g.size(); ++i)
        xn->grad[static_cast<std::size_t>(argmax[i])] += g[i];
    };
  });
}

Tensor global_avg_pool(const Tensor& x) {
  check_defined("global_avg_pool", x);
  if (x.shape().size() != 4) throw Error("global_avg_pool: input must be [n,c,h,w]");
  std::int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  const auto& xv = x.values();
  std::vector<double> out(static_cast<std::size_t>(n * c));
  for (std::int64_t i = 0; i < n * c; ++i) {
    double acc = 0.0;
    const double* p = xv.data() + i * hw;
    for (std::int64_t j = 0; j < hw; ++j) acc += p[j];
    out[static_cast<std::size_t>(i)] = acc / static_cast<double>(hw);
  }
  return finish("global_avg_pool", {n, c}, std::move(out), {&x}, 0, [&](auto on) {
    return [xn = x.node_ptr(), on, hw] {
      const auto& g = on->grad;
      double inv = 1.0 / static_cast<double>(hw);
      for (std::size_t i = 0; i < g.size(); ++i) {
        double gi = g[i] * inv;
        double* p = xn->grad.data() + static_cast<std::int64_t>(i) * hw;
        for (std::int64_t j = 0; j < hw; ++j) p[j] += gi;
      }
    };
  });
}

// ---------------------------------------------------------------------------
// Reductions and broadcasts
// ---------------------------------------------------------------------------

Tensor sum_all(const Tensor& a) {
  check_defined("sum_all", a);
  double acc = 0.0;
  for (double v : a.values()) acc += v;
  return finish("sum_all", {1}, {acc}, {&a}, 0, [&](auto on) {
    return [an = a.node_ptr(), on] {
      double g = on->grad[0];
      for (std::size_t i = 0; i < an->values.size(); ++i) accumulate(an.get(), i, g);
    };
  });
}

Tensor mean_all(const Tensor& a) {
  check_defined("mean_all", a);
  double acc = 0.0;
  for (double v : a.values()) acc += v;
  double inv = 1.0 / static_cast<double>(a.numel());
  return finish("mean_all", {1}, {acc * inv}, {&a}, 0, [&](auto on) {
    return [an = a.node_ptr(), on, inv] {
      double g = on->grad[0] * inv;
      for (std::size_t i = 0; i < an->values.size(); ++i) accumulate(an.get(), i, g);
    };
  });
}

Tensor channel_mean(const Tensor& x) {
  check_defined("channel_mean", x);
  if (x.shape().size() != 4) throw Error("channel_mean: input must be [n,c,h,w]");
  std::int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  const auto& xv = x.values();
  std::vector<double> out(static_cast<std::size_t>(c), 0.0);
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const double* p = xv.data() + (i * c + ch) * hw;
      double acc = 0.0;
      for (std::int64_t j = 0; j < hw; ++j) acc += p[j];
      out[static_cast<std::size_t>(ch)] += acc;
    }
  double inv = 1.0 / static_cast<double>(n * hw);
  for (auto& v : out) v *= inv;
  return finish("channel_mean", {c}, std::move(out), {&x}, 0, [&](auto on) {
    return [xn = x.node_ptr(), on, n, c, hw, inv] {
      const auto& g = on->grad;
      for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t ch = 0; ch < c; ++ch) {
          double gi = g[static_cast<std::size_t>(ch)] * inv;
          double* p = xn->grad.data() + (i * c + ch) * hw;
          for (std::int64_t j = 0; j < hw; ++j) p[j] += gi;
        }
    };
  });
}

Tensor spatial_mean(const Tensor& x) {
  check_defined("spatial_mean", x);
  if (x.shape().size() != 4) throw Error("spatial_mean: input must be [n,c,h,w]");
  std::int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  const auto& xv = x.values();
  std::vector<double> out(static_cast<std::size_t>(n * c));
  double inv = 1.0 / static_cast<double>(hw);
  for (std::int64_t i = 0; i < n * c; ++i) {
    double acc = 0.0;
    const double* p = xv.data() + i * hw;
    for (std::int64_t j = 0; j < hw; ++j) acc += p[j];
    out[static_cast<std::size_t>(i)] = acc * inv;
  }
  return finish("spatial_mean", {n, c}, std::move(out), {&x}, 0, [&](auto on) {
    return [xn = x.node_ptr(), on, hw, inv] {
      const auto& g = on->grad;
      for (std::size_t i = 0; i < g.size(); ++i) {
        double gi = g[i] * inv;
        double* p = xn->grad.data() + static_cast<std::int64_t>(i) * hw;
        for (std::int64_t j = 0; j < hw; ++j) p[j] += gi;
      }
    };
  });
}

Tensor broadcast_channel(const Tensor& v, const Shape& like) {
  check_defined("broadcast_channel", v);
  if (like.size() != 4 || v.shape().size() != 1 || v.dim(0) != like[1])
    throw Error("broadcast_channel: expected [c] against [n,c,h,w]");
  std::int64_t n = like[0], c = like[1], hw = like[2] * like[3];
  const auto& vv = v.values();
  std::vector<double> out(static_cast<std::size_t>(n * c * hw));
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t ch = 0; ch < c; ++ch)
      std::fill_n(out.begin() + (i * c + ch) * hw, hw, vv[static_cast<std::size_t>(ch)]);
  return finish("broadcast_channel", like, std::move(out), {&v}, 0, [&](auto on) {
    return [vn = v.node_ptr(), on, n, c, hw] {
      const auto& g = on->grad;
      for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t ch = 0; ch < c; ++ch) {
          const double* p = g.data() + (i * c + ch) * hw;
          double acc = 0.0;
          for (std::int64_t j = 0; j < hw; ++j) acc += p[j];
          vn->grad[static_cast<std::size_t>(ch)] += acc;
        }
    };
  });
}

Tensor broadcast_sample_channel(const Tensor& v, const Shape& like) {
  check_defined("broadcast_sample_channel", v);
  if (like.size() != 4 || v.shape().size() != 2 || v.dim(0) != like[0] || v.dim(1) != like[1])
    throw Error("broadcast_sample_channel: expected [n,c] against [n,c,h,w]");
  std::int64_t nc = like[0] * like[1], hw = like[2] * like[3];
  const auto& vv = v.values();
  std::vector<double> out(static_cast<std::size_t>(nc * hw));
  for (std::int64_t i = 0; i < nc; ++i)
    std::fill_n(out.begin() + i * hw, hw, vv[static_cast<std::size_t>(i)]);
  return finish("broadcast_sample_channel", like, std::move(out), {&v}, 0, [&](auto on) {
    return [vn = v.node_ptr(), on, nc, hw] {
      const auto& g = on->grad;
      for (std::int64_t i = 0; i < nc; ++i) {
        const double* p = g.data() + i * hw;
        double acc = 0.0;
        for (std::int64_t j = 0; j < hw; ++j) acc += p[j];
        vn->grad[static_cast<std::size_t>(i)] += acc;
      }
    };
  });
}

Tensor row_sum(const Tensor& x) {
  check_matrix("row_sum", x);
  std::int64_t n = x.dim(0), d = x.dim(1);
  const auto& xv = x.values();
  std::vector<double> out(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (std::int64_t j = 0; j < d; ++j) acc += xv[static_cast<std::size_t>(i * d + j)];
    out[static_cast<std::size_t>(i)] = acc;
  }
  return finish("row_sum", {n}, std::move(out), {&x}, 0, [&](auto on) {
    return [xn = x.node_ptr(), on, n, d] {
      const auto& g = on->grad;
      for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < d; ++j)
          xn->grad[static_cast<std::size_t>(i * d + j)] += g[static_cast<std::size_t>(i)];
    };
  });
}

Tensor div_rows(const Tensor& x, const Tensor& v) {
  check_matrix("div_rows", x);
  check_defined("div_rows", v);
  std::int64_t n = x.dim(0), d = x.dim(1);
  if (v.shape().size() != 1 || v.dim(0) != n) throw Error("div_rows: divisor must be [n]");
  const auto& xv = x.values();
  const auto& vv = v.values();
  std::vector<double> out(xv.size());
  for (std::int64_t i = 0; i < n; ++i) {
    double inv = 1.0 / vv[static_cast<std::size_t>(i)];
    for (std::int64_t j = 0; j < d; ++j)
      out[static_cast<std::size_t>(i * d + j)] = xv[static_cast<std::size_t>(i * d + j)] * inv;
  }
  return finish("div_rows", x.shape(), std::move(out), {&x, &v},
                static_cast<std::int64_t>(xv.size()), [&](auto on) {
                  return [xn = x.node_ptr(), vn = v.node_ptr(), on, n, d] {
                    const auto& g = on->grad;
                    for (std::int64_t i = 0; i < n; ++i) {
                      double vi = vn->values[static_cast<std::size_t>(i)];
                      double inv = 1.0 / vi;
                      double dot = 0.0;
                      for (std::int64_t j = 0; j < d; ++j) {
                        std::size_t k = static_cast<std::size_t>(i * d + j);
                        accumulate(xn.get(), k, g[k] * inv);
                        dot += g[k] * xn->values[k];
                      }
                      accumulate(vn.get(), static_cast<std::size_t>(i), -dot * inv * inv);
                    }
                  };
                });
}

Tensor add_rows(const Tensor& x, const Tensor& bias) {
  check_matrix("add_rows", x);
  check_defined("add_rows", bias);
  std::int64_t n = x.dim(0), d = x.dim(1);
  if (bias.shape().size() != 1 || bias.dim(0) != d) throw Error("add_rows: bias must be [d]");
  const auto& xv = x.values();
  const auto& bv = bias.values();
  std::vector<double> out(xv.size());
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < d; ++j)
      out[static_cast<std::size_t>(i * d + j)] =
          xv[static_cast<std::size_t>(i * d + j)] + bv[static_cast<std::size_t>(j)];
  return finish("add_rows", x.shape(), std::move(out), {&x, &bias}, 0, [&](auto on) {
    return [xn = x.node_ptr(), bn = bias.node_ptr(), on, n, d] {
      const auto& g = on->grad;
      for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < d; ++j) {
          std::size_t k = static_cast<std::size_t>(i * d + j);
          accumulate(xn.get(), k, g[k]);
          accumulate(bn.get(), static_cast<std::size_t>(j), g[k]);
        }
    };
  });
}

namespace {
// Shared shape checks for the fused per-channel norm ops; returns {n, c, sp}.
struct ChannelDims {
  std::int64_t n, c, sp;
};
ChannelDims channel_dims(const char* op, const Tensor& x, const Tensor& gamma,
                         const Tensor& beta) {
  check_defined(op, x);
  check_defined(op, gamma);
  check_defined(op, beta);
  if (x.shape().size() < 2) throw Error(std::string(op) + ": input must be at least 2-D");
  std::int64_t n = x.dim(0), c = x.dim(1);
  std::int64_t sp = x.numel() / (n * c);
  if (gamma.shape().size() != 1 || gamma.dim(0) != c)
    throw Error(std::string(op) + ": gamma must be [channels]");
  if (beta.shape().size() != 1 || beta.dim(0) != c)
    throw Error(std::string(op) + ": beta must be [channels]");
  return {n, c, sp};
}
}  // namespace

Tensor batch_norm_train(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps,
                        std::vector<double>* batch_mean, std::vector<double>* batch_var) {
  auto [n, c, sp] = channel_dims("batch_norm_train", x, gamma, beta);
  if (!(eps > 0.0)) throw Error("batch_norm_train: eps must be positive");
  if (n < 2) throw Error("batch_norm_train: needs at least 2 samples");
  const auto& xv = x.values();
  const auto& gv = gamma.values();
  const auto& bv = beta.values();
  double cnt = static_cast<double>(n * sp);
  std::vector<double> mean(static_cast<std::size_t>(c), 0.0);
  std::vector<double> var(static_cast<std::size_t>(c), 0.0);
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const double* base = xv.data() + (i * c + ch) * sp;
      double s = 0.0;
      for (std::int64_t j = 0; j < sp; ++j) s += base[j];
      mean[static_cast<std::size_t>(ch)] += s;
    }
  for (auto& m : mean) m /= cnt;
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const double* base = xv.data() + (i * c + ch) * sp;
      double m = mean[static_cast<std::size_t>(ch)], s = 0.0;
      for (std::int64_t j = 0; j < sp; ++j) {
        double d = base[j] - m;
        s += d * d;
      }
      var[static_cast<std::size_t>(ch)] += s;
    }
  for (auto& v : var) v /= cnt;
  std::vector<double> inv(static_cast<std::size_t>(c));
  for (std::int64_t ch = 0; ch < c; ++ch)
    inv[static_cast<std::size_t>(ch)] = 1.0 / std::sqrt(var[static_cast<std::size_t>(ch)] + eps);
  if (batch_mean) *batch_mean = mean;
  if (batch_var) *batch_var = var;
  std::vector<double> out(xv.size());
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const double* base = xv.data() + (i * c + ch) * sp;
      double* ob = out.data() + (i * c + ch) * sp;
      std::size_t cc = static_cast<std::size_t>(ch);
      double m = mean[cc], r = inv[cc], ga = gv[cc], be = bv[cc];
      for (std::int64_t j = 0; j < sp; ++j) ob[j] = (base[j] - m) * r * ga + be;
    }
  return finish(
      "batch_norm_train", x.shape(), std::move(out), {&x, &gamma, &beta}, 2 * x.numel(),
      [&, nn = n, cc = c, ssp = sp](auto on) {
        return [xn = x.node_ptr(), gn = gamma.node_ptr(), bn = beta.node_ptr(), on,
                mean = std::move(mean), inv = std::move(inv), nn, cc, ssp] {
          const auto& g = on->grad;
          const auto& xv = xn->values;
          const auto& gv = gn->values;
          double cnt = static_cast<double>(nn * ssp);
          // Per-channel reductions: sum g and sum g * xhat.
          std::vector<double> sg(static_cast<std::size_t>(cc), 0.0);
          std::vector<double> sgx(static_cast<std::size_t>(cc), 0.0);
          for (std::int64_t i = 0; i < nn; ++i)
            for (std::int64_t ch = 0; ch < cc; ++ch) {
              std::size_t c0 = static_cast<std::size_t>(ch);
              const double* xb = xv.data() + (i * cc + ch) * ssp;
              const double* gb = g.data() + (i * cc + ch) * ssp;
              double m = mean[c0], r = inv[c0], a = 0.0, b = 0.0;
              for (std::int64_t j = 0; j < ssp; ++j) {
                a += gb[j];
                b += gb[j] * ((xb[j] - m) * r);
              }
              sg[c0] += a;
              sgx[c0] += b;
            }
          if (bn->requires_grad)
            for (std::int64_t ch = 0; ch < cc; ++ch)
              bn->grad[static_cast<std::size_t>(ch)] += sg[static_cast<std::size_t>(ch)];
          if (gn->requires_grad)
            for (std::int64_t ch = 0; ch < cc; ++ch)
              gn->grad[static_cast<std::size_t>(ch)] += sgx[static_cast<std::size_t>(ch)];
          if (xn->requires_grad)
            for (std::int64_t i = 0; i < nn; ++i)
              for (std::int64_t ch = 0; ch < cc; ++ch) {
                std::size_t c0 = static_cast<std::size_t>(ch);
                const double* xb = xv.data() + (i * cc + ch) * ssp;
                const double* gb = g.data() + (i * cc + ch) * ssp;
                double* db = xn->grad.data() + (i * cc + ch) * ssp;
                double m = mean[c0], r = inv[c0], ga = gv[c0];
                double mg = sg[c0] / cnt, mgx = sgx[c0] / cnt;
                for (std::int64_t j = 0; j < ssp; ++j)
                  db[j] += ga * r * (gb[j] - mg - ((xb[j] - m) * r) * mgx);
              }
        };
      });
}

Tensor channel_affine(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                      std::vector<double> mean, std::vector<double> inv_std) {
  auto [n, c, sp] = channel_dims("channel_affine", x, gamma, beta);
  if (static_cast<std::int64_t>(mean.size()) != c ||
      static_cast<std::int64_t>(inv_std.size()) != c)
    throw Error("channel_affine: mean/inv_std must have one entry per channel");
  const auto& xv = x.values();
  const auto& gv = gamma.values();
  const auto& bv = beta.values();
  std::vector<double> out(xv.size());
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t ch = 0; ch < c; ++ch) {
      std::size_t cc = static_cast<std::size_t>(ch);
      const double* base = xv.data() + (i * c + ch) * sp;
      double* ob = out.data() + (i * c + ch) * sp;
      double m = mean[cc], r = inv_std[cc], ga = gv[cc], be = bv[cc];
      for (std::int64_t j = 0; j < sp; ++j) ob[j] = (base[j] - m) * r * ga + be;
    }
  return finish(
      "channel_affine", x.shape(), std::move(out), {&x, &gamma, &beta}, x.numel(),
      [&, nn = n, cc = c, ssp = sp](auto on) {
        return [xn = x.node_ptr(), gn = gamma.node_ptr(), bn = beta.node_ptr(), on,
                mean = std::move(mean), inv = std::move(inv_std), nn, cc, ssp] {
          const auto& g = on->grad;
          const auto& xv = xn->values;
          const auto& gv = gn->values;
          for (std::int64_t i = 0; i < nn; ++i)
            for (std::int64_t ch = 0; ch < cc; ++ch) {
              std::size_t c0 = static_cast<std::size_t>(ch);
              const double* xb = xv.data() + (i * cc + ch) * ssp;
              const double* gb = g.data() + (i * cc + ch) * ssp;
              double m = mean[c0], r = inv[c0], ga = gv[c0];
              if (xn->requires_grad) {
                double* db = xn->grad.data() + (i * cc + ch) * ssp;
                for (std::int64_t j = 0; j < ssp; ++j) db[j] += gb[j] * r * ga;
              }
              double a = 0.0, b = 0.0;
              for (std::int64_t j = 0; j < ssp; ++j) {
                a += gb[j];
                b += gb[j] * ((xb[j] - m) * r);
              }
              accumulate(bn.get(), c0, a);
              accumulate(gn.get(), c0, b);
            }
        };
      });
}

Tensor softmax(const Tensor& v) {
  check_defined("softmax", v);
  if (v.shape().size() != 1) throw Error("softmax: expected a 1-D tensor");
  const auto& vv = v.values();
  double m = *std::max_element(vv.begin(), vv.end());
  std::vector<double> out(vv.size());
  double denom = 0.0;
  for (std::size_t i = 0; i < vv.size(); ++i) {
    out[i] = std::exp(vv[i] - m);
    denom += out[i];
  }
  for (auto& o : out) o /= denom;
  return finish("softmax", v.shape(), std::move(out), {&v},
                static_cast<std::int64_t>(vv.size()), [&](auto on) {
                  return [vn = v.node_ptr(), on] {
                    const auto& g = on->grad;
                    const auto& p = on->values;
                    double dot = 0.0;
                    for (std::size_t i = 0; i < g.size(); ++i) dot += g[i] * p[i];
                    for (std::size_t i = 0; i < g.size(); ++i)
                      accumulate(vn.get(), i, p[i] * (g[i] - dot));
                  };
                });
}

// ---------------------------------------------------------------------------
// Row selection / concatenation / mixing
// ---------------------------------------------------------------------------

namespace {

std::int64_t row_elems(const Tensor& x) {
  if (x.shape().empty() || x.dim(0) == 0) throw Error("row ops: empty tensor");
  return x.numel() / x.dim(0);
}

Shape with_rows(const Shape& s, std::int64_t rows) {
  Shape out = s;
  out[0] = rows;
  return out;
}

}  // namespace

Tensor concat_rows(const Tensor& a, const Tensor& b) {
  check_defined("concat_rows", a);
  check_defined("concat_rows", b);
  if (a.shape().size() != b.shape().size())
    throw Error("concat_rows: rank mismatch");
  for (std::size_t i = 1; i < a.shape().size(); ++i)
    if (a.shape()[i] != b.shape()[i]) throw Error("concat_rows: trailing shape mismatch");
  std::int64_t re = row_elems(a);
  std::vector<double> out;
  out.reserve(a.values().size() + b.values().size());
  out.insert(out.end(), a.values().begin(), a.values().end());
  out.insert(out.end(), b.values().begin(), b.values().end());
  return finish("concat_rows", with_rows(a.shape(), a.dim(0) + b.dim(0)), std::move(out),
                {&a, &b}, 0, [&](auto on) {
                  return [an = a.node_ptr(), bn = b.node_ptr(), on, re] {
                    const auto& g = on->grad;
                    std::size_t na = an->values.size();
                    (void)re;
                    for (std::size_t i = 0; i < na; ++i) accumulate(an.get(), i, g[i]);
                    for (std::size_t i = 0; i < bn->values.size(); ++i)
                      accumulate(bn.get(), i, g[na + i]);
                  };
                });
}

Tensor gather_rows(const Tensor& x, const std::vector<std::int64_t>& idx) {
  check_defined("gather_rows", x);
  if (idx.empty()) throw Error("gather_rows: empty index list");
  std::int64_t rows = x.dim(0), re = row_elems(x);
  for (auto i : idx)
    if (i < 0 || i >= rows) throw Error("gather_rows: index out of range");
  const auto& xv = x.values();
  std::vector<double> out(idx.size() * static_cast<std::size_t>(re));
  for (std::size_t r = 0; r < idx.size(); ++r)
    std::copy_n(xv.begin() + idx[r] * re, re, out.begin() + static_cast<std::int64_t>(r) * re);
  return finish("gather_rows", with_rows(x.shape(), static_cast<std::int64_t>(idx.size())),
                std::move(out), {&x}, 0, [&](auto on) {
                  return [xn = x.node_ptr(), on, idx, re] {
                    const auto& g = on->grad;
                    for (std::size_t r = 0; r < idx.size(); ++r) {
                      const double* src = g.data() + static_cast<std::int64_t>(r) * re;
                      double* dst = xn->grad.data() + idx[r] * re;
                      for (std::int64_t j = 0; j < re; ++j) dst[j] += src[j];
                    }
                  };
                });
}

Tensor scatter_rows(const Tensor& x, const std::vector<std::int64_t>& idx, std::int64_t rows) {
  check_defined("scatter_rows", x);
  if (static_cast<std::int64_t>(idx.size()) != x.dim(0))
    throw Error("scatter_rows: index count must equal row count");
  std::int64_t re = row_elems(x);
  std::vector<std::uint8_t> used(static_cast<std::size_t>(rows), 0);
  for (auto i : idx) {
    if (i < 0 || i >= rows) throw Error("scatter_rows: index out of range");
    if (used[static_cast<std::size_t>(i)]++) throw Error("scatter_rows: duplicate index");
  }
  const auto& xv = x.values();
  std::vector<double> out(static_cast<std::size_t>(rows * re), 0.0);
  for (std::size_t r = 0; r < idx.size(); ++r)
    std::copy_n(xv.begin() + static_cast<std::int64_t>(r) * re, re, out.begin() + idx[r] * re);
  return finish("scatter_rows", with_rows(x.shape(), rows), std::move(out), {&x}, 0,
                [&](auto on) {
                  return [xn = x.node_ptr(), on, idx, re] {
                    const auto& g = on->grad;
                    for (std::size_t r = 0; r < idx.size(); ++r) {
                      const double* src = g.data() + idx[r] * re;
                      double* dst = xn->grad.data() + static_cast<std::int64_t>(r) * re;
                      for (std::int64_t j = 0; j < re; ++j) dst[j] += src[j];
                    }
                  };
                });
}

Tensor mix2(const Tensor& a, const Tensor& b, const Tensor& p) {
  check_same_shape("mix2", a, b);
  check_defined("mix2", p);
  if (p.numel() != 2) throw Error("mix2: weights must have two entries");
  const auto& av = a.values();
  const auto& bv = b.values();
  double p0 = p.values()[0], p1 = p.values()[1];
  std::vector<double> out(av.size());
  if (p0 == 1.0 && p1 == 0.0) {
    out = av;
  } else if (p0 == 0.0 && p1 == 1.0) {
    out = bv;
  } else {
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = p0 * av[i] + p1 * bv[i];
  }
  return finish("mix2", a.shape(), std::move(out), {&a, &b, &p},
                2 * static_cast<std::int64_t>(av.size()), [&](auto on) {
                  return [an = a.node_ptr(), bn = b.node_ptr(), pn = p.node_ptr(), on] {
                    const auto& g = on->grad;
                    double p0 = pn->values[0], p1 = pn->values[1];
                    double da = 0.0, db = 0.0;
                    for (std::size_t i = 0; i < g.size(); ++i) {
                      accumulate(an.get(), i, g[i] * p0);
                      accumulate(bn.get(), i, g[i] * p1);
                      da += g[i] * an->values[i];
                      db += g[i] * bn->values[i];
                    }
                    accumulate(pn.get(), 0, da);
                    accumulate(pn.get(), 1, db);
                  };
                });
}

// ---------------------------------------------------------------------------
// Loss-oriented primitives
// ---------------------------------------------------------------------------

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  check_matrix("cross_entropy", logits);
  std::int64_t n = logits.dim(0), c = logits.dim(1);
  if (n == 0) throw Error("cross_entropy: empty batch");
  if (static_cast<std::int64_t>(labels.size()) != n)
    throw Error("cross_entropy: label count mismatch");
  for (int y : labels)
    if (y < 0 || y >= c) throw Error("cross_entropy: label out of range");
  const auto& lv = logits.values();
  double total = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    const double* row = lv.data() + i * c;
    double m = *std::max_element(row, row + c);
    double lse = 0.0;
    for (std::int64_t j = 0; j < c; ++j) lse += std::exp(row[j] - m);
    lse = m + std::log(lse);
    total += lse - row[labels[static_cast<std::size_t>(i)]];
  }
  double inv = 1.0 / static_cast<double>(n);
  return finish("cross_entropy", {1}, {total * inv}, {&logits},
                static_cast<std::int64_t>(lv.size()), [&](auto on) {
                  return [ln = logits.node_ptr(), on, labels, n, c, inv] {
                    double g = on->grad[0] * inv;
                    for (std::int64_t i = 0; i < n; ++i) {
                      const double* row = ln->values.data() + i * c;
                      double m = *std::max_element(row, row + c);
                      double denom = 0.0;
                      for (std::int64_t j = 0; j < c; ++j) denom += std::exp(row[j] - m);
                      for (std::int64_t j = 0; j < c; ++j) {
                        double p = std::exp(row[j] - m) / denom;
                        double ind = (j == labels[static_cast<std::size_t>(i)]) ? 1.0 : 0.0;
                        ln->grad[static_cast<std::size_t>(i * c + j)] += g * (p - ind);
                      }
                    }
                  };
                });
}

namespace {

Tensor masked_row_extreme(const char* op, const Tensor& x, const std::vector<std::uint8_t>& mask,
                          bool want_max) {
  check_matrix(op, x);
  std::int64_t n = x.dim(0);
  if (x.dim(1) != n) throw Error(std::string(op) + ": expected a square matrix");
  if (static_cast<std::int64_t>(mask.size()) != n * n)
    throw Error(std::string(op) + ": mask size mismatch");
  const auto& xv = x.values();
  std::vector<double> out(static_cast<std::size_t>(n));
  std::vector<std::int64_t> arg(static_cast<std::size_t>(n), -1);
  for (std::int64_t i = 0; i < n; ++i) {
    bool found = false;
    double best = 0.0;
    for (std::int64_t j = 0; j < n; ++j) {
      if (!mask[static_cast<std::size_t>(i * n + j)]) continue;
      double v = xv[static_cast<std::size_t>(i * n + j)];
      if (!found || (want_max ? v > best : v < best)) {
        best = v;
        arg[static_cast<std::size_t>(i)] = i * n + j;
        found = true;
      }
    }
    if (!found) throw Error(std::string(op) + ": a row has no eligible entries");
    out[static_cast<std::size_t>(i)] = best;
  }
  return finish(op, {n}, std::move(out), {&x}, 0, [&](auto on) {
    return [xn = x.node_ptr(), on, arg = std::move(arg)] {
      const auto& g = on->grad;
      for (std::size_t i = 0; i < g.size(); ++i)
        xn->grad[static_cast<std::size_t>(arg[i])] += g[i];
    };
  });
}

}  // namespace

Tensor masked_row_max(const Tensor& x, const std::vector<std::uint8_t>& mask) {
  return masked_row_extreme("masked_row_max", x, mask, true);
}

Tensor masked_row_min(const Tensor& x, const std::vector<std::uint8_t>& mask) {
  return masked_row_extreme("masked_row_min", x, mask, false);
}

Tensor pairwise_sqdist(const Tensor& x) {
  check_matrix("pairwise_sqdist", x);
  std::int64_t n = x.dim(0), d = x.dim(1);
  const auto& xv = x.values();
  std::vector<double> out(static_cast<std::size_t>(n * n), 0.0);
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::int64_t k = 0; k < d; ++k) {
        double diff = xv[static_cast<std::size_t>(i * d + k)] -
                      xv[static_cast<std::size_t>(j * d + k)];
        acc += diff * diff;
      }
      out[static_cast<std::size_t>(i * n + j)] = acc;
    }
  return finish("pairwise_sqdist", {n, n}, std::move(out), {&x}, n * n * d, [&](auto on) {
    return [xn = x.node_ptr(), on, n, d] {
      const auto& g = on->grad;
      for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < n; ++j) {
          double gij = g[static_cast<std::size_t>(i * n + j)];
          if (gij == 0.0) continue;
          for (std::int64_t k = 0; k < d; ++k) {
            double diff = xn->values[static_cast<std::size_t>(i * d + k)] -
                          xn->values[static_cast<std::size_t>(j * d + k)];
            xn->grad[static_cast<std::size_t>(i * d + k)] += 2.0 * gij * diff;
            xn->grad[static_cast<std::size_t>(j * d + k)] -= 2.0 * gij * diff;
          }
        }
    };
  });
}

Tensor l2_normalize_rows(const Tensor& x) {
  Tensor sq = mul(x, x);
  Tensor norms = sqrt(row_sum(sq));
  for (double v : norms.values())
    if (v == 0.0) throw Error("l2_normalize_rows: zero-norm row");
  return div_rows(x, norms);
}

// ---------------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------------

double finite_diff_check(const std::function<Tensor()>& f, const std::vector<Tensor>& params,
                         double eps) {
  if (eps <= 0.0) throw Error("finite_diff_check: eps must be positive");
  std::unordered_map<TensorNode*, std::vector<double>> analytic;
  double base;
  {
    // Pre-zero so parameters off the loss path report zero, not stale grads.
    for (const auto& p : params) const_cast<Tensor&>(p).zero_grad();
    Tape tape;
    Tensor loss = f();
    base = loss.item();
    tape.backward(loss);
    for (const auto& p : params) analytic[p.node()] = p.grad();
  }
  {
    Tensor again = f();
    if (again.item() != base)
      throw Error("finite_diff_check: f is not deterministic at the base point");
  }
  double max_rel = 0.0;
  for (const auto& p : params) {
    auto& vals = const_cast<Tensor&>(p).values();
    const auto& an = analytic[p.node()];
    for (std::size_t i = 0; i < vals.size(); ++i) {
      double saved = vals[i];
      vals[i] = saved + eps;
      double fp = f().item();
      vals[i] = saved - eps;
      double fm = f().item();
      vals[i] = saved;
      double central = (fp - fm) / (2.0 * eps);
      double rel = std::abs(an[i] - central) / std::max(1.0, std::abs(central));
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

}  // namespace cmnas
