#pragma once

// Dense double-precision tensors with a reverse-mode autodiff tape.
// Values are row-major; gradients are accumulated on the node that
// produced them. A Tape records every primitive executed while it is
// active on the current thread and replays them once, in reverse, on
// backward().

#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

namespace cmnas {

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorNode {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // empty until first use
  bool requires_grad = false;
};

/// Value-like handle onto a shared tensor node.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor constant(const Shape& shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor from_values(const Shape& shape, std::vector<double> values,
                            bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::int64_t numel() const;
  std::int64_t dim(int i) const;
  bool is_scalar() const;

  bool requires_grad() const;
  void set_requires_grad(bool value);

  std::vector<double>& values();
  const std::vector<double>& values() const;
  double item() const;

  /// Gradient of the last backward pass; zeros when the node never
  /// received one.
  std::vector<double> grad() const;
  void zero_grad();

  TensorNode* node() const { return node_.get(); }
  std::shared_ptr<TensorNode> node_ptr() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}
  std::shared_ptr<TensorNode> node_;
};

// ---------------------------------------------------------------------------
// Op statistics (multiply-accumulate audit of a forward pass)
// ---------------------------------------------------------------------------

class OpStats {
 public:
  struct Entry {
    std::string op;
    std::int64_t output_elems;
    std::int64_t macs;
  };

  OpStats();
  ~OpStats();
  OpStats(const OpStats&) = delete;
  OpStats& operator=(const OpStats&) = delete;

  const std::vector<Entry>& sequence() const { return entries_; }
  std::int64_t total_macs() const;
  std::int64_t count(std::string_view op) const;

  static OpStats* active();
  static void report(const char* op, std::int64_t output_elems, std::int64_t macs);

 private:
  std::vector<Entry> entries_;
  OpStats* prev_ = nullptr;
};

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Reverse pass from a scalar loss. Each record is visited exactly once
  /// in reverse order. A second call without a new tape is rejected.
  void backward(const Tensor& loss);

  std::size_t num_records() const { return records_.size(); }

  static Tape* active();

  // Called by primitives.
  void record(const char* op, const std::vector<std::shared_ptr<TensorNode>>& inputs,
              std::shared_ptr<TensorNode> output, std::function<void()> backward_fn);

 private:
  struct Record {
    const char* op;
    std::function<void()> backward_fn;
  };
  std::vector<Record> records_;
  std::vector<std::shared_ptr<TensorNode>> nodes_;  // keep-alive, dedup'd
  std::unordered_set<TensorNode*> seen_;
  std::unordered_set<TensorNode*> outputs_;
  bool backward_done_ = false;
  Tape* prev_ = nullptr;
};

// ---------------------------------------------------------------------------
// Primitives
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);
Tensor relu(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);
/// sqrt(max(0, x)); zero subgradient where x <= 0.
Tensor sqrt_clamped(const Tensor& a);
Tensor pow(const Tensor& a, double p);

Tensor matmul(const Tensor& a, const Tensor& b);     // [m,k] x [k,n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // [m,k] x [n,k]^T

/// 2-D convolution, zero padding. stride in {1,2}, square kernel in {1,3,7}.
Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int pad);
Tensor maxpool2d(const Tensor& x, int kernel, int stride);
Tensor global_avg_pool(const Tensor& x);  // [n,c,h,w] -> [n,c]

Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);
Tensor channel_mean(const Tensor& x);  // [n,c,h,w] -> [c]
Tensor spatial_mean(const Tensor& x);  // [n,c,h,w] -> [n,c]
Tensor broadcast_channel(const Tensor& v, const Shape& like);         // [c] -> like
Tensor broadcast_sample_channel(const Tensor& v, const Shape& like);  // [n,c] -> like

Tensor row_sum(const Tensor& x);                       // [n,d] -> [n]
Tensor div_rows(const Tensor& x, const Tensor& v);     // x[i,j] / v[i]
Tensor add_rows(const Tensor& x, const Tensor& bias);  // x[i,j] + bias[j]

/// Fused training-mode batch norm over [n,c,...]: per-channel standardize with
/// biased variance and eps inside the sqrt, then scale by gamma and shift by
/// beta. If batch_mean/batch_var are given they receive the channel statistics.
Tensor batch_norm_train(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps,
                        std::vector<double>* batch_mean = nullptr,
                        std::vector<double>* batch_var = nullptr);
/// Fused affine normalization with fixed per-channel statistics:
/// y = (x - mean) * inv_std * gamma + beta.
Tensor channel_affine(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                      std::vector<double> mean, std::vector<double> inv_std);

/// Softmax of a 1-D tensor, computed with max-subtraction.
Tensor softmax(const Tensor& v);

Tensor concat_rows(const Tensor& a, const Tensor& b);
/// Select rows (dim-0 slices) by index; backward scatters.
Tensor gather_rows(const Tensor& x, const std::vector<std::int64_t>& idx);
/// Place rows of x at idx within a zero tensor of `rows` rows.
Tensor scatter_rows(const Tensor& x, const std::vector<std::int64_t>& idx, std::int64_t rows);

/// p[0]*a + p[1]*b with taped weights p of shape [2]. Exact one-hot weights
/// reproduce the selected branch bit-for-bit.
Tensor mix2(const Tensor& a, const Tensor& b, const Tensor& p);

/// Mean softmax cross-entropy over rows of [n, classes].
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels);

/// Per-row max/min of x[n,n] over entries where mask is nonzero; gradient
/// flows to the first extremal entry of each row.
Tensor masked_row_max(const Tensor& x, const std::vector<std::uint8_t>& mask);
Tensor masked_row_min(const Tensor& x, const std::vector<std::uint8_t>& mask);

Tensor pairwise_sqdist(const Tensor& x);  // [n,d] -> [n,n]

/// Rows scaled to unit L2 norm (composite). Zero rows are an error.
Tensor l2_normalize_rows(const Tensor& x);

// ---------------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------------

/// Max over all parameter entries of |analytic - central| / max(1, |central|)
/// with central differences of step eps. f must be a deterministic scalar
/// function of the parameter values (re-checked at the base point).
double finite_diff_check(const std::function<Tensor()>& f, const std::vector<Tensor>& params,
                         double eps);

}  // namespace cmnas
