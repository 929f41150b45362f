#pragma once

// Architecture relaxation, the bi-level optimizer alternation, discretization
// to bitstrings, and the manual separation-scheme enumerator.

#include <string>
#include <utility>
#include <vector>

#include "losses.hpp"
#include "nn.hpp"

namespace cmnas {

// ---------------------------------------------------------------------------
// Architecture parameters
// ---------------------------------------------------------------------------

/// Max-subtracted softmax of one (alpha_separate, alpha_share) pair.
std::pair<double, double> arch_probs_pair(double a_sep, double a_share);
/// Taped version over a [2] tensor.
Tensor arch_probs(const Tensor& alpha);

/// '0' when the separate branch has the larger probability, '1' when the
/// shared branch does; exact ties share ('1'), the cheaper default.
char discretize_pair(double a_sep, double a_share);
/// One character per searchable layer, topological order.
std::string discretize(const std::vector<NamedTensor>& arch);

/// Bitstring over {'0','1'} of the expected length; throws otherwise.
void validate_bitstring(const std::string& bits, std::int64_t expected_len);
/// '0' (separate) becomes a set norm-site mask bit.
SeparationScheme bitstring_to_scheme(const std::string& bits);

/// Architecture file body: '#' comment lines mapping bit indices to norm
/// sites, then the bitstring on its own line.
std::string format_arch_file(const BackboneConfig& cfg, const std::string& bits);
/// Parses the first non-comment line and validates it against cfg.
std::string parse_arch_file(const BackboneConfig& cfg, const std::string& text);

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

struct AdamConfig {
  double lr = 0.01;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 5e-4;  // L2 term added to the gradient
};

/// Adam over a fixed list of named parameters. Gradients must be zeroed
/// through zero_grads() before each forward pass; step() consumes whatever the
/// last backward left in the grads. A parameter with exactly zero gradient,
/// zero weight decay, and zero moments is left bitwise unchanged by step().
class Adam {
 public:
  Adam(std::vector<NamedTensor> params, AdamConfig cfg);

  void zero_grads();
  void step();

  double lr() const { return cfg_.lr; }
  void set_lr(double lr) { cfg_.lr = lr; }
  const std::vector<NamedTensor>& params() const { return params_; }

  // Checkpoint access: first and second moments per parameter plus the shared
  // step count.
  std::int64_t step_count() const { return t_; }
  void set_step_count(std::int64_t t);
  std::vector<double>& moment1(std::size_t i) { return m_[i]; }
  std::vector<double>& moment2(std::size_t i) { return v_[i]; }

 private:
  std::vector<NamedTensor> params_;
  AdamConfig cfg_;
  std::int64_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// ---------------------------------------------------------------------------
// Bi-level alternation
// ---------------------------------------------------------------------------

struct StepLosses {
  double cls = 0.0, triplet = 0.0, cmmd = 0.0, cc = 0.0, total = 0.0;
};

/// One first-order alternation: (a) a w step on the training batch with alpha
/// frozen, then (b) an alpha step on the validation batch with w frozen.
/// Returns the train and validation loss terms.
std::pair<StepLosses, StepLosses> bilevel_step(Network& net, Adam& w_opt, Adam& alpha_opt,
                                               const ModalityBatch& train,
                                               const ModalityBatch& val,
                                               const LossConfig& losses);

/// One plain training step (retraining and baselines): zero grads, forward,
/// backward, optimizer step.
StepLosses train_step(Network& net, Adam& w_opt, const ModalityBatch& batch,
                      const LossConfig& losses);

// ---------------------------------------------------------------------------
// Schedule
// ---------------------------------------------------------------------------

/// Step-decay schedule: lr divided by 10 at two drop epochs. Drop epochs of 0
/// resolve to epochs/3 and epochs*7/12, keeping the drop points at the same
/// fractions of training regardless of epoch count.
struct SearchSchedule {
  int epochs = 12;
  double lr = 0.01;
  int lr_drop1 = 0;  // 0 = auto
  int lr_drop2 = 0;  // 0 = auto
  double weight_decay = 5e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double alpha_lr = 1e-3;
  double alpha_weight_decay = 0.0;
};

void validate_schedule(const SearchSchedule& s);
int resolved_drop1(const SearchSchedule& s);
int resolved_drop2(const SearchSchedule& s);
/// Learning rate during a given 0-based epoch.
double lr_at_epoch(const SearchSchedule& s, int epoch);

// ---------------------------------------------------------------------------
// Manual scheme sweep
// ---------------------------------------------------------------------------

enum class SweepUnit { FullBlock, BlockNorms };
enum class SweepMode { SingleBlock, FixedPlusTraverse };

struct SweepScheme {
  std::string name;  // e.g. "baseline", "block:s2_1", "bn:s3_2+s4_1"
  SeparationScheme scheme;
};

/// Enumerates manual separation schemes. SingleBlock: the all-shared baseline
/// plus one scheme per block per unit. FixedPlusTraverse: the fixed block
/// paired with every block of the other stages, per unit.
std::vector<SweepScheme> sweep_enumerate(const BackboneConfig& cfg, SweepMode mode,
                                         const std::vector<SweepUnit>& units,
                                         const std::string& fixed_block = "");

}  // namespace cmnas
