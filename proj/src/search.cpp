#include "search.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace cmnas {

// ---------------------------------------------------------------------------
// Architecture parameters
// ---------------------------------------------------------------------------

std::pair<double, double> arch_probs_pair(double a_sep, double a_share) {
  if (!std::isfinite(a_sep) || !std::isfinite(a_share))
    throw Error("arch_probs: alpha must be finite");
  double m = std::max(a_sep, a_share);
  double ea = std::exp(a_sep - m);
  double eb = std::exp(a_share - m);
  double z = ea + eb;
  return {ea / z, eb / z};
}

Tensor arch_probs(const Tensor& alpha) {
  if (!alpha.defined() || alpha.shape().size() != 1 || alpha.dim(0) != 2)
    throw Error("arch_probs: alpha must be a [2] tensor");
  return softmax(alpha);
}

char discretize_pair(double a_sep, double a_share) {
  auto [p_sep, p_share] = arch_probs_pair(a_sep, a_share);
  return p_sep > p_share ? '0' : '1';
}

std::string discretize(const std::vector<NamedTensor>& arch) {
  std::string bits;
  bits.reserve(arch.size());
  for (const auto& a : arch) {
    if (!a.tensor.defined() || a.tensor.numel() != 2)
      throw Error("discretize: " + a.name + " is not a [2] alpha pair");
    bits.push_back(discretize_pair(a.tensor.values()[0], a.tensor.values()[1]));
  }
  return bits;
}

void validate_bitstring(const std::string& bits, std::int64_t expected_len) {
  if (static_cast<std::int64_t>(bits.size()) != expected_len)
    throw Error("bitstring has " + std::to_string(bits.size()) + " characters, expected " +
                std::to_string(expected_len));
  for (char c : bits)
    if (c != '0' && c != '1')
      throw Error(std::string("bitstring may contain only '0' and '1', found '") + c + "'");
}

SeparationScheme bitstring_to_scheme(const std::string& bits) {
  validate_bitstring(bits, static_cast<std::int64_t>(bits.size()));
  SeparationScheme s;
  s.unit = SeparationScheme::Unit::NormLayers;
  for (char c : bits) s.mask.push_back(c == '0' ? 1 : 0);
  return s;
}

std::string format_arch_file(const BackboneConfig& cfg, const std::string& bits) {
  validate_bitstring(bits, norm_site_count(cfg));
  std::ostringstream os;
  os << "# norm-site bitstring, topological order: '0' = separate, '1' = share\n";
  auto names = block_names(cfg);
  auto counts = block_norm_counts(cfg);
  std::int64_t at = 0;
  for (std::size_t b = 0; b < names.size(); ++b) {
    os << "# [" << at << ".." << at + counts[b] - 1 << "] " << names[b] << "\n";
    at += counts[b];
  }
  os << bits << "\n";
  return os.str();
}

std::string parse_arch_file(const BackboneConfig& cfg, const std::string& text) {
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    validate_bitstring(line, norm_site_count(cfg));
    return line;
  }
  throw Error("architecture file contains no bitstring line");
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

Adam::Adam(std::vector<NamedTensor> params, AdamConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
  if (cfg_.lr <= 0.0) throw Error("Adam: lr must be positive");
  if (cfg_.beta1 < 0.0 || cfg_.beta1 >= 1.0 || cfg_.beta2 < 0.0 || cfg_.beta2 >= 1.0)
    throw Error("Adam: betas must lie in [0,1)");
  if (cfg_.eps <= 0.0) throw Error("Adam: eps must be positive");
  if (cfg_.weight_decay < 0.0) throw Error("Adam: weight decay must be >= 0");
  for (const auto& p : params_) {
    if (!p.tensor.defined()) throw Error("Adam: undefined parameter " + p.name);
    m_.emplace_back(p.tensor.values().size(), 0.0);
    v_.emplace_back(p.tensor.values().size(), 0.0);
  }
}

void Adam::zero_grads() {
  for (auto& p : params_) p.tensor.zero_grad();
}

void Adam::set_step_count(std::int64_t t) {
  if (t < 0) throw Error("Adam: step count must be >= 0");
  t_ = t;
}

void Adam::step() {
  ++t_;
  double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& vals = params_[i].tensor.values();
    const auto& grad = params_[i].tensor.node()->grad;
    if (grad.size() != vals.size())
      throw Error("Adam: parameter " + params_[i].name +
                  " has no gradient; zero_grads must precede the forward pass");
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < vals.size(); ++j) {
      double g = grad[j] + cfg_.weight_decay * vals[j];
      m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g;
      v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g * g;
      double mh = m[j] / bc1;
      double vh = v[j] / bc2;
      vals[j] -= cfg_.lr * mh / (std::sqrt(vh) + cfg_.eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Bi-level alternation
// ---------------------------------------------------------------------------

namespace {

StepLosses to_step_losses(const LossTerms& t) {
  return {t.cls.item(), t.triplet.item(), t.cmmd.item(), t.cc.item(), t.total.item()};
}

}  // namespace

StepLosses train_step(Network& net, Adam& opt, const ModalityBatch& batch,
                      const LossConfig& losses) {
  opt.zero_grads();
  Tape tape;
  ForwardResult r = net_forward(net, batch.images, batch.modality, true);
  LossTerms t = total_loss(r.embeddings, r.logits, batch.labels, batch.modality, losses);
  tape.backward(t.total);
  opt.step();
  return to_step_losses(t);
}

std::pair<StepLosses, StepLosses> bilevel_step(Network& net, Adam& w_opt, Adam& alpha_opt,
                                               const ModalityBatch& train,
                                               const ModalityBatch& val,
                                               const LossConfig& losses) {
  StepLosses tr = train_step(net, w_opt, train, losses);
  StepLosses va = train_step(net, alpha_opt, val, losses);
  return {tr, va};
}

// ---------------------------------------------------------------------------
// Schedule
// ---------------------------------------------------------------------------

void validate_schedule(const SearchSchedule& s) {
  if (s.epochs < 0) throw Error("schedule: epochs must be >= 0");
  if (s.lr <= 0.0 || s.alpha_lr <= 0.0) throw Error("schedule: learning rates must be positive");
  if (s.weight_decay < 0.0 || s.alpha_weight_decay < 0.0)
    throw Error("schedule: weight decay must be >= 0");
  if (s.lr_drop1 < 0 || s.lr_drop2 < 0) throw Error("schedule: drop epochs must be >= 0");
  int d1 = resolved_drop1(s), d2 = resolved_drop2(s);
  if (s.lr_drop1 > 0 && d1 >= s.epochs)
    throw Error("schedule: first lr drop must come before the last epoch");
  if (s.lr_drop2 > 0 && d2 >= s.epochs)
    throw Error("schedule: second lr drop must come before the last epoch");
  if (s.lr_drop1 > 0 && s.lr_drop2 > 0 && d1 > d2)
    throw Error("schedule: lr drops must be ordered");
}

int resolved_drop1(const SearchSchedule& s) { return s.lr_drop1 > 0 ? s.lr_drop1 : s.epochs / 3; }

int resolved_drop2(const SearchSchedule& s) {
  return s.lr_drop2 > 0 ? s.lr_drop2 : (7 * s.epochs) / 12;
}

double lr_at_epoch(const SearchSchedule& s, int epoch) {
  if (epoch < 0) throw Error("lr_at_epoch: epoch must be >= 0");
  double lr = s.lr;
  if (epoch >= resolved_drop1(s)) lr /= 10.0;
  if (epoch >= resolved_drop2(s)) lr /= 10.0;
  return lr;
}

// ---------------------------------------------------------------------------
// Manual scheme sweep
// ---------------------------------------------------------------------------

namespace {

int block_stage(const std::string& name) {
  // Block names are s<stage>_<index>.
  return std::stoi(name.substr(1, name.find('_') - 1));
}

const char* unit_tag(SweepUnit u) { return u == SweepUnit::FullBlock ? "block" : "bn"; }

SeparationScheme::Unit scheme_unit(SweepUnit u) {
  return u == SweepUnit::FullBlock ? SeparationScheme::Unit::FullBlock
                                   : SeparationScheme::Unit::BlockNorms;
}

}  // namespace

std::vector<SweepScheme> sweep_enumerate(const BackboneConfig& cfg, SweepMode mode,
                                         const std::vector<SweepUnit>& units,
                                         const std::string& fixed_block) {
  if (units.empty()) throw Error("sweep_enumerate: at least one unit is required");
  auto names = block_names(cfg);
  std::size_t nblocks = names.size();
  std::vector<SweepScheme> out;

  if (mode == SweepMode::SingleBlock) {
    SweepScheme base;
    base.name = "baseline";
    base.scheme.unit = SeparationScheme::Unit::BlockNorms;
    base.scheme.mask.assign(nblocks, 0);
    out.push_back(std::move(base));
    for (SweepUnit u : units)
      for (std::size_t b = 0; b < nblocks; ++b) {
        SweepScheme s;
        s.name = std::string(unit_tag(u)) + ":" + names[b];
        s.scheme.unit = scheme_unit(u);
        s.scheme.mask.assign(nblocks, 0);
        s.scheme.mask[b] = 1;
        out.push_back(std::move(s));
      }
    return out;
  }

  auto it = std::find(names.begin(), names.end(), fixed_block);
  if (it == names.end())
    throw Error("sweep_enumerate: unknown fixed block '" + fixed_block + "'");
  std::size_t fixed = static_cast<std::size_t>(it - names.begin());
  int fixed_stage = block_stage(fixed_block);
  for (SweepUnit u : units)
    for (std::size_t b = 0; b < nblocks; ++b) {
      if (block_stage(names[b]) == fixed_stage) continue;
      SweepScheme s;
      s.name = std::string(unit_tag(u)) + ":" + fixed_block + "+" + names[b];
      s.scheme.unit = scheme_unit(u);
      s.scheme.mask.assign(nblocks, 0);
      s.scheme.mask[fixed] = 1;
      s.scheme.mask[b] = 1;
      out.push_back(std::move(s));
    }
  return out;
}

}  // namespace cmnas
