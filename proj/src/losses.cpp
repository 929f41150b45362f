#include "losses.hpp"

#include <algorithm>
#include <map>
#include <string>

namespace cmnas {

void validate_loss_config(const LossConfig& cfg) {
  if (cfg.lambda1 < 0.0 || cfg.lambda2 < 0.0) throw Error("loss lambdas must be >= 0");
  if (cfg.margin < 0.0) throw Error("triplet margin must be >= 0");
}

namespace {

void check_features(const char* op, const Tensor& f, const std::vector<int>& labels) {
  if (!f.defined() || f.shape().size() != 2)
    throw Error(std::string(op) + ": features must be [n,d]");
  if (static_cast<std::int64_t>(labels.size()) != f.dim(0))
    throw Error(std::string(op) + ": label count does not match feature rows");
}

// Indices grouped by identity label in ascending order, batch order within.
std::map<int, std::vector<std::int64_t>> group_by_label(const std::vector<int>& labels) {
  std::map<int, std::vector<std::int64_t>> groups;
  for (std::size_t i = 0; i < labels.size(); ++i)
    groups[labels[i]].push_back(static_cast<std::int64_t>(i));
  return groups;
}

void check_modality(const char* op, const std::vector<int>& modality, std::size_t n) {
  if (modality.size() != n)
    throw Error(std::string(op) + ": modality count does not match feature rows");
  for (int m : modality)
    if (m != 0 && m != 1) throw Error(std::string(op) + ": modality labels must be 0 or 1");
}

}  // namespace

Tensor cls_loss(const Tensor& logits, const std::vector<int>& labels) {
  if (!logits.defined() || logits.shape().size() != 2)
    throw Error("cls_loss: logits must be [n,classes]");
  return cross_entropy(logits, labels);
}

Tensor triplet_loss(const Tensor& features, const std::vector<int>& labels, double margin) {
  check_features("triplet_loss", features, labels);
  if (margin < 0.0) throw Error("triplet_loss: margin must be >= 0");
  std::int64_t n = features.dim(0);
  std::vector<std::uint8_t> pos(static_cast<std::size_t>(n * n), 0);
  std::vector<std::uint8_t> neg(static_cast<std::size_t>(n * n), 0);
  for (std::int64_t i = 0; i < n; ++i) {
    bool has_pos = false, has_neg = false;
    for (std::int64_t j = 0; j < n; ++j) {
      if (i == j) continue;
      bool same = labels[static_cast<std::size_t>(i)] == labels[static_cast<std::size_t>(j)];
      (same ? pos : neg)[static_cast<std::size_t>(i * n + j)] = 1;
      (same ? has_pos : has_neg) = true;
    }
    if (!has_pos)
      throw Error("triplet_loss: identity " +
                  std::to_string(labels[static_cast<std::size_t>(i)]) +
                  " has a single batch sample");
    if (!has_neg) throw Error("triplet_loss: batch contains a single identity");
  }
  Tensor dist = sqrt_clamped(pairwise_sqdist(features));
  Tensor hardest_pos = masked_row_max(dist, pos);
  Tensor hardest_neg = masked_row_min(dist, neg);
  Tensor viol = relu(add_scalar(sub(hardest_pos, hardest_neg), margin));
  return scale(sum_all(viol), 1.0 / static_cast<double>(n));
}

Tensor cmmd_loss(const Tensor& features, const std::vector<int>& labels,
                 const std::vector<int>& modality) {
  check_features("cmmd_loss", features, labels);
  check_modality("cmmd_loss", modality, labels.size());
  auto groups = group_by_label(labels);
  Tensor acc;
  for (const auto& [cls, idx] : groups) {
    std::vector<std::int64_t> vis, ir;
    for (auto i : idx)
      (modality[static_cast<std::size_t>(i)] == 0 ? vis : ir).push_back(i);
    if (vis.empty() || ir.empty())
      throw Error("cmmd_loss: class " + std::to_string(cls) + " is missing a modality");
    double m = static_cast<double>(vis.size()), c = static_cast<double>(ir.size());
    Tensor v = gather_rows(features, vis);
    Tensor r = gather_rows(features, ir);
    Tensor kvv = matmul_nt(v, v);
    Tensor kii = matmul_nt(r, r);
    Tensor kvi = matmul_nt(v, r);
    Tensor t1 = scale(sum_all(mul(kvv, kvv)), 1.0 / (m * m));
    Tensor t2 = scale(sum_all(mul(kii, kii)), 1.0 / (c * c));
    // Scaled by 1/(m*c) first and doubled after, so that bit-identical vis/ir
    // features cancel to exactly zero.
    Tensor t3 = scale(scale(sum_all(mul(kvi, kvi)), 1.0 / (m * c)), 2.0);
    Tensor term = sqrt_clamped(sub(add(t1, t2), t3));
    acc = acc.defined() ? add(acc, term) : term;
  }
  return scale(acc, 1.0 / static_cast<double>(groups.size()));
}

Tensor row_normalized_gram(const Tensor& f) {
  if (!f.defined() || f.shape().size() != 2)
    throw Error("row_normalized_gram: input must be [n,d]");
  Tensor gram = matmul_nt(f, f);
  Tensor norms = cmnas::sqrt(row_sum(mul(gram, gram)));
  const auto& nv = norms.values();
  for (std::size_t i = 0; i < nv.size(); ++i)
    if (nv[i] == 0.0)
      throw Error("row_normalized_gram: zero Gram row " + std::to_string(i) +
                  " (degenerate feature)");
  return div_rows(gram, norms);
}

Tensor cc_loss(const Tensor& f_vis, const Tensor& f_ir) {
  if (!f_vis.defined() || !f_ir.defined() || f_vis.shape().size() != 2 ||
      f_ir.shape().size() != 2)
    throw Error("cc_loss: inputs must be [n,d]");
  if (f_vis.dim(0) != f_ir.dim(0) || f_vis.dim(1) != f_ir.dim(1))
    throw Error("cc_loss: feature matrices must have identical shapes");
  std::int64_t n = f_vis.dim(0);
  Tensor diff = sub(row_normalized_gram(f_vis), row_normalized_gram(f_ir));
  return scale(sum_all(mul(diff, diff)), 1.0 / static_cast<double>(n * n));
}

void paired_modal_indices(const std::vector<int>& labels, const std::vector<int>& modality,
                          std::vector<std::int64_t>& vis_idx,
                          std::vector<std::int64_t>& ir_idx) {
  check_modality("paired_modal_indices", modality, labels.size());
  vis_idx.clear();
  ir_idx.clear();
  for (const auto& [cls, idx] : group_by_label(labels)) {
    std::vector<std::int64_t> vis, ir;
    for (auto i : idx)
      (modality[static_cast<std::size_t>(i)] == 0 ? vis : ir).push_back(i);
    if (vis.size() != ir.size())
      throw Error("paired_modal_indices: identity " + std::to_string(cls) + " has " +
                  std::to_string(vis.size()) + " vis but " + std::to_string(ir.size()) +
                  " ir samples");
    vis_idx.insert(vis_idx.end(), vis.begin(), vis.end());
    ir_idx.insert(ir_idx.end(), ir.begin(), ir.end());
  }
}

Tensor c3mmd_loss(const Tensor& features, const std::vector<int>& labels,
                  const std::vector<int>& modality, const LossConfig& cfg) {
  validate_loss_config(cfg);
  Tensor out;
  if (cfg.use_cmmd) out = scale(cmmd_loss(features, labels, modality), cfg.lambda1);
  if (cfg.use_cc) {
    std::vector<std::int64_t> vis_idx, ir_idx;
    paired_modal_indices(labels, modality, vis_idx, ir_idx);
    Tensor cc = scale(
        cc_loss(gather_rows(features, vis_idx), gather_rows(features, ir_idx)), cfg.lambda2);
    out = out.defined() ? add(out, cc) : cc;
  }
  return out.defined() ? out : Tensor::scalar(0.0);
}

LossTerms total_loss(const Tensor& features, const Tensor& logits,
                     const std::vector<int>& labels, const std::vector<int>& modality,
                     const LossConfig& cfg) {
  validate_loss_config(cfg);
  check_features("total_loss", features, labels);
  LossTerms t;
  t.cls = cls_loss(logits, labels);
  t.triplet = triplet_loss(features, labels, cfg.margin);
  t.total = add(t.cls, t.triplet);
  if (cfg.use_cmmd) {
    t.cmmd = cmmd_loss(features, labels, modality);
    t.total = add(t.total, scale(t.cmmd, cfg.lambda1));
  } else {
    t.cmmd = Tensor::scalar(0.0);
  }
  if (cfg.use_cc) {
    std::vector<std::int64_t> vis_idx, ir_idx;
    paired_modal_indices(labels, modality, vis_idx, ir_idx);
    t.cc = cc_loss(gather_rows(features, vis_idx), gather_rows(features, ir_idx));
    t.total = add(t.total, scale(t.cc, cfg.lambda2));
  } else {
    t.cc = Tensor::scalar(0.0);
  }
  return t;
}

}  // namespace cmnas
