#pragma once

#include <vector>

#include "tensor.hpp"

namespace cmnas {

// Weights and toggles for the combined training objective.
struct LossConfig {
  double lambda1 = 0.05;  // class-specific MMD weight
  double lambda2 = 5.0;   // correlation consistency weight
  double margin = 0.3;    // triplet margin
  bool use_cmmd = true;
  bool use_cc = true;
};

void validate_loss_config(const LossConfig& cfg);

// Individual objective terms plus their sum. cmmd/cc are zero scalars when the
// corresponding toggle is off.
struct LossTerms {
  Tensor cls;
  Tensor triplet;
  Tensor cmmd;
  Tensor cc;
  Tensor total;
};

/// Mean softmax cross-entropy over the batch.
Tensor cls_loss(const Tensor& logits, const std::vector<int>& labels);

/// Batch-hard triplet loss with Euclidean distances: mean over anchors of
/// max(0, hardest positive - hardest negative + margin). Positives and
/// negatives are mined across both modalities jointly. Every identity in the
/// batch needs >= 2 samples and at least one sample of another identity.
Tensor triplet_loss(const Tensor& features, const std::vector<int>& labels, double margin);

/// Class-specific MMD with kernel k(x,y) = (x.y)^2, averaged over classes:
/// (1/C) sum_c sqrt(max(0, MMD2_c)). Every class present must have features in
/// both modalities.
Tensor cmmd_loss(const Tensor& features, const std::vector<int>& labels,
                 const std::vector<int>& modality);

/// F F^T with each row divided by its L2 norm. A zero Gram row (zero feature
/// row) is a degenerate-feature error.
Tensor row_normalized_gram(const Tensor& f);

/// (1/n^2) ||G_vis - G_ir||_F^2 over row-normalized Grams of two index-aligned
/// n x d feature matrices.
Tensor cc_loss(const Tensor& f_vis, const Tensor& f_ir);

/// Pair up vis and ir rows of the same identity: identities in ascending
/// label order, batch order within each. Requires equal per-identity counts in
/// both modalities.
void paired_modal_indices(const std::vector<int>& labels, const std::vector<int>& modality,
                          std::vector<std::int64_t>& vis_idx, std::vector<std::int64_t>& ir_idx);

/// lambda1 * CMMD + lambda2 * CC with per-term toggles.
Tensor c3mmd_loss(const Tensor& features, const std::vector<int>& labels,
                  const std::vector<int>& modality, const LossConfig& cfg);

/// cls + triplet + lambda1 * CMMD + lambda2 * CC. Disabled terms are skipped
/// entirely so the total reduces to cls + triplet exactly.
LossTerms total_loss(const Tensor& features, const Tensor& logits,
                     const std::vector<int>& labels, const std::vector<int>& modality,
                     const LossConfig& cfg);

}  // namespace cmnas
