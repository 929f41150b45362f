#pragma once

// Synthetic two-modality identity dataset, identity-disjoint splits, the
// P x K cross-modality batch sampler, and checkpoint persistence.

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "nn.hpp"
#include "rng.hpp"
#include "search.hpp"

namespace cmnas {

// ---------------------------------------------------------------------------
// Dataset generation
// ---------------------------------------------------------------------------

/// Each identity is a prototype image of random shape primitives; every
/// sample renders the prototype with per-image jitter, then pushes it through
/// one of two modality transforms. Samples k of modalities A and B share the
/// same jittered render, giving paired cross-modality images.
struct SynthConfig {
  int identities = 64;
  int images_per_modality = 10;
  std::int64_t resolution = 32;
  int primitives = 5;  // shapes per identity prototype

  // Modality A: 3x3 channel mixing (row-major) + brightness + pixel noise.
  std::array<double, 9> a_channel_mix = {0.9, 0.1, 0.0, 0.05, 0.9, 0.05, 0.0, 0.1, 0.9};
  double a_brightness = 0.05;
  double a_noise = 0.03;

  // Modality B: channel collapse to one plane copied to all channels, plus a
  // structured stripe pattern and pixel noise.
  std::array<double, 3> b_collapse = {0.35, 0.45, 0.20};
  double b_pattern = 0.25;
  double b_noise = 0.03;

  // Identity ids are identity_base..identity_base+identities-1, so two
  // configs with disjoint bases share no identities (cross-config transfer).
  int identity_base = 0;
  std::uint64_t seed = 1;
};

void validate_synth_config(const SynthConfig& cfg);

struct Dataset {
  SynthConfig cfg;
  Tensor images;  // [n, 3, r, r]
  std::vector<int> identity;  // global identity id per image
  std::vector<int> modality;  // 0 = A, 1 = B

  std::int64_t size() const { return static_cast<std::int64_t>(identity.size()); }
  /// Sorted unique identity ids.
  const std::vector<int>& ids() const { return ids_; }
  int num_identities() const { return static_cast<int>(ids_.size()); }
  /// Contiguous class index of a global identity id (classifier label).
  int class_of(int identity_id) const;
  /// Recomputes ids(); call after filling identity by hand.
  void reindex();

 private:
  std::vector<int> ids_;
};

/// Pure function of cfg (including cfg.seed).
Dataset generate_dataset(const SynthConfig& cfg);

/// New dataset holding copies of the selected images, original order kept.
Dataset subset(const Dataset& d, const std::vector<std::int64_t>& image_indices);

/// Splits identities (not images) train:val at the given train ratio using a
/// dedicated seeded shuffle. Both sides are non-empty or this throws.
std::pair<Dataset, Dataset> split_identities(const Dataset& d, double train_ratio,
                                             std::uint64_t seed);

/// Writes binary PPM files named id<I>_mod<A|B>_<k>.ppm; values clamped to
/// [0,1] then scaled to 8 bits. Returns the number of files written.
int export_ppm(const Dataset& d, const std::string& dir);

// ---------------------------------------------------------------------------
// Batch sampling
// ---------------------------------------------------------------------------

/// One-shot draw: P random identities, K modality-A plus K modality-B images
/// each, all without replacement inside the batch. Labels are contiguous
/// class indices of d. Images appear identity-major, A block then B block.
ModalityBatch sample_pk_batch(const Dataset& d, int P, int K, Rng& rng);

/// Epoch-aware sampler: per-identity per-modality pools are shuffled and
/// consumed without replacement; a pool reshuffles only when fewer than K
/// images remain. Identities are visited in shuffled order, P per batch, and
/// the identity list reshuffles when fewer than P remain (the remainder rolls
/// over). One sampler per run; all state comes from the seed.
class PKSampler {
 public:
  PKSampler(const Dataset& d, int P, int K, std::uint64_t seed);

  ModalityBatch next();
  /// Batches that cover the dataset about once: size / (P * 2K), at least 1.
  int batches_per_epoch() const;

 private:
  const Dataset* d_;
  int p_, k_;
  Rng rng_;
  std::vector<int> id_order_;  // class indices
  std::size_t id_cursor_ = 0;
  // pools_[class][modality] = shuffled image indices; cursors_ tracks use.
  std::vector<std::array<std::vector<std::int64_t>, 2>> pools_;
  std::vector<std::array<std::size_t, 2>> cursors_;
};

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

/// A tensor or buffer snapshot. Buffers use a rank-1 shape.
struct NamedRecord {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

/// Adam moments and step count for one optimizer, record names matching the
/// optimizer's parameter names.
struct OptState {
  std::int64_t t = 0;
  std::vector<NamedRecord> m, v;
};

/// Everything needed to resume a run at an epoch boundary bit-exactly.
struct Checkpoint {
  std::uint32_t version = 1;
  std::string config_text;  // resolved run configuration, opaque here
  std::string arch;         // bitstring, or "searching" while alphas are live
  std::int64_t epoch = 0;   // next epoch to run
  std::string rng_state;    // run-master Rng::serialize text
  std::vector<NamedRecord> tensors;  // weights and alphas
  std::vector<NamedRecord> buffers;  // running statistics
  OptState w_opt, alpha_opt;
};

/// Sectioned binary container: magic "CMNS", little-endian u32 version, then
/// length-prefixed named records until end of file.
void save_checkpoint(const std::string& path, const Checkpoint& c);
/// Rejects bad magic, unknown version, and truncated files.
Checkpoint load_checkpoint(const std::string& path);

/// Snapshot of a live network (weights, alphas, running statistics) plus
/// optional optimizer states. Pass nullptr for an optimizer to skip it.
Checkpoint make_checkpoint(Network& net, const Adam* w_opt, const Adam* alpha_opt,
                           std::int64_t epoch, const std::string& arch,
                           const std::string& config_text, const std::string& rng_state);

/// Writes checkpoint tensors and buffers back into net; every network tensor
/// must be present with a matching shape.
void restore_network(const Checkpoint& c, Network& net);
/// Restores moments and step count; parameter names must match exactly.
void restore_optimizer(const OptState& s, Adam& opt);

}  // namespace cmnas
