#pragma once

// Normalization layers (shared / per-modality / searchable / instance),
// bottleneck residual blocks, and the toy two-modality backbone.

#include <optional>
#include <string>
#include <vector>

#include "rng.hpp"
#include "tensor.hpp"

namespace cmnas {

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

struct NormParams {
  Tensor gamma, beta;  // learnable, [channels]
  std::vector<double> running_mean, running_var;
  double momentum = 0.1;
  double eps = 1e-6;  // small enough that unit-variance inputs pass through within 1e-6

  NormParams() = default;
  explicit NormParams(std::int64_t channels);
  std::int64_t channels() const { return gamma.defined() ? gamma.dim(0) : 0; }
};

/// Batch normalization. Training mode normalizes by batch statistics
/// (biased variance) and advances the running statistics by EMA; inference
/// mode normalizes by the running statistics. Training needs batch >= 2.
Tensor norm_forward(const Tensor& x, NormParams& p, bool training);

/// Per-sample per-channel normalization; no running statistics, identical in
/// training and inference.
Tensor instance_norm_forward(const Tensor& x, NormParams& p);

/// Splits the batch by modality, normalizes each sub-batch with its own
/// parameters and statistics, re-interleaves in the original order.
/// Training requires every present modality sub-batch to have >= 2 samples;
/// a modality absent from the batch is an error in training and is skipped
/// in inference.
Tensor separate_norm_forward(const Tensor& x, const std::vector<int>& modality,
                             NormParams& vis, NormParams& ir, bool training);

enum class NormKind { Shared, Separate, Searchable, Instance };

struct NormLayer {
  NormKind kind = NormKind::Shared;
  std::string name;  // block-qualified, e.g. "s2_1.bn1"
  std::int64_t channels = 0;
  std::optional<NormParams> shared;   // Shared, Searchable, Instance
  std::optional<NormParams> vis, ir;  // Separate, Searchable
  Tensor alpha;                       // Searchable: [2] = (alpha_separate, alpha_share)
};

/// probs[0] * separate(x) + probs[1] * shared(x). Both branches always run
/// in training (each updates its own running statistics). probs must sum to
/// 1 within 1e-9.
Tensor searchable_norm_forward(const Tensor& x, const std::vector<int>& modality,
                               NormLayer& layer, const Tensor& probs, bool training);

/// Dispatch on layer.kind; Searchable layers use softmax(alpha) as probs.
Tensor norm_layer_forward(NormLayer& layer, const Tensor& x,
                          const std::vector<int>& modality, bool training);

// ---------------------------------------------------------------------------
// Backbone
// ---------------------------------------------------------------------------

enum class NormMode { Searchable, AllShared, Scheme, InstanceNorm };

struct SeparationScheme {
  enum class Unit {
    FullBlock,   // mask over blocks; convolutions duplicated per modality
    BlockNorms,  // mask over blocks; only the norm layers separate
    NormLayers,  // mask over norm sites (a discretized bitstring)
  };
  Unit unit = Unit::NormLayers;
  std::vector<std::uint8_t> mask;
};

struct BackboneConfig {
  std::vector<std::int64_t> widths = {16, 16, 32, 64};  // per stage
  std::vector<int> blocks = {1, 2, 2, 2};               // per stage; stage 1 is the stem
  std::int64_t embedding_dim = 64;
  std::int64_t input_resolution = 32;
  std::int64_t num_classes = 1;
  NormMode norm_mode = NormMode::Searchable;
  std::optional<SeparationScheme> scheme;  // required iff norm_mode == Scheme
};

/// Convolution weight that may be duplicated per modality (full-block
/// separation); exactly one of {shared} or {vis, ir} is defined.
struct ConvW {
  Tensor shared;
  Tensor vis, ir;
  bool duplicated() const { return vis.defined(); }
};

struct ResBlock {
  std::string name;
  int stride = 1;
  bool has_proj = false;
  ConvW c1, c2, c3;  // 1x1, 3x3, 1x1
  ConvW proj;        // 1x1, no norm after it
  int n1 = -1, n2 = -1, n3 = -1;  // indices into Network::norms
};

struct Network {
  BackboneConfig cfg;
  ConvW stem;  // 3x3 stride 1 pad 1, then norm, ReLU, 2x2/2 max-pool
  int stem_norm = 0;
  std::vector<ResBlock> blocks;
  std::vector<NormLayer> norms;  // topological order
  Tensor embed_w;  // [last_width, embedding_dim]
  Tensor cls_w;    // [num_classes, embedding_dim]
};

struct ForwardResult {
  Tensor embeddings;  // [n, embedding_dim], unnormalized
  Tensor logits;      // [n, num_classes]
};

// One training or validation batch: images with per-sample identity and
// modality labels, plus (when sampled from a dataset) the source image
// indices for provenance.
struct ModalityBatch {
  Tensor images;  // [n, 3, r, r]
  std::vector<int> labels;
  std::vector<int> modality;
  std::vector<std::int64_t> indices;
};

/// Number of blocks implied by cfg (stem counts as block s1_1).
int block_count(const BackboneConfig& cfg);
/// Block names in topological order: s1_1, s2_1, s2_2, ...
std::vector<std::string> block_names(const BackboneConfig& cfg);
/// Norm sites per block in topological order (stem 1, residual blocks 3).
std::vector<int> block_norm_counts(const BackboneConfig& cfg);
/// Total norm sites = length of an architecture bitstring for cfg.
std::int64_t norm_site_count(const BackboneConfig& cfg);

/// Build with deterministic initialization. The random draw order is
/// identical across norm modes, so equal seeds give equal conv/head weights;
/// duplicated parameters start as copies of their shared counterpart.
Network build_backbone(const BackboneConfig& cfg, Rng& rng);

ForwardResult net_forward(Network& net, const Tensor& images,
                          const std::vector<int>& modality, bool training);

struct NamedTensor {
  std::string name;
  Tensor tensor;
};
struct NamedBuffer {
  std::string name;
  std::vector<double>* data;
};

/// Learnable network weights (convs, norm affine parameters, heads) in a
/// stable order. Excludes architecture parameters.
std::vector<NamedTensor> weight_params(Network& net);
/// Architecture parameters (one [2] alpha per searchable layer).
std::vector<NamedTensor> arch_params(Network& net);
/// Running-statistic buffers in a stable order.
std::vector<NamedBuffer> norm_buffers(Network& net);
/// Total scalar count over weight_params.
std::int64_t param_count(Network& net);

}  // namespace cmnas
