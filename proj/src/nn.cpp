#include "nn.hpp"

#include <cmath>

namespace cmnas {

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

NormParams::NormParams(std::int64_t channels) {
  if (channels <= 0) throw Error("NormParams: channel count must be positive");
  gamma = Tensor::constant({channels}, 1.0, true);
  beta = Tensor::constant({channels}, 0.0, true);
  running_mean.assign(static_cast<std::size_t>(channels), 0.0);
  running_var.assign(static_cast<std::size_t>(channels), 1.0);
}

namespace {

void check_norm_input(const char* op, const Tensor& x, const NormParams& p) {
  if (!x.defined() || x.shape().size() != 4)
    throw Error(std::string(op) + ": input must be [n,c,h,w]");
  if (x.dim(1) != p.channels())
    throw Error(std::string(op) + ": channel mismatch, input has " + std::to_string(x.dim(1)) +
                ", params have " + std::to_string(p.channels()));
}

void split_by_modality(const std::vector<int>& modality, std::int64_t batch,
                       std::vector<std::int64_t>& vis_idx, std::vector<std::int64_t>& ir_idx) {
  if (static_cast<std::int64_t>(modality.size()) != batch)
    throw Error("modality mask length does not match batch size");
  vis_idx.clear();
  ir_idx.clear();
  for (std::int64_t i = 0; i < batch; ++i) {
    int m = modality[static_cast<std::size_t>(i)];
    if (m == 0)
      vis_idx.push_back(i);
    else if (m == 1)
      ir_idx.push_back(i);
    else
      throw Error("modality labels must be 0 (vis) or 1 (ir)");
  }
}

}  // namespace

Tensor norm_forward(const Tensor& x, NormParams& p, bool training) {
  check_norm_input("norm_forward", x, p);
  std::int64_t c = p.channels();
  if (training) {
    if (x.dim(0) < 2) throw Error("norm_forward: training batch must have >= 2 samples");
    std::vector<double> mean, var;
    Tensor y = batch_norm_train(x, p.gamma, p.beta, p.eps, &mean, &var);
    for (std::int64_t i = 0; i < c; ++i) {
      auto k = static_cast<std::size_t>(i);
      p.running_mean[k] = (1.0 - p.momentum) * p.running_mean[k] + p.momentum * mean[k];
      p.running_var[k] = (1.0 - p.momentum) * p.running_var[k] + p.momentum * var[k];
    }
    return y;
  }
  std::vector<double> inv_std(static_cast<std::size_t>(c));
  for (std::int64_t i = 0; i < c; ++i) {
    auto k = static_cast<std::size_t>(i);
    if (p.running_var[k] < 0.0) throw Error("norm_forward: negative running variance");
    inv_std[k] = 1.0 / std::sqrt(p.running_var[k] + p.eps);
  }
  return channel_affine(x, p.gamma, p.beta, p.running_mean, std::move(inv_std));
}

Tensor instance_norm_forward(const Tensor& x, NormParams& p) {
  check_norm_input("instance_norm_forward", x, p);
  Tensor mean = spatial_mean(x);
  Tensor xm = sub(x, broadcast_sample_channel(mean, x.shape()));
  Tensor var = spatial_mean(mul(xm, xm));
  Tensor denom = cmnas::sqrt(add_scalar(var, p.eps));
  Tensor xhat = div(xm, broadcast_sample_channel(denom, x.shape()));
  return add(mul(xhat, broadcast_channel(p.gamma, x.shape())),
             broadcast_channel(p.beta, x.shape()));
}

Tensor separate_norm_forward(const Tensor& x, const std::vector<int>& modality, NormParams& vis,
                             NormParams& ir, bool training) {
  check_norm_input("separate_norm_forward", x, vis);
  std::int64_t n = x.dim(0);
  std::vector<std::int64_t> vis_idx, ir_idx;
  split_by_modality(modality, n, vis_idx, ir_idx);
  if (training && (vis_idx.empty() || ir_idx.empty()))
    throw Error("separate_norm_forward: a modality is absent from the training batch");

  Tensor out;
  if (!vis_idx.empty()) {
    Tensor y = norm_forward(gather_rows(x, vis_idx), vis, training);
    out = scatter_rows(y, vis_idx, n);
  }
  if (!ir_idx.empty()) {
    Tensor y = norm_forward(gather_rows(x, ir_idx), ir, training);
    Tensor placed = scatter_rows(y, ir_idx, n);
    out = out.defined() ? add(out, placed) : placed;
  }
  return out;
}

Tensor searchable_norm_forward(const Tensor& x, const std::vector<int>& modality,
                               NormLayer& layer, const Tensor& probs, bool training) {
  if (!layer.vis || !layer.ir || !layer.shared)
    throw Error("searchable_norm_forward: layer is missing a parameter branch");
  if (!probs.defined() || probs.numel() != 2)
    throw Error("searchable_norm_forward: probs must have two entries");
  double s = probs.values()[0] + probs.values()[1];
  if (std::abs(s - 1.0) > 1e-9)
    throw Error("searchable_norm_forward: probs must sum to 1");
  Tensor sep = separate_norm_forward(x, modality, *layer.vis, *layer.ir, training);
  Tensor sha = norm_forward(x, *layer.shared, training);
  return mix2(sep, sha, probs);
}

Tensor norm_layer_forward(NormLayer& layer, const Tensor& x, const std::vector<int>& modality,
                          bool training) {
  switch (layer.kind) {
    case NormKind::Shared:
      return norm_forward(x, *layer.shared, training);
    case NormKind::Separate:
      return separate_norm_forward(x, modality, *layer.vis, *layer.ir, training);
    case NormKind::Instance:
      return instance_norm_forward(x, *layer.shared);
    case NormKind::Searchable:
      return searchable_norm_forward(x, modality, layer, softmax(layer.alpha), training);
  }
  throw Error("norm_layer_forward: unknown kind");
}

// ---------------------------------------------------------------------------
// Backbone construction
// ---------------------------------------------------------------------------

int block_count(const BackboneConfig& cfg) {
  int total = 0;
  for (int b : cfg.blocks) total += b;
  return total;
}

std::vector<std::string> block_names(const BackboneConfig& cfg) {
  std::vector<std::string> names;
  for (std::size_t s = 0; s < cfg.blocks.size(); ++s)
    for (int j = 0; j < cfg.blocks[s]; ++j)
      names.push_back("s" + std::to_string(s + 1) + "_" + std::to_string(j + 1));
  return names;
}

std::vector<int> block_norm_counts(const BackboneConfig& cfg) {
  std::vector<int> counts;
  int total = block_count(cfg);
  for (int i = 0; i < total; ++i) counts.push_back(i == 0 ? 1 : 3);
  return counts;
}

std::int64_t norm_site_count(const BackboneConfig& cfg) {
  std::int64_t total = 0;
  for (int c : block_norm_counts(cfg)) total += c;
  return total;
}

namespace {

void validate_config(const BackboneConfig& cfg) {
  if (cfg.widths.empty() || cfg.widths.size() != cfg.blocks.size())
    throw Error("backbone config: widths and blocks must align and be non-empty");
  for (auto w : cfg.widths)
    if (w <= 0) throw Error("backbone config: stage widths must be positive");
  for (int b : cfg.blocks)
    if (b < 1) throw Error("backbone config: block counts must be >= 1");
  if (cfg.embedding_dim < 1) throw Error("backbone config: embedding_dim must be >= 1");
  if (cfg.num_classes < 1) throw Error("backbone config: num_classes must be >= 1");
  if (cfg.input_resolution < 4) throw Error("backbone config: input resolution too small");
  if ((cfg.norm_mode == NormMode::Scheme) != cfg.scheme.has_value())
    throw Error("backbone config: scheme must be present exactly when norm_mode is Scheme");
  if (cfg.scheme) {
    std::size_t expect = cfg.scheme->unit == SeparationScheme::Unit::NormLayers
                             ? static_cast<std::size_t>(norm_site_count(cfg))
                             : static_cast<std::size_t>(block_count(cfg));
    if (cfg.scheme->mask.size() != expect)
      throw Error("backbone config: scheme mask length " +
                  std::to_string(cfg.scheme->mask.size()) + " does not govern " +
                  std::to_string(expect) + " units");
    for (auto v : cfg.scheme->mask)
      if (v > 1) throw Error("backbone config: scheme mask entries must be 0 or 1");
  }
}

Tensor he_conv(Rng& rng, std::int64_t cout, std::int64_t cin, std::int64_t k) {
  double std = std::sqrt(2.0 / static_cast<double>(cin * k * k));
  std::vector<double> v(static_cast<std::size_t>(cout * cin * k * k));
  for (auto& x : v) x = std * rng.gaussian();
  return Tensor::from_values({cout, cin, k, k}, std::move(v), true);
}

Tensor xavier(Rng& rng, std::int64_t rows, std::int64_t cols) {
  double std = std::sqrt(2.0 / static_cast<double>(rows + cols));
  std::vector<double> v(static_cast<std::size_t>(rows * cols));
  for (auto& x : v) x = std * rng.gaussian();
  return Tensor::from_values({rows, cols}, std::move(v), true);
}

Tensor clone_tensor(const Tensor& t) {
  return Tensor::from_values(t.shape(), t.values(), t.requires_grad());
}

ConvW make_conv(Rng& rng, std::int64_t cout, std::int64_t cin, std::int64_t k, bool duplicated) {
  ConvW w;
  Tensor base = he_conv(rng, cout, cin, k);
  if (duplicated) {
    w.vis = base;
    w.ir = clone_tensor(base);
  } else {
    w.shared = base;
  }
  return w;
}

NormLayer make_norm(const std::string& name, std::int64_t channels, NormKind kind) {
  NormLayer layer;
  layer.kind = kind;
  layer.name = name;
  layer.channels = channels;
  if (kind != NormKind::Separate) layer.shared.emplace(channels);
  if (kind == NormKind::Separate || kind == NormKind::Searchable) {
    layer.vis.emplace(channels);
    layer.ir.emplace(channels);
  }
  if (kind == NormKind::Searchable) layer.alpha = Tensor::zeros({2}, true);
  return layer;
}

}  // namespace

Network build_backbone(const BackboneConfig& cfg, Rng& rng) {
  validate_config(cfg);
  Network net;
  net.cfg = cfg;

  // Expand the scheme into a per-norm-site separation mask and a per-block
  // conv-duplication mask.
  int nblocks = block_count(cfg);
  auto norm_counts = block_norm_counts(cfg);
  std::vector<std::uint8_t> site_separate(static_cast<std::size_t>(norm_site_count(cfg)), 0);
  std::vector<std::uint8_t> block_duplicated(static_cast<std::size_t>(nblocks), 0);
  if (cfg.norm_mode == NormMode::Scheme) {
    const auto& sch = *cfg.scheme;
    if (sch.unit == SeparationScheme::Unit::NormLayers) {
      site_separate = sch.mask;
    } else {
      std::size_t site = 0;
      for (int b = 0; b < nblocks; ++b) {
        for (int j = 0; j < norm_counts[static_cast<std::size_t>(b)]; ++j, ++site)
          site_separate[site] = sch.mask[static_cast<std::size_t>(b)];
      }
      if (sch.unit == SeparationScheme::Unit::FullBlock) block_duplicated = sch.mask;
    }
  }
  auto site_kind = [&](std::size_t site) {
    switch (cfg.norm_mode) {
      case NormMode::Searchable: return NormKind::Searchable;
      case NormMode::AllShared: return NormKind::Shared;
      case NormMode::InstanceNorm: return NormKind::Instance;
      case NormMode::Scheme: return site_separate[site] ? NormKind::Separate : NormKind::Shared;
    }
    throw Error("build_backbone: unknown norm mode");
  };

  auto names = block_names(cfg);
  std::size_t site = 0;
  int block_index = 0;

  // Stem: conv 3x3 keeps resolution, then norm/ReLU/max-pool.
  net.stem = make_conv(rng, cfg.widths[0], 3, 3, block_duplicated[0] != 0);
  net.norms.push_back(make_norm(names[0] + ".bn1", cfg.widths[0], site_kind(site)));
  net.stem_norm = 0;
  ++site;
  ++block_index;

  std::int64_t in_ch = cfg.widths[0];
  for (std::size_t s = 0; s < cfg.blocks.size(); ++s) {
    int first = (s == 0) ? 1 : 0;  // stage 1's first block is the stem
    for (int j = first; j < cfg.blocks[s]; ++j, ++block_index) {
      std::int64_t out_ch = cfg.widths[s];
      std::int64_t mid_ch = std::max<std::int64_t>(1, out_ch / 2);
      bool dup = block_duplicated[static_cast<std::size_t>(block_index)] != 0;
      ResBlock b;
      b.name = names[static_cast<std::size_t>(block_index)];
      b.stride = (j == 0 && s >= 2) ? 2 : 1;
      b.has_proj = (b.stride != 1 || in_ch != out_ch);
      b.c1 = make_conv(rng, mid_ch, in_ch, 1, dup);
      b.c2 = make_conv(rng, mid_ch, mid_ch, 3, dup);
      b.c3 = make_conv(rng, out_ch, mid_ch, 1, dup);
      if (b.has_proj) b.proj = make_conv(rng, out_ch, in_ch, 1, dup);
      b.n1 = static_cast<int>(net.norms.size());
      net.norms.push_back(make_norm(b.name + ".bn1", mid_ch, site_kind(site++)));
      b.n2 = static_cast<int>(net.norms.size());
      net.norms.push_back(make_norm(b.name + ".bn2", mid_ch, site_kind(site++)));
      b.n3 = static_cast<int>(net.norms.size());
      net.norms.push_back(make_norm(b.name + ".bn3", out_ch, site_kind(site++)));
      net.blocks.push_back(std::move(b));
      in_ch = out_ch;
    }
  }

  net.embed_w = xavier(rng, in_ch, cfg.embedding_dim);
  net.cls_w = xavier(rng, cfg.num_classes, cfg.embedding_dim);
  return net;
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

namespace {

Tensor conv_forward(const ConvW& w, const Tensor& x, const std::vector<int>& modality,
                    int stride, int pad, bool training) {
  if (!w.duplicated()) return conv2d(x, w.shared, stride, pad);
  std::vector<std::int64_t> vis_idx, ir_idx;
  split_by_modality(modality, x.dim(0), vis_idx, ir_idx);
  if (training && (vis_idx.empty() || ir_idx.empty()))
    throw Error("conv_forward: a modality is absent from the training batch");
  std::int64_t n = x.dim(0);
  Tensor out;
  auto run = [&](const std::vector<std::int64_t>& idx, const Tensor& weight) {
    if (idx.empty()) return;
    Tensor placed = scatter_rows(conv2d(gather_rows(x, idx), weight, stride, pad), idx, n);
    out = out.defined() ? add(out, placed) : placed;
  };
  run(vis_idx, w.vis);
  run(ir_idx, w.ir);
  return out;
}

Tensor res_block_forward(Network& net, ResBlock& b, const Tensor& x,
                         const std::vector<int>& modality, bool training) {
  Tensor h = conv_forward(b.c1, x, modality, 1, 0, training);
  h = relu(norm_layer_forward(net.norms[static_cast<std::size_t>(b.n1)], h, modality, training));
  h = conv_forward(b.c2, h, modality, b.stride, 1, training);
  h = relu(norm_layer_forward(net.norms[static_cast<std::size_t>(b.n2)], h, modality, training));
  h = conv_forward(b.c3, h, modality, 1, 0, training);
  h = norm_layer_forward(net.norms[static_cast<std::size_t>(b.n3)], h, modality, training);
  Tensor shortcut = b.has_proj ? conv_forward(b.proj, x, modality, b.stride, 0, training) : x;
  return relu(add(h, shortcut));
}

}  // namespace

ForwardResult net_forward(Network& net, const Tensor& images, const std::vector<int>& modality,
                          bool training) {
  if (!images.defined() || images.shape().size() != 4 || images.dim(1) != 3)
    throw Error("net_forward: images must be [n,3,h,w]");
  if (images.dim(2) != net.cfg.input_resolution || images.dim(3) != net.cfg.input_resolution)
    throw Error("net_forward: image resolution does not match the backbone config");
  if (static_cast<std::int64_t>(modality.size()) != images.dim(0))
    throw Error("net_forward: modality mask length mismatch");

  Tensor h = conv_forward(net.stem, images, modality, 1, 1, training);
  h = relu(norm_layer_forward(net.norms[static_cast<std::size_t>(net.stem_norm)], h, modality,
                              training));
  h = maxpool2d(h, 2, 2);
  for (auto& b : net.blocks) h = res_block_forward(net, b, h, modality, training);
  Tensor feat = global_avg_pool(h);
  Tensor emb = matmul(feat, net.embed_w);
  Tensor logits = matmul_nt(emb, net.cls_w);
  return {emb, logits};
}

// ---------------------------------------------------------------------------
// Parameter enumeration
// ---------------------------------------------------------------------------

namespace {

void push_conv(std::vector<NamedTensor>& out, const std::string& name, const ConvW& w) {
  if (w.duplicated()) {
    out.push_back({name + ".vis.w", w.vis});
    out.push_back({name + ".ir.w", w.ir});
  } else {
    out.push_back({name + ".w", w.shared});
  }
}

void push_norm_params(std::vector<NamedTensor>& out, const NormLayer& layer) {
  auto push_set = [&](const char* branch, const NormParams& p) {
    out.push_back({layer.name + "." + branch + ".gamma", p.gamma});
    out.push_back({layer.name + "." + branch + ".beta", p.beta});
  };
  if (layer.shared) push_set("shared", *layer.shared);
  if (layer.vis) push_set("vis", *layer.vis);
  if (layer.ir) push_set("ir", *layer.ir);
}

}  // namespace

std::vector<NamedTensor> weight_params(Network& net) {
  std::vector<NamedTensor> out;
  push_conv(out, "stem.conv", net.stem);
  for (auto& b : net.blocks) {
    push_conv(out, b.name + ".conv1", b.c1);
    push_conv(out, b.name + ".conv2", b.c2);
    push_conv(out, b.name + ".conv3", b.c3);
    if (b.has_proj) push_conv(out, b.name + ".proj", b.proj);
  }
  for (auto& layer : net.norms) push_norm_params(out, layer);
  out.push_back({"embed.w", net.embed_w});
  out.push_back({"cls.w", net.cls_w});
  return out;
}

std::vector<NamedTensor> arch_params(Network& net) {
  std::vector<NamedTensor> out;
  for (auto& layer : net.norms)
    if (layer.kind == NormKind::Searchable) out.push_back({layer.name + ".alpha", layer.alpha});
  return out;
}

std::vector<NamedBuffer> norm_buffers(Network& net) {
  std::vector<NamedBuffer> out;
  for (auto& layer : net.norms) {
    auto push_set = [&](const char* branch, NormParams& p) {
      out.push_back({layer.name + "." + branch + ".running_mean", &p.running_mean});
      out.push_back({layer.name + "." + branch + ".running_var", &p.running_var});
    };
    if (layer.shared) push_set("shared", *layer.shared);
    if (layer.vis) push_set("vis", *layer.vis);
    if (layer.ir) push_set("ir", *layer.ir);
  }
  return out;
}

std::int64_t param_count(Network& net) {
  std::int64_t total = 0;
  for (const auto& nt : weight_params(net)) total += nt.tensor.numel();
  return total;
}

}  // namespace cmnas
