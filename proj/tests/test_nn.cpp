#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <random>

#include "nn.hpp"

using namespace cmnas;

namespace {

Tensor rand_images(std::mt19937_64& rng, std::int64_t n, std::int64_t c, std::int64_t hw,
                   double scale = 1.0) {
  std::uniform_real_distribution<double> dist(-scale, scale);
  std::vector<double> v(static_cast<std::size_t>(n * c * hw * hw));
  for (auto& x : v) x = dist(rng);
  return Tensor::from_values({n, c, hw, hw}, std::move(v), false);
}

BackboneConfig tiny_config(NormMode mode) {
  BackboneConfig cfg;
  cfg.widths = {4, 8};
  cfg.blocks = {1, 1};
  cfg.embedding_dim = 4;
  cfg.input_resolution = 8;
  cfg.num_classes = 2;
  cfg.norm_mode = mode;
  return cfg;
}

}  // namespace

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

TEST_CASE("batch norm passes unit-variance input through within 1e-6") {
  // Two samples at +1/-1 per pixel: mean 0, biased variance 1 per channel.
  std::vector<double> v;
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2 * 4; ++j) v.push_back(i == 0 ? 1.0 : -1.0);
  Tensor x = Tensor::from_values({2, 2, 2, 2}, v);
  NormParams p(2);
  Tensor y = norm_forward(x, p, true);
  for (std::size_t i = 0; i < v.size(); ++i)
    CHECK(std::abs(y.values()[i] - v[i]) < 1e-6);
}

TEST_CASE("batch norm collapses a constant channel to beta") {
  Tensor x = Tensor::constant({3, 2, 2, 2}, 7.5);
  NormParams p(2);
  p.beta.values() = {0.25, -1.5};
  Tensor y = norm_forward(x, p, true);
  for (std::int64_t i = 0; i < 3; ++i)
    for (std::int64_t ch = 0; ch < 2; ++ch)
      for (std::int64_t k = 0; k < 4; ++k)
        CHECK(y.values()[static_cast<std::size_t>((i * 2 + ch) * 4 + k)] ==
              doctest::Approx(p.beta.values()[static_cast<std::size_t>(ch)]).epsilon(1e-9));
}

TEST_CASE("running statistics advance by EMA with momentum 0.1") {
  Tensor x = Tensor::constant({2, 1, 2, 2}, 1.0);
  NormParams p(1);
  norm_forward(x, p, true);
  CHECK(p.running_mean[0] == doctest::Approx(0.1));
  CHECK(p.running_var[0] == doctest::Approx(0.9));  // EMA toward the zero batch variance
}

TEST_CASE("batch norm rejects tiny training batches and channel mismatch") {
  NormParams p(2);
  Tensor one = Tensor::zeros({1, 2, 2, 2});
  CHECK_THROWS_AS(norm_forward(one, p, true), Error);
  CHECK_NOTHROW(norm_forward(one, p, false));
  Tensor wrong = Tensor::zeros({2, 3, 2, 2});
  CHECK_THROWS_AS(norm_forward(wrong, p, true), Error);
}

TEST_CASE("inference mode normalizes with running statistics") {
  NormParams p(1);
  p.running_mean = {2.0};
  p.running_var = {4.0};
  Tensor x = Tensor::constant({1, 1, 1, 1}, 6.0);
  Tensor y = norm_forward(x, p, false);
  CHECK(y.values()[0] == doctest::Approx((6.0 - 2.0) / std::sqrt(4.0 + p.eps)));
}

TEST_CASE("batch norm gradients match finite differences in both modes") {
  std::mt19937_64 rng(3);
  Tensor x = rand_images(rng, 3, 2, 2);
  const_cast<Tensor&>(x).set_requires_grad(true);
  NormParams p(2);
  std::uniform_real_distribution<double> d(0.5, 1.5);
  for (auto& g : p.gamma.values()) g = d(rng);
  for (auto& b : p.beta.values()) b = d(rng) - 1.0;
  p.running_mean = {0.3, -0.2};
  p.running_var = {1.7, 0.6};

  auto train_f = [&] { return mean_all(mul(norm_forward(x, p, true), norm_forward(x, p, true))); };
  CHECK(finite_diff_check(train_f, {x, p.gamma, p.beta}, 1e-6) < 1e-6);
  auto eval_f = [&] { return mean_all(mul(norm_forward(x, p, false), norm_forward(x, p, false))); };
  CHECK(finite_diff_check(eval_f, {x, p.gamma, p.beta}, 1e-6) < 1e-6);
}

// ---------------------------------------------------------------------------
// Instance normalization
// ---------------------------------------------------------------------------

TEST_CASE("instance norm normalizes each sample-channel plane independently") {
  std::mt19937_64 rng(4);
  Tensor x = rand_images(rng, 3, 2, 4);
  NormParams p(2);
  Tensor y = instance_norm_forward(x, p);
  // Every plane of the output has (near-)zero mean and unit variance.
  for (std::int64_t i = 0; i < 6; ++i) {
    double mean = 0.0, var = 0.0;
    for (std::int64_t k = 0; k < 16; ++k) mean += y.values()[static_cast<std::size_t>(i * 16 + k)];
    mean /= 16.0;
    for (std::int64_t k = 0; k < 16; ++k) {
      double d = y.values()[static_cast<std::size_t>(i * 16 + k)] - mean;
      var += d * d;
    }
    var /= 16.0;
    CHECK(std::abs(mean) < 1e-12);
    CHECK(var == doctest::Approx(1.0).epsilon(1e-4));
  }
  // No running-statistic coupling: buffers untouched.
  CHECK(p.running_mean[0] == 0.0);
  CHECK(p.running_var[0] == 1.0);

  const_cast<Tensor&>(x).set_requires_grad(true);
  auto f = [&] { return mean_all(mul(instance_norm_forward(x, p), instance_norm_forward(x, p))); };
  CHECK(finite_diff_check(f, {x, p.gamma, p.beta}, 1e-6) < 1e-6);
}

// ---------------------------------------------------------------------------
// Separate (per-modality) normalization
// ---------------------------------------------------------------------------

TEST_CASE("separate norm equals per-modality batch norm re-interleaved") {
  std::mt19937_64 rng(5);
  Tensor x = rand_images(rng, 6, 2, 2);
  std::vector<int> modality = {0, 1, 1, 0, 0, 1};
  NormParams vis(2), ir(2);
  Tensor y = separate_norm_forward(x, modality, vis, ir, true);

  NormParams vis2(2), ir2(2);
  Tensor xv = gather_rows(x, {0, 3, 4});
  Tensor xi = gather_rows(x, {1, 2, 5});
  Tensor yv = norm_forward(xv, vis2, true);
  Tensor yi = norm_forward(xi, ir2, true);
  std::vector<std::pair<std::int64_t, std::int64_t>> vis_map = {{0, 0}, {3, 1}, {4, 2}};
  for (auto [row, sub] : vis_map)
    for (std::int64_t k = 0; k < 8; ++k)
      CHECK(y.values()[static_cast<std::size_t>(row * 8 + k)] ==
            yv.values()[static_cast<std::size_t>(sub * 8 + k)]);
  std::vector<std::pair<std::int64_t, std::int64_t>> ir_map = {{1, 0}, {2, 1}, {5, 2}};
  for (auto [row, sub] : ir_map)
    for (std::int64_t k = 0; k < 8; ++k)
      CHECK(y.values()[static_cast<std::size_t>(row * 8 + k)] ==
            yi.values()[static_cast<std::size_t>(sub * 8 + k)]);
  // Each branch tracked its own sub-batch statistics.
  CHECK(vis.running_mean == vis2.running_mean);
  CHECK(ir.running_mean == ir2.running_mean);
  CHECK(vis.running_mean != ir.running_mean);
}

TEST_CASE("separate norm errors on an absent modality in training, not inference") {
  Tensor x = Tensor::constant({4, 1, 2, 2}, 1.0);
  NormParams vis(1), ir(1);
  std::vector<int> all_vis = {0, 0, 0, 0};
  CHECK_THROWS_AS(separate_norm_forward(x, all_vis, vis, ir, true), Error);
  CHECK_NOTHROW(separate_norm_forward(x, all_vis, vis, ir, false));
  std::vector<int> sub_too_small = {0, 1, 1, 1};
  CHECK_THROWS_AS(separate_norm_forward(x, sub_too_small, vis, ir, true), Error);
  std::vector<int> bad_label = {0, 1, 2, 0};
  CHECK_THROWS_AS(separate_norm_forward(x, bad_label, vis, ir, true), Error);
}

// ---------------------------------------------------------------------------
// Searchable normalization
// ---------------------------------------------------------------------------

namespace {

NormLayer fresh_searchable(std::int64_t channels) {
  NormLayer layer;
  layer.kind = NormKind::Searchable;
  layer.name = "t.bn";
  layer.channels = channels;
  layer.shared.emplace(channels);
  layer.vis.emplace(channels);
  layer.ir.emplace(channels);
  layer.alpha = Tensor::zeros({2}, true);
  return layer;
}

}  // namespace

TEST_CASE("one-hot probs reproduce the pure branch bit-for-bit") {
  std::mt19937_64 rng(6);
  Tensor x = rand_images(rng, 4, 3, 2);
  std::vector<int> modality = {0, 0, 1, 1};

  NormLayer layer = fresh_searchable(3);
  Tensor sep_probs = Tensor::from_values({2}, {1.0, 0.0});
  Tensor out_sep = searchable_norm_forward(x, modality, layer, sep_probs, true);

  NormParams vis(3), ir(3);
  Tensor pure_sep = separate_norm_forward(x, modality, vis, ir, true);
  REQUIRE(out_sep.numel() == pure_sep.numel());
  CHECK(std::memcmp(out_sep.values().data(), pure_sep.values().data(),
                    out_sep.values().size() * sizeof(double)) == 0);

  NormLayer layer2 = fresh_searchable(3);
  Tensor share_probs = Tensor::from_values({2}, {0.0, 1.0});
  Tensor out_sha = searchable_norm_forward(x, modality, layer2, share_probs, true);
  NormParams shared(3);
  Tensor pure_sha = norm_forward(x, shared, true);
  CHECK(std::memcmp(out_sha.values().data(), pure_sha.values().data(),
                    out_sha.values().size() * sizeof(double)) == 0);
}

TEST_CASE("probs must sum to one") {
  Tensor x = Tensor::constant({4, 1, 2, 2}, 1.0);
  NormLayer layer = fresh_searchable(1);
  std::vector<int> modality = {0, 0, 1, 1};
  Tensor bad = Tensor::from_values({2}, {0.7, 0.6});
  CHECK_THROWS_AS(searchable_norm_forward(x, modality, layer, bad, true), Error);
}

TEST_CASE("symmetric batches make the output independent of probs") {
  std::mt19937_64 rng(7);
  // ir rows duplicate vis rows, so joint and per-modality statistics agree.
  Tensor half = rand_images(rng, 2, 2, 2);
  Tensor x = concat_rows(half, half);
  std::vector<int> modality = {0, 0, 1, 1};
  NormLayer layer = fresh_searchable(2);

  Tensor pa = Tensor::from_values({2}, {0.3, 0.7});
  Tensor pb = Tensor::from_values({2}, {0.9, 0.1});
  Tensor ya = searchable_norm_forward(x, modality, layer, pa, true);
  Tensor yb = searchable_norm_forward(x, modality, layer, pb, true);
  for (std::size_t i = 0; i < ya.values().size(); ++i)
    CHECK(ya.values()[i] == doctest::Approx(yb.values()[i]).epsilon(1e-9));
}

TEST_CASE("both branches update running statistics every training step") {
  std::mt19937_64 rng(8);
  Tensor x = rand_images(rng, 4, 2, 2);
  std::vector<int> modality = {0, 1, 0, 1};
  NormLayer layer = fresh_searchable(2);
  Tensor probs = Tensor::from_values({2}, {0.5, 0.5});
  searchable_norm_forward(x, modality, layer, probs, true);
  CHECK(layer.shared->running_mean[0] != 0.0);
  CHECK(layer.vis->running_mean[0] != 0.0);
  CHECK(layer.ir->running_mean[0] != 0.0);
}

TEST_CASE("alpha receives exactly zero gradient when branches coincide") {
  // Per-channel constant input over power-of-two batch and plane sizes:
  // all statistics are exact and both branches emit beta bitwise.
  std::vector<double> v;
  for (int i = 0; i < 4; ++i)
    for (int c = 0; c < 2; ++c)
      for (int k = 0; k < 4; ++k) v.push_back(static_cast<double>(c + 1));
  Tensor x = Tensor::from_values({4, 2, 2, 2}, v);
  std::vector<int> modality = {0, 0, 1, 1};
  NormLayer layer = fresh_searchable(2);

  Tape tape;
  Tensor y = norm_layer_forward(layer, x, modality, true);
  tape.backward(sum_all(y));
  CHECK(layer.alpha.grad()[0] == 0.0);
  CHECK(layer.alpha.grad()[1] == 0.0);
  // The affine parameters do get gradient.
  CHECK(layer.shared->beta.grad()[0] != 0.0);
}

TEST_CASE("searchable forward is permutation-equivariant") {
  std::mt19937_64 rng(9);
  Tensor x = rand_images(rng, 6, 2, 2);
  std::vector<int> modality = {0, 1, 0, 1, 1, 0};
  NormLayer layer = fresh_searchable(2);
  std::uniform_real_distribution<double> d(0.5, 1.5);
  for (auto& g : layer.shared->gamma.values()) g = d(rng);
  for (auto& g : layer.vis->gamma.values()) g = d(rng);
  for (auto& g : layer.ir->gamma.values()) g = d(rng);
  Tensor probs = Tensor::from_values({2}, {0.4, 0.6});

  Tensor y = searchable_norm_forward(x, modality, layer, probs, true);

  std::vector<std::int64_t> perm = {3, 0, 5, 1, 4, 2};
  Tensor xp = gather_rows(x, perm);
  std::vector<int> mp(6);
  for (std::size_t i = 0; i < 6; ++i) mp[i] = modality[static_cast<std::size_t>(perm[i])];
  Tensor yp = searchable_norm_forward(xp, mp, layer, probs, true);

  for (std::size_t r = 0; r < 6; ++r)
    for (std::int64_t k = 0; k < 8; ++k) {
      double want = y.values()[static_cast<std::size_t>(perm[r] * 8 + k)];
      double got = yp.values()[static_cast<std::size_t>(r) * 8 + static_cast<std::size_t>(k)];
      CHECK(got == doctest::Approx(want).epsilon(1e-12));
    }
}

// ---------------------------------------------------------------------------
// Backbone construction
// ---------------------------------------------------------------------------

TEST_CASE("default config yields 7 blocks and 19 norm sites") {
  BackboneConfig cfg;
  CHECK(block_count(cfg) == 7);
  CHECK(norm_site_count(cfg) == 19);
  auto names = block_names(cfg);
  REQUIRE(names.size() == 7);
  CHECK(names[0] == "s1_1");
  CHECK(names[1] == "s2_1");
  CHECK(names[2] == "s2_2");
  CHECK(names[6] == "s4_2");
  auto counts = block_norm_counts(cfg);
  CHECK(counts == std::vector<int>{1, 3, 3, 3, 3, 3, 3});
}

TEST_CASE("all-shared mode allocates zero modality-specific parameters") {
  Rng rng(1);
  BackboneConfig cfg = tiny_config(NormMode::AllShared);
  Network net = build_backbone(cfg, rng);
  for (const auto& nt : weight_params(net)) {
    CHECK(nt.name.find(".vis.") == std::string::npos);
    CHECK(nt.name.find(".ir.") == std::string::npos);
  }
  CHECK(arch_params(net).empty());
}

TEST_CASE("searchable mode allocates three branches and one alpha per site") {
  Rng rng(1);
  BackboneConfig cfg = tiny_config(NormMode::Searchable);
  Network net = build_backbone(cfg, rng);
  CHECK(static_cast<std::int64_t>(net.norms.size()) == norm_site_count(cfg));
  for (const auto& layer : net.norms) {
    CHECK(layer.shared.has_value());
    CHECK(layer.vis.has_value());
    CHECK(layer.ir.has_value());
    CHECK(layer.alpha.defined());
    CHECK(layer.alpha.numel() == 2);
    CHECK(layer.alpha.values() == std::vector<double>{0.0, 0.0});
  }
  CHECK(arch_params(net).size() == net.norms.size());
}

TEST_CASE("block-norm scheme separates only the masked blocks, convs stay shared") {
  Rng rng(1);
  BackboneConfig cfg;  // default 7 blocks
  cfg.num_classes = 4;
  cfg.norm_mode = NormMode::Scheme;
  SeparationScheme sch;
  sch.unit = SeparationScheme::Unit::BlockNorms;
  sch.mask = {0, 1, 1, 0, 0, 0, 0};  // stage 2 only
  cfg.scheme = sch;
  Network net = build_backbone(cfg, rng);
  for (const auto& layer : net.norms) {
    bool stage2 = layer.name.rfind("s2_", 0) == 0;
    CHECK(layer.vis.has_value() == stage2);
    CHECK(layer.shared.has_value() == !stage2);
  }
  for (const auto& nt : weight_params(net))
    if (nt.name.find("conv") != std::string::npos || nt.name.find("proj") != std::string::npos) {
      CHECK(nt.name.find(".vis.") == std::string::npos);
      CHECK(nt.name.find(".ir.") == std::string::npos);
    }
}

TEST_CASE("full-block scheme duplicates the masked block's convolutions") {
  Rng rng(1);
  BackboneConfig cfg = tiny_config(NormMode::Scheme);
  SeparationScheme sch;
  sch.unit = SeparationScheme::Unit::FullBlock;
  sch.mask = {0, 1};
  cfg.scheme = sch;
  Network net = build_backbone(cfg, rng);
  CHECK(!net.stem.duplicated());
  REQUIRE(net.blocks.size() == 1);
  CHECK(net.blocks[0].c1.duplicated());
  CHECK(net.blocks[0].c2.duplicated());
  CHECK(net.blocks[0].c3.duplicated());
  // Duplicated branches start as copies.
  CHECK(net.blocks[0].c1.vis.values() == net.blocks[0].c1.ir.values());
}

TEST_CASE("scheme mask length must match its unit") {
  Rng rng(1);
  BackboneConfig cfg = tiny_config(NormMode::Scheme);
  SeparationScheme sch;
  sch.unit = SeparationScheme::Unit::NormLayers;
  sch.mask = {1, 0, 0};  // needs 4 (1 + 3)
  cfg.scheme = sch;
  CHECK_THROWS_AS(build_backbone(cfg, rng), Error);
  sch.unit = SeparationScheme::Unit::BlockNorms;
  sch.mask = {1};  // needs 2
  cfg.scheme = sch;
  CHECK_THROWS_AS(build_backbone(cfg, rng), Error);
  cfg.scheme.reset();
  CHECK_THROWS_AS(build_backbone(cfg, rng), Error);  // Scheme mode without scheme
}

TEST_CASE("equal seeds give equal shared weights across norm modes") {
  BackboneConfig a = tiny_config(NormMode::AllShared);
  BackboneConfig b = tiny_config(NormMode::Searchable);
  Rng r1(77), r2(77);
  Network na = build_backbone(a, r1);
  Network nb = build_backbone(b, r2);
  CHECK(na.stem.shared.values() == nb.stem.shared.values());
  CHECK(na.embed_w.values() == nb.embed_w.values());
  CHECK(na.cls_w.values() == nb.cls_w.values());
  CHECK(na.blocks[0].c2.shared.values() == nb.blocks[0].c2.shared.values());
}

TEST_CASE("parameter counting: separation adds exactly one NormParams set per site") {
  auto count_for = [&](NormMode mode, std::vector<std::uint8_t> site_mask = {}) {
    Rng rng(5);
    BackboneConfig cfg = tiny_config(mode);
    if (mode == NormMode::Scheme) {
      SeparationScheme sch;
      sch.unit = SeparationScheme::Unit::NormLayers;
      sch.mask = std::move(site_mask);
      cfg.scheme = sch;
    }
    Network net = build_backbone(cfg, rng);
    return param_count(net);
  };
  std::int64_t shared_total = count_for(NormMode::AllShared);
  // Sites of the tiny net: stem bn (4ch), then block bn1 (4), bn2 (4), bn3 (8).
  CHECK(count_for(NormMode::Scheme, {0, 0, 0, 0}) == shared_total);
  CHECK(count_for(NormMode::Scheme, {1, 0, 0, 0}) == shared_total + 2 * 4);
  CHECK(count_for(NormMode::Scheme, {0, 0, 0, 1}) == shared_total + 2 * 8);
  CHECK(count_for(NormMode::Scheme, {1, 1, 1, 1}) == shared_total + 2 * (4 + 4 + 4 + 8));
  // The searchable supernet carries both extra sets per site.
  Rng rng(5);
  Network searchable = build_backbone(tiny_config(NormMode::Searchable), rng);
  CHECK(param_count(searchable) == shared_total + 2 * 2 * (4 + 4 + 4 + 8));
  // Instance-norm mode matches the shared count (affine parameters only).
  CHECK(count_for(NormMode::InstanceNorm) == shared_total);
}

// ---------------------------------------------------------------------------
// Whole-network forward
// ---------------------------------------------------------------------------

TEST_CASE("forward produces configured shapes in every mode") {
  std::mt19937_64 drng(10);
  Tensor images = rand_images(drng, 4, 3, 8);
  std::vector<int> modality = {0, 0, 1, 1};
  for (NormMode mode :
       {NormMode::Searchable, NormMode::AllShared, NormMode::InstanceNorm}) {
    Rng rng(2);
    BackboneConfig cfg = tiny_config(mode);
    Network net = build_backbone(cfg, rng);
    ForwardResult r = net_forward(net, images, modality, true);
    CHECK(r.embeddings.shape() == Shape{4, 4});
    CHECK(r.logits.shape() == Shape{4, 2});
    ForwardResult e = net_forward(net, images, modality, false);
    CHECK(e.embeddings.shape() == Shape{4, 4});
  }
}

TEST_CASE("forward validates input shape and mask length") {
  Rng rng(2);
  Network net = build_backbone(tiny_config(NormMode::AllShared), rng);
  std::mt19937_64 drng(11);
  Tensor wrong_res = rand_images(drng, 2, 3, 16);
  CHECK_THROWS_AS(net_forward(net, wrong_res, {0, 1}, false), Error);
  Tensor ok = rand_images(drng, 2, 3, 8);
  CHECK_THROWS_AS(net_forward(net, ok, {0}, false), Error);
}

TEST_CASE("discretized networks run no mixing arithmetic and all-share matches baseline") {
  std::mt19937_64 drng(12);
  Tensor images = rand_images(drng, 4, 3, 8);
  std::vector<int> modality = {0, 1, 0, 1};

  auto scheme_net = [&](std::vector<std::uint8_t> mask) {
    Rng rng(3);
    BackboneConfig cfg = tiny_config(NormMode::Scheme);
    SeparationScheme sch;
    sch.unit = SeparationScheme::Unit::NormLayers;
    sch.mask = std::move(mask);
    cfg.scheme = sch;
    return build_backbone(cfg, rng);
  };

  Rng rng(3);
  Network all_shared = build_backbone(tiny_config(NormMode::AllShared), rng);
  OpStats base_stats;
  net_forward(all_shared, images, modality, false);

  // All-'1' bitstring == no separation: identical op sequence and MAC count.
  Network ones = scheme_net({0, 0, 0, 0});
  {
    OpStats stats;
    net_forward(ones, images, modality, false);
    CHECK(stats.total_macs() == base_stats.total_macs());
    REQUIRE(stats.sequence().size() == base_stats.sequence().size());
    for (std::size_t i = 0; i < stats.sequence().size(); ++i)
      CHECK(stats.sequence()[i].op == base_stats.sequence()[i].op);
    CHECK(stats.count("mix2") == 0);
    CHECK(stats.count("softmax") == 0);
  }

  // Any discretized network is free of mixing arithmetic.
  Network mixed = scheme_net({1, 0, 1, 1});
  {
    OpStats stats;
    net_forward(mixed, images, modality, false);
    CHECK(stats.count("mix2") == 0);
    CHECK(stats.count("softmax") == 0);
  }

  // The searchable supernet, by contrast, mixes at every site.
  Rng rng2(3);
  Network super = build_backbone(tiny_config(NormMode::Searchable), rng2);
  {
    OpStats stats;
    net_forward(super, images, modality, true);
    CHECK(stats.count("mix2") == norm_site_count(super.cfg));
    CHECK(stats.count("softmax") == norm_site_count(super.cfg));
  }
}

TEST_CASE("full-block scheme forward differs per modality and trains") {
  Rng rng(4);
  BackboneConfig cfg = tiny_config(NormMode::Scheme);
  SeparationScheme sch;
  sch.unit = SeparationScheme::Unit::FullBlock;
  sch.mask = {1, 1};
  cfg.scheme = sch;
  Network net = build_backbone(cfg, rng);
  // Diverge the modality branches, then check a mixed batch routes by mask.
  for (auto& v : net.stem.ir.values()) v += 0.25;
  std::mt19937_64 drng(13);
  Tensor half = rand_images(drng, 2, 3, 8);
  Tensor images = concat_rows(half, half);
  ForwardResult r = net_forward(net, images, {0, 0, 1, 1}, false);
  // Same pixels, different modality: embeddings must differ.
  bool differs = false;
  for (std::int64_t k = 0; k < 4; ++k)
    if (r.embeddings.values()[static_cast<std::size_t>(k)] !=
        r.embeddings.values()[static_cast<std::size_t>(8 + k)])
      differs = true;
  CHECK(differs);
  CHECK_THROWS_AS(net_forward(net, images, {0, 0, 0, 0}, true), Error);
  CHECK_NOTHROW(net_forward(net, images, {0, 0, 0, 0}, false));
}

TEST_CASE("network gradients match finite differences through every mode") {
  std::mt19937_64 drng(14);
  Tensor images = rand_images(drng, 4, 3, 8, 0.5);
  std::vector<int> modality = {0, 1, 0, 1};
  std::vector<int> labels = {0, 1, 1, 0};

  for (NormMode mode : {NormMode::Searchable, NormMode::AllShared, NormMode::InstanceNorm}) {
    Rng rng(6);
    BackboneConfig cfg = tiny_config(mode);
    Network net = build_backbone(cfg, rng);
    auto f = [&] {
      ForwardResult r = net_forward(net, images, modality, true);
      return add(cross_entropy(r.logits, labels), mean_all(mul(r.embeddings, r.embeddings)));
    };
    std::vector<Tensor> probe;
    probe.push_back(net.stem.shared);
    probe.push_back(net.blocks[0].c2.shared);
    probe.push_back(net.embed_w);
    probe.push_back(net.cls_w);
    auto& bn2 = net.norms[2];
    if (bn2.shared) {
      probe.push_back(bn2.shared->gamma);
      probe.push_back(bn2.shared->beta);
    }
    if (bn2.vis) probe.push_back(bn2.vis->gamma);
    if (bn2.alpha.defined()) probe.push_back(bn2.alpha);
    CHECK(finite_diff_check(f, probe, 1e-5) < 1e-4);
  }
}
