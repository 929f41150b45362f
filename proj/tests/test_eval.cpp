#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "eval.hpp"

using namespace cmnas;

namespace {

// Independent reference: stable-sort (dist, index) pairs, then a direct
// definition scan. Exercises a different sort mechanism than the library.
CmcMap brute_cmc_map(const std::vector<double>& dist, std::int64_t q, std::int64_t g,
                     const std::vector<int>& ql, const std::vector<int>& gl) {
  CmcMap out;
  out.cmc.assign(static_cast<std::size_t>(g), 0.0);
  double ap_sum = 0.0;
  for (std::int64_t i = 0; i < q; ++i) {
    std::vector<std::pair<double, std::int64_t>> row;
    for (std::int64_t j = 0; j < g; ++j)
      row.emplace_back(dist[static_cast<std::size_t>(i * g + j)], j);
    std::stable_sort(row.begin(), row.end(),
                     [](const auto& a, const auto& b) { return a.first < b.first; });
    std::int64_t hits = 0, first = -1;
    double ap = 0.0;
    for (std::int64_t pos = 0; pos < g; ++pos)
      if (gl[static_cast<std::size_t>(row[static_cast<std::size_t>(pos)].second)] ==
          ql[static_cast<std::size_t>(i)]) {
        ++hits;
        if (first < 0) first = pos;
        ap += static_cast<double>(hits) / static_cast<double>(pos + 1);
      }
    ap_sum += ap / static_cast<double>(hits);
    out.cmc[static_cast<std::size_t>(first)] += 1.0;
  }
  double run = 0.0;
  for (auto& c : out.cmc) {
    run += c;
    c = run / static_cast<double>(q);
  }
  out.map = ap_sum / static_cast<double>(q);
  return out;
}

Dataset small_data(int ids = 6, int imgs = 4) {
  SynthConfig cfg;
  cfg.identities = ids;
  cfg.images_per_modality = imgs;
  cfg.resolution = 16;
  cfg.seed = 5;
  return generate_dataset(cfg);
}

Network small_net(const Dataset& d, std::uint64_t seed) {
  BackboneConfig cfg;
  cfg.widths = {4, 8};
  cfg.blocks = {1, 1};
  cfg.embedding_dim = 4;
  cfg.input_resolution = d.cfg.resolution;
  cfg.num_classes = d.num_identities();
  cfg.norm_mode = NormMode::AllShared;
  Rng rng(seed);
  return build_backbone(cfg, rng);
}

}  // namespace

// ---------------------------------------------------------------------------
// CMC / mAP
// ---------------------------------------------------------------------------

TEST_CASE("one query with its match ranked second gives Rank-1 0, Rank-2 1, AP 1/2") {
  std::vector<double> dist = {0.1, 0.2, 0.3};
  CmcMap r = compute_cmc_map(dist, 1, 3, {0}, {1, 0, 1});
  CHECK(r.cmc[0] == 0.0);
  CHECK(r.cmc[1] == 1.0);
  CHECK(r.cmc[2] == 1.0);
  CHECK(r.map == 0.5);
}

TEST_CASE("perfect retrieval gives Rank-1 1 and mAP 1") {
  // Every query is nearest to its own identity's single gallery item.
  std::vector<double> dist = {0.0, 0.9, 0.9, 0.9, 0.0, 0.9, 0.9, 0.9, 0.0};
  CmcMap r = compute_cmc_map(dist, 3, 3, {0, 1, 2}, {0, 1, 2});
  CHECK(r.cmc[0] == 1.0);
  CHECK(r.map == 1.0);
}

TEST_CASE("correct items at positions 1 and 3 give AP 5/6") {
  std::vector<double> dist = {0.1, 0.2, 0.3};
  CmcMap r = compute_cmc_map(dist, 1, 3, {0}, {0, 1, 0});
  CHECK(r.cmc[0] == 1.0);
  CHECK(r.map == doctest::Approx(5.0 / 6.0).epsilon(1e-15));
}

TEST_CASE("all-equal distances fall back to gallery order, closed form holds") {
  // Two identities, one gallery shot each, four balanced queries: identity 0
  // always wins the tie, so Rank-1 = 1/2 and mAP = (1 + 1 + 1/2 + 1/2)/4.
  std::vector<double> dist(4 * 2, 0.5);
  CmcMap r = compute_cmc_map(dist, 4, 2, {0, 0, 1, 1}, {0, 1});
  CHECK(r.cmc[0] == 0.5);
  CHECK(r.cmc[1] == 1.0);
  CHECK(r.map == 0.75);
}

TEST_CASE("library CMC and mAP match the brute-force oracle exactly on 1000 instances") {
  std::mt19937_64 rng(101);
  for (int it = 0; it < 1000; ++it) {
    std::int64_t labels = 1 + static_cast<std::int64_t>(rng() % 4);
    std::int64_t g = labels + static_cast<std::int64_t>(rng() % (13 - labels));
    std::int64_t q = 1 + static_cast<std::int64_t>(rng() % 12);
    std::vector<int> gl, ql;
    for (std::int64_t j = 0; j < g; ++j)
      gl.push_back(j < labels ? static_cast<int>(j) : static_cast<int>(rng() % labels));
    std::shuffle(gl.begin(), gl.end(), rng);
    for (std::int64_t i = 0; i < q; ++i) ql.push_back(static_cast<int>(rng() % labels));
    std::vector<double> dist(static_cast<std::size_t>(q * g));
    bool quantize = rng() % 2 == 0;  // quantized draws force exact ties
    for (auto& d : dist) {
      double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
      d = quantize ? std::floor(u * 10.0) / 10.0 : u;
    }
    CmcMap a = compute_cmc_map(dist, q, g, ql, gl);
    CmcMap b = brute_cmc_map(dist, q, g, ql, gl);
    REQUIRE(a.cmc.size() == b.cmc.size());
    for (std::size_t k = 0; k < a.cmc.size(); ++k) CHECK(a.cmc[k] == b.cmc[k]);
    CHECK(a.map == b.map);
    for (std::size_t k = 1; k < a.cmc.size(); ++k) CHECK(a.cmc[k] >= a.cmc[k - 1]);
    CHECK(a.map >= 0.0);
    CHECK(a.map <= 1.0);
  }
}

TEST_CASE("metrics are invariant to monotone transforms of the distances") {
  std::mt19937_64 rng(202);
  for (int it = 0; it < 50; ++it) {
    std::int64_t q = 1 + static_cast<std::int64_t>(rng() % 8);
    std::int64_t g = 2 + static_cast<std::int64_t>(rng() % 8);
    std::vector<int> gl, ql;
    for (std::int64_t j = 0; j < g; ++j) gl.push_back(static_cast<int>(j % 2));
    for (std::int64_t i = 0; i < q; ++i) ql.push_back(static_cast<int>(rng() % 2));
    std::vector<double> dist(static_cast<std::size_t>(q * g));
    for (auto& d : dist) d = static_cast<double>(rng() % 7) * 0.125;
    std::vector<double> warped = dist;
    for (auto& d : warped) d = std::exp(d) * 3.0 + 1.0;
    CmcMap a = compute_cmc_map(dist, q, g, ql, gl);
    CmcMap b = compute_cmc_map(warped, q, g, ql, gl);
    for (std::size_t k = 0; k < a.cmc.size(); ++k) CHECK(a.cmc[k] == b.cmc[k]);
    CHECK(a.map == b.map);
  }
}

TEST_CASE("cmc rejects malformed inputs") {
  std::vector<double> dist = {0.1, 0.2};
  CHECK_THROWS_AS(compute_cmc_map(dist, 1, 2, {0}, {1, 1}), Error);  // label 0 missing
  CHECK_THROWS_AS(compute_cmc_map(dist, 1, 3, {0}, {0, 1, 1}), Error);  // size mismatch
  std::vector<double> bad = {0.1, std::nan("")};
  CHECK_THROWS_AS(compute_cmc_map(bad, 1, 2, {0}, {0, 1}), Error);
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

TEST_CASE("evaluate is deterministic and well-formed on an untrained model") {
  Dataset d = small_data();
  Network net = small_net(d, 3);
  Protocol p;
  p.repeats = 3;
  RetrievalReport a = evaluate(net, d, p);
  RetrievalReport b = evaluate(net, d, p);
  REQUIRE(a.repeats.size() == 3);
  for (std::size_t i = 0; i < a.repeats.size(); ++i) {
    CHECK(a.repeats[i].rank1 == b.repeats[i].rank1);
    CHECK(a.repeats[i].map == b.repeats[i].map);
  }
  for (const auto& r : a.repeats) {
    CHECK(r.rank1 >= 0.0);
    CHECK(r.rank1 <= r.rank10);
    CHECK(r.rank10 <= r.rank20);
    CHECK(r.rank20 <= 1.0);
    CHECK(r.map >= 0.0);
    CHECK(r.map <= 1.0);
  }
  CHECK(a.mean.rank1 == b.mean.rank1);
  CHECK(a.stddev.map >= 0.0);
}

TEST_CASE("both query directions and multi-shot galleries work") {
  Dataset d = small_data();
  Network net = small_net(d, 4);
  Protocol ir_to_vis;
  ir_to_vis.repeats = 2;
  Protocol vis_to_ir;
  vis_to_ir.query_modality = 0;
  vis_to_ir.gallery_modality = 1;
  vis_to_ir.repeats = 2;
  CHECK_NOTHROW(evaluate(net, d, ir_to_vis));
  CHECK_NOTHROW(evaluate(net, d, vis_to_ir));
  Protocol multi = ir_to_vis;
  multi.shots = 4;  // uses every gallery image of every identity
  RetrievalReport r = evaluate(net, d, multi);
  CHECK(r.repeats.size() == 2);
  // With all 4 images per identity in a 24-item gallery, repeats only differ
  // in gallery order, which cosine ranking ignores up to ties.
  CHECK(r.repeats[0].map == doctest::Approx(r.repeats[1].map).epsilon(1e-12));
}

TEST_CASE("protocol validation and gallery coverage errors are caught") {
  Dataset d = small_data();
  Network net = small_net(d, 5);
  Protocol p;
  p.gallery_modality = 1;  // same as query
  CHECK_THROWS_AS(evaluate(net, d, p), Error);
  p = Protocol{};
  p.shots = 0;
  CHECK_THROWS_AS(evaluate(net, d, p), Error);
  p = Protocol{};
  p.repeats = 0;
  CHECK_THROWS_AS(evaluate(net, d, p), Error);

  // Drop every gallery-modality image of one identity.
  int victim = d.ids()[0];
  std::vector<std::int64_t> keep;
  for (std::int64_t i = 0; i < d.size(); ++i)
    if (!(d.identity[static_cast<std::size_t>(i)] == victim &&
          d.modality[static_cast<std::size_t>(i)] == 0))
      keep.push_back(i);
  Dataset gap = subset(d, keep);
  p = Protocol{};
  CHECK_THROWS_AS(evaluate(net, gap, p), Error);
}

TEST_CASE("report csv lists every repeat plus summary rows") {
  Dataset d = small_data(4, 2);
  Network net = small_net(d, 6);
  Protocol p;
  p.repeats = 2;
  RetrievalReport r = evaluate(net, d, p);
  std::string csv = report_csv(r, "ir_to_vis_shot1");
  CHECK(csv.find("protocol,repeat,rank1,rank10,rank20,mAP\n") == 0);
  CHECK(csv.find("ir_to_vis_shot1,0,") != std::string::npos);
  CHECK(csv.find("ir_to_vis_shot1,1,") != std::string::npos);
  CHECK(csv.find("ir_to_vis_shot1,mean,") != std::string::npos);
  CHECK(csv.find("ir_to_vis_shot1,stddev,") != std::string::npos);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 5);
}
