#include "eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <numeric>
#include <sstream>

namespace cmnas {

void validate_protocol(const Protocol& p) {
  if (p.query_modality == p.gallery_modality)
    throw Error("protocol: query and gallery modalities must differ");
  if (p.query_modality < 0 || p.query_modality > 1 || p.gallery_modality < 0 ||
      p.gallery_modality > 1)
    throw Error("protocol: modalities are 0 or 1");
  if (p.shots < 1) throw Error("protocol: shots must be >= 1");
  if (p.repeats < 1) throw Error("protocol: repeats must be >= 1");
}

CmcMap compute_cmc_map(const std::vector<double>& dist, std::int64_t q, std::int64_t g,
                       const std::vector<int>& query_labels,
                       const std::vector<int>& gallery_labels) {
  if (q < 1 || g < 1) throw Error("cmc: empty query or gallery");
  if (dist.size() != static_cast<std::size_t>(q * g))
    throw Error("cmc: distance matrix size does not match q x g");
  if (query_labels.size() != static_cast<std::size_t>(q) ||
      gallery_labels.size() != static_cast<std::size_t>(g))
    throw Error("cmc: label counts do not match the distance matrix");
  for (double d : dist)
    if (!std::isfinite(d)) throw Error("cmc: non-finite distance");

  CmcMap out;
  out.cmc.assign(static_cast<std::size_t>(g), 0.0);
  std::vector<std::int64_t> order(static_cast<std::size_t>(g));
  double ap_sum = 0.0;
  for (std::int64_t i = 0; i < q; ++i) {
    const double* row = dist.data() + i * g;
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [row](std::int64_t a, std::int64_t b) {
      return row[a] != row[b] ? row[a] < row[b] : a < b;
    });
    int label = query_labels[static_cast<std::size_t>(i)];
    std::int64_t hits = 0, first = -1;
    double ap = 0.0;
    for (std::int64_t pos = 0; pos < g; ++pos)
      if (gallery_labels[static_cast<std::size_t>(order[static_cast<std::size_t>(pos)])] ==
          label) {
        ++hits;
        if (first < 0) first = pos;
        ap += static_cast<double>(hits) / static_cast<double>(pos + 1);
      }
    if (hits == 0)
      throw Error("cmc: query identity " + std::to_string(label) + " absent from the gallery");
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

namespace {

// Inference-mode embeddings for every image, L2-normalized rows.
std::vector<double> embed_all(Network& net, const Dataset& d) {
  std::int64_t n = d.size();
  std::int64_t r = d.cfg.resolution;
  std::int64_t isz = 3 * r * r;
  std::int64_t dim = net.cfg.embedding_dim;
  std::vector<double> out(static_cast<std::size_t>(n * dim));
  const double* src = d.images.values().data();
  constexpr std::int64_t chunk = 64;
  for (std::int64_t at = 0; at < n; at += chunk) {
    std::int64_t m = std::min(chunk, n - at);
    std::vector<double> v(static_cast<std::size_t>(m * isz));
    std::memcpy(v.data(), src + at * isz, static_cast<std::size_t>(m * isz) * sizeof(double));
    std::vector<int> modality(d.modality.begin() + at, d.modality.begin() + at + m);
    Tensor images = Tensor::from_values({m, 3, r, r}, std::move(v), false);
    ForwardResult fr = net_forward(net, images, modality, false);
    std::memcpy(out.data() + at * dim, fr.embeddings.values().data(),
                static_cast<std::size_t>(m * dim) * sizeof(double));
  }
  for (std::int64_t i = 0; i < n; ++i) {
    double* e = out.data() + i * dim;
    double ss = 0.0;
    for (std::int64_t j = 0; j < dim; ++j) ss += e[j] * e[j];
    if (ss == 0.0) throw Error("evaluate: image " + std::to_string(i) + " embeds to zero");
    double inv = 1.0 / std::sqrt(ss);
    for (std::int64_t j = 0; j < dim; ++j) e[j] *= inv;
  }
  return out;
}

RetrievalRepeat summarize(const CmcMap& cm, std::int64_t g) {
  auto at = [&](std::int64_t k) {
    return cm.cmc[static_cast<std::size_t>(std::min<std::int64_t>(k, g) - 1)];
  };
  return {at(1), at(10), at(20), cm.map};
}

}  // namespace

RetrievalReport evaluate(Network& net, const Dataset& test, const Protocol& p) {
  validate_protocol(p);
  std::vector<double> emb = embed_all(net, test);
  std::int64_t dim = net.cfg.embedding_dim;

  std::vector<std::int64_t> queries;
  // gallery_pool[class] = image indices of the gallery modality.
  std::vector<std::vector<std::int64_t>> gallery_pool(
      static_cast<std::size_t>(test.num_identities()));
  for (std::int64_t i = 0; i < test.size(); ++i) {
    int m = test.modality[static_cast<std::size_t>(i)];
    int cls = test.class_of(test.identity[static_cast<std::size_t>(i)]);
    if (m == p.query_modality) queries.push_back(i);
    if (m == p.gallery_modality) gallery_pool[static_cast<std::size_t>(cls)].push_back(i);
  }
  if (queries.empty()) throw Error("evaluate: no query-modality images in the test set");
  for (std::size_t c = 0; c < gallery_pool.size(); ++c)
    if (gallery_pool[c].empty())
      throw Error("evaluate: identity " + std::to_string(test.ids()[c]) +
                  " has no gallery-modality images");

  std::vector<int> qlabels;
  for (std::int64_t i : queries)
    qlabels.push_back(test.class_of(test.identity[static_cast<std::size_t>(i)]));

  RetrievalReport report;
  for (int rep = 0; rep < p.repeats; ++rep) {
    Rng rng(sub_seed(p.seed, "repeat:" + std::to_string(rep)));
    std::vector<std::int64_t> gallery;
    std::vector<int> glabels;
    for (std::size_t c = 0; c < gallery_pool.size(); ++c) {
      std::vector<std::int64_t> pool = gallery_pool[c];
      rng.shuffle(pool);
      std::int64_t take = std::min<std::int64_t>(p.shots, static_cast<std::int64_t>(pool.size()));
      for (std::int64_t k = 0; k < take; ++k) {
        gallery.push_back(pool[static_cast<std::size_t>(k)]);
        glabels.push_back(static_cast<int>(c));
      }
    }
    std::int64_t q = static_cast<std::int64_t>(queries.size());
    std::int64_t g = static_cast<std::int64_t>(gallery.size());
    std::vector<double> dist(static_cast<std::size_t>(q * g));
    for (std::int64_t i = 0; i < q; ++i) {
      const double* qe = emb.data() + queries[static_cast<std::size_t>(i)] * dim;
      for (std::int64_t j = 0; j < g; ++j) {
        const double* ge = emb.data() + gallery[static_cast<std::size_t>(j)] * dim;
        double dot = 0.0;
        for (std::int64_t k = 0; k < dim; ++k) dot += qe[k] * ge[k];
        dist[static_cast<std::size_t>(i * g + j)] = -dot;
      }
    }
    report.repeats.push_back(summarize(compute_cmc_map(dist, q, g, qlabels, glabels), g));
  }

  auto fold = [&](auto pick) {
    double mean = 0.0;
    for (const auto& r : report.repeats) mean += pick(r);
    mean /= static_cast<double>(report.repeats.size());
    double var = 0.0;
    for (const auto& r : report.repeats) var += (pick(r) - mean) * (pick(r) - mean);
    var /= static_cast<double>(report.repeats.size());
    return std::pair<double, double>(mean, std::sqrt(var));
  };
  auto [m1, s1] = fold([](const RetrievalRepeat& r) { return r.rank1; });
  auto [m10, s10] = fold([](const RetrievalRepeat& r) { return r.rank10; });
  auto [m20, s20] = fold([](const RetrievalRepeat& r) { return r.rank20; });
  auto [mm, sm] = fold([](const RetrievalRepeat& r) { return r.map; });
  report.mean = {m1, m10, m20, mm};
  report.stddev = {s1, s10, s20, sm};
  return report;
}

std::string report_csv(const RetrievalReport& r, const std::string& protocol_name) {
  std::ostringstream os;
  os << "protocol,repeat,rank1,rank10,rank20,mAP\n";
  char buf[160];
  auto row = [&](const std::string& tag, const RetrievalRepeat& x) {
    std::snprintf(buf, sizeof(buf), "%s,%s,%.6f,%.6f,%.6f,%.6f\n", protocol_name.c_str(),
                  tag.c_str(), x.rank1, x.rank10, x.rank20, x.map);
    os << buf;
  };
  for (std::size_t i = 0; i < r.repeats.size(); ++i) row(std::to_string(i), r.repeats[i]);
  row("mean", r.mean);
  row("stddev", r.stddev);
  return os.str();
}

}  // namespace cmnas
