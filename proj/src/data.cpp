#include "data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

namespace cmnas {

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

void validate_synth_config(const SynthConfig& cfg) {
  if (cfg.identities < 1) throw Error("synth: identities must be >= 1");
  if (cfg.images_per_modality < 1) throw Error("synth: images per modality must be >= 1");
  if (cfg.resolution < 8) throw Error("synth: resolution must be >= 8");
  if (cfg.primitives < 1) throw Error("synth: primitives must be >= 1");
  if (cfg.a_noise < 0.0 || cfg.b_noise < 0.0) throw Error("synth: noise scale must be >= 0");
  if (cfg.b_pattern < 0.0) throw Error("synth: pattern amplitude must be >= 0");
}

namespace {

// Prototype: gradient background overpainted with random rectangles and
// circles. Identity lives in the spatial layout, which both modality
// transforms preserve.
std::vector<double> make_prototype(Rng& rng, std::int64_t r, int primitives) {
  std::size_t plane = static_cast<std::size_t>(r * r);
  std::vector<double> img(3 * plane);
  double c0[3], c1[3];
  for (int c = 0; c < 3; ++c) {
    c0[c] = rng.uniform();
    c1[c] = rng.uniform();
  }
  for (int c = 0; c < 3; ++c)
    for (std::int64_t y = 0; y < r; ++y) {
      double t = static_cast<double>(y) / static_cast<double>(r - 1);
      double v = c0[c] + (c1[c] - c0[c]) * t;
      for (std::int64_t x = 0; x < r; ++x)
        img[static_cast<std::size_t>(c) * plane + static_cast<std::size_t>(y * r + x)] = v;
    }
  for (int s = 0; s < primitives; ++s) {
    double col[3] = {rng.uniform(), rng.uniform(), rng.uniform()};
    if (rng.below(2) == 0) {
      std::int64_t x0 = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(r - 4)));
      std::int64_t y0 = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(r - 4)));
      std::int64_t x1 = x0 + 2 + static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(r - x0 - 2)));
      std::int64_t y1 = y0 + 2 + static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(r - y0 - 2)));
      for (int c = 0; c < 3; ++c)
        for (std::int64_t y = y0; y <= y1; ++y)
          for (std::int64_t x = x0; x <= x1; ++x)
            img[static_cast<std::size_t>(c) * plane + static_cast<std::size_t>(y * r + x)] = col[c];
    } else {
      std::int64_t cx = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(r)));
      std::int64_t cy = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(r)));
      std::int64_t rad = r / 8 + static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(r / 4 + 1)));
      for (int c = 0; c < 3; ++c)
        for (std::int64_t y = 0; y < r; ++y)
          for (std::int64_t x = 0; x < r; ++x)
            if ((x - cx) * (x - cx) + (y - cy) * (y - cy) <= rad * rad)
              img[static_cast<std::size_t>(c) * plane + static_cast<std::size_t>(y * r + x)] = col[c];
    }
  }
  return img;
}

// Clamp-to-edge shift plus optional horizontal flip.
std::vector<double> render_jittered(const std::vector<double>& proto, std::int64_t r,
                                    std::int64_t dx, std::int64_t dy, bool flip) {
  std::size_t plane = static_cast<std::size_t>(r * r);
  std::vector<double> out(3 * plane);
  for (int c = 0; c < 3; ++c)
    for (std::int64_t y = 0; y < r; ++y)
      for (std::int64_t x = 0; x < r; ++x) {
        std::int64_t sx = flip ? r - 1 - x : x;
        sx = std::clamp<std::int64_t>(sx + dx, 0, r - 1);
        std::int64_t sy = std::clamp<std::int64_t>(y + dy, 0, r - 1);
        out[static_cast<std::size_t>(c) * plane + static_cast<std::size_t>(y * r + x)] =
            proto[static_cast<std::size_t>(c) * plane + static_cast<std::size_t>(sy * r + sx)];
      }
  return out;
}

void apply_modality_a(const SynthConfig& cfg, const std::vector<double>& base, double* out,
                      std::int64_t r, Rng& noise) {
  std::size_t plane = static_cast<std::size_t>(r * r);
  for (int c = 0; c < 3; ++c)
    for (std::size_t p = 0; p < plane; ++p) {
      double v = 0.0;
      for (int c2 = 0; c2 < 3; ++c2)
        v += cfg.a_channel_mix[static_cast<std::size_t>(c * 3 + c2)] * base[static_cast<std::size_t>(c2) * plane + p];
      if (cfg.a_brightness != 0.0) v += cfg.a_brightness;
      if (cfg.a_noise > 0.0) v += cfg.a_noise * noise.gaussian();
      out[static_cast<std::size_t>(c) * plane + p] = v;
    }
}

void apply_modality_b(const SynthConfig& cfg, const std::vector<double>& base, double* out,
                      std::int64_t r, Rng& noise) {
  std::size_t plane = static_cast<std::size_t>(r * r);
  std::vector<double> gray(plane);
  for (std::size_t p = 0; p < plane; ++p) {
    double v = 0.0;
    for (int c2 = 0; c2 < 3; ++c2)
      v += cfg.b_collapse[static_cast<std::size_t>(c2)] * base[static_cast<std::size_t>(c2) * plane + p];
    gray[p] = v;
  }
  if (cfg.b_pattern > 0.0) {
    constexpr double two_pi = 6.283185307179586476925286766559;
    for (std::int64_t y = 0; y < r; ++y) {
      double pat = cfg.b_pattern * std::sin(two_pi * static_cast<double>(y) / 8.0);
      for (std::int64_t x = 0; x < r; ++x) gray[static_cast<std::size_t>(y * r + x)] += pat;
    }
  }
  for (int c = 0; c < 3; ++c)
    for (std::size_t p = 0; p < plane; ++p) {
      double v = gray[p];
      if (cfg.b_noise > 0.0) v += cfg.b_noise * noise.gaussian();
      out[static_cast<std::size_t>(c) * plane + p] = v;
    }
}

}  // namespace

int Dataset::class_of(int identity_id) const {
  auto it = std::lower_bound(ids_.begin(), ids_.end(), identity_id);
  if (it == ids_.end() || *it != identity_id)
    throw Error("dataset: unknown identity id " + std::to_string(identity_id));
  return static_cast<int>(it - ids_.begin());
}

void Dataset::reindex() {
  ids_ = identity;
  std::sort(ids_.begin(), ids_.end());
  ids_.erase(std::unique(ids_.begin(), ids_.end()), ids_.end());
}

Dataset generate_dataset(const SynthConfig& cfg) {
  validate_synth_config(cfg);
  std::int64_t r = cfg.resolution;
  std::int64_t imgs = cfg.images_per_modality;
  std::int64_t n = static_cast<std::int64_t>(cfg.identities) * 2 * imgs;
  std::int64_t isz = 3 * r * r;

  Dataset d;
  d.cfg = cfg;
  d.identity.resize(static_cast<std::size_t>(n));
  d.modality.resize(static_cast<std::size_t>(n));
  std::vector<double> all(static_cast<std::size_t>(n * isz));

  for (int i = 0; i < cfg.identities; ++i) {
    int gid = cfg.identity_base + i;
    // Per-identity streams named by the global id, so prototypes do not
    // depend on how many identities a config generates.
    Rng prng(sub_seed(cfg.seed, "proto:" + std::to_string(gid)));
    Rng jrng(sub_seed(cfg.seed, "jitter:" + std::to_string(gid)));
    Rng nrng(sub_seed(cfg.seed, "noise:" + std::to_string(gid)));
    std::vector<double> proto = make_prototype(prng, r, cfg.primitives);
    for (std::int64_t k = 0; k < imgs; ++k) {
      std::int64_t dx = static_cast<std::int64_t>(jrng.below(5)) - 2;
      std::int64_t dy = static_cast<std::int64_t>(jrng.below(5)) - 2;
      bool flip = jrng.below(2) == 1;
      std::vector<double> base = render_jittered(proto, r, dx, dy, flip);
      // Modalities A and B of sample k share this jittered render (paired).
      std::int64_t ia = (static_cast<std::int64_t>(i) * 2 + 0) * imgs + k;
      std::int64_t ib = (static_cast<std::int64_t>(i) * 2 + 1) * imgs + k;
      apply_modality_a(cfg, base, all.data() + ia * isz, r, nrng);
      apply_modality_b(cfg, base, all.data() + ib * isz, r, nrng);
      d.identity[static_cast<std::size_t>(ia)] = gid;
      d.identity[static_cast<std::size_t>(ib)] = gid;
      d.modality[static_cast<std::size_t>(ia)] = 0;
      d.modality[static_cast<std::size_t>(ib)] = 1;
    }
  }
  d.images = Tensor::from_values({n, 3, r, r}, std::move(all), false);
  d.reindex();
  return d;
}

Dataset subset(const Dataset& d, const std::vector<std::int64_t>& image_indices) {
  std::int64_t r = d.cfg.resolution;
  std::int64_t isz = 3 * r * r;
  std::int64_t n = static_cast<std::int64_t>(image_indices.size());
  Dataset out;
  out.cfg = d.cfg;
  std::vector<double> v(static_cast<std::size_t>(n * isz));
  const double* src = d.images.values().data();
  for (std::int64_t i = 0; i < n; ++i) {
    std::int64_t j = image_indices[static_cast<std::size_t>(i)];
    if (j < 0 || j >= d.size()) throw Error("subset: image index out of range");
    std::memcpy(v.data() + i * isz, src + j * isz, static_cast<std::size_t>(isz) * sizeof(double));
    out.identity.push_back(d.identity[static_cast<std::size_t>(j)]);
    out.modality.push_back(d.modality[static_cast<std::size_t>(j)]);
  }
  out.images = Tensor::from_values({n, 3, r, r}, std::move(v), false);
  out.reindex();
  return out;
}

std::pair<Dataset, Dataset> split_identities(const Dataset& d, double train_ratio,
                                             std::uint64_t seed) {
  if (!(train_ratio > 0.0 && train_ratio < 1.0))
    throw Error("split: train ratio must lie in (0,1)");
  std::vector<int> ids = d.ids();
  if (ids.size() < 2) throw Error("split: need at least two identities");
  std::int64_t n_train = std::llround(train_ratio * static_cast<double>(ids.size()));
  if (n_train < 1 || n_train >= static_cast<std::int64_t>(ids.size()))
    throw Error("split: ratio leaves one side without identities");
  Rng rng(sub_seed(seed, "identity-split"));
  rng.shuffle(ids);
  std::vector<int> train_ids(ids.begin(), ids.begin() + n_train);
  std::sort(train_ids.begin(), train_ids.end());
  std::vector<std::int64_t> ti, vi;
  for (std::int64_t i = 0; i < d.size(); ++i) {
    bool in_train = std::binary_search(train_ids.begin(), train_ids.end(),
                                       d.identity[static_cast<std::size_t>(i)]);
    (in_train ? ti : vi).push_back(i);
  }
  return {subset(d, ti), subset(d, vi)};
}

int export_ppm(const Dataset& d, const std::string& dir) {
  std::filesystem::create_directories(dir);
  std::int64_t r = d.cfg.resolution;
  std::int64_t isz = 3 * r * r;
  std::map<std::pair<int, int>, int> serial;  // (identity, modality) -> next k
  const double* src = d.images.values().data();
  for (std::int64_t i = 0; i < d.size(); ++i) {
    int id = d.identity[static_cast<std::size_t>(i)];
    int m = d.modality[static_cast<std::size_t>(i)];
    int k = serial[{id, m}]++;
    std::ostringstream name;
    name << dir << "/id" << id << "_mod" << (m == 0 ? 'A' : 'B') << "_" << k << ".ppm";
    std::ofstream f(name.str(), std::ios::binary);
    if (!f) throw Error("export: cannot write " + name.str());
    f << "P6\n" << r << " " << r << "\n255\n";
    const double* img = src + i * isz;
    for (std::int64_t y = 0; y < r; ++y)
      for (std::int64_t x = 0; x < r; ++x)
        for (int c = 0; c < 3; ++c) {
          double v = img[static_cast<std::size_t>((c * r + y) * r + x)];
          int byte = static_cast<int>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
          f.put(static_cast<char>(byte));
        }
    if (!f) throw Error("export: write failed for " + name.str());
  }
  return static_cast<int>(d.size());
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

namespace {

// pools[class][modality] = image indices in dataset order.
std::vector<std::array<std::vector<std::int64_t>, 2>> build_pools(const Dataset& d) {
  std::vector<std::array<std::vector<std::int64_t>, 2>> pools(
      static_cast<std::size_t>(d.num_identities()));
  for (std::int64_t i = 0; i < d.size(); ++i) {
    int cls = d.class_of(d.identity[static_cast<std::size_t>(i)]);
    pools[static_cast<std::size_t>(cls)][static_cast<std::size_t>(
                                             d.modality[static_cast<std::size_t>(i)])]
        .push_back(i);
  }
  return pools;
}

void check_pk(const Dataset& d,
              const std::vector<std::array<std::vector<std::int64_t>, 2>>& pools, int p, int k) {
  if (p < 1 || k < 1) throw Error("sampler: P and K must be >= 1");
  if (p > d.num_identities())
    throw Error("sampler: P=" + std::to_string(p) + " exceeds the " +
                std::to_string(d.num_identities()) + " identities available");
  for (std::size_t c = 0; c < pools.size(); ++c)
    for (int m = 0; m < 2; ++m)
      if (static_cast<int>(pools[c][static_cast<std::size_t>(m)].size()) < k)
        throw Error("sampler: identity " + std::to_string(d.ids()[c]) + " has only " +
                    std::to_string(pools[c][static_cast<std::size_t>(m)].size()) +
                    " images in modality " + (m == 0 ? "A" : "B") + ", need K=" +
                    std::to_string(k));
}

ModalityBatch assemble_batch(const Dataset& d, const std::vector<int>& classes,
                             const std::vector<std::array<std::vector<std::int64_t>, 2>>& picks) {
  std::int64_t r = d.cfg.resolution;
  std::int64_t isz = 3 * r * r;
  ModalityBatch b;
  for (std::size_t ci = 0; ci < classes.size(); ++ci)
    for (int m = 0; m < 2; ++m)
      for (std::int64_t idx : picks[ci][static_cast<std::size_t>(m)]) {
        b.labels.push_back(classes[ci]);
        b.modality.push_back(m);
        b.indices.push_back(idx);
      }
  std::int64_t n = static_cast<std::int64_t>(b.indices.size());
  std::vector<double> v(static_cast<std::size_t>(n * isz));
  const double* src = d.images.values().data();
  for (std::int64_t i = 0; i < n; ++i)
    std::memcpy(v.data() + i * isz, src + b.indices[static_cast<std::size_t>(i)] * isz,
                static_cast<std::size_t>(isz) * sizeof(double));
  b.images = Tensor::from_values({n, 3, r, r}, std::move(v), false);
  return b;
}

}  // namespace

ModalityBatch sample_pk_batch(const Dataset& d, int P, int K, Rng& rng) {
  auto pools = build_pools(d);
  check_pk(d, pools, P, K);
  std::vector<int> order(static_cast<std::size_t>(d.num_identities()));
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  rng.shuffle(order);
  std::vector<int> classes(order.begin(), order.begin() + P);
  std::vector<std::array<std::vector<std::int64_t>, 2>> picks(static_cast<std::size_t>(P));
  for (int ci = 0; ci < P; ++ci)
    for (int m = 0; m < 2; ++m) {
      auto pool = pools[static_cast<std::size_t>(classes[static_cast<std::size_t>(ci)])]
                       [static_cast<std::size_t>(m)];
      rng.shuffle(pool);
      picks[static_cast<std::size_t>(ci)][static_cast<std::size_t>(m)]
          .assign(pool.begin(), pool.begin() + K);
    }
  return assemble_batch(d, classes, picks);
}

PKSampler::PKSampler(const Dataset& d, int P, int K, std::uint64_t seed)
    : d_(&d), p_(P), k_(K), rng_(sub_seed(seed, "pk-sampler")) {
  pools_ = build_pools(d);
  check_pk(d, pools_, P, K);
  cursors_.assign(pools_.size(), {0, 0});
  id_order_.resize(pools_.size());
  for (std::size_t i = 0; i < id_order_.size(); ++i) id_order_[i] = static_cast<int>(i);
  rng_.shuffle(id_order_);
  for (auto& pm : pools_)
    for (auto& pool : pm) rng_.shuffle(pool);
}

int PKSampler::batches_per_epoch() const {
  std::int64_t per = static_cast<std::int64_t>(p_) * 2 * k_;
  return static_cast<int>(std::max<std::int64_t>(1, d_->size() / per));
}

ModalityBatch PKSampler::next() {
  if (id_cursor_ + static_cast<std::size_t>(p_) > id_order_.size()) {
    rng_.shuffle(id_order_);
    id_cursor_ = 0;
  }
  std::vector<int> classes(id_order_.begin() + static_cast<std::ptrdiff_t>(id_cursor_),
                           id_order_.begin() + static_cast<std::ptrdiff_t>(id_cursor_) + p_);
  id_cursor_ += static_cast<std::size_t>(p_);
  std::vector<std::array<std::vector<std::int64_t>, 2>> picks(static_cast<std::size_t>(p_));
  for (int ci = 0; ci < p_; ++ci) {
    auto cls = static_cast<std::size_t>(classes[static_cast<std::size_t>(ci)]);
    for (int m = 0; m < 2; ++m) {
      auto& pool = pools_[cls][static_cast<std::size_t>(m)];
      auto& cur = cursors_[cls][static_cast<std::size_t>(m)];
      if (cur + static_cast<std::size_t>(k_) > pool.size()) {
        rng_.shuffle(pool);
        cur = 0;
      }
      picks[static_cast<std::size_t>(ci)][static_cast<std::size_t>(m)]
          .assign(pool.begin() + static_cast<std::ptrdiff_t>(cur),
                  pool.begin() + static_cast<std::ptrdiff_t>(cur) + k_);
      cur += static_cast<std::size_t>(k_);
    }
  }
  return assemble_batch(*d_, classes, picks);
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'C', 'M', 'N', 'S'};
constexpr std::uint32_t kVersion = 1;

void append_raw(std::string& out, const void* p, std::size_t n) {
  out.append(static_cast<const char*>(p), n);
}
void append_u32(std::string& out, std::uint32_t v) { append_raw(out, &v, 4); }
void append_u64(std::string& out, std::uint64_t v) { append_raw(out, &v, 8); }
void append_i64(std::string& out, std::int64_t v) { append_raw(out, &v, 8); }
void append_doubles(std::string& out, const std::vector<double>& v) {
  append_raw(out, v.data(), v.size() * sizeof(double));
}

void append_record(std::string& out, const std::string& name, const std::string& payload) {
  append_u32(out, static_cast<std::uint32_t>(name.size()));
  out.append(name);
  append_u64(out, payload.size());
  out.append(payload);
}

void append_tensor_record(std::string& out, const std::string& prefix, const NamedRecord& r) {
  std::string payload;
  append_u32(payload, static_cast<std::uint32_t>(r.shape.size()));
  for (std::int64_t d : r.shape) append_i64(payload, d);
  append_doubles(payload, r.values);
  append_record(out, prefix + r.name, payload);
}

void append_double_record(std::string& out, const std::string& name,
                          const std::vector<double>& v) {
  std::string payload;
  append_doubles(payload, v);
  append_record(out, name, payload);
}

// Bounds-checked cursor over the file image; any overrun is a truncation.
struct Reader {
  const std::string& buf;
  std::size_t at = 0;

  void need(std::size_t n) const {
    if (at + n > buf.size()) throw Error("checkpoint: truncated file");
  }
  void raw(void* p, std::size_t n) {
    need(n);
    std::memcpy(p, buf.data() + at, n);
    at += n;
  }
  std::uint32_t u32() {
    std::uint32_t v;
    raw(&v, 4);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v;
    raw(&v, 8);
    return v;
  }
  std::int64_t i64() {
    std::int64_t v;
    raw(&v, 8);
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(buf, at, n);
    at += n;
    return s;
  }
  bool done() const { return at == buf.size(); }
};

std::vector<double> payload_doubles(const std::string& p) {
  if (p.size() % sizeof(double) != 0) throw Error("checkpoint: misaligned value record");
  std::vector<double> v(p.size() / sizeof(double));
  std::memcpy(v.data(), p.data(), p.size());
  return v;
}

NamedRecord payload_tensor(const std::string& name, const std::string& p) {
  Reader r{p};
  NamedRecord rec;
  rec.name = name;
  std::uint32_t ndim = r.u32();
  if (ndim > 8) throw Error("checkpoint: implausible tensor rank");
  std::int64_t numel = 1;
  for (std::uint32_t i = 0; i < ndim; ++i) {
    std::int64_t d = r.i64();
    if (d <= 0) throw Error("checkpoint: non-positive tensor dimension");
    rec.shape.push_back(d);
    numel *= d;
  }
  if (p.size() - r.at != static_cast<std::size_t>(numel) * sizeof(double))
    throw Error("checkpoint: tensor record size does not match its shape");
  rec.values = payload_doubles(p.substr(r.at));
  return rec;
}

bool strip_prefix(const std::string& name, const char* prefix, std::string& rest) {
  std::size_t n = std::strlen(prefix);
  if (name.compare(0, n, prefix) != 0) return false;
  rest = name.substr(n);
  return true;
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& c) {
  std::string out;
  append_raw(out, kMagic, 4);
  append_u32(out, c.version);
  append_record(out, "meta:config", c.config_text);
  append_record(out, "meta:arch", c.arch);
  append_record(out, "meta:rng", c.rng_state);
  std::string epoch;
  append_i64(epoch, c.epoch);
  append_record(out, "meta:epoch", epoch);
  for (const auto& t : c.tensors) append_tensor_record(out, "tensor:", t);
  for (const auto& b : c.buffers) append_double_record(out, "buffer:" + b.name, b.values);
  std::string wt, at;
  append_i64(wt, c.w_opt.t);
  append_record(out, "optw:t", wt);
  for (const auto& m : c.w_opt.m) append_double_record(out, "optw.m:" + m.name, m.values);
  for (const auto& v : c.w_opt.v) append_double_record(out, "optw.v:" + v.name, v.values);
  append_i64(at, c.alpha_opt.t);
  append_record(out, "opta:t", at);
  for (const auto& m : c.alpha_opt.m) append_double_record(out, "opta.m:" + m.name, m.values);
  for (const auto& v : c.alpha_opt.v) append_double_record(out, "opta.v:" + v.name, v.values);

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("checkpoint: cannot open " + path + " for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw Error("checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("checkpoint: cannot open " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  std::string buf = ss.str();

  Reader r{buf};
  char magic[4];
  r.raw(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) throw Error("checkpoint: bad magic, not a checkpoint");
  Checkpoint c;
  c.version = r.u32();
  if (c.version != kVersion)
    throw Error("checkpoint: unsupported version " + std::to_string(c.version));

  while (!r.done()) {
    std::uint32_t nlen = r.u32();
    std::string name = r.str(nlen);
    std::uint64_t plen = r.u64();
    std::string payload = r.str(plen);
    std::string rest;
    if (name == "meta:config") {
      c.config_text = payload;
    } else if (name == "meta:arch") {
      c.arch = payload;
    } else if (name == "meta:rng") {
      c.rng_state = payload;
    } else if (name == "meta:epoch") {
      Reader pr{payload};
      c.epoch = pr.i64();
    } else if (name == "optw:t") {
      Reader pr{payload};
      c.w_opt.t = pr.i64();
    } else if (name == "opta:t") {
      Reader pr{payload};
      c.alpha_opt.t = pr.i64();
    } else if (strip_prefix(name, "tensor:", rest)) {
      c.tensors.push_back(payload_tensor(rest, payload));
    } else if (strip_prefix(name, "buffer:", rest)) {
      NamedRecord rec;
      rec.name = rest;
      rec.values = payload_doubles(payload);
      rec.shape = {static_cast<std::int64_t>(rec.values.size())};
      c.buffers.push_back(std::move(rec));
    } else if (strip_prefix(name, "optw.m:", rest)) {
      c.w_opt.m.push_back({rest, {}, payload_doubles(payload)});
    } else if (strip_prefix(name, "optw.v:", rest)) {
      c.w_opt.v.push_back({rest, {}, payload_doubles(payload)});
    } else if (strip_prefix(name, "opta.m:", rest)) {
      c.alpha_opt.m.push_back({rest, {}, payload_doubles(payload)});
    } else if (strip_prefix(name, "opta.v:", rest)) {
      c.alpha_opt.v.push_back({rest, {}, payload_doubles(payload)});
    } else {
      throw Error("checkpoint: unknown record '" + name + "'");
    }
  }
  return c;
}

namespace {

OptState snapshot_opt(const Adam& opt) {
  OptState s;
  s.t = opt.step_count();
  auto& mut = const_cast<Adam&>(opt);
  for (std::size_t i = 0; i < opt.params().size(); ++i) {
    const std::string& name = opt.params()[i].name;
    s.m.push_back({name, {}, mut.moment1(i)});
    s.v.push_back({name, {}, mut.moment2(i)});
  }
  return s;
}

}  // namespace

Checkpoint make_checkpoint(Network& net, const Adam* w_opt, const Adam* alpha_opt,
                           std::int64_t epoch, const std::string& arch,
                           const std::string& config_text, const std::string& rng_state) {
  Checkpoint c;
  c.config_text = config_text;
  c.arch = arch;
  c.epoch = epoch;
  c.rng_state = rng_state;
  for (auto& p : weight_params(net))
    c.tensors.push_back({p.name, p.tensor.shape(), p.tensor.values()});
  for (auto& p : arch_params(net))
    c.tensors.push_back({p.name, p.tensor.shape(), p.tensor.values()});
  for (auto& b : norm_buffers(net))
    c.buffers.push_back({b.name, {static_cast<std::int64_t>(b.data->size())}, *b.data});
  if (w_opt) c.w_opt = snapshot_opt(*w_opt);
  if (alpha_opt) c.alpha_opt = snapshot_opt(*alpha_opt);
  return c;
}

namespace {

const NamedRecord* find_record(const std::vector<NamedRecord>& rs, const std::string& name) {
  for (const auto& r : rs)
    if (r.name == name) return &r;
  return nullptr;
}

}  // namespace

void restore_network(const Checkpoint& c, Network& net) {
  std::vector<NamedTensor> params = weight_params(net);
  for (auto& p : arch_params(net)) params.push_back(p);
  if (params.size() != c.tensors.size())
    throw Error("checkpoint: holds " + std::to_string(c.tensors.size()) +
                " tensors, network expects " + std::to_string(params.size()));
  for (auto& p : params) {
    const NamedRecord* r = find_record(c.tensors, p.name);
    if (!r) throw Error("checkpoint: missing tensor " + p.name);
    if (r->shape != p.tensor.shape())
      throw Error("checkpoint: shape mismatch for tensor " + p.name);
    p.tensor.values() = r->values;
  }
  std::vector<NamedBuffer> bufs = norm_buffers(net);
  if (bufs.size() != c.buffers.size())
    throw Error("checkpoint: holds " + std::to_string(c.buffers.size()) +
                " buffers, network expects " + std::to_string(bufs.size()));
  for (auto& b : bufs) {
    const NamedRecord* r = find_record(c.buffers, b.name);
    if (!r) throw Error("checkpoint: missing buffer " + b.name);
    if (r->values.size() != b.data->size())
      throw Error("checkpoint: size mismatch for buffer " + b.name);
    *b.data = r->values;
  }
}

void restore_optimizer(const OptState& s, Adam& opt) {
  if (s.m.size() != opt.params().size() || s.v.size() != opt.params().size())
    throw Error("checkpoint: optimizer state covers " + std::to_string(s.m.size()) +
                " parameters, optimizer has " + std::to_string(opt.params().size()));
  for (std::size_t i = 0; i < opt.params().size(); ++i) {
    const std::string& name = opt.params()[i].name;
    const NamedRecord* m = find_record(s.m, name);
    const NamedRecord* v = find_record(s.v, name);
    if (!m || !v) throw Error("checkpoint: missing optimizer moments for " + name);
    if (m->values.size() != opt.moment1(i).size() || v->values.size() != opt.moment2(i).size())
      throw Error("checkpoint: optimizer moment size mismatch for " + name);
    opt.moment1(i) = m->values;
    opt.moment2(i) = v->values;
  }
  opt.set_step_count(s.t);
}

}  // namespace cmnas
