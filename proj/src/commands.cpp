#include "commands.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace cmnas {

namespace fs = std::filesystem;

namespace {

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

fs::path ensure_output_dir(const RunConfig& rc) {
  fs::path dir = config_get(rc, "output_dir");
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory " + dir.string() + ": " + ec.message());
  return dir;
}

void write_text_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << text;
  out.flush();
  if (!out) throw IoError("failed writing " + path.string());
}

std::string read_text_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError("failed reading " + path.string());
  return ss.str();
}

// The resolved.* keys capture whatever was decided at run time, so a
// checkpoint's stored config suffices to rebuild its exact network.
RunConfig resolved_for_run(const RunConfig& rc, std::int64_t num_classes, std::int64_t resolution,
                           const std::string& norm_mode) {
  RunConfig out = rc;
  config_set(out, "resolved.num_classes", std::to_string(num_classes));
  config_set(out, "resolved.input_resolution", std::to_string(resolution));
  config_set(out, "resolved.norm_mode", norm_mode);
  // The flag only selects fresh-vs-continue; it is not part of run identity,
  // so a resuming invocation must produce the same stored text.
  config_set(out, "resume", "off");
  return out;
}

struct RunParams {
  int P = 0, K = 0;
  double split_ratio = 0.0;
  std::uint64_t seed = 0;
  bool resume = false;
};

RunParams run_params(const RunConfig& rc) {
  RunParams p;
  p.P = static_cast<int>(cfg_int(rc, "schedule.batch_p"));
  p.K = static_cast<int>(cfg_int(rc, "schedule.batch_k"));
  p.split_ratio = cfg_double(rc, "schedule.split_ratio");
  p.seed = cfg_uint(rc, "seed");
  p.resume = cfg_bool(rc, "resume");
  return p;
}

std::vector<std::string> searchable_site_names(const Network& net) {
  std::vector<std::string> out;
  for (const auto& layer : net.norms)
    if (layer.kind == NormKind::Searchable) out.push_back(layer.name);
  return out;
}

void append_losses(std::string& csv, const StepLosses& l) {
  for (double v : {l.cls, l.triplet, l.cmmd, l.cc, l.total}) {
    csv += ',';
    csv += fmt(v);
  }
}

// Rows cover the epochs the invocation executed; a resumed run logs its tail.
std::string search_log_csv(const std::vector<EpochLog>& log,
                           const std::vector<std::string>& sites) {
  std::string csv = "epoch,cls,triplet,cmmd,cc,total,val_cls,val_triplet,val_cmmd,val_cc,val_total";
  for (const auto& n : sites) csv += ",share:" + n;
  csv += '\n';
  for (const auto& row : log) {
    csv += std::to_string(row.epoch);
    append_losses(csv, row.train);
    append_losses(csv, row.val);
    for (double v : row.p_share) {
      csv += ',';
      csv += fmt(v);
    }
    csv += '\n';
  }
  return csv;
}

std::string train_log_csv(const std::vector<EpochLog>& log) {
  std::string csv = "epoch,cls,triplet,cmmd,cc,total\n";
  for (const auto& row : log) {
    csv += std::to_string(row.epoch);
    append_losses(csv, row.train);
    csv += '\n';
  }
  return csv;
}

struct Direction {
  int query = 1, gallery = 0;
  std::string name;
};

std::vector<Direction> directions_from(const RunConfig& rc) {
  const std::string& d = config_get(rc, "protocol.directions");
  if (d == "both") return {{1, 0, "ir_to_vis"}, {0, 1, "vis_to_ir"}};
  if (d == "ir_to_vis") return {{1, 0, "ir_to_vis"}};
  if (d == "vis_to_ir") return {{0, 1, "vis_to_ir"}};
  throw ConfigError("config: protocol.directions must be both, ir_to_vis, or vis_to_ir, got '" +
                    d + "'");
}

Protocol protocol_from(const RunConfig& rc, const Direction& dir) {
  Protocol p;
  p.query_modality = dir.query;
  p.gallery_modality = dir.gallery;
  p.shots = static_cast<int>(cfg_int(rc, "protocol.shots"));
  p.repeats = static_cast<int>(cfg_int(rc, "protocol.repeats"));
  p.seed = cfg_uint(rc, "seed");
  validate_protocol(p);
  return p;
}

// The retrain.scheme key selects how phase-2 norm layers are wired.
struct RetrainChoice {
  BackboneConfig cfg;
  std::string arch_label;  // stored in checkpoints; bitstring when one applies
  std::string norm_mode;   // resolved.norm_mode value
};

RetrainChoice retrain_choice(const RunConfig& rc, const BackboneConfig& base) {
  RetrainChoice c;
  c.cfg = base;
  const std::string& scheme = config_get(rc, "retrain.scheme");
  auto sites = static_cast<std::size_t>(norm_site_count(base));
  if (scheme == "arch_file") {
    const std::string& path = config_get(rc, "retrain.arch_file");
    if (path.empty())
      throw ConfigError("config: retrain.scheme = arch_file requires retrain.arch_file");
    std::string bits = parse_arch_file(base, read_text_file(path));
    c.cfg.norm_mode = NormMode::Scheme;
    c.cfg.scheme = bitstring_to_scheme(bits);
    c.arch_label = std::move(bits);
    c.norm_mode = "scheme";
  } else if (scheme == "all_shared") {
    c.cfg.norm_mode = NormMode::AllShared;
    c.arch_label = std::string(sites, '1');
    c.norm_mode = "all_shared";
  } else if (scheme == "bn_separate") {
    std::string bits(sites, '0');
    c.cfg.norm_mode = NormMode::Scheme;
    c.cfg.scheme = bitstring_to_scheme(bits);
    c.arch_label = std::move(bits);
    c.norm_mode = "scheme";
  } else if (scheme == "block_separate") {
    c.cfg.norm_mode = NormMode::Scheme;
    SeparationScheme two_stream;
    two_stream.unit = SeparationScheme::Unit::FullBlock;
    two_stream.mask.assign(static_cast<std::size_t>(block_count(base)), 1);
    c.cfg.scheme = std::move(two_stream);
    c.arch_label = "full-two-stream";
    c.norm_mode = "scheme";
  } else if (scheme == "instance_norm") {
    c.cfg.norm_mode = NormMode::InstanceNorm;
    c.arch_label = "instance-norm";
    c.norm_mode = "instance";
  } else {
    throw ConfigError("config: unknown retrain.scheme '" + scheme +
                      "' (arch_file, all_shared, bn_separate, block_separate, instance_norm)");
  }
  return c;
}

const char* unit_name(SeparationScheme::Unit u) {
  switch (u) {
    case SeparationScheme::Unit::FullBlock: return "block";
    case SeparationScheme::Unit::BlockNorms: return "bn";
    case SeparationScheme::Unit::NormLayers: return "sites";
  }
  return "?";
}

}  // namespace

Network net_from_checkpoint(const Checkpoint& ck, BackboneConfig* cfg_out) {
  RunConfig rc = parse_config_text(ck.config_text);
  BackboneConfig cfg = backbone_from(rc);
  cfg.num_classes = cfg_int(rc, "resolved.num_classes");
  cfg.input_resolution = cfg_int(rc, "resolved.input_resolution");
  const std::string& mode = config_get(rc, "resolved.norm_mode");
  if (mode == "searchable") {
    cfg.norm_mode = NormMode::Searchable;
  } else if (mode == "all_shared") {
    cfg.norm_mode = NormMode::AllShared;
  } else if (mode == "instance") {
    cfg.norm_mode = NormMode::InstanceNorm;
  } else if (mode == "scheme") {
    cfg.norm_mode = NormMode::Scheme;
    if (ck.arch == "full-two-stream") {
      SeparationScheme two_stream;
      two_stream.unit = SeparationScheme::Unit::FullBlock;
      two_stream.mask.assign(static_cast<std::size_t>(block_count(cfg)), 1);
      cfg.scheme = std::move(two_stream);
    } else {
      validate_bitstring(ck.arch, norm_site_count(cfg));
      cfg.scheme = bitstring_to_scheme(ck.arch);
    }
  } else {
    throw ConfigError("checkpoint: unknown resolved.norm_mode '" + mode + "'");
  }
  Rng init(0);  // initial values are overwritten by the restore
  Network net = build_backbone(cfg, init);
  restore_network(ck, net);
  if (cfg_out) *cfg_out = cfg;
  return net;
}

void cmd_search(const RunConfig& rc) {
  SynthConfig synth = synth_from(rc);
  BackboneConfig backbone = backbone_from(rc);
  backbone.norm_mode = NormMode::Searchable;
  SearchSchedule sched = schedule_from(rc, "schedule.search_epochs");
  LossConfig losses = losses_from(rc);
  RunParams p = run_params(rc);

  Dataset data = generate_dataset(synth);
  // Same split the search will perform, to resolve the classifier size.
  auto sides = split_identities(data, p.split_ratio, sub_seed(p.seed, "search-split"));
  std::string full_text =
      config_text(resolved_for_run(rc, sides.first.num_identities(), synth.resolution,
                                   "searchable"));

  fs::path dir = ensure_output_dir(rc);
  write_text_file(dir / "config_resolved.txt", full_text);

  RunHooks hooks;
  hooks.checkpoint_path = (dir / "search.ckpt").string();
  hooks.config_text = full_text;
  if (!p.resume) fs::remove(hooks.checkpoint_path);

  SearchResult res =
      run_search(data, backbone, sched, losses, p.P, p.K, p.split_ratio, p.seed, hooks);

  write_text_file(dir / "arch.txt", format_arch_file(backbone, res.bitstring));
  write_text_file(dir / "search_log.csv", search_log_csv(res.log, searchable_site_names(res.net)));
}

void cmd_retrain(const RunConfig& rc) {
  SynthConfig synth = synth_from(rc);
  BackboneConfig base = backbone_from(rc);
  SearchSchedule sched = schedule_from(rc, "schedule.retrain_epochs");
  LossConfig losses = losses_from(rc);
  RunParams p = run_params(rc);
  RetrainChoice choice = retrain_choice(rc, base);

  Dataset data = generate_dataset(synth);
  std::string full_text =
      config_text(resolved_for_run(rc, data.num_identities(), synth.resolution, choice.norm_mode));

  fs::path dir = ensure_output_dir(rc);
  write_text_file(dir / "config_resolved.txt", full_text);

  RunHooks hooks;
  hooks.checkpoint_path = (dir / "retrain.ckpt").string();
  hooks.config_text = full_text;
  if (!p.resume) fs::remove(hooks.checkpoint_path);

  TrainResult res =
      run_train(data, choice.cfg, sched, losses, p.P, p.K, p.seed, choice.arch_label, hooks);

  write_text_file(dir / "train_log.csv", train_log_csv(res.log));
}

void cmd_eval(const RunConfig& rc) {
  const std::string& ckpath = config_get(rc, "eval.checkpoint");
  if (ckpath.empty()) throw ConfigError("config: eval.checkpoint must name a checkpoint file");
  if (!fs::exists(ckpath)) throw IoError("eval: checkpoint not found: " + ckpath);
  Checkpoint ck = load_checkpoint(ckpath);
  BackboneConfig net_cfg;
  Network net = net_from_checkpoint(ck, &net_cfg);

  SynthConfig synth = synth_from(rc);
  if (synth.resolution != net_cfg.input_resolution)
    throw ConfigError("eval: dataset resolution " + std::to_string(synth.resolution) +
                      " does not match the checkpoint's input resolution " +
                      std::to_string(net_cfg.input_resolution));
  std::vector<Direction> dirs = directions_from(rc);

  Dataset data = generate_dataset(synth);
  std::string csv;
  for (const Direction& d : dirs) {
    Protocol proto = protocol_from(rc, d);
    RetrievalReport rep = evaluate(net, data, proto);
    csv += report_csv(rep, d.name + "_shot" + std::to_string(proto.shots));
  }

  fs::path dir = ensure_output_dir(rc);
  write_text_file(dir / "config_resolved.txt", config_text(rc));
  write_text_file(dir / "eval.csv", csv);
}

void cmd_sweep(const RunConfig& rc) {
  SynthConfig synth = synth_from(rc);
  BackboneConfig base = backbone_from(rc);
  SearchSchedule sched = schedule_from(rc, "sweep.epochs");
  LossConfig losses = losses_from(rc);
  RunParams p = run_params(rc);

  const std::string& mode_s = config_get(rc, "sweep.mode");
  SweepMode mode;
  if (mode_s == "single_block") {
    mode = SweepMode::SingleBlock;
  } else if (mode_s == "fixed_plus_traverse") {
    mode = SweepMode::FixedPlusTraverse;
  } else {
    throw ConfigError("config: sweep.mode must be single_block or fixed_plus_traverse, got '" +
                      mode_s + "'");
  }
  const std::string& units_s = config_get(rc, "sweep.units");
  std::vector<SweepUnit> units;
  if (units_s == "both")
    units = {SweepUnit::FullBlock, SweepUnit::BlockNorms};
  else if (units_s == "block")
    units = {SweepUnit::FullBlock};
  else if (units_s == "bn")
    units = {SweepUnit::BlockNorms};
  else
    throw ConfigError("config: sweep.units must be both, block, or bn, got '" + units_s + "'");
  const std::string& fixed = config_get(rc, "sweep.fixed_block");
  if (mode == SweepMode::FixedPlusTraverse && fixed.empty())
    throw ConfigError("config: sweep.mode = fixed_plus_traverse requires sweep.fixed_block");
  std::vector<SweepScheme> schemes = sweep_enumerate(base, mode, units, fixed);

  // One direction per sweep row; "both" falls back to the ir_to_vis default.
  Direction dir1 = directions_from(rc).front();
  Protocol proto = protocol_from(rc, dir1);

  Dataset data = generate_dataset(synth);
  auto sides = split_identities(data, p.split_ratio, sub_seed(p.seed, "sweep-split"));

  std::string csv = "scheme,unit,rank1,mAP\n";
  for (const SweepScheme& s : schemes) {
    BackboneConfig cfg = base;
    cfg.norm_mode = NormMode::Scheme;
    cfg.scheme = s.scheme;
    TrainResult r = run_train(sides.first, cfg, sched, losses, p.P, p.K,
                              sub_seed(p.seed, "sweep:" + s.name), s.name);
    RetrievalReport rep = evaluate(r.net, sides.second, proto);
    csv += s.name;
    csv += ',';
    csv += unit_name(s.scheme.unit);
    csv += ',';
    csv += fmt(rep.mean.rank1);
    csv += ',';
    csv += fmt(rep.mean.map);
    csv += '\n';
  }

  fs::path dir = ensure_output_dir(rc);
  write_text_file(dir / "config_resolved.txt", config_text(rc));
  write_text_file(dir / "sweep.csv", csv);
}

void cmd_export_arch(const RunConfig& rc) {
  const std::string& ckpath = config_get(rc, "export.checkpoint");
  if (ckpath.empty()) throw ConfigError("config: export.checkpoint must name a checkpoint file");
  if (!fs::exists(ckpath)) throw IoError("export-arch: checkpoint not found: " + ckpath);
  Checkpoint ck = load_checkpoint(ckpath);

  BackboneConfig cfg;
  std::string bits;
  if (ck.arch == "searching") {
    // Mid-search checkpoint: discretize its current architecture parameters.
    Network net = net_from_checkpoint(ck, &cfg);
    bits = discretize(arch_params(net));
  } else {
    RunConfig stored = parse_config_text(ck.config_text);
    cfg = backbone_from(stored);
    for (char ch : ck.arch)
      if (ch != '0' && ch != '1')
        throw ConfigError("export-arch: checkpoint architecture '" + ck.arch +
                          "' is not a norm-site bitstring");
    validate_bitstring(ck.arch, norm_site_count(cfg));
    bits = ck.arch;
  }

  fs::path dir = ensure_output_dir(rc);
  write_text_file(dir / "config_resolved.txt", config_text(rc));
  write_text_file(dir / "arch_export.txt", format_arch_file(cfg, bits));
}

}  // namespace cmnas
