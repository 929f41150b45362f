#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "commands.hpp"

using namespace cmnas;
using doctest::Contains;
namespace fs = std::filesystem;

namespace {

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int count_lines(const std::string& s) {
  int n = 0;
  for (char c : s)
    if (c == '\n') ++n;
  return n;
}

// Small enough that every command finishes in seconds.
RunConfig small_config(const std::string& out) {
  RunConfig rc = default_config();
  config_set(rc, "output_dir", out);
  config_set(rc, "dataset.identities", "8");
  config_set(rc, "dataset.images_per_modality", "4");
  config_set(rc, "dataset.resolution", "16");
  config_set(rc, "backbone.widths", "8,12");
  config_set(rc, "backbone.blocks", "1,1");
  config_set(rc, "backbone.embedding_dim", "16");
  config_set(rc, "schedule.search_epochs", "2");
  config_set(rc, "schedule.retrain_epochs", "2");
  config_set(rc, "schedule.batch_p", "2");  // the 2-identity validation side caps P
  config_set(rc, "schedule.batch_k", "2");
  config_set(rc, "schedule.split_ratio", "0.75");
  config_set(rc, "protocol.repeats", "3");
  config_set(rc, "sweep.epochs", "1");
  return rc;
}

RunConfig fresh(const std::string& out) {
  fs::remove_all(out);
  return small_config(out);
}

// One completed search shared by the cases that consume its outputs.
struct SearchedFixture {
  RunConfig rc;
  std::string dir = "cmd_fix_search";
  std::string bits;
};

const SearchedFixture& searched() {
  static SearchedFixture f = [] {
    SearchedFixture x;
    x.rc = small_config(x.dir);
    fs::remove_all(x.dir);
    cmd_search(x.rc);
    x.bits = parse_arch_file(backbone_from(x.rc), read_file(fs::path(x.dir) / "arch.txt"));
    return x;
  }();
  return f;
}

}  // namespace

TEST_CASE("search command writes deterministic artifacts") {
  RunConfig rc = fresh("cmd_search_out");
  cmd_search(rc);

  fs::path dir = "cmd_search_out";
  for (const char* name : {"config_resolved.txt", "arch.txt", "search_log.csv", "search.ckpt"})
    CHECK(fs::exists(dir / name));

  std::string resolved = read_file(dir / "config_resolved.txt");
  CHECK(resolved.find("resolved.norm_mode = searchable\n") != std::string::npos);
  CHECK(resolved.find("resolved.num_classes = 6\n") != std::string::npos);  // 0.75 of 8 ids
  CHECK(resolved.find("resolved.input_resolution = 16\n") != std::string::npos);

  BackboneConfig backbone = backbone_from(rc);
  std::string arch = read_file(dir / "arch.txt");
  std::string bits = parse_arch_file(backbone, arch);
  CHECK(static_cast<std::int64_t>(bits.size()) == norm_site_count(backbone));

  std::string log = read_file(dir / "search_log.csv");
  std::istringstream ls(log);
  std::string header;
  std::getline(ls, header);
  CHECK(header.find("epoch,cls,triplet,cmmd,cc,total,val_cls") == 0);
  CHECK(header.find("share:s1_1.bn1") != std::string::npos);
  CHECK(header.find("share:s2_1.bn3") != std::string::npos);
  CHECK(count_lines(log) == 3);  // header + one row per epoch

  std::string ckpt = read_file(dir / "search.ckpt");
  // A rerun with resume off starts from scratch and must reproduce every byte.
  cmd_search(rc);
  CHECK(read_file(dir / "arch.txt") == arch);
  CHECK(read_file(dir / "search_log.csv") == log);
  CHECK(read_file(dir / "search.ckpt") == ckpt);
}

TEST_CASE("search command resume honors the stored run") {
  RunConfig rc = fresh("cmd_resume_out");
  cmd_search(rc);
  fs::path dir = "cmd_resume_out";
  std::string arch = read_file(dir / "arch.txt");
  std::string ckpt = read_file(dir / "search.ckpt");

  // Resuming a finished run re-derives the same architecture without training.
  config_set(rc, "resume", "on");
  cmd_search(rc);
  CHECK(read_file(dir / "arch.txt") == arch);
  CHECK(read_file(dir / "search.ckpt") == ckpt);
  CHECK(count_lines(read_file(dir / "search_log.csv")) == 1);  // header only, no new epochs

  // Resuming under a different configuration is refused.
  config_set(rc, "loss.lambda1", "0.1");
  CHECK_THROWS_WITH_AS(cmd_search(rc), Contains("different configuration"), Error);
}

TEST_CASE("retrain command trains a searched bitstring") {
  const SearchedFixture& f = searched();
  RunConfig rc = fresh("cmd_retrain_out");
  config_set(rc, "retrain.scheme", "arch_file");
  config_set(rc, "retrain.arch_file", (fs::path(f.dir) / "arch.txt").string());
  cmd_retrain(rc);

  fs::path dir = "cmd_retrain_out";
  for (const char* name : {"config_resolved.txt", "train_log.csv", "retrain.ckpt"})
    CHECK(fs::exists(dir / name));
  CHECK(count_lines(read_file(dir / "train_log.csv")) == 3);

  Checkpoint ck = load_checkpoint((dir / "retrain.ckpt").string());
  CHECK(ck.arch == f.bits);
  CHECK(ck.config_text.find("resolved.norm_mode = scheme\n") != std::string::npos);
  CHECK(ck.config_text.find("resolved.num_classes = 8\n") != std::string::npos);

  BackboneConfig cfg;
  Network net = net_from_checkpoint(ck, &cfg);
  CHECK(cfg.norm_mode == NormMode::Scheme);
  REQUIRE(cfg.scheme.has_value());
  CHECK(cfg.scheme->unit == SeparationScheme::Unit::NormLayers);
  CHECK(cfg.num_classes == 8);
}

TEST_CASE("retrain command covers the manual schemes") {
  RunConfig rc = fresh("cmd_schemes_out");
  config_set(rc, "schedule.retrain_epochs", "0");  // wiring check only
  auto sites = static_cast<std::size_t>(norm_site_count(backbone_from(rc)));

  config_set(rc, "retrain.scheme", "all_shared");
  cmd_retrain(rc);
  Checkpoint ck = load_checkpoint("cmd_schemes_out/retrain.ckpt");
  CHECK(ck.arch == std::string(sites, '1'));
  CHECK(ck.config_text.find("resolved.norm_mode = all_shared\n") != std::string::npos);

  config_set(rc, "retrain.scheme", "bn_separate");
  cmd_retrain(rc);
  ck = load_checkpoint("cmd_schemes_out/retrain.ckpt");
  CHECK(ck.arch == std::string(sites, '0'));

  config_set(rc, "retrain.scheme", "block_separate");
  cmd_retrain(rc);
  ck = load_checkpoint("cmd_schemes_out/retrain.ckpt");
  CHECK(ck.arch == "full-two-stream");
  BackboneConfig cfg;
  Network net = net_from_checkpoint(ck, &cfg);
  REQUIRE(cfg.scheme.has_value());
  CHECK(cfg.scheme->unit == SeparationScheme::Unit::FullBlock);

  config_set(rc, "retrain.scheme", "instance_norm");
  cmd_retrain(rc);
  ck = load_checkpoint("cmd_schemes_out/retrain.ckpt");
  CHECK(ck.arch == "instance-norm");
  CHECK(ck.config_text.find("resolved.norm_mode = instance\n") != std::string::npos);

  config_set(rc, "retrain.scheme", "arch_file");
  config_set(rc, "retrain.arch_file", "");
  CHECK_THROWS_WITH_AS(cmd_retrain(rc), Contains("requires retrain.arch_file"), ConfigError);
  config_set(rc, "retrain.scheme", "bogus");
  CHECK_THROWS_WITH_AS(cmd_retrain(rc), Contains("unknown retrain.scheme"), ConfigError);
}

TEST_CASE("eval command reports every requested direction") {
  const SearchedFixture& f = searched();
  RunConfig rc = fresh("cmd_eval_out");
  config_set(rc, "eval.checkpoint", (fs::path(f.dir) / "search.ckpt").string());
  config_set(rc, "protocol.repeats", "2");
  cmd_eval(rc);

  std::string csv = read_file("cmd_eval_out/eval.csv");
  CHECK(csv.find("ir_to_vis_shot1,1,") != std::string::npos);
  CHECK(csv.find("vis_to_ir_shot1,1,") != std::string::npos);
  CHECK(csv.find("ir_to_vis_shot1,mean,") != std::string::npos);
  CHECK(csv.find("vis_to_ir_shot1,stddev,") != std::string::npos);

  // Reruns are deterministic, and single directions drop the other section.
  cmd_eval(rc);
  CHECK(read_file("cmd_eval_out/eval.csv") == csv);
  config_set(rc, "protocol.directions", "vis_to_ir");
  cmd_eval(rc);
  std::string one = read_file("cmd_eval_out/eval.csv");
  CHECK(one.find("vis_to_ir_shot1,") != std::string::npos);
  CHECK(one.find("ir_to_vis") == std::string::npos);

  config_set(rc, "protocol.directions", "sideways");
  CHECK_THROWS_WITH_AS(cmd_eval(rc), Contains("protocol.directions"), ConfigError);
  config_set(rc, "protocol.directions", "both");
  config_set(rc, "dataset.resolution", "24");
  CHECK_THROWS_WITH_AS(cmd_eval(rc), Contains("does not match the checkpoint"), ConfigError);
  config_set(rc, "dataset.resolution", "16");
  config_set(rc, "eval.checkpoint", "");
  CHECK_THROWS_AS(cmd_eval(rc), ConfigError);
  config_set(rc, "eval.checkpoint", "no_such.ckpt");
  CHECK_THROWS_AS(cmd_eval(rc), IoError);
}

TEST_CASE("export-arch command recovers bitstrings from checkpoints") {
  const SearchedFixture& f = searched();

  // From a search checkpoint: discretizes the stored alphas.
  RunConfig rc = fresh("cmd_export_out");
  config_set(rc, "export.checkpoint", (fs::path(f.dir) / "search.ckpt").string());
  cmd_export_arch(rc);
  CHECK(read_file("cmd_export_out/arch_export.txt") == read_file(fs::path(f.dir) / "arch.txt"));

  // From a retrained checkpoint: the stored label is already the bitstring.
  RunConfig rt = fresh("cmd_export_rt");
  config_set(rt, "retrain.scheme", "arch_file");
  config_set(rt, "retrain.arch_file", (fs::path(f.dir) / "arch.txt").string());
  config_set(rt, "schedule.retrain_epochs", "0");
  cmd_retrain(rt);
  config_set(rc, "export.checkpoint", "cmd_export_rt/retrain.ckpt");
  cmd_export_arch(rc);
  CHECK(read_file("cmd_export_out/arch_export.txt") == read_file(fs::path(f.dir) / "arch.txt"));

  // Non-bitstring architectures have nothing to export.
  config_set(rt, "retrain.scheme", "block_separate");
  cmd_retrain(rt);
  config_set(rc, "export.checkpoint", "cmd_export_rt/retrain.ckpt");
  CHECK_THROWS_WITH_AS(cmd_export_arch(rc), Contains("not a norm-site bitstring"), ConfigError);

  config_set(rc, "export.checkpoint", "");
  CHECK_THROWS_AS(cmd_export_arch(rc), ConfigError);
}

TEST_CASE("sweep command trains and scores every enumerated scheme") {
  RunConfig rc = fresh("cmd_sweep_out");
  config_set(rc, "protocol.repeats", "2");
  cmd_sweep(rc);

  std::string csv = read_file("cmd_sweep_out/sweep.csv");
  std::istringstream ls(csv);
  std::string line;
  std::getline(ls, line);
  CHECK(line == "scheme,unit,rank1,mAP");
  // Two blocks (stem + s2_1), two units: baseline plus four one-hot schemes.
  CHECK(count_lines(csv) == 6);
  CHECK(csv.find("baseline,bn,") != std::string::npos);
  CHECK(csv.find("block:s1_1,block,") != std::string::npos);
  CHECK(csv.find("block:s2_1,block,") != std::string::npos);
  CHECK(csv.find("bn:s1_1,bn,") != std::string::npos);
  CHECK(csv.find("bn:s2_1,bn,") != std::string::npos);
  while (std::getline(ls, line)) {
    std::size_t c2 = line.rfind(',');
    double map = std::stod(line.substr(c2 + 1));
    CHECK(map >= 0.0);
    CHECK(map <= 1.0);
  }

  config_set(rc, "sweep.mode", "fixed_plus_traverse");
  CHECK_THROWS_WITH_AS(cmd_sweep(rc), Contains("requires sweep.fixed_block"), ConfigError);
  config_set(rc, "sweep.mode", "spiral");
  CHECK_THROWS_WITH_AS(cmd_sweep(rc), Contains("sweep.mode"), ConfigError);
  config_set(rc, "sweep.mode", "single_block");
  config_set(rc, "sweep.units", "sometimes");
  CHECK_THROWS_WITH_AS(cmd_sweep(rc), Contains("sweep.units"), ConfigError);
}
