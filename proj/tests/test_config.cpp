#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <fstream>

#include "config.hpp"

using namespace cmnas;
using doctest::Contains;

TEST_CASE("defaults cover every key and the canonical text roundtrips") {
  RunConfig rc = default_config();
  for (const auto& [k, v] : config_registry()) {
    REQUIRE(rc.values.count(k) == 1);
    CHECK(rc.values.at(k) == v);
  }
  std::string text = config_text(rc);
  RunConfig again = parse_config_text(text);
  CHECK(again.values == rc.values);
  // Canonical text is a fixpoint: serializing the reparse changes nothing.
  CHECK(config_text(again) == text);
}

TEST_CASE("parsing overlays values and tolerates comments and blanks") {
  RunConfig rc = parse_config_text(
      "# a comment\n"
      "\n"
      "seed = 7\n"
      "   dataset.identities=16   \n"
      "loss.use_cc = off # not stripped, value is verbatim\n");
  CHECK(cfg_uint(rc, "seed") == 7);
  CHECK(cfg_int(rc, "dataset.identities") == 16);
  // Everything after '=' except surrounding whitespace belongs to the value.
  CHECK(config_get(rc, "loss.use_cc") == "off # not stripped, value is verbatim");
  CHECK(config_get(rc, "output_dir") == "out");  // untouched default
}

TEST_CASE("unknown, duplicate, and malformed lines are rejected") {
  CHECK_THROWS_WITH_AS(parse_config_text("sed = 1\n"), Contains("unknown key 'sed'"),
                       ConfigError);
  CHECK_THROWS_WITH_AS(parse_config_text("seed = 1\nseed = 2\n"),
                       Contains("duplicate key 'seed' on line 2"), ConfigError);
  CHECK_THROWS_WITH_AS(parse_config_text("seed 1\n"), Contains("line 1 is not 'key = value'"),
                       ConfigError);
  RunConfig rc = default_config();
  CHECK_THROWS_AS(config_set(rc, "dataset.bogus", "1"), ConfigError);
  CHECK_THROWS_AS(config_get(rc, "dataset.bogus"), ConfigError);
  CHECK_NOTHROW(config_set(rc, "seed", "9"));
  CHECK(config_get(rc, "seed") == "9");
}

TEST_CASE("typed getters parse strictly") {
  RunConfig rc = default_config();
  config_set(rc, "seed", "18446744073709551615");
  CHECK(cfg_uint(rc, "seed") == 18446744073709551615ull);
  config_set(rc, "schedule.lr_drop1", "-3");
  CHECK(cfg_int(rc, "schedule.lr_drop1") == -3);
  config_set(rc, "schedule.lr", "2.5e-3");
  CHECK(cfg_double(rc, "schedule.lr") == 2.5e-3);
  config_set(rc, "backbone.widths", " 8, 16 ,32");
  CHECK(cfg_int_list(rc, "backbone.widths") == std::vector<std::int64_t>{8, 16, 32});
  for (const char* b : {"on", "true", "1"}) {
    config_set(rc, "loss.use_cc", b);
    CHECK(cfg_bool(rc, "loss.use_cc"));
  }
  for (const char* b : {"off", "false", "0"}) {
    config_set(rc, "loss.use_cc", b);
    CHECK_FALSE(cfg_bool(rc, "loss.use_cc"));
  }

  config_set(rc, "seed", "12x");
  CHECK_THROWS_WITH_AS(cfg_uint(rc, "seed"), Contains("expected an unsigned integer"),
                       ConfigError);
  config_set(rc, "seed", "-1");
  CHECK_THROWS_AS(cfg_uint(rc, "seed"), ConfigError);
  config_set(rc, "schedule.lr_drop1", "1.5");
  CHECK_THROWS_AS(cfg_int(rc, "schedule.lr_drop1"), ConfigError);
  config_set(rc, "schedule.lr", "fast");
  CHECK_THROWS_WITH_AS(cfg_double(rc, "schedule.lr"), Contains("expected a number"), ConfigError);
  config_set(rc, "loss.use_cc", "maybe");
  CHECK_THROWS_WITH_AS(cfg_bool(rc, "loss.use_cc"), Contains("expected on/off"), ConfigError);
  config_set(rc, "backbone.widths", "8,,16");
  CHECK_THROWS_AS(cfg_int_list(rc, "backbone.widths"), ConfigError);
  config_set(rc, "backbone.widths", "");
  CHECK_THROWS_AS(cfg_int_list(rc, "backbone.widths"), ConfigError);
}

TEST_CASE("assemblers build validated structs from the key groups") {
  RunConfig rc = default_config();

  SynthConfig s = synth_from(rc);
  CHECK(s.identities == 64);
  CHECK(s.images_per_modality == 10);
  CHECK(s.resolution == 32);
  CHECK(s.seed == 1);
  CHECK(s.a_noise == 0.03);

  BackboneConfig b = backbone_from(rc);
  CHECK(b.widths == std::vector<std::int64_t>{16, 16, 32, 64});
  CHECK(b.blocks == std::vector<int>{1, 2, 2, 2});
  CHECK(b.embedding_dim == 64);

  SearchSchedule sched = schedule_from(rc, "schedule.search_epochs");
  CHECK(sched.epochs == 12);
  CHECK(sched.lr == 0.01);
  CHECK(sched.beta1 == 0.5);
  config_set(rc, "schedule.retrain_epochs", "33");
  CHECK(schedule_from(rc, "schedule.retrain_epochs").epochs == 33);

  LossConfig l = losses_from(rc);
  CHECK(l.lambda1 == 0.05);
  CHECK(l.lambda2 == 5.0);
  CHECK(l.margin == 0.3);
  CHECK(l.use_cmmd);
  CHECK(l.use_cc);
}

TEST_CASE("assemblers reject out-of-domain values") {
  RunConfig rc = default_config();
  config_set(rc, "dataset.resolution", "4");
  CHECK_THROWS_AS(synth_from(rc), Error);

  rc = default_config();
  config_set(rc, "backbone.widths", "16,32");
  CHECK_THROWS_WITH_AS(backbone_from(rc), Contains("equal length"), ConfigError);
  config_set(rc, "backbone.blocks", "1,0");
  CHECK_THROWS_WITH_AS(backbone_from(rc), Contains(">= 1"), ConfigError);

  rc = default_config();
  config_set(rc, "schedule.lr", "0");
  CHECK_THROWS_AS(schedule_from(rc, "schedule.search_epochs"), Error);
  config_set(rc, "schedule.lr", "0.01");
  config_set(rc, "schedule.lr_drop1", "12");  // not below the epoch count
  CHECK_THROWS_AS(schedule_from(rc, "schedule.search_epochs"), Error);

  rc = default_config();
  config_set(rc, "loss.margin", "-1");
  CHECK_THROWS_AS(losses_from(rc), Error);
}

TEST_CASE("config files load from disk and missing files are IO errors") {
  std::string path = "test_config_tmp.cfg";
  {
    std::ofstream f(path);
    f << "# file comment\nseed = 42\nsweep.epochs = 2\n";
  }
  RunConfig rc = load_config_file(path);
  CHECK(cfg_uint(rc, "seed") == 42);
  CHECK(cfg_int(rc, "sweep.epochs") == 2);
  std::remove(path.c_str());
  CHECK_THROWS_AS(load_config_file("no_such_file.cfg"), IoError);
}
