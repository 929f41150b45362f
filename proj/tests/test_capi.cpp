// Exercises the shared library strictly through its C header, the way an
// external caller would.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmnas.h>

#include <cstring>
#include <filesystem>
#include <string>

using doctest::Contains;
namespace fs = std::filesystem;

namespace {

std::string get_value(const cmnas_config* cfg, const char* key) {
  char buf[256];
  size_t len = 0;
  REQUIRE(cmnas_config_get(cfg, key, buf, sizeof(buf), &len) == CMNAS_OK);
  REQUIRE(len < sizeof(buf));
  return std::string(buf, len);
}

void set_or_die(cmnas_config* cfg, const char* key, const char* value) {
  REQUIRE(cmnas_config_set(cfg, key, value) == CMNAS_OK);
}

cmnas_config* tiny_run_config(const char* out_dir) {
  cmnas_config* cfg = nullptr;
  REQUIRE(cmnas_config_create(&cfg) == CMNAS_OK);
  set_or_die(cfg, "output_dir", out_dir);
  set_or_die(cfg, "dataset.identities", "8");
  set_or_die(cfg, "dataset.images_per_modality", "4");
  set_or_die(cfg, "dataset.resolution", "16");
  set_or_die(cfg, "backbone.widths", "8,12");
  set_or_die(cfg, "backbone.blocks", "1,1");
  set_or_die(cfg, "backbone.embedding_dim", "16");
  set_or_die(cfg, "schedule.search_epochs", "1");
  set_or_die(cfg, "schedule.retrain_epochs", "1");
  set_or_die(cfg, "schedule.batch_p", "2");
  set_or_die(cfg, "schedule.batch_k", "2");
  set_or_die(cfg, "schedule.split_ratio", "0.75");
  set_or_die(cfg, "protocol.repeats", "2");
  return cfg;
}

}  // namespace

TEST_CASE("status codes have stable names") {
  CHECK(std::string(cmnas_status_name(CMNAS_OK)) == "ok");
  CHECK(std::string(cmnas_status_name(CMNAS_ERR_INVALID_ARGUMENT)) == "invalid_argument");
  CHECK(std::string(cmnas_status_name(CMNAS_ERR_CONFIG)) == "config_error");
  CHECK(std::string(cmnas_status_name(CMNAS_ERR_IO)) == "io_error");
  CHECK(std::string(cmnas_status_name(CMNAS_ERR_NUMERIC)) == "numeric_error");
  CHECK(std::string(cmnas_status_name(CMNAS_ERR_INTERNAL)) == "internal_error");
  CHECK(std::string(cmnas_status_name(static_cast<cmnas_status>(99))) == "unknown_status");
}

TEST_CASE("config handles get, set, and report errors") {
  cmnas_config* cfg = nullptr;
  REQUIRE(cmnas_config_create(&cfg) == CMNAS_OK);
  CHECK(get_value(cfg, "seed") == "1");
  CHECK(get_value(cfg, "loss.lambda2") == "5");

  CHECK(cmnas_config_set(cfg, "seed", "9") == CMNAS_OK);
  CHECK(std::string(cmnas_last_error()).empty());
  CHECK(get_value(cfg, "seed") == "9");

  CHECK(cmnas_config_set(cfg, "sed", "9") == CMNAS_ERR_CONFIG);
  CHECK_MESSAGE(std::string(cmnas_last_error()).find("unknown key 'sed'") != std::string::npos,
                cmnas_last_error());
  CHECK(cmnas_config_get(cfg, "sed", nullptr, 0, nullptr) == CMNAS_ERR_CONFIG);

  // Truncating read: the full length is still reported.
  char small[4];
  size_t len = 0;
  REQUIRE(cmnas_config_set(cfg, "output_dir", "a_long_directory") == CMNAS_OK);
  REQUIRE(cmnas_config_get(cfg, "output_dir", small, sizeof(small), &len) == CMNAS_OK);
  CHECK(std::string(small) == "a_l");
  CHECK(len == std::strlen("a_long_directory"));
  // Length-only query.
  len = 0;
  REQUIRE(cmnas_config_get(cfg, "output_dir", nullptr, 0, &len) == CMNAS_OK);
  CHECK(len == std::strlen("a_long_directory"));

  cmnas_config_free(cfg);
  cmnas_config_free(nullptr);  // must be a no-op
}

TEST_CASE("null arguments are rejected up front") {
  CHECK(cmnas_config_create(nullptr) == CMNAS_ERR_INVALID_ARGUMENT);
  CHECK(std::string(cmnas_last_error()).find("must not be null") != std::string::npos);
  CHECK(cmnas_config_load(nullptr, nullptr) == CMNAS_ERR_INVALID_ARGUMENT);
  cmnas_config* cfg = nullptr;
  CHECK(cmnas_config_load(nullptr, &cfg) == CMNAS_ERR_INVALID_ARGUMENT);
  CHECK(cfg == nullptr);
  CHECK(cmnas_config_set(nullptr, "seed", "1") == CMNAS_ERR_INVALID_ARGUMENT);
  CHECK(cmnas_config_get(nullptr, "seed", nullptr, 0, nullptr) == CMNAS_ERR_INVALID_ARGUMENT);
  CHECK(cmnas_run_search(nullptr) == CMNAS_ERR_INVALID_ARGUMENT);
  CHECK(cmnas_run_retrain(nullptr) == CMNAS_ERR_INVALID_ARGUMENT);
  CHECK(cmnas_run_eval(nullptr) == CMNAS_ERR_INVALID_ARGUMENT);
  CHECK(cmnas_run_sweep(nullptr) == CMNAS_ERR_INVALID_ARGUMENT);
  CHECK(cmnas_run_export_arch(nullptr) == CMNAS_ERR_INVALID_ARGUMENT);
}

TEST_CASE("config files load through the C API") {
  cmnas_config* cfg = nullptr;
  CHECK(cmnas_config_load("no_such_file.cfg", &cfg) == CMNAS_ERR_IO);
  CHECK(cfg == nullptr);
  CHECK(std::string(cmnas_last_error()).find("cannot open") != std::string::npos);
}

TEST_CASE("a search, retrain, eval pipeline runs through the C API") {
  fs::remove_all("capi_out");
  cmnas_config* cfg = tiny_run_config("capi_out");

  REQUIRE_MESSAGE(cmnas_run_search(cfg) == CMNAS_OK, cmnas_last_error());
  CHECK(fs::exists("capi_out/arch.txt"));
  CHECK(std::string(cmnas_last_error()).empty());

  set_or_die(cfg, "retrain.scheme", "arch_file");
  set_or_die(cfg, "retrain.arch_file", "capi_out/arch.txt");
  REQUIRE_MESSAGE(cmnas_run_retrain(cfg) == CMNAS_OK, cmnas_last_error());
  CHECK(fs::exists("capi_out/retrain.ckpt"));

  set_or_die(cfg, "eval.checkpoint", "capi_out/retrain.ckpt");
  REQUIRE_MESSAGE(cmnas_run_eval(cfg) == CMNAS_OK, cmnas_last_error());
  CHECK(fs::exists("capi_out/eval.csv"));

  set_or_die(cfg, "export.checkpoint", "capi_out/retrain.ckpt");
  REQUIRE_MESSAGE(cmnas_run_export_arch(cfg) == CMNAS_OK, cmnas_last_error());
  CHECK(fs::exists("capi_out/arch_export.txt"));

  // Failures map onto the advertised status codes.
  set_or_die(cfg, "eval.checkpoint", "");
  CHECK(cmnas_run_eval(cfg) == CMNAS_ERR_CONFIG);
  set_or_die(cfg, "eval.checkpoint", "missing.ckpt");
  CHECK(cmnas_run_eval(cfg) == CMNAS_ERR_IO);
  CHECK(std::string(cmnas_last_error()).find("missing.ckpt") != std::string::npos);
  set_or_die(cfg, "schedule.lr", "0");
  CHECK(cmnas_run_search(cfg) == CMNAS_ERR_CONFIG);

  cmnas_config_free(cfg);
}
