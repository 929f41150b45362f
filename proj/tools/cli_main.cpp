// Command-line front end. Talks to the library exclusively through the C API
// so it doubles as a living example of external usage.

#include <CLI11.hpp>
#include <cmnas.h>

#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

namespace {

struct ConfigGuard {
  cmnas_config* cfg = nullptr;
  ~ConfigGuard() { cmnas_config_free(cfg); }
};

int fail(cmnas_status st) {
  std::fprintf(stderr, "cmnas: %s: %s\n", cmnas_status_name(st), cmnas_last_error());
  return static_cast<int>(st);
}

std::string output_dir_of(const cmnas_config* cfg) {
  char buf[4096];
  if (cmnas_config_get(cfg, "output_dir", buf, sizeof(buf), nullptr) != CMNAS_OK) return "?";
  return buf;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cross-modality norm-sharing search: two-phase NAS over BN sharing decisions"};
  app.require_subcommand(1);

  std::string config_path;
  std::uint64_t seed = 0;
  std::string out_dir;
  std::vector<std::string> overrides;
  app.add_option("--config", config_path, "Config file of 'key = value' lines");
  auto* seed_opt = app.add_option("--seed", seed, "Override the seed key");
  auto* out_opt = app.add_option("--out", out_dir, "Override the output_dir key");
  app.add_option("--set", overrides, "Override any config key as key=value (repeatable)");

  struct Verb {
    const char* name;
    const char* help;
    cmnas_status (*run)(const cmnas_config*);
    CLI::App* sub = nullptr;
  };
  Verb verbs[] = {
      {"search", "Phase 1: search which norm layers to share across modalities",
       cmnas_run_search},
      {"retrain", "Phase 2: train a fixed architecture from scratch", cmnas_run_retrain},
      {"eval", "CMC/mAP retrieval evaluation of a checkpoint", cmnas_run_eval},
      {"sweep", "Train and score every manual separation scheme", cmnas_run_sweep},
      {"export-arch", "Write a checkpoint's architecture as an annotated bitstring file",
       cmnas_run_export_arch},
  };
  for (Verb& v : verbs) {
    v.sub = app.add_subcommand(v.name, v.help);
    v.sub->fallthrough();  // lets `cmnas search --config f` bind the global flags
  }

  CLI11_PARSE(app, argc, argv);

  ConfigGuard guard;
  cmnas_status st = config_path.empty() ? cmnas_config_create(&guard.cfg)
                                        : cmnas_config_load(config_path.c_str(), &guard.cfg);
  if (st != CMNAS_OK) return fail(st);

  if (*seed_opt) {
    st = cmnas_config_set(guard.cfg, "seed", std::to_string(seed).c_str());
    if (st != CMNAS_OK) return fail(st);
  }
  if (*out_opt) {
    st = cmnas_config_set(guard.cfg, "output_dir", out_dir.c_str());
    if (st != CMNAS_OK) return fail(st);
  }
  for (const std::string& kv : overrides) {
    std::size_t eq = kv.find('=');
    if (eq == std::string::npos) {
      std::fprintf(stderr, "cmnas: invalid_argument: --set expects key=value, got '%s'\n",
                   kv.c_str());
      return static_cast<int>(CMNAS_ERR_INVALID_ARGUMENT);
    }
    st = cmnas_config_set(guard.cfg, kv.substr(0, eq).c_str(), kv.substr(eq + 1).c_str());
    if (st != CMNAS_OK) return fail(st);
  }

  for (const Verb& v : verbs) {
    if (!v.sub->parsed()) continue;
    st = v.run(guard.cfg);
    if (st != CMNAS_OK) return fail(st);
    std::printf("cmnas %s: ok, artifacts in %s/\n", v.name, output_dir_of(guard.cfg).c_str());
    return 0;
  }
  return 0;  // unreachable: require_subcommand(1)
}
