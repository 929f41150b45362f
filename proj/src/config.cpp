#include "config.hpp"

#include <algorithm>
#include <cerrno>
#include <cstdlib>
#include <fstream>
#include <sstream>

namespace cmnas {

const std::vector<std::pair<std::string, std::string>>& config_registry() {
  static const std::vector<std::pair<std::string, std::string>> reg = {
      {"seed", "1"},
      {"output_dir", "out"},
      {"resume", "off"},

      {"dataset.identities", "64"},
      {"dataset.images_per_modality", "10"},
      {"dataset.resolution", "32"},
      {"dataset.primitives", "5"},
      {"dataset.seed", "1"},
      {"dataset.identity_base", "0"},
      {"dataset.a_brightness", "0.05"},
      {"dataset.a_noise", "0.03"},
      {"dataset.b_pattern", "0.25"},
      {"dataset.b_noise", "0.03"},

      {"backbone.widths", "16,16,32,64"},
      {"backbone.blocks", "1,2,2,2"},
      {"backbone.embedding_dim", "64"},

      {"schedule.search_epochs", "12"},
      {"schedule.retrain_epochs", "12"},
      {"schedule.lr", "0.01"},
      {"schedule.lr_drop1", "0"},
      {"schedule.lr_drop2", "0"},
      {"schedule.weight_decay", "0.0005"},
      {"schedule.beta1", "0.5"},
      {"schedule.beta2", "0.999"},
      {"schedule.alpha_lr", "0.001"},
      {"schedule.alpha_weight_decay", "0"},
      {"schedule.batch_p", "8"},
      {"schedule.batch_k", "4"},
      {"schedule.split_ratio", "0.8"},

      {"loss.lambda1", "0.05"},
      {"loss.lambda2", "5"},
      {"loss.margin", "0.3"},
      {"loss.use_cmmd", "on"},
      {"loss.use_cc", "on"},

      {"protocol.directions", "both"},
      {"protocol.shots", "1"},
      {"protocol.repeats", "10"},

      {"retrain.scheme", "arch_file"},
      {"retrain.arch_file", ""},

      {"eval.checkpoint", ""},
      {"export.checkpoint", ""},

      {"sweep.mode", "single_block"},
      {"sweep.units", "both"},
      {"sweep.fixed_block", ""},
      {"sweep.epochs", "4"},

      // Filled by commands when a network is built; stored in checkpoints so
      // a network can be reconstructed from its checkpoint alone.
      {"resolved.num_classes", ""},
      {"resolved.input_resolution", ""},
      {"resolved.norm_mode", ""},
  };
  return reg;
}

RunConfig default_config() {
  RunConfig rc;
  for (const auto& [k, v] : config_registry()) rc.values[k] = v;
  return rc;
}

namespace {

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

void check_known(const std::string& key) {
  for (const auto& [k, v] : config_registry())
    if (k == key) return;
  throw ConfigError("config: unknown key '" + key + "'");
}

}  // namespace

void config_set(RunConfig& rc, const std::string& key, const std::string& value) {
  check_known(key);
  rc.values[key] = value;
}

const std::string& config_get(const RunConfig& rc, const std::string& key) {
  auto it = rc.values.find(key);
  if (it == rc.values.end()) throw ConfigError("config: unknown key '" + key + "'");
  return it->second;
}

RunConfig parse_config_text(const std::string& text) {
  RunConfig rc = default_config();
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  std::map<std::string, int> seen;
  while (std::getline(is, line)) {
    ++lineno;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    std::size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config: line " + std::to_string(lineno) + " is not 'key = value'");
    std::string key = trim(t.substr(0, eq));
    std::string value = trim(t.substr(eq + 1));
    check_known(key);
    if (seen.count(key))
      throw ConfigError("config: duplicate key '" + key + "' on line " + std::to_string(lineno));
    seen[key] = lineno;
    rc.values[key] = value;
  }
  return rc;
}

RunConfig load_config_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("config: cannot open " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_config_text(ss.str());
}

std::string config_text(const RunConfig& rc) {
  std::ostringstream os;
  for (const auto& [k, d] : config_registry()) {
    auto it = rc.values.find(k);
    os << k << " = " << (it == rc.values.end() ? d : it->second) << "\n";
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Typed getters
// ---------------------------------------------------------------------------

namespace {

[[noreturn]] void bad_value(const std::string& key, const std::string& value,
                            const char* expected) {
  throw ConfigError("config: key '" + key + "' has value '" + value + "', expected " + expected);
}

// Domain checks live with their structs and throw plain errors; values that
// came from a config are still configuration mistakes.
template <typename F>
void check_domain(F&& validate) {
  try {
    validate();
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
}

}  // namespace

std::int64_t cfg_int(const RunConfig& rc, const std::string& key) {
  const std::string& v = config_get(rc, key);
  errno = 0;
  char* end = nullptr;
  long long x = std::strtoll(v.c_str(), &end, 10);
  if (errno != 0 || end == v.c_str() || *end != '\0') bad_value(key, v, "an integer");
  return x;
}

std::uint64_t cfg_uint(const RunConfig& rc, const std::string& key) {
  const std::string& v = config_get(rc, key);
  errno = 0;
  char* end = nullptr;
  unsigned long long x = std::strtoull(v.c_str(), &end, 10);
  if (errno != 0 || end == v.c_str() || *end != '\0' || v.find('-') != std::string::npos)
    bad_value(key, v, "an unsigned integer");
  return x;
}

double cfg_double(const RunConfig& rc, const std::string& key) {
  const std::string& v = config_get(rc, key);
  errno = 0;
  char* end = nullptr;
  double x = std::strtod(v.c_str(), &end);
  if (errno != 0 || end == v.c_str() || *end != '\0') bad_value(key, v, "a number");
  return x;
}

bool cfg_bool(const RunConfig& rc, const std::string& key) {
  const std::string& v = config_get(rc, key);
  if (v == "on" || v == "true" || v == "1") return true;
  if (v == "off" || v == "false" || v == "0") return false;
  bad_value(key, v, "on/off");
}

std::vector<std::int64_t> cfg_int_list(const RunConfig& rc, const std::string& key) {
  const std::string& v = config_get(rc, key);
  std::vector<std::int64_t> out;
  std::istringstream is(v);
  std::string item;
  while (std::getline(is, item, ',')) {
    item = trim(item);
    errno = 0;
    char* end = nullptr;
    long long x = std::strtoll(item.c_str(), &end, 10);
    if (errno != 0 || end == item.c_str() || *end != '\0')
      bad_value(key, v, "a comma-separated integer list");
    out.push_back(x);
  }
  if (out.empty()) bad_value(key, v, "a non-empty integer list");
  return out;
}

// ---------------------------------------------------------------------------
// Assemblers
// ---------------------------------------------------------------------------

SynthConfig synth_from(const RunConfig& rc) {
  SynthConfig s;
  s.identities = static_cast<int>(cfg_int(rc, "dataset.identities"));
  s.images_per_modality = static_cast<int>(cfg_int(rc, "dataset.images_per_modality"));
  s.resolution = cfg_int(rc, "dataset.resolution");
  s.primitives = static_cast<int>(cfg_int(rc, "dataset.primitives"));
  s.seed = cfg_uint(rc, "dataset.seed");
  s.identity_base = static_cast<int>(cfg_int(rc, "dataset.identity_base"));
  s.a_brightness = cfg_double(rc, "dataset.a_brightness");
  s.a_noise = cfg_double(rc, "dataset.a_noise");
  s.b_pattern = cfg_double(rc, "dataset.b_pattern");
  s.b_noise = cfg_double(rc, "dataset.b_noise");
  check_domain([&] { validate_synth_config(s); });
  return s;
}

BackboneConfig backbone_from(const RunConfig& rc) {
  BackboneConfig b;
  b.widths = cfg_int_list(rc, "backbone.widths");
  std::vector<std::int64_t> blocks = cfg_int_list(rc, "backbone.blocks");
  if (blocks.size() != b.widths.size())
    throw ConfigError("config: backbone.widths and backbone.blocks must have equal length");
  b.blocks.clear();
  for (std::int64_t x : blocks) {
    if (x < 1) throw ConfigError("config: backbone.blocks entries must be >= 1");
    b.blocks.push_back(static_cast<int>(x));
  }
  b.embedding_dim = cfg_int(rc, "backbone.embedding_dim");
  if (b.embedding_dim < 1) throw ConfigError("config: backbone.embedding_dim must be >= 1");
  return b;
}

SearchSchedule schedule_from(const RunConfig& rc, const std::string& epochs_key) {
  SearchSchedule s;
  s.epochs = static_cast<int>(cfg_int(rc, epochs_key));
  s.lr = cfg_double(rc, "schedule.lr");
  s.lr_drop1 = static_cast<int>(cfg_int(rc, "schedule.lr_drop1"));
  s.lr_drop2 = static_cast<int>(cfg_int(rc, "schedule.lr_drop2"));
  s.weight_decay = cfg_double(rc, "schedule.weight_decay");
  s.beta1 = cfg_double(rc, "schedule.beta1");
  s.beta2 = cfg_double(rc, "schedule.beta2");
  s.alpha_lr = cfg_double(rc, "schedule.alpha_lr");
  s.alpha_weight_decay = cfg_double(rc, "schedule.alpha_weight_decay");
  check_domain([&] { validate_schedule(s); });
  return s;
}

LossConfig losses_from(const RunConfig& rc) {
  LossConfig l;
  l.lambda1 = cfg_double(rc, "loss.lambda1");
  l.lambda2 = cfg_double(rc, "loss.lambda2");
  l.margin = cfg_double(rc, "loss.margin");
  l.use_cmmd = cfg_bool(rc, "loss.use_cmmd");
  l.use_cc = cfg_bool(rc, "loss.use_cc");
  check_domain([&] { validate_loss_config(l); });
  return l;
}

}  // namespace cmnas
