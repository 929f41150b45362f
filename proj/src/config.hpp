#pragma once

// Flat key-value run configuration: defaults for every key, strict unknown-key
// rejection, canonical serialization for provenance and checkpoint identity.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "data.hpp"
#include "nn.hpp"
#include "search.hpp"

namespace cmnas {

/// Configuration mistakes: unknown keys, unparsable or out-of-domain values.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(what) {}
};

/// Filesystem failures in the command layer.
class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error(what) {}
};

/// Fully resolved configuration: every known key has a value.
struct RunConfig {
  std::map<std::string, std::string> values;
};

/// All known keys with their default values, in documentation order.
const std::vector<std::pair<std::string, std::string>>& config_registry();

RunConfig default_config();
/// Defaults overlaid with `key = value` lines; '#' comments and blank lines
/// are skipped. Unknown and duplicate keys are errors.
RunConfig parse_config_text(const std::string& text);
RunConfig load_config_file(const std::string& path);
/// Canonical text: registry order, `key = value` per line.
std::string config_text(const RunConfig& rc);

/// Sets one key; unknown keys are errors.
void config_set(RunConfig& rc, const std::string& key, const std::string& value);
const std::string& config_get(const RunConfig& rc, const std::string& key);

std::int64_t cfg_int(const RunConfig& rc, const std::string& key);
std::uint64_t cfg_uint(const RunConfig& rc, const std::string& key);
double cfg_double(const RunConfig& rc, const std::string& key);
bool cfg_bool(const RunConfig& rc, const std::string& key);  // on/off/true/false/1/0
std::vector<std::int64_t> cfg_int_list(const RunConfig& rc, const std::string& key);

/// Dataset keys -> generator config (modality transforms use the dial keys,
/// channel mixing stays at its defaults).
SynthConfig synth_from(const RunConfig& rc);
/// Backbone keys -> structural config. norm_mode, num_classes, and
/// input_resolution are left for the caller.
BackboneConfig backbone_from(const RunConfig& rc);
/// Schedule keys -> schedule; the epoch count comes from epochs_key
/// (schedule.search_epochs or schedule.retrain_epochs).
SearchSchedule schedule_from(const RunConfig& rc, const std::string& epochs_key);
LossConfig losses_from(const RunConfig& rc);

}  // namespace cmnas
