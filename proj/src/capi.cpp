#include "cmnas.h"

#include <cstring>
#include <string>

#include "commands.hpp"

struct cmnas_config {
  cmnas::RunConfig rc;
};

namespace {

thread_local std::string g_last_error;

// Exceptions must not cross the C boundary; every entry point funnels its
// body through here and converts to a status code plus thread-local message.
template <typename F>
cmnas_status guarded(F&& body) noexcept {
  try {
    body();
    g_last_error.clear();
    return CMNAS_OK;
  } catch (const cmnas::ConfigError& e) {
    g_last_error = e.what();
    return CMNAS_ERR_CONFIG;
  } catch (const cmnas::IoError& e) {
    g_last_error = e.what();
    return CMNAS_ERR_IO;
  } catch (const cmnas::Error& e) {
    g_last_error = e.what();
    // Numeric blowups surface as "non-finite" diagnostics from the core.
    return g_last_error.find("non-finite") != std::string::npos ? CMNAS_ERR_NUMERIC
                                                                : CMNAS_ERR_INTERNAL;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return CMNAS_ERR_INTERNAL;
  }
}

cmnas_status null_argument(const char* what) noexcept {
  try {
    g_last_error = std::string(what) + " must not be null";
  } catch (...) {
    return CMNAS_ERR_INTERNAL;
  }
  return CMNAS_ERR_INVALID_ARGUMENT;
}

}  // namespace

extern "C" {

const char* cmnas_status_name(cmnas_status status) {
  switch (status) {
    case CMNAS_OK: return "ok";
    case CMNAS_ERR_INVALID_ARGUMENT: return "invalid_argument";
    case CMNAS_ERR_CONFIG: return "config_error";
    case CMNAS_ERR_IO: return "io_error";
    case CMNAS_ERR_NUMERIC: return "numeric_error";
    case CMNAS_ERR_INTERNAL: return "internal_error";
  }
  return "unknown_status";
}

const char* cmnas_last_error(void) { return g_last_error.c_str(); }

cmnas_status cmnas_config_create(cmnas_config** out) {
  if (!out) return null_argument("out");
  *out = nullptr;
  return guarded([&] { *out = new cmnas_config{cmnas::default_config()}; });
}

cmnas_status cmnas_config_load(const char* path, cmnas_config** out) {
  if (!out) return null_argument("out");
  *out = nullptr;
  if (!path) return null_argument("path");
  return guarded([&] { *out = new cmnas_config{cmnas::load_config_file(path)}; });
}

cmnas_status cmnas_config_set(cmnas_config* cfg, const char* key, const char* value) {
  if (!cfg) return null_argument("cfg");
  if (!key) return null_argument("key");
  if (!value) return null_argument("value");
  return guarded([&] { cmnas::config_set(cfg->rc, key, value); });
}

cmnas_status cmnas_config_get(const cmnas_config* cfg, const char* key, char* buf, size_t buf_len,
                              size_t* len) {
  if (!cfg) return null_argument("cfg");
  if (!key) return null_argument("key");
  if (!buf && buf_len > 0) return null_argument("buf");
  return guarded([&] {
    const std::string& v = cmnas::config_get(cfg->rc, key);
    if (len) *len = v.size();
    if (buf_len > 0) {
      size_t n = v.size() < buf_len - 1 ? v.size() : buf_len - 1;
      std::memcpy(buf, v.data(), n);
      buf[n] = '\0';
    }
  });
}

void cmnas_config_free(cmnas_config* cfg) { delete cfg; }

cmnas_status cmnas_run_search(const cmnas_config* cfg) {
  if (!cfg) return null_argument("cfg");
  return guarded([&] { cmnas::cmd_search(cfg->rc); });
}

cmnas_status cmnas_run_retrain(const cmnas_config* cfg) {
  if (!cfg) return null_argument("cfg");
  return guarded([&] { cmnas::cmd_retrain(cfg->rc); });
}

cmnas_status cmnas_run_eval(const cmnas_config* cfg) {
  if (!cfg) return null_argument("cfg");
  return guarded([&] { cmnas::cmd_eval(cfg->rc); });
}

cmnas_status cmnas_run_sweep(const cmnas_config* cfg) {
  if (!cfg) return null_argument("cfg");
  return guarded([&] { cmnas::cmd_sweep(cfg->rc); });
}

cmnas_status cmnas_run_export_arch(const cmnas_config* cfg) {
  if (!cfg) return null_argument("cfg");
  return guarded([&] { cmnas::cmd_export_arch(cfg->rc); });
}

}  // extern "C"
