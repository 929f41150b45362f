/* C interface to the cross-modality norm-search library. All functions are
 * thread-compatible: distinct threads may use distinct config handles, and
 * error messages are kept per thread. */

#ifndef CMNAS_H
#define CMNAS_H

#include <stddef.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum cmnas_status {
  CMNAS_OK = 0,
  CMNAS_ERR_INVALID_ARGUMENT = 1, /* null handle or pointer argument */
  CMNAS_ERR_CONFIG = 2,           /* unknown key, bad value, bad combination */
  CMNAS_ERR_IO = 3,               /* missing or unwritable file */
  CMNAS_ERR_NUMERIC = 4,          /* non-finite values in the computation */
  CMNAS_ERR_INTERNAL = 5,         /* anything else */
} cmnas_status;

/* Stable lowercase identifier for a status code, e.g. "config_error". */
const char* cmnas_status_name(cmnas_status status);

/* Message of this thread's most recent failure, "" after a success. The
 * pointer stays valid until this thread's next cmnas_* call. */
const char* cmnas_last_error(void);

/* A fully resolved run configuration: every key has a value. Keys and their
 * defaults are listed in the README; unknown keys are rejected. */
typedef struct cmnas_config cmnas_config;

/* Creates a handle holding the built-in defaults. */
cmnas_status cmnas_config_create(cmnas_config** out);
/* Creates a handle from a config file layered over the defaults. */
cmnas_status cmnas_config_load(const char* path, cmnas_config** out);
cmnas_status cmnas_config_set(cmnas_config* cfg, const char* key, const char* value);
/* Copies the value into buf (always NUL-terminated, truncating if needed).
 * When len is non-null it receives the full value length excluding the NUL.
 * buf may be null iff buf_len is 0, to query the length alone. */
cmnas_status cmnas_config_get(const cmnas_config* cfg, const char* key, char* buf, size_t buf_len,
                              size_t* len);
void cmnas_config_free(cmnas_config* cfg);

/* Commands. Each validates the configuration, runs, and writes its artifacts
 * into the configured output_dir (see the README for the file inventory). */
cmnas_status cmnas_run_search(const cmnas_config* cfg);      /* arch search */
cmnas_status cmnas_run_retrain(const cmnas_config* cfg);     /* fixed-arch training */
cmnas_status cmnas_run_eval(const cmnas_config* cfg);        /* CMC/mAP retrieval */
cmnas_status cmnas_run_sweep(const cmnas_config* cfg);       /* manual scheme sweep */
cmnas_status cmnas_run_export_arch(const cmnas_config* cfg); /* checkpoint -> arch file */

#ifdef __cplusplus
}
#endif

#endif /* CMNAS_H */
