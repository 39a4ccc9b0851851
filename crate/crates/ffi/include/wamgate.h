/* C ABI for the wamgate library. Generated; do not edit by hand. */

#ifndef WAMGATE_H
#define WAMGATE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Gate policy selector for evaluation.
enum WamGatePolicy
#ifdef __cplusplus
  : int32_t
#endif // __cplusplus
 {
  // One shared scalar clock for every latent.
  WAM_GATE_POLICY_SHARED = 0,
  // The fixed monotone per-frame shape.
  WAM_GATE_POLICY_HANDCRAFTED = 1,
  // A trained gating network, applied deterministically.
  WAM_GATE_POLICY_LEARNED = 2,
};
#ifndef __cplusplus
typedef int32_t WamGatePolicy;
#endif // __cplusplus

// Status codes returned by every fallible `wam_*` function.
enum WamStatus
#ifdef __cplusplus
  : int32_t
#endif // __cplusplus
 {
  WAM_STATUS_OK = 0,
  // Array or tensor shape mismatch.
  WAM_STATUS_SHAPE = 1,
  // A computation produced NaN or infinity.
  WAM_STATUS_NON_FINITE = 2,
  // Autodiff graph misuse.
  WAM_STATUS_AUTODIFF = 3,
  // Invalid configuration value or combination.
  WAM_STATUS_CONFIG = 4,
  // Malformed or incompatible checkpoint.
  WAM_STATUS_CHECKPOINT = 5,
  // Malformed or incompatible dataset.
  WAM_STATUS_DATASET = 6,
  // Environment misuse (bad task id, dimension mismatch).
  WAM_STATUS_ENV = 7,
  // Training-loop failure.
  WAM_STATUS_TRAIN = 8,
  // Artifact verification failure.
  WAM_STATUS_VERIFY = 9,
  // Filesystem error.
  WAM_STATUS_IO = 10,
  // JSON (de)serialization error.
  WAM_STATUS_JSON = 11,
  // A required pointer argument was NULL.
  WAM_STATUS_NULL_POINTER = 100,
  // A string argument was not valid UTF-8.
  WAM_STATUS_UTF8 = 101,
  // An internal panic was caught at the boundary.
  WAM_STATUS_PANIC = 102,
};
#ifndef __cplusplus
typedef int32_t WamStatus;
#endif // __cplusplus

// Opaque trained video-action denoiser (model dimensions + parameters).
typedef struct WamBackbone WamBackbone;

// Opaque run configuration (environment, model, training, eval sections).
typedef struct WamConfig WamConfig;

// Opaque trained gating policy network.
typedef struct WamGpn WamGpn;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *wam_version(void);

// Copy the calling thread's most recent error message into `buf` (up to
// `cap - 1` bytes plus a NUL terminator) and return the full message length
// in bytes, excluding the terminator. Returns 0 when no error is recorded.
// `buf` may be NULL (with `cap` 0) to query the required length.
//
// # Safety
// If non-NULL, `buf` must be valid for writes of `cap` bytes.
size_t wam_last_error(char *buf, size_t cap);

// Release a string returned through an out-parameter.
//
// # Safety
// `s` must be NULL or a pointer previously returned by this library.
void wam_string_free(char *s);

// Create a configuration with every field at its default.
//
// # Safety
// `out` must be valid for writes.
WamStatus wam_config_default(struct WamConfig **out);

// Parse a configuration from a JSON document. Unknown keys are rejected;
// omitted sections keep their defaults.
//
// # Safety
// `json` must be a NUL-terminated string; `out` must be valid for writes.
WamStatus wam_config_from_json(const char *json, struct WamConfig **out);

// Load a configuration from a JSON file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be valid for writes.
WamStatus wam_config_load(const char *path, struct WamConfig **out);

// Serialize a configuration to pretty-printed JSON. The returned string is
// owned by the caller; release it with [`wam_string_free`].
//
// # Safety
// `cfg` must be a live configuration handle; `out_json` must be valid for
// writes.
WamStatus wam_config_to_json(const struct WamConfig *cfg, char **out_json);

// Number of tasks in the configured environment (the length needed for
// [`wam_eval_success`]'s output buffer).
//
// # Safety
// `cfg` must be a live configuration handle; `out` must be valid for writes.
WamStatus wam_config_task_count(const struct WamConfig *cfg, size_t *out);

// Release a configuration handle.
//
// # Safety
// `cfg` must be NULL or a handle returned by a `wam_config_*` constructor,
// not previously freed.
void wam_config_free(struct WamConfig *cfg);

// Generate the expert demonstration dataset configured in `cfg` and write
// it into `out_dir` (created if missing).
//
// # Safety
// `cfg` must be a live configuration handle; `out_dir` a NUL-terminated
// string.
WamStatus wam_generate_demos(const struct WamConfig *cfg, const char *out_dir);

// Train the denoising backbone on a demo dataset directory and write the
// checkpoint to `out_path`. With `shared_times`, training uses one scalar
// timestep per sample instead of independent per-latent timesteps.
//
// # Safety
// `cfg` must be a live configuration handle; `data_dir` and `out_path`
// NUL-terminated strings.
WamStatus wam_train_backbone(const struct WamConfig *cfg,
                             const char *data_dir,
                             const char *out_path,
                             bool shared_times);

// Load a backbone checkpoint.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be valid for writes.
WamStatus wam_backbone_load(const char *path, struct WamBackbone **out);

// Release a backbone handle.
//
// # Safety
// `h` must be NULL or a handle from [`wam_backbone_load`], not previously
// freed.
void wam_backbone_free(struct WamBackbone *h);

// Train the gating policy network against task reward with the backbone
// frozen, writing the checkpoint to `out_path`.
//
// # Safety
// `cfg` and `backbone` must be live handles; `out_path` a NUL-terminated
// string.
WamStatus wam_train_gpn(const struct WamConfig *cfg,
                        const struct WamBackbone *backbone,
                        const char *out_path);

// Load a gating-policy checkpoint.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be valid for writes.
WamStatus wam_gpn_load(const char *path, struct WamGpn **out);

// Release a gating-policy handle.
//
// # Safety
// `h` must be NULL or a handle from [`wam_gpn_load`], not previously freed.
void wam_gpn_free(struct WamGpn *h);

// Roll out `episodes_per_task` episodes per task (0 uses the configured
// default) under the selected gate policy and write one success rate per
// task into `out_rates[0..task_count]`. `gpn` is required for
// `WAM_GATE_POLICY_LEARNED` and ignored otherwise. Episode seeds derive
// from `seed`, so identical calls reproduce identical rates.
//
// # Safety
// `cfg` and `bb` must be live handles; `gpn` NULL or a live handle;
// `out_rates` valid for `out_len` writes.
WamStatus wam_eval_success(const struct WamConfig *cfg,
                           const struct WamBackbone *bb,
                           const struct WamGpn *gpn,
                           WamGatePolicy policy,
                           uint32_t episodes_per_task,
                           uint64_t seed,
                           double *out_rates,
                           size_t out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* WAMGATE_H */
