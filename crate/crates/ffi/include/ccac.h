#ifndef CCAC_H
#define CCAC_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum CcacStatus {
  CCAC_STATUS_OK = 0,
  CCAC_STATUS_NULL_POINTER = 1,
  CCAC_STATUS_INVALID_ARGUMENT = 2,
  CCAC_STATUS_OUT_OF_BOUNDS = 3,
  CCAC_STATUS_IO = 4,
  CCAC_STATUS_FORMAT = 5,
  CCAC_STATUS_NUMERICAL = 6,
  CCAC_STATUS_PANIC = 7,
} CcacStatus;

// Car-following system.
typedef struct CcacEnv CcacEnv;

// Frozen actor, optionally wrapped by a shield.
typedef struct CcacPolicy CcacPolicy;

// Two-step chance-constraint projection.
typedef struct CcacShield CcacShield;

// Environment state: ego speed (m/s), lead speed (m/s), gap (m).
typedef struct CcacState {
  double v_e;
  double v_f;
  double eps;
} CcacState;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *ccac_version(void);

// Copies the calling thread's last error message into `buf` (truncated and
// NUL-terminated) and returns the full message length in bytes, excluding
// the terminator. Pass a null `buf` to query the length.
//
// # Safety
// `buf` must be null or point to at least `len` writable bytes.
size_t ccac_last_error_message(char *buf, size_t len);

// Creates the environment with default parameters.
//
// # Safety
// `out` must be a valid pointer to writable storage for one handle.
enum CcacStatus ccac_env_new_default(struct CcacEnv **out);

// Creates the environment described by the `[env]` section of an
// experiment config file.
//
// # Safety
// `config_path` must be a NUL-terminated string; `out` must be writable.
enum CcacStatus ccac_env_from_config(const char *config_path, struct CcacEnv **out);

// Advances one step with disturbance `xi`. Fails with `OutOfBounds` when
// the action or the disturbance leaves its closed range.
//
// # Safety
// `env` must be a live handle; `next` must be writable.
enum CcacStatus ccac_env_step(const struct CcacEnv *env,
                              struct CcacState state,
                              double action,
                              double xi,
                              struct CcacState *next);

// Per-step reward of a state.
//
// # Safety
// `env` must be a live handle; `reward` must be writable.
enum CcacStatus ccac_env_reward(const struct CcacEnv *env, struct CcacState state, double *reward);

// Writes whether the state satisfies the gap constraint.
//
// # Safety
// `env` must be a live handle; `safe` must be writable.
enum CcacStatus ccac_env_is_safe(const struct CcacEnv *env, struct CcacState state, bool *safe);

// Draws one disturbance from the environment's noise law, deterministically
// from `seed`.
//
// # Safety
// `env` must be a live handle; `xi` must be writable.
enum CcacStatus ccac_env_sample_disturbance(const struct CcacEnv *env, uint64_t seed, double *xi);

// # Safety
// `env` must be null or a handle not yet freed.
void ccac_env_free(struct CcacEnv *env);

// Loads the policy of one seed from a training run directory. Shielding
// runs come back wrapped by their shield.
//
// # Safety
// `run_dir` must be a NUL-terminated string; `out` must be writable.
enum CcacStatus ccac_policy_load_run(const char *run_dir, uint64_t seed, struct CcacPolicy **out);

// Loads a bare actor parameter file (no shield).
//
// # Safety
// `params_path` must be a NUL-terminated string; `out` must be writable.
enum CcacStatus ccac_policy_load_params(const char *params_path, struct CcacPolicy **out);

// Deterministic action for a state.
//
// # Safety
// `policy` must be a live handle not used concurrently; `action` must be
// writable.
enum CcacStatus ccac_policy_act(struct CcacPolicy *policy, struct CcacState state, double *action);

// Writes whether the policy applies a shield after the actor.
//
// # Safety
// `policy` must be a live handle; `shielded` must be writable.
enum CcacStatus ccac_policy_is_shielded(const struct CcacPolicy *policy, bool *shielded);

// # Safety
// `policy` must be null or a handle not yet freed.
void ccac_policy_free(struct CcacPolicy *policy);

// Builds a shield for `env` with joint risk `delta` split over `horizon`
// decisions.
//
// # Safety
// `env` must be a live handle; `out` must be writable.
enum CcacStatus ccac_shield_new(const struct CcacEnv *env,
                                double delta,
                                size_t horizon,
                                struct CcacShield **out);

// Projects a proposed action onto the admissible set of `state`.
//
// # Safety
// `shield` must be a live handle; `action` must be writable.
enum CcacStatus ccac_shield_project(const struct CcacShield *shield,
                                    struct CcacState state,
                                    double proposed,
                                    double *action);

// Largest admissible acceleration at `state` before clamping to the action
// range.
//
// # Safety
// `shield` must be a live handle; `threshold` must be writable.
enum CcacStatus ccac_shield_threshold(const struct CcacShield *shield,
                                      struct CcacState state,
                                      double *threshold);

// # Safety
// `shield` must be null or a handle not yet freed.
void ccac_shield_free(struct CcacShield *shield);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CCAC_H */
