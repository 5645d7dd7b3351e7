#ifndef WAREHOUSE_MARL_H
#define WAREHOUSE_MARL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  WM_STATUS_OK = 0,
  WM_STATUS_NULL_POINTER = 1,
  WM_STATUS_INVALID_ARGUMENT = 2,
  WM_STATUS_BUFFER_TOO_SMALL = 3,
  WM_STATUS_CONFIG = 4,
  WM_STATUS_ENVIRONMENT = 5,
  WM_STATUS_EPISODE_DONE = 6,
  WM_STATUS_CHECKPOINT = 7,
  WM_STATUS_INCOMPATIBLE = 8,
  WM_STATUS_IO = 9,
  WM_STATUS_INTERNAL = 10,
} WmStatus;

// Simulator instance.
typedef struct WmEnv WmEnv;

// Greedy policy plus its per-episode recurrent state.
typedef struct WmPolicy WmPolicy;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the most recent failure on this thread. The pointer stays
// valid until the next failing call on the same thread.
const char *wm_last_error(void);

// Number of joint actions for `n_agents` agents with five actions each.
// Returns 0 when the count does not fit in 64 bits.
uint64_t wm_joint_action_count(size_t n_agents);

// Linear exploration schedule, constant at `end` after `anneal_steps`.
double wm_epsilon_at(uint64_t step, double start, double end, uint64_t anneal_steps);

// Creates an environment from a named preset such as `"tiny-2ag"`.
//
// # Safety
// `name` must be a NUL-terminated string and `out` a writable pointer.
WmStatus wm_env_new_preset(const char *name, WmEnv **out);

// Creates an environment from layout text: a `height width` header, then
// rows of `.` (floor), `S` (shelf slot) and `G` (goal).
//
// # Safety
// `layout` must be a NUL-terminated string and `out` a writable pointer.
WmStatus wm_env_new_layout(const char *layout, size_t n_agents, WmEnv **out);

// # Safety
// `env` must come from a `wm_env_new_*` call and not be used afterwards.
void wm_env_free(WmEnv *env);

// # Safety
// `env` must be a live handle or null.
size_t wm_env_n_agents(const WmEnv *env);

// Length of one agent's observation.
//
// # Safety
// `env` must be a live handle or null.
size_t wm_env_obs_dim(const WmEnv *env);

// # Safety
// `env` must be a live handle or null.
size_t wm_env_state_dim(const WmEnv *env);

// Resets the episode and writes `n_agents * obs_dim` observation values.
//
// # Safety
// `obs` must point to at least `obs_len` writable doubles.
WmStatus wm_env_reset(WmEnv *env, uint64_t seed, double *obs, size_t obs_len);

// Applies one joint action. `actions` holds `n_actions` indices in
// `0..5` (noop, forward, left, right, toggle load).
//
// # Safety
// Pointers must be valid for the stated lengths; `reward` and `done` must
// be writable.
WmStatus wm_env_step(WmEnv *env,
                     const uint32_t *actions,
                     size_t n_actions,
                     double *reward,
                     bool *done,
                     double *obs,
                     size_t obs_len);

// Writes the global state vector used by centralized training.
//
// # Safety
// `state` must point to at least `len` writable doubles.
WmStatus wm_env_global_state(const WmEnv *env, double *state, size_t len);

// ASCII picture of the grid. Release with [`wm_string_free`]; null on
// failure.
//
// # Safety
// `env` must be a live handle or null.
char *wm_env_render(const WmEnv *env);

// # Safety
// `s` must come from this library and not be used afterwards.
void wm_string_free(char *s);

// Loads a greedy policy from a checkpoint for the given environment.
//
// # Safety
// `path` must be a NUL-terminated string, `env` a live handle and `out`
// writable.
WmStatus wm_policy_load(const char *path, const WmEnv *env, WmPolicy **out);

// Clears recurrent state; call at every episode start. `seed` only
// matters for the random policy.
//
// # Safety
// `policy` must be a live handle.
WmStatus wm_policy_begin_episode(WmPolicy *policy, uint64_t seed);

// Greedy joint action for the concatenated observations.
//
// # Safety
// `obs` must hold `obs_len` doubles and `actions` `n_actions` writable
// slots.
WmStatus wm_policy_act(WmPolicy *policy,
                       const double *obs,
                       size_t obs_len,
                       uint32_t *actions,
                       size_t n_actions);

// # Safety
// `policy` must come from [`wm_policy_load`] and not be used afterwards.
void wm_policy_free(WmPolicy *policy);

// Greedy test return of a checkpoint on its training environment.
//
// # Safety
// `path` must be a NUL-terminated string; `mean` and `std` writable.
WmStatus wm_evaluate(const char *path, size_t episodes, uint64_t seed, double *mean, double *std);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* WAREHOUSE_MARL_H */
