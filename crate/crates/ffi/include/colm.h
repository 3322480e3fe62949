#ifndef COLM_H
#define COLM_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

#define COLM_OK 0

#define COLM_ERR_NULL 1

#define COLM_ERR_UTF8 2

// Output buffer too small; the required length is still written.
#define COLM_ERR_BUFFER 3

#define COLM_ERR_PANIC 4

// A problem instance.
typedef struct ColmInstance ColmInstance;

// Sequence-model parameters used for decoding.
typedef struct ColmModel ColmModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failure on this thread; valid until the next call
// that fails.
const char *colm_last_error(void);

// # Safety
// `kind` must be a NUL-terminated string and `out_instance` writable.
int32_t colm_instance_generate(const char *kind,
                               uintptr_t n,
                               uint64_t seed,
                               ColmInstance **out_instance);

// Parses one JSON instance line.
//
// # Safety
// `json` must be a NUL-terminated string and `out_instance` writable.
int32_t colm_instance_from_json(const char *json, ColmInstance **out_instance);

// # Safety
// `instance` must come from this library and not be freed twice.
void colm_instance_free(ColmInstance *instance);

// Size of the action space (one past the largest action index).
//
// # Safety
// `instance` must be a live handle and `out_size` writable.
int32_t colm_instance_action_space(const ColmInstance *instance, uintptr_t *out_size);

// Solves with the expert: exact up to `exact_limit` nodes, heuristic beyond.
//
// # Safety
// `instance` must be a live handle; `actions` must hold `cap` entries;
// `out_len` and `out_objective` must be writable.
int32_t colm_expert_solve(const ColmInstance *instance,
                          uintptr_t exact_limit,
                          uintptr_t *actions,
                          uintptr_t cap,
                          uintptr_t *out_len,
                          double *out_objective);

// Replays `actions` with independent constraint checks. Infeasible input
// is not an error: `out_feasible` is set to 0.
//
// # Safety
// `instance` must be a live handle; `actions` must hold `len` entries.
int32_t colm_verify(const ColmInstance *instance,
                    const uintptr_t *actions,
                    uintptr_t len,
                    bool *out_feasible,
                    double *out_objective);

// Randomly initialized model from a named preset (`default`, `desk`, `tiny`).
//
// # Safety
// `preset` must be a NUL-terminated string and `out_model` writable.
int32_t colm_model_init(const char *preset, uint64_t seed, ColmModel **out_model);

// Loads a checkpoint directory; fails with the compatibility code when its
// vocabulary differs from the tokenizer's.
//
// # Safety
// `dir` must be a NUL-terminated path and `out_model` writable.
int32_t colm_model_load(const char *dir, ColmModel **out_model);

// # Safety
// `model` must come from this library and not be freed twice.
void colm_model_free(ColmModel *model);

// Decodes a solution. `samples <= 1` decodes greedily; otherwise the best
// of `samples` rollouts at `temperature` is returned.
//
// # Safety
// Handles must be live; `actions` must hold `cap` entries; `out_len` and
// `out_objective` must be writable.
int32_t colm_solve(const ColmModel *model,
                   const ColmInstance *instance,
                   uintptr_t samples,
                   double temperature,
                   uint64_t seed,
                   uintptr_t *actions,
                   uintptr_t cap,
                   uintptr_t *out_len,
                   double *out_objective);

// # Safety
// `out_value` must be writable.
int32_t colm_mu_law_encode(double x, double *out_value);

// # Safety
// `out_token` must be writable.
int32_t colm_continuous_to_token(double x, uint32_t *out_token);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* COLM_H */
