#ifndef FPG_H
#define FPG_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Estimators reachable through [`fpg_estimate`].
 */
typedef enum FpgMethod {
  FPG_METHOD_FPG = 0,
  FPG_METHOD_MODEL_BASED = 1,
  FPG_METHOD_IS = 2,
  FPG_METHOD_GPOMDP = 3,
  FPG_METHOD_REINFORCE = 4,
} FpgMethod;

/*
 Status codes; the numeric values match the command-line exit codes.
 */
typedef enum FpgStatus {
  FPG_STATUS_OK = 0,
  FPG_STATUS_NULL_POINTER = 1,
  FPG_STATUS_CONFIG = 2,
  FPG_STATUS_NUMERICAL = 3,
  FPG_STATUS_DEGENERATE = 4,
  FPG_STATUS_BUFFER_TOO_SMALL = 5,
  FPG_STATUS_PANIC = 6,
} FpgStatus;

typedef struct FpgDataset FpgDataset;

typedef struct FpgMdp FpgMdp;

/*
 A differentiable tabular softmax policy, or an epsilon-greedy mixture
 around one (usable only as a behavior policy).
 */
typedef struct FpgPolicy FpgPolicy;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failure on this thread, or NULL. The pointer stays
 valid until the next failing call on the same thread.
 */
const char *fpg_last_error(void);

/*
 Parses an MDP JSON document.

 # Safety
 `json` must be a NUL-terminated string and `out` a valid pointer.
 */
enum FpgStatus fpg_mdp_from_json(const char *json, struct FpgMdp **out);

/*
 Built-in environment by name (`frozenlake`, `cliffwalk`, `grid:RxC`,
 `random:SxA`). A zero horizon selects the environment default.

 # Safety
 `name` must be a NUL-terminated string and `out` a valid pointer.
 */
enum FpgStatus fpg_mdp_builtin(const char *name,
                               uintptr_t horizon,
                               uint64_t seed,
                               struct FpgMdp **out);

/*
 # Safety
 `mdp` must come from an `fpg_mdp_*` constructor and not be used afterwards.
 */
void fpg_mdp_free(struct FpgMdp *mdp);

/*
 Writes `[n_states, n_actions, horizon]` into `dims`.

 # Safety
 `mdp` must be a live handle and `dims` point to three writable values.
 */
enum FpgStatus fpg_mdp_dims(const struct FpgMdp *mdp, uintptr_t *dims);

/*
 Tabular softmax policy with `n_states * n_actions` logits, row-major.

 # Safety
 `theta` must point to `n_states * n_actions` readable values.
 */
enum FpgStatus fpg_policy_softmax(uintptr_t n_states,
                                  uintptr_t n_actions,
                                  const double *theta,
                                  struct FpgPolicy **out);

/*
 Near-optimal softmax target for `mdp` at inverse temperature `beta`.

 # Safety
 `mdp` must be a live handle and `out` a valid pointer.
 */
enum FpgStatus fpg_policy_target(const struct FpgMdp *mdp, double beta, struct FpgPolicy **out);

/*
 `(1 - epsilon) * base + epsilon * uniform`, for use as a behavior policy.

 # Safety
 `base` must be a live softmax handle and `out` a valid pointer.
 */
enum FpgStatus fpg_policy_epsilon_greedy(const struct FpgPolicy *base,
                                         double epsilon,
                                         struct FpgPolicy **out);

/*
 Number of parameters; zero for mixtures and null handles.

 # Safety
 `policy` must be a live handle or NULL.
 */
uintptr_t fpg_policy_n_params(const struct FpgPolicy *policy);

/*
 # Safety
 `policy` must come from an `fpg_policy_*` constructor and not be used afterwards.
 */
void fpg_policy_free(struct FpgPolicy *policy);

/*
 `k` episodes of `mdp` under `behavior`, episode `i` drawn from stream `i` of `seed`.

 # Safety
 Handles must be live and `out` a valid pointer.
 */
enum FpgStatus fpg_dataset_simulate(const struct FpgMdp *mdp,
                                    const struct FpgPolicy *behavior,
                                    uintptr_t k,
                                    uint64_t seed,
                                    struct FpgDataset **out);

/*
 Parses a JSONL dataset held in memory.

 # Safety
 `text` must be a NUL-terminated string and `out` a valid pointer.
 */
enum FpgStatus fpg_dataset_from_jsonl(const char *text, struct FpgDataset **out);

/*
 Number of episodes; zero for NULL.

 # Safety
 `ds` must be a live handle or NULL.
 */
uintptr_t fpg_dataset_len(const struct FpgDataset *ds);

/*
 # Safety
 `ds` must come from an `fpg_dataset_*` constructor and not be used afterwards.
 */
void fpg_dataset_free(struct FpgDataset *ds);

/*
 Gradient estimate with one-hot features written to `out[0..n_params]`.
 `mdp` supplies the initial distribution and may be NULL, in which case
 the dataset's empirical first states are used. `behavior` is required
 for the importance-sampling methods and ignored otherwise.

 # Safety
 Non-NULL handles must be live; `out` must hold `out_len` values.
 */
enum FpgStatus fpg_estimate(const struct FpgDataset *ds,
                            const struct FpgPolicy *target,
                            const struct FpgPolicy *behavior,
                            const struct FpgMdp *mdp,
                            enum FpgMethod method,
                            double lambda,
                            double *out,
                            uintptr_t out_len);

/*
 Exact value and gradient of `policy` on `mdp`. `value` may be NULL.

 # Safety
 Handles must be live; `grad` must hold `grad_len` values.
 */
enum FpgStatus fpg_exact_gradient(const struct FpgMdp *mdp,
                                  const struct FpgPolicy *policy,
                                  double *value,
                                  double *grad,
                                  uintptr_t grad_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FPG_H */
