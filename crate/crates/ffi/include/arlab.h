#ifndef ARLAB_H
#define ARLAB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

/**
 * Result codes of the C interface.
 */
typedef enum {
  ARLAB_STATUS_OK = 0,
  ARLAB_STATUS_NULL_POINTER = 1,
  ARLAB_STATUS_INVALID_ARGUMENT = 2,
  ARLAB_STATUS_CONFIG_ERROR = 3,
  ARLAB_STATUS_GENERATION_FAILURE = 4,
  ARLAB_STATUS_IO_ERROR = 5,
  ARLAB_STATUS_PARSE_ERROR = 6,
  ARLAB_STATUS_INTERNAL = 7,
} ArlabStatus;

/**
 * A finite episodic MDP.
 */
typedef struct ArlabMdp ArlabMdp;

/**
 * Results of an experiment run.
 */
typedef struct ArlabSummary ArlabSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *arlab_last_error(void);

void arlab_clear_error(void);

/**
 * Releases a string returned by this library. NULL is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void arlab_string_free(char *s);

/**
 * Random MDP with Dirichlet kernel rows and uniform rewards in `[0, 1]`.
 *
 * # Safety
 * `out` must be valid for a write.
 */
ArlabStatus arlab_mdp_random(size_t n_states,
                             size_t n_actions,
                             size_t horizon,
                             uint64_t seed,
                             ArlabMdp **out);

/**
 * Parses an MDP from its JSON document.
 *
 * # Safety
 * `json` must be a NUL-terminated string; `out` must be valid for a write.
 */
ArlabStatus arlab_mdp_from_json(const char *json, ArlabMdp **out);

/**
 * Serializes an MDP; release the result with `arlab_string_free`.
 *
 * # Safety
 * `mdp` must be a live handle; `out` must be valid for a write.
 */
ArlabStatus arlab_mdp_to_json(const ArlabMdp *mdp, char **out);

/**
 * `V*_1(s_1)`.
 *
 * # Safety
 * `mdp` must be a live handle; `out` must be valid for a write.
 */
ArlabStatus arlab_mdp_optimal_value(const ArlabMdp *mdp, double *out);

/**
 * Writes the number of states, actions and the horizon.
 *
 * # Safety
 * `mdp` must be a live handle; the out pointers must be valid for writes.
 */
ArlabStatus arlab_mdp_shape(const ArlabMdp *mdp,
                            size_t *n_states,
                            size_t *n_actions,
                            size_t *horizon);

/**
 * # Safety
 * `mdp` must be NULL or a handle that has not been freed.
 */
void arlab_mdp_free(ArlabMdp *mdp);

/**
 * Runs an experiment described by a TOML document.
 *
 * # Safety
 * `config_toml` must be a NUL-terminated string; `out` must be valid for a write.
 */
ArlabStatus arlab_experiment_run(const char *config_toml, ArlabSummary **out);

/**
 * # Safety
 * `summary` must be a live handle; `out` must be valid for a write.
 */
ArlabStatus arlab_summary_seed_count(const ArlabSummary *summary, size_t *out);

/**
 * Final cumulative regret of the `position`-th seed.
 *
 * # Safety
 * `summary` must be a live handle; `out` must be valid for a write.
 */
ArlabStatus arlab_summary_final_regret(const ArlabSummary *summary, size_t position, double *out);

/**
 * # Safety
 * `summary` must be a live handle; `out` must be valid for a write.
 */
ArlabStatus arlab_summary_median_regret(const ArlabSummary *summary, double *out);

/**
 * Lock-in rate, or NaN for scenarios without a lock-in notion.
 *
 * # Safety
 * `summary` must be a live handle; `out` must be valid for a write.
 */
ArlabStatus arlab_summary_lock_in_rate(const ArlabSummary *summary, double *out);

/**
 * Hex SHA-256 digest of the result tables; release with `arlab_string_free`.
 *
 * # Safety
 * `summary` must be a live handle; `out` must be valid for a write.
 */
ArlabStatus arlab_summary_digest(const ArlabSummary *summary, char **out);

/**
 * Full summary document; release with `arlab_string_free`.
 *
 * # Safety
 * `summary` must be a live handle; `out` must be valid for a write.
 */
ArlabStatus arlab_summary_to_json(const ArlabSummary *summary, char **out);

/**
 * # Safety
 * `summary` must be NULL or a handle that has not been freed.
 */
void arlab_summary_free(ArlabSummary *summary);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ARLAB_H */
