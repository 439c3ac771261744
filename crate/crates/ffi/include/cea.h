#ifndef CEA_H
#define CEA_H

/* Generated by cbindgen. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum CeaStatus {
  CEA_STATUS_OK = 0,
  CEA_STATUS_NULL_POINTER = 1,
  CEA_STATUS_INVALID_ARGUMENT = 2,
  CEA_STATUS_SHAPE = 3,
  CEA_STATUS_CONFIG = 4,
  CEA_STATUS_STATE = 5,
  CEA_STATUS_NUMERIC = 6,
  CEA_STATUS_IO = 7,
  CEA_STATUS_SNAPSHOT = 8,
  CEA_STATUS_PANIC = 9,
} CeaStatus;

/**
 * Prioritized replay buffer with its own sampling generator.
 */
typedef struct CeaPerBuffer CeaPerBuffer;

/**
 * Pretrained transition model with its own sampling generator.
 */
typedef struct CeaSta CeaSta;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *cea_last_error(void);

/**
 * Releases a string returned by this library.
 *
 * # Safety
 * `s` must come from this library and not have been freed already.
 */
void cea_string_free(char *s);

/**
 * # Safety
 * `out` must be a valid pointer to receive the handle.
 */
enum CeaStatus cea_per_buffer_new(size_t capacity,
                                  double alpha,
                                  double beta,
                                  double prior_eps,
                                  uint64_t seed,
                                  struct CeaPerBuffer **out_buffer);

/**
 * # Safety
 * `buffer` must be null or a handle from [`cea_per_buffer_new`].
 */
void cea_per_buffer_free(struct CeaPerBuffer *buffer);

/**
 * Stores a transition with a discrete action; writes the slot index.
 *
 * # Safety
 * `s` and `s_next` must point to `dim` doubles.
 */
enum CeaStatus cea_per_buffer_push_discrete(struct CeaPerBuffer *buffer,
                                            const double *s,
                                            const double *s_next,
                                            size_t dim,
                                            size_t action,
                                            double reward,
                                            bool done,
                                            bool counterfactual,
                                            size_t *out_index);

/**
 * Stores a transition with a continuous action of `action_dim` components.
 *
 * # Safety
 * `s` and `s_next` must point to `dim` doubles, `action` to `action_dim`.
 */
enum CeaStatus cea_per_buffer_push_continuous(struct CeaPerBuffer *buffer,
                                              const double *s,
                                              const double *s_next,
                                              size_t dim,
                                              const double *action,
                                              size_t action_dim,
                                              double reward,
                                              bool done,
                                              bool counterfactual,
                                              size_t *out_index);

/**
 * Number of stored transitions.
 *
 * # Safety
 * `buffer` must be a live handle; `out_len` writable.
 */
enum CeaStatus cea_per_buffer_len(struct CeaPerBuffer *buffer, size_t *out_len);

/**
 * Draws `batch` slot indices and their normalized importance weights.
 *
 * # Safety
 * `out_indices` and `out_weights` must hold `batch` elements.
 */
enum CeaStatus cea_per_buffer_sample(struct CeaPerBuffer *buffer,
                                     size_t batch,
                                     size_t *out_indices,
                                     double *out_weights);

/**
 * Sets priorities from TD errors for `n` sampled indices.
 *
 * # Safety
 * `indices` and `td_errors` must hold `n` elements.
 */
enum CeaStatus cea_per_buffer_update(struct CeaPerBuffer *buffer,
                                     const size_t *indices,
                                     const double *td_errors,
                                     size_t n);

/**
 * Probability that one draw returns slot `index`.
 *
 * # Safety
 * `buffer` must be a live handle; `out_probability` writable.
 */
enum CeaStatus cea_per_buffer_probability(struct CeaPerBuffer *buffer,
                                          size_t index,
                                          double *out_probability);

/**
 * Loads a checkpoint written by `cea sta-pretrain`.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out_model` writable.
 */
enum CeaStatus cea_sta_load(const char *path, uint64_t seed, struct CeaSta **out_model);

/**
 * # Safety
 * `model` must be null or a handle from [`cea_sta_load`].
 */
void cea_sta_free(struct CeaSta *model);

/**
 * State dimension of the model.
 *
 * # Safety
 * `model` must be a live handle; `out_dim` writable.
 */
enum CeaStatus cea_sta_state_dim(const struct CeaSta *model, size_t *out_dim);

/**
 * Samples a next state for `s` under discrete action `action`.
 *
 * # Safety
 * `s` and `out_next` must hold `dim` doubles.
 */
enum CeaStatus cea_sta_generate_discrete(struct CeaSta *model,
                                         const double *s,
                                         size_t dim,
                                         size_t action,
                                         double *out_next);

/**
 * Samples a next state for `s` under a continuous action.
 *
 * # Safety
 * `s` and `out_next` must hold `dim` doubles, `action` `action_dim`.
 */
enum CeaStatus cea_sta_generate_continuous(struct CeaSta *model,
                                           const double *s,
                                           size_t dim,
                                           const double *action,
                                           size_t action_dim,
                                           double *out_next);

/**
 * Places `n_samples` entropy-maximizing candidates around `n_known` points
 * inside the box `bounds` (`[low0, high0, low1, high1, ...]`).
 *
 * # Safety
 * `known` holds `n_known * dim`, `bounds` `2 * dim`, `out_candidates`
 * `n_samples * dim` doubles.
 */
enum CeaStatus cea_kde_optimize(const double *known,
                                size_t n_known,
                                size_t dim,
                                const double *bounds,
                                size_t n_samples,
                                uint64_t seed,
                                double *out_candidates);

/**
 * Trapezoid entropy of the Gaussian KDE over `n` centers with bandwidth `h`.
 *
 * # Safety
 * `centers` holds `n * dim`, `bounds` `2 * dim` doubles.
 */
enum CeaStatus cea_kde_entropy(const double *centers,
                               size_t n,
                               size_t dim,
                               double bandwidth,
                               const double *bounds,
                               size_t grid_m,
                               double *out_entropy);

/**
 * Exponential moving average of `n` values.
 *
 * # Safety
 * `series` and `out_smoothed` must hold `n` doubles.
 */
enum CeaStatus cea_ema_smooth(const double *series, size_t n, double factor, double *out_smoothed);

/**
 * Closest-transition-pair matching under Euclidean distance. Writes up to
 * `n_cf` matches, closest first, and their count to `out_count`.
 *
 * # Safety
 * `cf_next` holds `n_cf * dim`, `real_next` `n_real * dim`, `real_rewards`
 * `n_real` doubles; each output array holds `n_cf` elements.
 */
enum CeaStatus cea_ctp_match(const double *cf_next,
                             size_t n_cf,
                             const double *real_next,
                             const double *real_rewards,
                             size_t n_real,
                             size_t dim,
                             double threshold_ratio,
                             size_t *out_cf,
                             size_t *out_real,
                             double *out_distance,
                             double *out_reward,
                             size_t *out_count);

/**
 * Runs an experiment described by TOML text, writes its output files and
 * returns the summary as a JSON string (free with [`cea_string_free`]).
 *
 * # Safety
 * `config_toml` must be NUL-terminated; `out_json` writable.
 */
enum CeaStatus cea_run_experiment(const char *config_toml, const char *label, char **out_json);

/**
 * Library version, static storage.
 */
const char *cea_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CEA_H */
