#ifndef LPROBE_H
#define LPROBE_H

/* Generated from the lprobe-ffi crate; edit the Rust source, not this file. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Training objective selector; used as the `objective` field of
 * [`LpTrainConfig`] and as the argument of [`lp_train_config_default`].
 */
typedef enum LpObjective {
  LpObjective_Baseline = 0,
  LpObjective_Sam = 1,
  LpObjective_Fisher = 2,
  LpObjective_Consistency = 3,
} LpObjective;

/**
 * Result code of every API call. `Ok` is zero; everything else is an error.
 */
typedef enum LpStatus {
  LpStatus_Ok = 0,
  /**
   * A required pointer argument was null.
   */
  LpStatus_NullPointer = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  LpStatus_InvalidUtf8 = 2,
  /**
   * A configuration value or index was rejected.
   */
  LpStatus_InvalidArgument = 3,
  /**
   * Dataset generation, loading, or saving failed.
   */
  LpStatus_DataError = 4,
  /**
   * Model construction, loading, or saving failed.
   */
  LpStatus_ModelError = 5,
  /**
   * Training failed (divergence included).
   */
  LpStatus_TrainError = 6,
  /**
   * A measure could not be evaluated.
   */
  LpStatus_MeasureError = 7,
  /**
   * A caller-provided buffer was too small for the result.
   */
  LpStatus_BufferTooSmall = 8,
  /**
   * An internal panic was caught at the boundary.
   */
  LpStatus_Panic = 9,
} LpStatus;

/**
 * Opaque handle to a trained or loaded classifier.
 */
typedef struct LpModel LpModel;

/**
 * Opaque handle to a generated domain suite.
 */
typedef struct LpSuite LpSuite;

/**
 * Training hyperparameters. `objective` takes [`LpObjective`] values;
 * it is a plain integer so that arbitrary input can be rejected with a
 * status code instead of being undefined behavior.
 */
typedef struct LpTrainConfig {
  uint32_t objective;
  size_t epochs;
  size_t batch_size;
  double learning_rate;
  double weight_decay;
  uint64_t seed;
  /**
   * SAM perturbation radius; read only by the SAM objective.
   */
  double sam_rho;
  /**
   * Penalty weight; read only by the Fisher objective.
   */
  double fisher_lambda;
  /**
   * KL bridge weight; read only by the consistency objective.
   */
  double consistency_lambda;
  /**
   * Noise std of the second view; read only by the consistency objective.
   */
  double view_noise_sigma;
} LpTrainConfig;

/**
 * Difference-sharpness parameters, mirroring the core configuration.
 */
typedef struct LpSharpnessConfig {
  /**
   * Per-tensor RMS multiplier of the Gaussian weight noise.
   */
  double noise_scale;
  /**
   * Gradient-ascent step coefficient.
   */
  double ascent_coeff;
  /**
   * Projection radius factor.
   */
  double radius_lambda;
  /**
   * Rows per seeded evaluation batch.
   */
  size_t batch_size;
  uint64_t seed;
} LpSharpnessConfig;

/**
 * Alpha-sharpness search parameters, mirroring the core configuration.
 */
typedef struct LpAlphaConfig {
  /**
   * Worst-case loss budget above the loss at the measured point.
   */
  double loss_target_offset;
  /**
   * Projected-ascent steps per feasibility probe.
   */
  size_t ascent_steps;
  /**
   * Bisection iterations over the radius.
   */
  size_t binary_search_iters;
  double alpha_lo;
  double alpha_hi;
  uint64_t seed;
} LpAlphaConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copy the most recent error message on this thread into `buf` as a
 * NUL-terminated string, truncating if needed. Returns the full message
 * length in bytes (excluding the NUL), regardless of how much was copied;
 * call again with a larger buffer to get the whole message. A null `buf`
 * or zero `len` copies nothing.
 *
 * # Safety
 * `buf`, when non-null, must point to `len` writable bytes.
 */
size_t lp_last_error_message(char *buf, size_t len);

/**
 * Release a string returned by this library (for example by
 * [`lp_measure_csv`]). Null is ignored.
 *
 * # Safety
 * `s` must be a pointer previously returned by a function of this library
 * that documents this deallocator, and must not have been freed already.
 */
void lp_string_free(char *s);

/**
 * Write the default training configuration for `objective` (an
 * [`LpObjective`] value) into `out`.
 *
 * # Safety
 * `out` must point to writable memory for one [`LpTrainConfig`].
 */
enum LpStatus lp_train_config_default(uint32_t objective, struct LpTrainConfig *out);

/**
 * Write the default difference-sharpness configuration into `out`.
 *
 * # Safety
 * `out` must point to writable memory for one [`LpSharpnessConfig`].
 */
enum LpStatus lp_sharpness_config_default(uint64_t seed, struct LpSharpnessConfig *out);

/**
 * Write the default alpha-sharpness configuration into `out`.
 *
 * # Safety
 * `out` must point to writable memory for one [`LpAlphaConfig`].
 */
enum LpStatus lp_alpha_config_default(uint64_t seed, struct LpAlphaConfig *out);

/**
 * The seed the default measurement configurations use.
 */
uint64_t lp_default_measure_seed(void);

/**
 * Generate the default suite: 3 classes, 16 input dimensions,
 * 2000/500/500 anchor samples, one anchor plus fourteen shifted domains.
 *
 * # Safety
 * `out` must point to writable memory for one `LpSuite*`.
 */
enum LpStatus lp_suite_default(struct LpSuite **out);

/**
 * Generate a suite with the default domain geometry but custom sizes.
 * Passing zero for any of `num_classes`, `input_dim`, `train`, `val`, or
 * `test` keeps that value at its default (3 / 16 / 2000 / 500 / 500).
 *
 * # Safety
 * `out` must point to writable memory for one `LpSuite*`.
 */
enum LpStatus lp_suite_generate(size_t num_classes,
                                size_t input_dim,
                                size_t train,
                                size_t val,
                                size_t test,
                                uint64_t prototypes_seed,
                                uint64_t gen_seed,
                                struct LpSuite **out);

/**
 * Load a suite previously written by [`lp_suite_save`] from `dir`.
 *
 * # Safety
 * `dir` must be a NUL-terminated string; `out` must point to writable
 * memory for one `LpSuite*`.
 */
enum LpStatus lp_suite_load(const char *dir, struct LpSuite **out);

/**
 * Write `suite` (manifest plus one CSV per split and domain) into `dir`,
 * creating it if needed.
 *
 * # Safety
 * `suite` must be a live handle from this library; `dir` must be a
 * NUL-terminated string.
 */
enum LpStatus lp_suite_save(const struct LpSuite *suite, const char *dir);

/**
 * Release a suite handle. Null is ignored.
 *
 * # Safety
 * `suite` must be a pointer returned by a suite constructor of this
 * library, not freed before.
 */
void lp_suite_free(struct LpSuite *suite);

/**
 * Feature dimensionality of the suite.
 *
 * # Safety
 * `suite` must be a live handle; `out` must be writable.
 */
enum LpStatus lp_suite_input_dim(const struct LpSuite *suite, size_t *out);

/**
 * Number of classes of the suite.
 *
 * # Safety
 * `suite` must be a live handle; `out` must be writable.
 */
enum LpStatus lp_suite_num_classes(const struct LpSuite *suite, size_t *out);

/**
 * Number of shifted evaluation domains (the anchor is not counted).
 *
 * # Safety
 * `suite` must be a live handle; `out` must be writable.
 */
enum LpStatus lp_suite_num_domains(const struct LpSuite *suite, size_t *out);

/**
 * Copy the name of shifted domain `index` into `buf` as a NUL-terminated
 * string. Fails with `BufferTooSmall` when `len` cannot hold it.
 *
 * # Safety
 * `suite` must be a live handle; `buf` must point to `len` writable bytes.
 */
enum LpStatus lp_suite_domain_name(const struct LpSuite *suite,
                                   size_t index,
                                   char *buf,
                                   size_t len);

/**
 * Train a fresh model on the suite's anchor domain.
 *
 * `hidden_dims`/`hidden_len` describe the hidden layer widths (`hidden_len`
 * of zero trains a linear model; `hidden_dims` may then be null). The
 * initialization is seeded by `init_seed`. When `best_val_accuracy` is
 * non-null it receives the best anchor-validation accuracy; the returned
 * model carries the weights of that best epoch.
 *
 * # Safety
 * `suite` must be a live handle; `config` must point to a valid
 * [`LpTrainConfig`]; `hidden_dims`, when non-null, must point to
 * `hidden_len` readable values; `out` must be writable.
 */
enum LpStatus lp_model_train(const struct LpSuite *suite,
                             const struct LpTrainConfig *config,
                             const size_t *hidden_dims,
                             size_t hidden_len,
                             uint64_t init_seed,
                             double *best_val_accuracy,
                             struct LpModel **out);

/**
 * Load a model checkpoint written by [`lp_model_save`].
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum LpStatus lp_model_load(const char *path, struct LpModel **out);

/**
 * Save the model (architecture, current and initial weights) to `path`.
 *
 * # Safety
 * `model` must be a live handle; `path` must be a NUL-terminated string.
 */
enum LpStatus lp_model_save(const struct LpModel *model, const char *path);

/**
 * Release a model handle. Null is ignored.
 *
 * # Safety
 * `model` must be a pointer returned by a model constructor of this
 * library, not freed before.
 */
void lp_model_free(struct LpModel *model);

/**
 * Total number of weights (including biases) of the model.
 *
 * # Safety
 * `model` must be a live handle; `out` must be writable.
 */
enum LpStatus lp_model_param_count(const struct LpModel *model, size_t *out);

/**
 * Zero-shot accuracy of the model on shifted domain `index`.
 *
 * # Safety
 * `model` and `suite` must be live handles; `out` must be writable.
 */
enum LpStatus lp_model_domain_accuracy(const struct LpModel *model,
                                       const struct LpSuite *suite,
                                       size_t index,
                                       double *out);

/**
 * Mean classification margin of the model on shifted domain `index`.
 *
 * # Safety
 * `model` and `suite` must be live handles; `out` must be writable.
 */
enum LpStatus lp_model_domain_margin(const struct LpModel *model,
                                     const struct LpSuite *suite,
                                     size_t index,
                                     double *out);

/**
 * Difference sharpness of the model on shifted domain `index`, evaluated
 * on the same seeded batch the CSV report uses for that domain.
 *
 * # Safety
 * `model` and `suite` must be live handles; `config` must point to a valid
 * [`LpSharpnessConfig`]; `out` must be writable.
 */
enum LpStatus lp_model_phi_difference(const struct LpModel *model,
                                      const struct LpSuite *suite,
                                      size_t index,
                                      const struct LpSharpnessConfig *config,
                                      double *out);

/**
 * Alpha sharpness of the model on the seeded anchor-validation batch the
 * CSV report uses. Writes the sharpness into `out_phi` and the selected
 * radius into `out_alpha` (both NaN on failure), and the failure flag into
 * `out_failed`; a failed search still returns `Ok`.
 *
 * # Safety
 * `model` and `suite` must be live handles; `sharpness` and `alpha` must
 * point to valid configurations; the three out-pointers must be writable.
 */
enum LpStatus lp_model_phi_alpha(const struct LpModel *model,
                                 const struct LpSuite *suite,
                                 const struct LpSharpnessConfig *sharpness,
                                 const struct LpAlphaConfig *alpha,
                                 double *out_phi,
                                 double *out_alpha,
                                 bool *out_failed);

/**
 * Euclidean distance of the model's weights from their initialization.
 *
 * # Safety
 * `model` must be a live handle; `out` must be writable.
 */
enum LpStatus lp_model_frobenius_distance(const struct LpModel *model, double *out);

/**
 * Measure the model across every shifted domain of the suite and return
 * the full report as a CSV string (header line included; identical to the
 * measurement CSV the command-line tool writes). The returned string must
 * be released with [`lp_string_free`]. `model_id` and `objective` label
 * the rows; `sweep` adds one sharpness column per candidate noise scale.
 *
 * # Safety
 * `model` and `suite` must be live handles; `model_id` and `objective`
 * must be NUL-terminated strings; `sharpness` and `alpha` must point to
 * valid configurations; `out` must be writable.
 */
enum LpStatus lp_measure_csv(const struct LpModel *model,
                             const struct LpSuite *suite,
                             const char *model_id,
                             const char *objective,
                             uint64_t seed,
                             const struct LpSharpnessConfig *sharpness,
                             const struct LpAlphaConfig *alpha,
                             bool sweep,
                             char **out);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* LPROBE_H */
