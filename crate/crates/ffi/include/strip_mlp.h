#ifndef STRIP_MLP_H
#define STRIP_MLP_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum StripMlpStatus {
  STRIP_MLP_STATUS_OK = 0,
  STRIP_MLP_STATUS_NULL_POINTER = 1,
  STRIP_MLP_STATUS_INVALID_ARGUMENT = 2,
  STRIP_MLP_STATUS_CONFIG = 3,
  STRIP_MLP_STATUS_DIMENSION = 4,
  STRIP_MLP_STATUS_NON_FINITE = 5,
  STRIP_MLP_STATUS_IO = 6,
  STRIP_MLP_STATUS_CHECKPOINT = 7,
  STRIP_MLP_STATUS_DATA = 8,
  STRIP_MLP_STATUS_PANIC = 9,
} StripMlpStatus;

/**
 * A built model and its parameters.
 */
typedef struct StripMlpModel StripMlpModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on this thread.
 */
const char *strip_mlp_last_error(void);

/**
 * Builds a named variant (`tstar`, `t`, `s`, `b`).
 *
 * # Safety
 * `variant` must be a NUL-terminated string and `out` a valid pointer.
 */
enum StripMlpStatus strip_mlp_model_new(const char *variant,
                                        size_t num_classes,
                                        size_t image_size,
                                        uint64_t seed,
                                        struct StripMlpModel **out);

/**
 * Builds a model from a TOML table of model fields.
 *
 * # Safety
 * `config_toml` must be a NUL-terminated string and `out` a valid pointer.
 */
enum StripMlpStatus strip_mlp_model_from_toml(const char *config_toml,
                                              uint64_t seed,
                                              struct StripMlpModel **out);

/**
 * # Safety
 * `model` must come from a constructor of this library and not be used afterwards.
 */
void strip_mlp_model_free(struct StripMlpModel *model);

/**
 * Number of trainable scalars.
 *
 * # Safety
 * `model` and `out` must be valid pointers.
 */
enum StripMlpStatus strip_mlp_model_param_count(const struct StripMlpModel *model, uint64_t *out);

/**
 * Input channels, image side and class count.
 *
 * # Safety
 * All pointers must be valid.
 */
enum StripMlpStatus strip_mlp_model_dims(const struct StripMlpModel *model,
                                         size_t *in_channels,
                                         size_t *image_size,
                                         size_t *num_classes);

/**
 * Eval-mode logits for `batch` images in NCHW order.
 * `input_len` must equal `batch * in_channels * image_size^2` and
 * `logits_len` must equal `batch * num_classes`.
 *
 * # Safety
 * `input` and `logits` must point to at least `input_len` / `logits_len` doubles.
 */
enum StripMlpStatus strip_mlp_model_forward(const struct StripMlpModel *model,
                                            const double *input,
                                            size_t input_len,
                                            size_t batch,
                                            double *logits,
                                            size_t logits_len);

/**
 * Writes the parameters to a checkpoint file.
 *
 * # Safety
 * `model` must be valid and `path` NUL-terminated.
 */
enum StripMlpStatus strip_mlp_model_save(const struct StripMlpModel *model, const char *path);

/**
 * Replaces the parameters with those of a checkpoint file.
 *
 * # Safety
 * `model` must be valid and `path` NUL-terminated.
 */
enum StripMlpStatus strip_mlp_model_load(struct StripMlpModel *model, const char *path);

/**
 * The stage-1 / stage-4 token-mixing cost report as JSON.
 *
 * # Safety
 * `out` must be a valid pointer; free the result with [`strip_mlp_string_free`].
 */
enum StripMlpStatus strip_mlp_table1_json(char **out);

/**
 * Per-part cost breakdown of a built model as JSON.
 *
 * # Safety
 * `model` and `out` must be valid; free the result with [`strip_mlp_string_free`].
 */
enum StripMlpStatus strip_mlp_model_cost_json(const struct StripMlpModel *model, char **out);

/**
 * # Safety
 * `s` must come from this library, or be null.
 */
void strip_mlp_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STRIP_MLP_H */
