#ifndef SPECTRAL_MOE_H
#define SPECTRAL_MOE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Expert initialization.
 */
typedef enum SmInit {
  SM_INIT_SPECTRAL = 0,
  SM_INIT_ZERO = 1,
} SmInit;

/**
 * Result codes. `SM_OK` is zero; every other value is an error.
 */
typedef enum SmStatus {
  SM_OK = 0,
  SM_INVALID_INPUT = 1,
  SM_NUMERICAL_FAILURE = 2,
  SM_INSUFFICIENT_RANK = 3,
  SM_DEGENERATE_SEGMENT = 4,
  SM_TRAINING_DIVERGED = 5,
  SM_SCHEMA = 6,
  SM_IO = 7,
  SM_NULL_POINTER = 8,
  SM_PANIC = 9,
} SmStatus;

/**
 * Opaque layer handle.
 */
typedef struct SmLayer SmLayer;

/**
 * Layer construction options; start from `sm_layer_options_default`.
 */
typedef struct SmLayerOptions {
  /**
   * Output dimension.
   */
  size_t m;
  /**
   * Input dimension.
   */
  size_t n;
  size_t total_rank;
  size_t n_experts;
  size_t top_k;
  /**
   * Layer scale; zero, negative or NaN selects `sqrt(3 n eta / r)`.
   */
  double scale;
  double rho;
  double eta;
  enum SmInit init;
  double router_std;
} SmLayerOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Options for an `m x n` layer with default scale, damping and router spread.
 */
struct SmLayerOptions sm_layer_options_default(size_t m,
                                               size_t n,
                                               size_t total_rank,
                                               size_t n_experts,
                                               size_t top_k);

/**
 * Builds a layer from the row-major `m x n` pretrained weight `w0`.
 *
 * # Safety
 * `options` must point to a valid `SmLayerOptions`, `w0` to `w0_len`
 * readable doubles, and `out` to writable storage for one handle.
 */
enum SmStatus sm_layer_new(const struct SmLayerOptions *options,
                           const double *w0,
                           size_t w0_len,
                           uint64_t seed,
                           struct SmLayer **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `layer` must be null or a handle from this library that has not been freed.
 */
void sm_layer_free(struct SmLayer *layer);

/**
 * Writes the output and input dimensions, expert count and resolved scale.
 * Any output pointer may be null.
 *
 * # Safety
 * `layer` must be a live handle; non-null outputs must be writable.
 */
enum SmStatus sm_layer_shape(const struct SmLayer *layer,
                             size_t *m,
                             size_t *n,
                             size_t *n_experts,
                             double *scale);

/**
 * Number of trainable parameters (experts plus router).
 *
 * # Safety
 * `layer` must be a live handle and `out` writable.
 */
enum SmStatus sm_layer_trainable_params(const struct SmLayer *layer, size_t *out);

/**
 * Forward pass `y = W(x) x`. `gate_weights` may be null; otherwise it
 * receives the renormalized top-k weights, one per expert.
 *
 * # Safety
 * Buffers must hold the stated number of doubles.
 */
enum SmStatus sm_layer_forward(const struct SmLayer *layer,
                               const double *x,
                               size_t x_len,
                               double *y,
                               size_t y_len,
                               double *gate_weights,
                               size_t gate_len);

/**
 * Row-major `m x n` equivalent weight for input `x`.
 *
 * # Safety
 * Buffers must hold the stated number of doubles.
 */
enum SmStatus sm_layer_equivalent_weight(const struct SmLayer *layer,
                                         const double *x,
                                         size_t x_len,
                                         double *w,
                                         size_t w_len);

/**
 * Row-major `m x n` pretrained weight recovered from the frozen base and
 * residual.
 *
 * # Safety
 * `w` must hold `w_len` doubles.
 */
enum SmStatus sm_layer_pretrained_weight(const struct SmLayer *layer, double *w, size_t w_len);

/**
 * Writes a bit-exact JSON checkpoint.
 *
 * # Safety
 * `layer` must be a live handle and `path` a NUL-terminated UTF-8 string.
 */
enum SmStatus sm_layer_save(const struct SmLayer *layer, const char *path);

/**
 * Restores a layer written by `sm_layer_save`.
 *
 * # Safety
 * `path` must be a NUL-terminated UTF-8 string and `out` writable.
 */
enum SmStatus sm_layer_load(const char *path, struct SmLayer **out);

/**
 * The scale `sqrt(3 n eta / r)`.
 *
 * # Safety
 * `out` must be writable.
 */
enum SmStatus sm_optimal_scale(size_t n, size_t rank, double eta, double *out);

/**
 * Per-expert mean and variance of top-k gate weights under exchangeable
 * routing.
 *
 * # Safety
 * `mean` and `variance` must be writable.
 */
enum SmStatus sm_gate_moments(size_t n_experts, size_t top_k, double *mean, double *variance);

/**
 * Message for the last failed call on this thread, or null after a
 * successful one. Valid until the next call into this library.
 */
const char *sm_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *sm_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SPECTRAL_MOE_H */
