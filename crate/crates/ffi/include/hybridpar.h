#ifndef HYBRIDPAR_H
#define HYBRIDPAR_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result codes. Zero is success.
 */
typedef enum HpStatus {
  HP_STATUS_OK = 0,
  /*
   Null pointer, bad UTF-8, wrong buffer length or out-of-range value.
   */
  HP_STATUS_INVALID_ARGUMENT = 1,
  /*
   File could not be read or written.
   */
  HP_STATUS_IO = 2,
  /*
   Malformed model, plan book or trace.
   */
  HP_STATUS_PARSE = 3,
  /*
   Tensor shapes do not agree with the model.
   */
  HP_STATUS_SHAPE = 4,
  /*
   Plan book made for a different model.
   */
  HP_STATUS_CHECKSUM = 5,
  /*
   Search or simulation failed.
   */
  HP_STATUS_FAILED = 6,
  /*
   Internal panic; the library state is unchanged.
   */
  HP_STATUS_PANIC = 7,
} HpStatus;

/*
 Synthetic bandwidth trace shapes for `hp_simulate`.
 */
typedef enum HpTraceKind {
  HP_TRACE_KIND_CONSTANT = 0,
  HP_TRACE_KIND_INDOOR = 1,
  HP_TRACE_KIND_OUTDOOR = 2,
} HpTraceKind;

/*
 Loaded model.
 */
typedef struct HpModel HpModel;

/*
 Set of precomputed plans, one per bandwidth bucket.
 */
typedef struct HpPlanBook HpPlanBook;

/*
 Session summary returned by `hp_simulate`. Times in seconds, energy in joules.
 */
typedef struct HpSimSummary {
  size_t inferences;
  double wall_mean;
  double wall_rsd;
  double local_wall_mean;
  double pp_wall_mean;
  double energy_mean;
  double transmit_share_pct;
  double bandwidth_rsd;
} HpSimSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message for the last failing call on this thread, or null if none failed.
 The pointer stays valid until the next failing call on the same thread.
 */
const char *hp_last_error_message(void);

/*
 Reads a model description file. Relative weight paths resolve against the
 file's directory.

 # Safety
 `path` must be a NUL-terminated string; `out` must be writable.
 */
enum HpStatus hp_model_load(const char *path_, struct HpModel **out);

/*
 The built-in demonstration model.

 # Safety
 `out` must be writable.
 */
enum HpStatus hp_model_demo(struct HpModel **out);

/*
 # Safety
 `model` must be null or a handle from this library not yet freed.
 */
void hp_model_free(struct HpModel *model);

/*
 Number of layers, or 0 for a null handle.

 # Safety
 `model` must be null or a live handle.
 */
size_t hp_model_layers(const struct HpModel *model);

/*
 Element count of the model input.

 # Safety
 `model` must be null or a live handle.
 */
size_t hp_model_input_len(const struct HpModel *model);

/*
 Element count of the model output.

 # Safety
 `model` must be null or a live handle.
 */
size_t hp_model_output_len(const struct HpModel *model);

/*
 Runs the whole model locally on a row-major input buffer.

 # Safety
 `input` must hold `input_len` floats and `output` must have room for
 `output_len` floats.
 */
enum HpStatus hp_model_infer(const struct HpModel *model,
                             const float *input,
                             size_t input_len,
                             float *output,
                             size_t output_len);

/*
 Solves one plan per bucket. The cost profile is FLOP-rate based: the robot
 runs `robot_flops` FLOP/s and the server is `server_speedup` times faster.

 # Safety
 `buckets` must hold `n_buckets` values; `out` must be writable.
 */
enum HpStatus hp_planbook_build(const struct HpModel *model,
                                double robot_flops,
                                double server_speedup,
                                const double *buckets,
                                size_t n_buckets,
                                uint64_t seed,
                                struct HpPlanBook **out);

/*
 # Safety
 `path` must be a NUL-terminated string; `out` must be writable.
 */
enum HpStatus hp_planbook_load(const char *path_, struct HpPlanBook **out);

/*
 # Safety
 `book` must be a live handle; `path` a NUL-terminated string.
 */
enum HpStatus hp_planbook_save(const struct HpPlanBook *book, const char *path_);

/*
 # Safety
 `book` must be null or a handle from this library not yet freed.
 */
void hp_planbook_free(struct HpPlanBook *book);

/*
 Number of buckets, or 0 for a null handle.

 # Safety
 `book` must be null or a live handle.
 */
size_t hp_planbook_len(const struct HpPlanBook *book);

/*
 Bucket for a predicted bandwidth: the largest at or below it, else 0.

 # Safety
 `book` must be a live handle; `out` must be writable.
 */
enum HpStatus hp_planbook_select(const struct HpPlanBook *book, double predicted_bps, size_t *out);

/*
 Bandwidth and predicted objective (seconds) of bucket `k`.

 # Safety
 `book` must be a live handle; the outputs must be writable.
 */
enum HpStatus hp_planbook_bucket(const struct HpPlanBook *book,
                                 size_t k,
                                 double *bandwidth_bps,
                                 double *objective_s);

/*
 Simulates a session of back-to-back inferences over a synthetic trace.
 `bandwidth_bps` is the level of a constant trace and ignored otherwise.

 # Safety
 Handles must be live; `out` must be writable.
 */
enum HpStatus hp_simulate(const struct HpModel *model,
                          const struct HpPlanBook *book,
                          enum HpTraceKind kind,
                          double bandwidth_bps,
                          double duration_s,
                          uint64_t seed,
                          struct HpSimSummary *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HYBRIDPAR_H */
