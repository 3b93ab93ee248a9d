#ifndef POLYVIT_H
#define POLYVIT_H

/* Generated by cbindgen from the polyvit-ffi crate. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes.
typedef enum PvStatus {
  PV_STATUS_OK = 0,
  PV_STATUS_NULL_POINTER = 1,
  PV_STATUS_INVALID_ARGUMENT = 2,
  PV_STATUS_CONFIG = 3,
  PV_STATUS_IO = 4,
  PV_STATUS_CHECKPOINT = 5,
  PV_STATUS_SCHEDULE = 6,
  PV_STATUS_MODEL = 7,
  PV_STATUS_METRIC = 8,
  PV_STATUS_INTERNAL = 9,
} PvStatus;

// A parsed run configuration.
typedef struct PvConfig PvConfig;

// A model loaded from a checkpoint.
typedef struct PvModel PvModel;

// A task-sampling plan.
typedef struct PvSchedule PvSchedule;

// Parameter totals of a configuration.
typedef struct PvParamBreakdown {
  uint64_t shared;
  uint64_t total;
  // One single-task model per task, summed.
  uint64_t fleet_total;
  double fleet_ratio;
  uint64_t num_tasks;
} PvParamBreakdown;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread (empty after a success).
// The pointer stays valid until the next call on the same thread.
const char *pv_last_error(void);

// Library version as a static NUL-terminated string.
const char *pv_version(void);

// Parses configuration text.
//
// # Safety
// `text` must be NUL-terminated; `out` must be writable.
enum PvStatus pv_config_parse(const char *text, struct PvConfig **out_config);

// Loads a built-in preset (`base9` or `toy3`).
//
// # Safety
// `name` must be NUL-terminated; `out` must be writable.
enum PvStatus pv_config_preset(const char *name, struct PvConfig **out_config);

// # Safety
// `config` must come from this library and not be used afterwards.
void pv_config_free(struct PvConfig *config);

// # Safety
// Pointers must be valid.
enum PvStatus pv_config_params(const struct PvConfig *config,
                               struct PvParamBreakdown *out_breakdown);

// The configured schedule (or `kind`, when not null).
//
// # Safety
// Pointers must be valid; `kind` may be null.
enum PvStatus pv_config_schedule(const struct PvConfig *config,
                                 const char *kind,
                                 struct PvSchedule **out_schedule);

// Builds a plan from step budgets.
//
// # Safety
// `kind` must be NUL-terminated, `budgets` must hold `num_tasks` values and
// `out` must be writable.
enum PvStatus pv_schedule_build(const char *kind,
                                const uint64_t *budgets,
                                size_t num_tasks,
                                uint64_t seed,
                                struct PvSchedule **out_schedule);

// # Safety
// `schedule` must come from this library and not be used afterwards.
void pv_schedule_free(struct PvSchedule *schedule);

// # Safety
// Pointers must be valid.
enum PvStatus pv_schedule_len(const struct PvSchedule *schedule, uint64_t *out_len);

// Task trained at `step`; -1 means every task (accumulated step).
//
// # Safety
// Pointers must be valid.
enum PvStatus pv_schedule_step(const struct PvSchedule *schedule, uint64_t step, int64_t *out_task);

// Steps that train `task` (accumulated steps count for every task).
//
// # Safety
// Pointers must be valid.
enum PvStatus pv_schedule_count(const struct PvSchedule *schedule,
                                uint64_t task,
                                uint64_t *out_count);

// Loads a checkpoint written by `polyvit train`.
//
// # Safety
// `path` must be NUL-terminated; `out` must be writable.
enum PvStatus pv_model_load(const char *path, struct PvModel **out_model);

// Writes the model parameters (without optimizer state).
//
// # Safety
// Pointers must be valid and `path` NUL-terminated.
enum PvStatus pv_model_save(const struct PvModel *model, const char *path);

// # Safety
// `model` must come from this library and not be used afterwards.
void pv_model_free(struct PvModel *model);

// # Safety
// Pointers must be valid.
enum PvStatus pv_model_num_tasks(const struct PvModel *model, uint64_t *out_tasks);

// Class count of `task` and the number of input values per example.
//
// # Safety
// Pointers must be valid.
enum PvStatus pv_model_task_shape(const struct PvModel *model,
                                  uint64_t task,
                                  uint64_t *out_classes,
                                  uint64_t *out_input_len);

// Total number of parameters of the loaded model.
//
// # Safety
// Pointers must be valid.
enum PvStatus pv_model_param_count(const struct PvModel *model, uint64_t *out_count);

// Eval-mode logits of `batch` examples for `task`. `inputs` holds
// `batch * input_len` values laid out row-major per example; `out_logits`
// receives `batch * classes` values.
//
// # Safety
// Pointers must be valid for the given lengths.
enum PvStatus pv_model_logits(const struct PvModel *model,
                              uint64_t task,
                              const double *inputs,
                              size_t inputs_len,
                              size_t batch,
                              double *out_logits,
                              size_t out_len);

// Top-1 accuracy of `rows x classes` scores against one label per row.
//
// # Safety
// Pointers must be valid for the given lengths.
enum PvStatus pv_accuracy(const double *scores,
                          size_t rows,
                          size_t classes,
                          const uint32_t *labels,
                          double *out_accuracy);

// Average precision of one class; `positive[i]` is nonzero for positives.
//
// # Safety
// Pointers must be valid for `len` values.
enum PvStatus pv_average_precision(const double *scores,
                                   const uint8_t *positive,
                                   size_t len,
                                   double *out_ap);

// Mean average precision of `rows x classes` scores against a multi-hot
// `rows x classes` label matrix (nonzero = positive).
//
// # Safety
// Pointers must be valid for the given lengths.
enum PvStatus pv_mean_average_precision(const double *scores,
                                        const uint8_t *labels,
                                        size_t rows,
                                        size_t classes,
                                        double *out_map);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* POLYVIT_H */
