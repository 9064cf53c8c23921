#ifndef PIPETUNE_H
#define PIPETUNE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum PtStatus {
  PT_STATUS_OK = 0,
  PT_STATUS_NULL_ARGUMENT = 1,
  PT_STATUS_INVALID_UTF8 = 2,
  PT_STATUS_PARSE = 3,
  PT_STATUS_INVALID_SPEC = 4,
  PT_STATUS_UNKNOWN_NODE = 5,
  PT_STATUS_UNKNOWN_STORE = 6,
  PT_STATUS_NOT_TUNABLE = 7,
  PT_STATUS_INVALID_PARALLELISM = 8,
  PT_STATUS_RANDOM_CACHE = 9,
  PT_STATUS_EMPTY_TRACE = 10,
  PT_STATUS_CLOSED = 11,
  PT_STATUS_INVALID_ARGUMENT = 12,
  PT_STATUS_IO = 13,
  /**
   * The handle was created without tracing.
   */
  PT_STATUS_NOT_TRACED = 14,
  PT_STATUS_INTERNAL = 15,
} PtStatus;

/**
 * An optimizer plan.
 */
typedef struct PtPlan PtPlan;

/**
 * A pipeline program.
 */
typedef struct PtSpec PtSpec;

/**
 * A set of simulated file stores addressable by id.
 */
typedef struct PtStores PtStores;

/**
 * A running iterator tree.
 */
typedef struct PtTree PtTree;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the last failed call on this thread, or an empty
 * string. Valid until the next call into this library on the same thread.
 */
const char *pt_last_error(void);

/**
 * Releases a string returned by this library.
 *
 * # Safety
 * `s` is null or was returned by this library and not yet freed.
 */
void pt_string_free(char *s);

/**
 * Parses a spec from JSON and validates it.
 *
 * # Safety
 * `json` is a NUL-terminated string; `out` is valid for writing a pointer.
 */
enum PtStatus pt_spec_from_json(const char *json, struct PtSpec **out);

/**
 * Builds a preset pipeline such as `resnet_shape`.
 *
 * # Safety
 * `name` is a NUL-terminated string; `out` is valid for writing a pointer.
 */
enum PtStatus pt_spec_preset(const char *name, struct PtSpec **out);

/**
 * The pipeline as JSON, or null if `spec` is null. Free with `pt_string_free`.
 *
 * # Safety
 * `spec` is null or a live handle.
 */
char *pt_spec_to_json(const struct PtSpec *spec);

/**
 * Sets the parallelism knob of `node` to `k`.
 *
 * # Safety
 * `spec` is a live handle; `node` is a NUL-terminated string.
 */
enum PtStatus pt_spec_set_parallelism(struct PtSpec *spec, const char *node, uint32_t k);

/**
 * Parallelism of `node`, written to `out`; 0 when the node has no knob.
 *
 * # Safety
 * `spec` is a live handle; `node` is a NUL-terminated string; `out` is
 * valid for writing.
 */
enum PtStatus pt_spec_get_parallelism(const struct PtSpec *spec, const char *node, uint32_t *out);

/**
 * Inserts a Cache after `node`.
 *
 * # Safety
 * `spec` is a live handle; `node` is a NUL-terminated string.
 */
enum PtStatus pt_spec_insert_cache(struct PtSpec *spec, const char *node);

/**
 * Inserts a Prefetch of `buffer` elements after `node`.
 *
 * # Safety
 * `spec` is a live handle; `node` is a NUL-terminated string.
 */
enum PtStatus pt_spec_insert_prefetch(struct PtSpec *spec, const char *node, uint64_t buffer);

/**
 * # Safety
 * `spec` is null or a handle not yet freed.
 */
void pt_spec_free(struct PtSpec *spec);

/**
 * The built-in synthetic stores.
 *
 * # Safety
 * `out` is valid for writing a pointer.
 */
enum PtStatus pt_stores_builtin(struct PtStores **out);

/**
 * Throttles every store to `bytes_per_sec`; 0 removes the limit.
 *
 * # Safety
 * `stores` is a live handle.
 */
enum PtStatus pt_stores_set_bandwidth(struct PtStores *stores, uint64_t bytes_per_sec);

/**
 * # Safety
 * `stores` is null or a handle not yet freed.
 */
void pt_stores_free(struct PtStores *stores);

/**
 * Instantiates `spec` over `stores` on `cores` simulated cores (0 means
 * real busy-spin), optionally with tracing.
 *
 * # Safety
 * `spec` and `stores` are live handles; `out` is valid for writing a
 * pointer.
 */
enum PtStatus pt_tree_open(const struct PtSpec *spec,
                           const struct PtStores *stores,
                           uint32_t cores,
                           uint64_t seed,
                           bool traced,
                           struct PtTree **out);

/**
 * Pulls the next root element. At end of stream `has_element` is false.
 *
 * # Safety
 * `tree` is a live handle; `payload_bytes` and `has_element` are valid for
 * writing.
 */
enum PtStatus pt_tree_next(struct PtTree *tree, uint64_t *payload_bytes, bool *has_element);

/**
 * Pulls elements for `seconds` and writes the root rate after a 20% warmup.
 *
 * # Safety
 * `tree` is a live handle; `rate` is valid for writing.
 */
enum PtStatus pt_tree_benchmark(struct PtTree *tree, double seconds, double *rate);

/**
 * Snapshot of the tree's counters as JSON. Free with `pt_string_free`.
 *
 * # Safety
 * `tree` is a live handle; `out` is valid for writing a pointer.
 */
enum PtStatus pt_tree_snapshot_json(const struct PtTree *tree, char **out);

/**
 * Stops the tree's workers. Further `pt_tree_next` calls fail with
 * `Closed`.
 *
 * # Safety
 * `tree` is null or a live handle.
 */
void pt_tree_close(struct PtTree *tree);

/**
 * Closes and releases the tree.
 *
 * # Safety
 * `tree` is null or a handle not yet freed.
 */
void pt_tree_free(struct PtTree *tree);

/**
 * Plans from a snapshot against `cores`, `memory_bytes` and a fixed disk
 * bandwidth (0 means unlimited). `stores` may be null; when given, its
 * store sizes replace the snapshot's estimates.
 *
 * # Safety
 * `snapshot_json` is a NUL-terminated string; `stores` is null or a live
 * handle; `out` is valid for writing a pointer.
 */
enum PtStatus pt_plan_from_snapshot(const char *snapshot_json,
                                    const struct PtStores *stores,
                                    double cores,
                                    uint64_t memory_bytes,
                                    double bandwidth_bytes_per_sec,
                                    struct PtPlan **out);

/**
 * Predicted root throughput; infinity when nothing bounds it, NaN for a
 * null handle.
 *
 * # Safety
 * `plan` is null or a live handle.
 */
double pt_plan_predicted(const struct PtPlan *plan);

/**
 * The plan as JSON, or null if `plan` is null. Free with `pt_string_free`.
 *
 * # Safety
 * `plan` is null or a live handle.
 */
char *pt_plan_to_json(const struct PtPlan *plan);

/**
 * Applies `plan` to a copy of `spec`.
 *
 * # Safety
 * `plan` and `spec` are live handles; `out` is valid for writing a pointer.
 */
enum PtStatus pt_plan_apply(const struct PtPlan *plan,
                            const struct PtSpec *spec,
                            struct PtSpec **out);

/**
 * # Safety
 * `plan` is null or a handle not yet freed.
 */
void pt_plan_free(struct PtPlan *plan);

/**
 * Splits `cores` among `n` operators with per-core rates `rates`, capping
 * operators flagged in `sequential` at one core. Writes each operator's
 * cores to `theta` and the reachable throughput to `throughput`.
 *
 * # Safety
 * `rates`, `sequential` and `theta` point to `n` elements; `throughput` is
 * valid for writing.
 */
enum PtStatus pt_solve_cpu_lp(const double *rates,
                              const bool *sequential,
                              size_t n,
                              double cores,
                              double *theta,
                              double *throughput);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PIPETUNE_H */
