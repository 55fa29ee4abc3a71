#ifndef HEURVID_H
#define HEURVID_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum HvKind {
  HV_KIND_ACTION = 0,
  HV_KIND_ENTITY = 1,
} HvKind;

typedef enum HvLossMode {
  HV_LOSS_MODE_FIXED_ALPHA = 0,
  HV_LOSS_MODE_GATED = 1,
  HV_LOSS_MODE_NO_HEURISTICS = 2,
} HvLossMode;

typedef enum HvStatus {
  HV_STATUS_OK = 0,
  HV_STATUS_NULL_POINTER = 1,
  HV_STATUS_INVALID_UTF8 = 2,
  HV_STATUS_ARGUMENT = 3,
  HV_STATUS_SHAPE = 4,
  HV_STATUS_DOMAIN = 5,
  HV_STATUS_NUMERIC = 6,
  HV_STATUS_CONFIG = 7,
  HV_STATUS_STATE = 8,
  HV_STATUS_FORMAT = 9,
  HV_STATUS_DATA = 10,
  HV_STATUS_IO = 11,
  HV_STATUS_NOT_FOUND = 12,
  HV_STATUS_BUFFER_TOO_SMALL = 13,
  HV_STATUS_PANIC = 14,
} HvStatus;

/**
 * Heuristic records keyed by video id and kind.
 */
typedef struct HvHeuristicStore HvHeuristicStore;

/**
 * A frozen or trainable prompter.
 */
typedef struct HvPrompter HvPrompter;

/**
 * A QA reasoner.
 */
typedef struct HvReasoner HvReasoner;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *hv_version(void);

/**
 * Copies the calling thread's last error message into `buf` (truncating to `cap`).
 * Returns the size needed including the NUL.
 *
 * # Safety
 * `buf` must be null or point to `cap` writable bytes.
 */
size_t hv_last_error_message(char *buf, size_t cap);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum HvStatus hv_prompter_load(const char *path, struct HvPrompter **out);

/**
 * # Safety
 * `p` must be null or a handle from [`hv_prompter_load`] not yet freed.
 */
void hv_prompter_free(struct HvPrompter *p);

/**
 * # Safety
 * `p` must be a live handle; `out` must be writable.
 */
enum HvStatus hv_prompter_is_frozen(const struct HvPrompter *p, bool *out);

/**
 * # Safety
 * `p` must be a live handle; `out` must be writable.
 */
enum HvStatus hv_prompter_tau(const struct HvPrompter *p, double *out);

/**
 * Hex SHA-256 of the parameters. `needed` receives the size including the NUL;
 * returns [`HvStatus::BufferTooSmall`] when `cap` is short.
 *
 * # Safety
 * `p` must be a live handle; `buf` must hold `cap` bytes; `needed` may be null.
 */
enum HvStatus hv_prompter_checksum(const struct HvPrompter *p,
                                   char *buf,
                                   size_t cap,
                                   size_t *needed);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum HvStatus hv_heuristics_load(const char *path, struct HvHeuristicStore **out);

/**
 * # Safety
 * `s` must be null or a handle from [`hv_heuristics_load`] not yet freed.
 */
void hv_heuristics_free(struct HvHeuristicStore *s);

/**
 * Training target of one video and kind. Returns [`HvStatus::NotFound`] when the
 * record is missing or was filtered; `len` always receives the score count (0 if none).
 *
 * # Safety
 * `s` must be a live handle; `video_id` NUL-terminated; `buf` must hold `cap` doubles; `len` writable.
 */
enum HvStatus hv_heuristics_target(const struct HvHeuristicStore *s,
                                   const char *video_id,
                                   enum HvKind kind,
                                   double *buf,
                                   size_t cap,
                                   size_t *len);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum HvStatus hv_reasoner_load(const char *path, struct HvReasoner **out);

/**
 * # Safety
 * `r` must be null or a handle from [`hv_reasoner_load`] not yet freed.
 */
void hv_reasoner_free(struct HvReasoner *r);

/**
 * Evaluation-mode gate value for a question.
 *
 * # Safety
 * `r` must be a live handle; `question` NUL-terminated; `out` writable.
 */
enum HvStatus hv_reasoner_gate(const struct HvReasoner *r, const char *question, double *out);

/**
 * Symmetric contrastive loss of a row-major `batch × batch` similarity matrix.
 *
 * # Safety
 * `sim` must point to `batch * batch` doubles; `out` writable.
 */
enum HvStatus hv_vtc_loss(const double *sim, size_t batch, double tau, double *out);

/**
 * `−Σ target·log(pred)` over `n` entries.
 *
 * # Safety
 * `target` and `pred` must point to `n` doubles; `out` writable.
 */
enum HvStatus hv_soft_cross_entropy(const double *target,
                                    const double *pred,
                                    size_t n,
                                    double *out);

/**
 * Combined objective; `gate` is read only in gated mode.
 *
 * # Safety
 * `out` must be writable.
 */
enum HvStatus hv_total_loss(double pred,
                            double tam,
                            double sem,
                            enum HvLossMode mode,
                            double alpha,
                            double gate,
                            double *out);

/**
 * Runs a command-line subcommand in-process; returns its exit code.
 *
 * # Safety
 * `argv` must point to `argc` NUL-terminated strings (subcommand first, no program name).
 */
int hv_run(int argc, const char *const *argv);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HEURVID_H */
