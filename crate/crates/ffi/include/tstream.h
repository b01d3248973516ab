/* C interface to the tstream engine. Generated from src/lib.rs; do not edit. */

#ifndef TSTREAM_H
#define TSTREAM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status code for every call. Zero is success; everything else names the
 * first thing that went wrong.
 */
typedef enum TsStatus {
  TS_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  TS_STATUS_NULL_ARGUMENT = 1,
  /**
   * Malformed input: bad UTF-8, empty or oversized key, zero executors,
   * dimension mismatch, non-finite values.
   */
  TS_STATUS_INVALID_ARGUMENT = 2,
  TS_STATUS_IO_ERROR = 3,
  /**
   * Persistent data failed validation (checksum, decode, epoch order).
   */
  TS_STATUS_CORRUPT = 4,
  /**
   * The engine stopped after a commit-path failure and refuses new work.
   */
  TS_STATUS_HALTED = 5,
  /**
   * The transaction was refused by validation before admission.
   */
  TS_STATUS_REJECTED_VALIDATION = 6,
  /**
   * The engine is over its pending-update limit; retry after a flush.
   */
  TS_STATUS_REJECTED_BACKPRESSURE = 7,
  /**
   * The key exists in no committed state.
   */
  TS_STATUS_NOT_FOUND = 8,
  /**
   * Caller's buffer is too small; the needed size was written out.
   */
  TS_STATUS_BUFFER_TOO_SMALL = 9,
  /**
   * No outcome arrived within the deadline.
   */
  TS_STATUS_TIMEOUT = 10,
  /**
   * A library bug; details in `ts_last_error`.
   */
  TS_STATUS_PANIC = 11,
} TsStatus;

/**
 * Opaque handle to one engine instance.
 */
typedef struct TsEngine TsEngine;

/**
 * One resolved transaction from the outcome stream.
 */
typedef struct TsOutcome {
  uint64_t txn_id;
  /**
   * Admission stamp; total order across all submissions.
   */
  uint64_t ts;
  /**
   * Epoch the transaction committed in; 0 when rejected.
   */
  uint64_t epoch;
  uint64_t latency_ns;
  /**
   * 1 committed, 0 rejected.
   */
  uint8_t committed;
  /**
   * `TS_STATUS_OK` when committed, otherwise the rejection mapped to a
   * status code.
   */
  enum TsStatus status;
} TsOutcome;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Open an engine.
 *
 * `data_dir` may be null for a volatile engine (no log, no checkpoints,
 * nothing survives the process). With a directory, the engine recovers
 * whatever state the directory holds and appends to its log; the
 * directory is created if missing.
 *
 * # Safety
 * `data_dir`, when non-null, must point to a NUL-terminated string, and
 * `out` must point to writable memory for one pointer.
 */
enum TsStatus ts_engine_open(const char *data_dir, uint32_t executors, struct TsEngine **out);

/**
 * Drain admitted work, sync the log, stop all threads, and destroy the
 * handle. The pointer is invalid after this call even on failure.
 *
 * # Safety
 * `engine` must be a pointer from `ts_engine_open` not yet passed to
 * `ts_engine_shutdown` or `ts_engine_free`, with no concurrent calls on it.
 */
enum TsStatus ts_engine_shutdown(struct TsEngine *engine);

/**
 * Destroy the handle without the final log sync. Still orderly, just
 * silent about failures.
 *
 * # Safety
 * Same contract as `ts_engine_shutdown`.
 */
void ts_engine_free(struct TsEngine *engine);

/**
 * Submit a delta: element-wise add to the vector at `key`, creating it if
 * absent. Asynchronous; the commit (or rejection) arrives on the outcome
 * stream. `out_txn_id` may be null if the caller does not track outcomes.
 *
 * # Safety
 * `key` must be NUL-terminated, `delta` must point to `dim` doubles, and
 * `out_txn_id`, when non-null, must be writable.
 */
enum TsStatus ts_engine_apply(const struct TsEngine *engine,
                              const char *key,
                              const double *delta,
                              uintptr_t dim,
                              uint64_t *out_txn_id);

/**
 * Submit an overwrite of the vector at `key`. A key's dimension is fixed
 * by its first write; a mismatched overwrite is rejected at commit time.
 *
 * # Safety
 * Same contract as `ts_engine_apply`.
 */
enum TsStatus ts_engine_write(const struct TsEngine *engine,
                              const char *key,
                              const double *values,
                              uintptr_t dim,
                              uint64_t *out_txn_id);

/**
 * Read the vector at `key` from a consistent snapshot of the latest
 * committed state. On success `*out_dim` is the vector's length and that
 * many doubles are copied. `TS_STATUS_BUFFER_TOO_SMALL` still sets
 * `*out_dim` so the caller can size a retry; `TS_STATUS_NOT_FOUND` sets it
 * to zero.
 *
 * # Safety
 * `key` must be NUL-terminated, `out_values` must point to `cap` writable
 * doubles (may be null when `cap` is 0), and `out_dim` must be writable.
 */
enum TsStatus ts_engine_read(const struct TsEngine *engine,
                             const char *key,
                             double *out_values,
                             uintptr_t cap,
                             uintptr_t *out_dim);

/**
 * Block until every update admitted so far has an outcome on the stream.
 *
 * # Safety
 * `engine` must be a live handle from `ts_engine_open`.
 */
enum TsStatus ts_engine_flush(const struct TsEngine *engine);

/**
 * Write a checkpoint of the current committed state. No-op returning OK
 * on a volatile engine.
 *
 * # Safety
 * `engine` must be a live handle from `ts_engine_open`.
 */
enum TsStatus ts_engine_checkpoint(const struct TsEngine *engine);

/**
 * Highest committed epoch.
 *
 * # Safety
 * `engine` must be a live handle and `out` writable.
 */
enum TsStatus ts_engine_watermark(const struct TsEngine *engine, uint64_t *out);

/**
 * Wait up to `timeout_ms` for the next resolved transaction. Exactly one
 * outcome is eventually delivered per submitted transaction, rejections
 * included; reads are delivered too, already resolved.
 *
 * # Safety
 * `engine` must be a live handle and `out` writable.
 */
enum TsStatus ts_engine_next_outcome(const struct TsEngine *engine,
                                     uint64_t timeout_ms,
                                     struct TsOutcome *out);

/**
 * Serialize the entire committed state, key-ordered. Equal states produce
 * equal bytes, which makes the dump a cheap equality witness across
 * processes. Free the buffer with `ts_buffer_free`.
 *
 * # Safety
 * `engine` must be a live handle; `out_buf` and `out_len` must be writable.
 */
enum TsStatus ts_engine_dump(const struct TsEngine *engine, uint8_t **out_buf, uintptr_t *out_len);

/**
 * Free a buffer returned by this library. `len` must be the length the
 * library reported for it.
 *
 * # Safety
 * `buf` must be a pointer this library returned, freed at most once.
 */
void ts_buffer_free(uint8_t *buf, uintptr_t len);

/**
 * Static name for a status code. Never null.
 */
const char *ts_status_name(enum TsStatus status);

/**
 * Message for the most recent failure on this thread, or null if the
 * thread has none. Valid until the next failing call on the same thread.
 */
const char *ts_last_error(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TSTREAM_H */
