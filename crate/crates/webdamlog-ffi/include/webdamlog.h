/* C interface to the webdamlog runtime. */

#ifndef WEBDAMLOG_H
#define WEBDAMLOG_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of an FFI call.
 */
typedef enum WdlStatus {
  WDL_STATUS_OK = 0,
  WDL_STATUS_NULL_POINTER = 1,
  WDL_STATUS_INVALID_UTF8 = 2,
  WDL_STATUS_PARSE_ERROR = 3,
  WDL_STATUS_UNKNOWN_PEER = 4,
  /**
   * The round budget ran out before the system went quiescent.
   */
  WDL_STATUS_BUDGET_EXCEEDED = 5,
  WDL_STATUS_RUNTIME_ERROR = 6,
  /**
   * The callee panicked; the system may be in a broken state.
   */
  WDL_STATUS_PANIC = 7,
} WdlStatus;

/**
 * A set of peers wired through the deterministic in-process network.
 */
typedef struct WdlSystem WdlSystem;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread, or null if the
 * last call succeeded. The pointer is invalidated by the next failure.
 */
const char *wdl_last_error(void);

/**
 * Library version as a static string; never freed.
 */
const char *wdl_version(void);

/**
 * Creates an empty system. Message delivery is FIFO per link and
 * deterministic for a given `seed`. Free with `wdl_system_free`.
 */
struct WdlSystem *wdl_system_new(uint64_t seed);

/**
 * # Safety
 * `sys` must come from `wdl_system_new` and not be used afterwards.
 */
void wdl_system_free(struct WdlSystem *sys);

/**
 * Creates a peer; adding an existing name is a no-op.
 *
 * # Safety
 * `sys` must be a live handle; `name` a valid NUL-terminated string.
 */
enum WdlStatus wdl_system_add_peer(struct WdlSystem *sys, const char *name);

/**
 * Loads program text (declarations, facts, rules) at `peer`.
 *
 * # Safety
 * `sys` must be a live handle; `peer` and `program` valid strings.
 */
enum WdlStatus wdl_system_load(struct WdlSystem *sys, const char *peer, const char *program);

/**
 * Inserts a fact written as `rel@peer(v1, ...)` at its owner.
 *
 * # Safety
 * `sys` must be a live handle; `fact` a valid NUL-terminated string.
 */
enum WdlStatus wdl_system_insert(struct WdlSystem *sys, const char *fact);

/**
 * Deletes a fact written as `rel@peer(v1, ...)` at its owner.
 *
 * # Safety
 * `sys` must be a live handle; `fact` a valid NUL-terminated string.
 */
enum WdlStatus wdl_system_delete(struct WdlSystem *sys, const char *fact);

/**
 * Runs exactly `rounds` global rounds (stage every peer, deliver).
 *
 * # Safety
 * `sys` must be a live handle.
 */
enum WdlStatus wdl_system_run_rounds(struct WdlSystem *sys, uintptr_t rounds);

/**
 * Runs rounds until no peer has work and nothing is in flight, failing
 * with `BudgetExceeded` after `budget` rounds. If `rounds_run` is
 * non-null it receives the number of rounds taken.
 *
 * # Safety
 * `sys` must be a live handle; `rounds_run` null or writable.
 */
enum WdlStatus wdl_system_quiesce(struct WdlSystem *sys, uintptr_t budget, uintptr_t *rounds_run);

/**
 * Reads a relation written as `rel@peer` at its owner. `*out` receives
 * a newly allocated string, one rendered fact per line in sorted order
 * (empty string for an empty or undeclared relation); release it with
 * `wdl_string_free`.
 *
 * # Safety
 * `sys` must be a live handle; `relation` a valid string; `out` writable.
 */
enum WdlStatus wdl_system_read(struct WdlSystem *sys, const char *relation, char **out);

/**
 * Releases a string returned through an out-pointer.
 *
 * # Safety
 * `s` must be null or a string produced by this library, freed once.
 */
void wdl_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* WEBDAMLOG_H */
