#ifndef MEMBASE_H
#define MEMBASE_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MbStatus {
  MB_STATUS_OK = 0,
  MB_STATUS_NULL_ARGUMENT = 1,
  MB_STATUS_INVALID_UTF8 = 2,
  /**
   * Bad JSON, failed validation or a bad configuration.
   */
  MB_STATUS_INVALID = 3,
  MB_STATUS_NOT_FOUND = 4,
  /**
   * A flush is already running for the session, or no schema is installed.
   */
  MB_STATUS_CONFLICT = 5,
  MB_STATUS_PROVIDER = 6,
  MB_STATUS_IO = 7,
  MB_STATUS_INTERNAL = 8,
  MB_STATUS_PANIC = 9,
} MbStatus;

/**
 * Opaque engine handle.
 */
typedef struct MbHandle MbHandle;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static string.
 */
const char *mb_version(void);

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call on the same thread.
 */
const char *mb_last_error(void);

/**
 * Releases a string returned through an `out` parameter.
 *
 * # Safety
 * `s` must be null or a pointer produced by this library, freed once.
 */
void mb_string_free(char *s);

/**
 * Opens a data directory. `config_json` uses the service config format;
 * missing keys take their defaults.
 *
 * # Safety
 * `config_json` must be a valid C string and `out` a writable pointer.
 */
enum MbStatus mb_open(const char *config_json, struct MbHandle **out);

/**
 * Closes a handle. Null is ignored.
 *
 * # Safety
 * `h` must come from [`mb_open`] and not be used afterwards.
 */
void mb_close(struct MbHandle *h);

/**
 * Installs a schema. On [`MbStatus::Invalid`] caused by validation, `out`
 * still receives the report.
 *
 * # Safety
 * Pointers must be valid; `out` receives a string for [`mb_string_free`].
 */
enum MbStatus mb_install_schema(const struct MbHandle *h, const char *schema_json, char **out);

/**
 * Buffers one message; the result says whether it triggered a flush.
 *
 * # Safety
 * String pointers must be valid C strings; `out` must be writable.
 */
enum MbStatus mb_append_message(const struct MbHandle *h,
                                const char *session,
                                const char *user,
                                const char *role,
                                const char *content,
                                int64_t timestamp_ms,
                                char **out);

/**
 * Runs the extraction pipeline over a session's buffered messages.
 *
 * # Safety
 * Pointers must be valid; `out` must be writable.
 */
enum MbStatus mb_flush(const struct MbHandle *h, const char *session, char **out);

/**
 * Searches memories. `params_json` may be null or an object with the
 * search endpoint's query parameters (`k`, `w_time`, `kind`, ...).
 *
 * # Safety
 * Pointers must be valid (`params_json` may be null); `out` must be writable.
 */
enum MbStatus mb_search(const struct MbHandle *h,
                        const char *query,
                        const char *params_json,
                        char **out);

/**
 * # Safety
 * Pointers must be valid; `out` must be writable.
 */
enum MbStatus mb_get_entity(const struct MbHandle *h,
                            const char *entity_type,
                            const char *group_key,
                            char **out);

/**
 * Processes up to `limit` queued entity merges.
 *
 * # Safety
 * Pointers must be valid; `out` must be writable.
 */
enum MbStatus mb_run_consolidation(const struct MbHandle *h, uint32_t limit, char **out);

/**
 * # Safety
 * Pointers must be valid; `out` must be writable.
 */
enum MbStatus mb_compress(const struct MbHandle *h, char **out);

/**
 * Writes the JSON array of pruned ids.
 *
 * # Safety
 * Pointers must be valid; `out` must be writable.
 */
enum MbStatus mb_expire(const struct MbHandle *h, char **out);

/**
 * # Safety
 * Pointers must be valid; `out` must be writable.
 */
enum MbStatus mb_health(const struct MbHandle *h, char **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MEMBASE_H */
