#ifndef MOELAB_H
#define MOELAB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of an FFI call. Values from 10 up mirror the library's error kinds.
 */
typedef enum {
  MOELAB_STATUS_OK = 0,
  MOELAB_STATUS_NULL_POINTER = 1,
  MOELAB_STATUS_INVALID_UTF8 = 2,
  MOELAB_STATUS_UNKNOWN_OPERATION = 3,
  MOELAB_STATUS_BUFFER_TOO_SMALL = 4,
  MOELAB_STATUS_PANIC = 5,
  MOELAB_STATUS_INVALID_ARGUMENT = 10,
  MOELAB_STATUS_LAYOUT_SYNTAX = 11,
  MOELAB_STATUS_LAYOUT_ARITY = 12,
  MOELAB_STATUS_NON_FINITE_LOGIT = 13,
  MOELAB_STATUS_INFEASIBLE = 14,
  MOELAB_STATUS_OUT_OF_PAGES = 15,
  MOELAB_STATUS_DEADLOCK = 16,
  MOELAB_STATUS_OVERLAPPING_FRAGMENTS = 17,
  MOELAB_STATUS_PARSE = 18,
} MoelabStatus;

/**
 * A response envelope of the v1 JSON API.
 */
typedef struct MoelabResponse MoelabResponse;

/**
 * Paged activation stash with a fixed page pool.
 */
typedef struct MoelabStash MoelabStash;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *moelab_version(void);

/**
 * Message of the last failed call on this thread, or an empty string. The
 * pointer stays valid until the next failing call on the same thread.
 */
const char *moelab_last_error(void);

/**
 * Run an API operation ("estimate", "cost", "simulate", ...) on a JSON body.
 *
 * Returns `Ok` whenever an envelope was produced, including envelopes that
 * report a validation failure; inspect the envelope's HTTP status for that.
 *
 * # Safety
 * `operation` must be a NUL-terminated string, `body` must point to `len`
 * readable bytes and `out` must be a valid pointer.
 */
MoelabStatus moelab_call(const char *operation,
                         const uint8_t *body,
                         size_t len,
                         MoelabResponse **out);

/**
 * The envelope as NUL-terminated JSON, owned by the response.
 *
 * # Safety
 * `r` must come from [`moelab_call`] and not have been freed.
 */
const char *moelab_response_json(const MoelabResponse *r);

/**
 * Length of the JSON in bytes, without the terminator.
 *
 * # Safety
 * As for [`moelab_response_json`].
 */
size_t moelab_response_json_len(const MoelabResponse *r);

/**
 * HTTP status the service would answer with (200, 400 or 422).
 *
 * # Safety
 * As for [`moelab_response_json`].
 */
uint16_t moelab_response_http_status(const MoelabResponse *r);

/**
 * Exit code the CLI would return (0, 1 or 2).
 *
 * # Safety
 * As for [`moelab_response_json`].
 */
int32_t moelab_response_exit_code(const MoelabResponse *r);

/**
 * # Safety
 * `r` must come from [`moelab_call`] or be null; it is invalid afterwards.
 */
void moelab_response_free(MoelabResponse *r);

/**
 * # Safety
 * `out` must be a valid pointer.
 */
MoelabStatus moelab_stash_new(size_t num_pages,
                              size_t page_tokens,
                              size_t bytes_per_token,
                              size_t tmp_tokens,
                              MoelabStash **out);

/**
 * Copy `len` bytes holding `tokens` rows into pages for `layer`. The number
 * of pages taken is written to `pages_out` when it is not null.
 *
 * # Safety
 * `s` must be a live stash and `payload` must point to `len` readable bytes.
 */
MoelabStatus moelab_stash_put(MoelabStash *s,
                              size_t layer,
                              size_t tokens,
                              const uint8_t *payload,
                              size_t len,
                              size_t *pages_out);

/**
 * Bytes stashed for `layer`, so callers can size the reload buffer.
 *
 * # Safety
 * `s` must be a live stash and `out` a valid pointer.
 */
MoelabStatus moelab_stash_layer_bytes(const MoelabStash *s, size_t layer, size_t *out);

/**
 * Move `layer` back into `buf` and release its pages. Nothing changes when
 * `cap` is too small.
 *
 * # Safety
 * `s` must be a live stash, `buf` must point to `cap` writable bytes and
 * `len_out` must be valid or null.
 */
MoelabStatus moelab_stash_take(MoelabStash *s,
                               size_t layer,
                               uint8_t *buf,
                               size_t cap,
                               size_t *len_out);

/**
 * # Safety
 * `s` must be a live stash or null.
 */
size_t moelab_stash_free_pages(const MoelabStash *s);

/**
 * # Safety
 * `s` must be a live stash or null.
 */
size_t moelab_stash_peak_pages(const MoelabStash *s);

/**
 * # Safety
 * `s` must come from [`moelab_stash_new`] or be null.
 */
void moelab_stash_free(MoelabStash *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MOELAB_H */
