#ifndef OPENTOOLS_H
#define OPENTOOLS_H

#pragma once

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum OtStatus {
  OT_STATUS_OK = 0,
  OT_STATUS_NULL_ARGUMENT = 1,
  OT_STATUS_INVALID_UTF8 = 2,
  OT_STATUS_INVALID_JSON = 3,
  /**
   * Request, manifest or submission rejected; see the last error.
   */
  OT_STATUS_VALIDATION = 4,
  OT_STATUS_NOT_FOUND = 5,
  OT_STATUS_NOT_INITIALIZED = 6,
  /**
   * The tool ran and failed; the output document is the tool error.
   */
  OT_STATUS_TOOL_ERROR = 7,
  /**
   * The agent run failed (backend unavailable); the output document is the run.
   */
  OT_STATUS_RUN_FAILED = 8,
  OT_STATUS_STATE_CORRUPT = 9,
  OT_STATUS_IO = 10,
  OT_STATUS_PANIC = 11,
} OtStatus;

/**
 * Opaque handle to an opened state directory.
 */
typedef struct OtWorkspace OtWorkspace;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static string. Never free it.
 */
const char *ot_version(void);

/**
 * Message for the last failed call on this thread, or null. Valid until the
 * next call into this library on the same thread. Never free it.
 */
const char *ot_last_error(void);

/**
 * Releases a string returned through an output parameter. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not be freed twice.
 */
void ot_string_free(char *s);

/**
 * Creates the state layout with the seed toolbox. `created` (optional)
 * reports whether anything was written.
 *
 * # Safety
 * `state_dir` must be a NUL-terminated string; `created` null or writable.
 */
enum OtStatus ot_init(const char *state_dir, bool *created);

/**
 * Opens an initialized state directory. LLM backends come from the
 * environment; agent requests may carry their own `mock_script`.
 *
 * # Safety
 * `state_dir` must be a NUL-terminated string; `out` writable.
 */
enum OtStatus ot_open(const char *state_dir, struct OtWorkspace **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `ws` must come from [`ot_open`] and not be used afterwards.
 */
void ot_close(struct OtWorkspace *ws);

/**
 * Registered tool descriptors as a JSON array.
 *
 * # Safety
 * `ws` must be a live handle; `out` writable.
 */
enum OtStatus ot_tools(const struct OtWorkspace *ws, char **out);

/**
 * Validates a manifest document. On success `out` holds the descriptor; on
 * [`OtStatus::Validation`] it holds the violations array.
 *
 * # Safety
 * `manifest_json` must be a NUL-terminated string; `out` writable.
 */
enum OtStatus ot_validate_manifest(const char *manifest_json, char **out);

/**
 * Invokes a tool with a JSON object of arguments. `out` holds the
 * observation on success, the tool error on [`OtStatus::ToolError`].
 *
 * # Safety
 * String arguments must be NUL-terminated; `out` writable.
 */
enum OtStatus ot_invoke(const struct OtWorkspace *ws,
                        const char *tool,
                        const char *args_json,
                        char **out);

/**
 * Runs one evaluation round; `out` holds the round document.
 *
 * # Safety
 * `ws` must be a live handle; `out` writable.
 */
enum OtStatus ot_eval_run(const struct OtWorkspace *ws, uint32_t parallelism, char **out);

/**
 * The current reliability report.
 *
 * # Safety
 * `ws` must be a live handle; `out` writable.
 */
enum OtStatus ot_report(const struct OtWorkspace *ws, char **out);

/**
 * Runs an agent from a request document (`query`, `policy_config`, optional
 * `tool_names`, `selection`, `mock_script`). `out` holds the persisted run,
 * also on [`OtStatus::RunFailed`].
 *
 * # Safety
 * `request_json` must be NUL-terminated; `out` writable.
 */
enum OtStatus ot_agent_run(const struct OtWorkspace *ws, const char *request_json, char **out);

/**
 * A persisted trace as JSONL.
 *
 * # Safety
 * `trace_id` must be NUL-terminated; `out` writable.
 */
enum OtStatus ot_trace(const struct OtWorkspace *ws, const char *trace_id, char **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* OPENTOOLS_H */
