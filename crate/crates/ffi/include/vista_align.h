#ifndef VISTA_ALIGN_H
#define VISTA_ALIGN_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result code of every fallible call.
 */
typedef enum VaStatus {
  VA_STATUS_OK = 0,
  VA_STATUS_NULL_POINTER = 1,
  VA_STATUS_INVALID_ARGUMENT = 2,
  VA_STATUS_IO = 3,
  VA_STATUS_PARSE = 4,
  VA_STATUS_SIZE_LIMIT = 5,
  VA_STATUS_DEGENERATE = 6,
  VA_STATUS_INTERNAL = 7,
} VaStatus;

/*
 Ranked list of alignment hypotheses.
 */
typedef struct VaHypotheses VaHypotheses;

/*
 Object map.
 */
typedef struct VaMap VaMap;

/*
 Hyperparameter set.
 */
typedef struct VaParams VaParams;

/*
 One alignment hypothesis: `b = R a + t` maps map-A points into map B.
 */
typedef struct VaHypothesis {
  /*
   Row-major rotation matrix.
   */
  double rotation[9];
  /*
   Translation, m.
   */
  double translation[3];
  size_t cardinality;
  size_t source_submap;
  size_t target_submap;
  /*
   Degrees.
   */
  double roll;
  double pitch;
  double yaw;
} VaHypothesis;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message describing the last failure on this thread; empty after success.
 The pointer stays valid until the next call into the library on this thread.
 */
const char *va_last_error(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *va_version(void);

/*
 Releases a string returned by the library.

 # Safety
 `s` must be NULL or a string obtained from this library, freed at most once.
 */
void va_string_free(char *s);

/*
 Consistency score of a distance mismatch `x` (m).
 */
double va_consistency_score(double x, double sigma, double epsilon);

/*
 Creates a hyperparameter set with default values.

 # Safety
 `out` must be a valid pointer to writable storage.
 */
enum VaStatus va_params_new_default(struct VaParams **out);

/*
 Sets one hyperparameter by name from its textual value.

 # Safety
 `params` must be a live handle; `key` and `value` NUL-terminated strings.
 */
enum VaStatus va_params_set(struct VaParams *params, const char *key, const char *value);

/*
 Reads a `key = value` hyperparameter file.

 # Safety
 `path` must be a NUL-terminated string; `out` a valid pointer.
 */
enum VaStatus va_params_load(const char *path, struct VaParams **out);

/*
 Parses hyperparameters from the text of a config file.

 # Safety
 `text` must be a NUL-terminated string; `out` a valid pointer.
 */
enum VaStatus va_params_from_str(const char *text, struct VaParams **out);

/*
 # Safety
 `params` must be NULL or a live handle, freed at most once.
 */
void va_params_free(struct VaParams *params);

/*
 Reads a map file.

 # Safety
 `path` must be a NUL-terminated string; `out` a valid pointer.
 */
enum VaStatus va_map_load(const char *path, struct VaMap **out);

/*
 Writes a map file atomically in canonical form.

 # Safety
 `map` must be a live handle; `path` a NUL-terminated string.
 */
enum VaStatus va_map_save(const struct VaMap *map, const char *path);

/*
 Parses a map from JSON text.

 # Safety
 `json` must be a NUL-terminated string; `out` a valid pointer.
 */
enum VaStatus va_map_from_json(const char *json, struct VaMap **out);

/*
 Canonical JSON text of a map; release with [`va_string_free`].

 # Safety
 `map` must be a live handle; `out` a valid pointer.
 */
enum VaStatus va_map_to_json(const struct VaMap *map, char **out);

/*
 Number of landmarks in a map.

 # Safety
 `map` must be a live handle; `out` a valid pointer.
 */
enum VaStatus va_map_len(const struct VaMap *map, size_t *out);

/*
 Triangulates the tracks in a track-file JSON text into a map.

 # Safety
 `tracks_json` and `agent_id` must be NUL-terminated strings, `params` a
 live handle and `out` a valid pointer.
 */
enum VaStatus va_map_build_from_tracks(const char *tracks_json,
                                       const char *agent_id,
                                       const struct VaParams *params,
                                       struct VaMap **out);

/*
 # Safety
 `map` must be NULL or a live handle, freed at most once.
 */
void va_map_free(struct VaMap *map);

/*
 Matches two maps; the surviving hypotheses are ranked by cardinality.

 # Safety
 `map_a`, `map_b` and `params` must be live handles; `out` a valid pointer.
 */
enum VaStatus va_align(const struct VaMap *map_a,
                       const struct VaMap *map_b,
                       const struct VaParams *params,
                       struct VaHypotheses **out);

/*
 # Safety
 `hyps` must be a live handle; `out` a valid pointer.
 */
enum VaStatus va_hypotheses_len(const struct VaHypotheses *hyps, size_t *out);

/*
 Copies hypothesis `index` (0 is the best) into `out`.

 # Safety
 `hyps` must be a live handle; `out` a valid pointer.
 */
enum VaStatus va_hypotheses_get(const struct VaHypotheses *hyps,
                                size_t index,
                                struct VaHypothesis *out);

/*
 # Safety
 `hyps` must be NULL or a live handle, freed at most once.
 */
void va_hypotheses_free(struct VaHypotheses *hyps);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VISTA_ALIGN_H */
