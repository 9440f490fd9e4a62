#ifndef STYLEMATCH_H
#define STYLEMATCH_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>
#include <stdbool.h>

typedef enum SmStatus {
  SM_STATUS_OK = 0,
  SM_STATUS_NULL_ARGUMENT = 1,
  SM_STATUS_INVALID_ARGUMENT = 2,
  SM_STATUS_IO = 3,
  SM_STATUS_FORMAT = 4,
  SM_STATUS_DATA = 5,
  SM_STATUS_BUFFER_TOO_SMALL = 6,
  SM_STATUS_PANIC = 7,
} SmStatus;

/*
 Exported candidate vectors ready for top-K search.
 */
typedef struct SmIndex SmIndex;

/*
 A loaded checkpoint: vocabulary plus trained model.
 */
typedef struct SmModel SmModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message for the most recent failure on this thread, or NULL after a
 successful call. The pointer stays valid until the next `sm_*` call on the
 same thread.
 */
const char *sm_last_error(void);

/*
 Loads a DSM1 checkpoint.

 # Safety
 `path` must be a NUL-terminated string; `out` must be writable.
 */
enum SmStatus sm_model_load(const char *path, struct SmModel **out);

/*
 # Safety
 `model` must be NULL or a handle from [`sm_model_load`] not yet freed.
 */
void sm_model_free(struct SmModel *model);

/*
 Representation dimension `n`, or 0 for a NULL handle.

 # Safety
 `model` must be NULL or a live model handle.
 */
uintptr_t sm_model_repr_dim(const struct SmModel *model);

/*
 Writes the `n`-dimensional representation of `title` into `out`.

 # Safety
 `model` must be a live handle, `title` a NUL-terminated string and `out`
 must point to `out_len` writable floats.
 */
enum SmStatus sm_model_encode(const struct SmModel *model,
                              const char *title,
                              float *out,
                              uintptr_t out_len);

/*
 Compatibility probability `P(y=1 | query, candidate)`.

 # Safety
 `model` must be a live handle, both titles NUL-terminated strings and
 `out` writable.
 */
enum SmStatus sm_model_match_probability(const struct SmModel *model,
                                         const char *query_title,
                                         const char *cand_title,
                                         double *out);

/*
 Encodes every item of an `item_id<TAB>title` file into a new index.

 # Safety
 `model` must be a live handle, `items_path` a NUL-terminated string and
 `out` writable.
 */
enum SmStatus sm_index_build(const struct SmModel *model,
                             const char *items_path,
                             struct SmIndex **out);

/*
 Loads a DSI1 index file.

 # Safety
 `path` must be a NUL-terminated string; `out` must be writable.
 */
enum SmStatus sm_index_load(const char *path, struct SmIndex **out);

/*
 Writes the index in DSI1 format.

 # Safety
 `index` must be a live handle and `path` a NUL-terminated string.
 */
enum SmStatus sm_index_save(const struct SmIndex *index, const char *path);

/*
 # Safety
 `index` must be NULL or a handle not yet freed.
 */
void sm_index_free(struct SmIndex *index);

/*
 Number of candidates, or 0 for a NULL handle.

 # Safety
 `index` must be NULL or a live handle.
 */
uintptr_t sm_index_len(const struct SmIndex *index);

/*
 Copies the id of candidate `position` into `buf` as a NUL-terminated
 string. `needed`, when not NULL, receives the required size including the
 terminator, also on [`SmStatus::BufferTooSmall`].

 # Safety
 `index` must be a live handle; `buf` must point to `buf_len` writable bytes
 (it may be NULL when `buf_len` is 0); `needed` must be NULL or writable.
 */
enum SmStatus sm_index_item_id(const struct SmIndex *index,
                               uintptr_t position,
                               char *buf,
                               uintptr_t buf_len,
                               uintptr_t *needed);

/*
 Top-`k` candidates for a query title, best first, ties by ascending id.

 Writes up to `k` index positions into `out_positions` and, when
 `out_probabilities` is not NULL, the matching compatibility probabilities.
 `exclude_id` (nullable) names a candidate to skip, typically the query
 item itself. `out_count` receives the number of hits written.

 # Safety
 `model` and `index` must be live handles; `query_title` and `exclude_id`
 NUL-terminated strings (the latter may be NULL); `out_positions` and
 `out_probabilities` must each hold `k` elements when not NULL; `out_count`
 must be writable.
 */
enum SmStatus sm_recommend(const struct SmModel *model,
                           const struct SmIndex *index,
                           const char *query_title,
                           const char *exclude_id,
                           uintptr_t k,
                           uintptr_t *out_positions,
                           double *out_probabilities,
                           uintptr_t *out_count);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STYLEMATCH_H */
