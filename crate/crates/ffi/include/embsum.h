#ifndef EMBSUM_H
#define EMBSUM_H

#include <stddef.h>
#include <stdint.h>

typedef enum EmbsumStatus {
  EMBSUM_STATUS_OK = 0,
  EMBSUM_STATUS_NULL_ARGUMENT = 1,
  EMBSUM_STATUS_INVALID_ARGUMENT = 2,
  EMBSUM_STATUS_IO = 3,
  EMBSUM_STATUS_FORMAT = 4,
  EMBSUM_STATUS_UNKNOWN_ID = 5,
  EMBSUM_STATUS_DIMENSION = 6,
  EMBSUM_STATUS_BUFFER_TOO_SMALL = 7,
  EMBSUM_STATUS_UNDEFINED = 8,
  EMBSUM_STATUS_PANIC = 9,
  EMBSUM_STATUS_INTERNAL = 10,
} EmbsumStatus;

// A loaded checkpoint: model, parameters and vocabulary.
typedef struct EmbsumModel EmbsumModel;

// A read-only embedding file.
typedef struct EmbsumStore EmbsumStore;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread; empty after a success.
// The pointer stays valid until the next embsum call on the same thread.
const char *embsum_last_error_message(void);

// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum EmbsumStatus embsum_model_load(const char *path, struct EmbsumModel **out);

// # Safety
// `model` must come from `embsum_model_load` and not be used afterwards. Null is a no-op.
void embsum_model_free(struct EmbsumModel *model);

// Model width `d`, user codes `m` and candidate codes `n` (1 under the SOS ablation).
//
// # Safety
// Pointers must be valid.
enum EmbsumStatus embsum_model_dims(const struct EmbsumModel *model,
                                    size_t *d,
                                    size_t *upe_codes,
                                    size_t *cpe_codes);

// Tokenizes already formatted item text as `[SOS] tokens [EOS]` with the
// checkpoint vocabulary. Writes the full length to `out_len` even when
// `capacity` is too small.
//
// # Safety
// `text` must be a NUL-terminated string and `out` hold `capacity` ids.
enum EmbsumStatus embsum_model_tokenize(const struct EmbsumModel *model,
                                        const char *text,
                                        uint32_t *out,
                                        size_t capacity,
                                        size_t *out_len);

// Candidate embedding (`n × d`, row-major) of one tokenized item starting with `[SOS]`.
//
// # Safety
// `tokens` must hold `len` ids and `out` room for `capacity` values.
enum EmbsumStatus embsum_model_item_cpe(const struct EmbsumModel *model,
                                        const uint32_t *tokens,
                                        size_t len,
                                        double *out,
                                        size_t capacity);

// User embedding (`m × d`) from the most recent history items, oldest first.
// Item `i` occupies `item_lens[i]` ids of `tokens`. Zero items gives the
// cold-start embedding. Uses greedy summary generation.
//
// # Safety
// `tokens` must hold the sum of `item_lens`, `item_lens` `n_items` entries.
enum EmbsumStatus embsum_model_user_upe(const struct EmbsumModel *model,
                                        const uint32_t *tokens,
                                        const size_t *item_lens,
                                        size_t n_items,
                                        double *out,
                                        size_t capacity);

// Gated relevance score of a user embedding (`m × d`) and candidate embedding (`n × d`).
//
// # Safety
// `upe` must hold `upe_len` and `cpe` `cpe_len` values.
enum EmbsumStatus embsum_score(const struct EmbsumModel *model,
                               const double *upe,
                               size_t upe_len,
                               const double *cpe,
                               size_t cpe_len,
                               double *out_score);

// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum EmbsumStatus embsum_store_open(const char *path, struct EmbsumStore **out);

// # Safety
// `store` must come from `embsum_store_open` and not be used afterwards. Null is a no-op.
void embsum_store_free(struct EmbsumStore *store);

// Record count, kind (0 = CPE, 1 = UPE), codes per record and width.
//
// # Safety
// Pointers must be valid.
enum EmbsumStatus embsum_store_info(const struct EmbsumStore *store,
                                    size_t *count,
                                    uint8_t *kind,
                                    size_t *num_codes,
                                    size_t *d);

// Copies the stored embedding of `id`.
//
// # Safety
// `id` must be a NUL-terminated string and `out` hold `capacity` values.
enum EmbsumStatus embsum_store_get(const struct EmbsumStore *store,
                                   const char *id,
                                   double *out,
                                   size_t capacity);

// Ranks `n` candidates for a user from stored embeddings with the model's head.
// Writes candidate indices in descending score order (ties by id) and the matching scores.
//
// # Safety
// `candidates` must hold `n` NUL-terminated strings; `out_order` and `out_scores` `n` slots.
enum EmbsumStatus embsum_score_offline(const struct EmbsumModel *model,
                                       const struct EmbsumStore *upes,
                                       const struct EmbsumStore *cpes,
                                       const char *user_id,
                                       const char *const *candidates,
                                       size_t n,
                                       size_t *out_order,
                                       double *out_scores);

// Impression AUC; `EMBSUM_STATUS_UNDEFINED` when all labels are equal.
//
// # Safety
// `scores` and `labels` must hold `n` entries.
enum EmbsumStatus embsum_auc(const double *scores, const uint8_t *labels, size_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EMBSUM_H */
