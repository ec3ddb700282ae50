#ifndef SPA_H
#define SPA_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SpaStatus {
  SPA_STATUS_OK = 0,
  SPA_STATUS_NULL_ARGUMENT = 1,
  SPA_STATUS_INVALID_UTF8 = 2,
  SPA_STATUS_PARSE = 3,
  SPA_STATUS_VOCAB = 4,
  SPA_STATUS_CONFIG = 5,
  SPA_STATUS_INPUT = 6,
  SPA_STATUS_SIZE = 7,
  SPA_STATUS_NUMERICAL = 8,
  SPA_STATUS_DIVERGENCE = 9,
  SPA_STATUS_VERSION = 10,
  SPA_STATUS_IO = 11,
  SPA_STATUS_BUFFER_TOO_SMALL = 12,
  SPA_STATUS_OUT_OF_RANGE = 13,
  SPA_STATUS_PANIC = 14,
} SpaStatus;

// A base model with its trained adaptations.
typedef struct SpaAdaptationSet SpaAdaptationSet;

// A training corpus with its vocabulary.
typedef struct SpaCorpus SpaCorpus;

// An attribution matrix with its id maps.
typedef struct SpaMatrix SpaMatrix;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the most recent failure on this thread, or null if the last
// call succeeded. The pointer is valid until the next call on this thread.
const char *spa_last_error_message(void);

// Loads a vocabulary file and a JSONL corpus.
//
// # Safety
// Paths must be null or nul-terminated strings; `out` must be writable.
enum SpaStatus spa_corpus_load(const char *vocab_path,
                               const char *corpus_path,
                               struct SpaCorpus **out_corpus);

// # Safety
// `corpus` must come from [`spa_corpus_load`]; `out_len` must be writable.
enum SpaStatus spa_corpus_len(const struct SpaCorpus *corpus, size_t *out_len);

// # Safety
// `corpus` must be null or come from [`spa_corpus_load`], and not be used
// afterwards.
void spa_corpus_free(struct SpaCorpus *corpus);

// Loads an attribution matrix file and its id map.
//
// # Safety
// `path` must be null or a nul-terminated string; `out_matrix` must be
// writable.
enum SpaStatus spa_matrix_load(const char *path, struct SpaMatrix **out_matrix);

// # Safety
// `matrix` must come from [`spa_matrix_load`]; outputs must be writable.
enum SpaStatus spa_matrix_dims(const struct SpaMatrix *matrix,
                               size_t *out_queries,
                               size_t *out_examples);

// # Safety
// `matrix` must come from [`spa_matrix_load`]; `out_value` must be writable.
enum SpaStatus spa_matrix_get(const struct SpaMatrix *matrix,
                              size_t query,
                              size_t example,
                              double *out_value);

// # Safety
// `matrix` must be null or come from [`spa_matrix_load`], and not be used
// afterwards.
void spa_matrix_free(struct SpaMatrix *matrix);

// Assigns each example (column) to its highest-scoring query row, ties to
// the lowest row. With `normalize` set, rows are standardized first.
// `out_assignments` receives one subset index per example.
//
// # Safety
// `matrix` must come from [`spa_matrix_load`]; `out_assignments` must hold
// `capacity` elements.
enum SpaStatus spa_partition_argmax(const struct SpaMatrix *matrix,
                                    bool normalize,
                                    size_t *out_assignments,
                                    size_t capacity);

// Unbiased pass@k from `n` samples of which `correct` passed.
//
// # Safety
// `out_value` must be writable.
enum SpaStatus spa_pass_at_k(size_t n, size_t correct, size_t k, double *out_value);

// Runs every pipeline stage for the TOML config at `config_path` (null for
// defaults) at one sampling temperature. Up-to-date stages are skipped.
//
// # Safety
// `config_path` must be null or a nul-terminated string.
enum SpaStatus spa_pipeline_run(const char *config_path, double temperature);

// Loads a base model file and the adaptation directory trained on it.
//
// # Safety
// Paths must be null or nul-terminated strings; `out_set` must be writable.
enum SpaStatus spa_adaptations_load(const char *base_path,
                                    const char *dir,
                                    struct SpaAdaptationSet **out_set);

// # Safety
// `set` must come from [`spa_adaptations_load`]; `out_k` must be writable.
enum SpaStatus spa_adaptations_count(const struct SpaAdaptationSet *set, size_t *out_k);

// Decodes up to `max_len` tokens after `prompt` with adaptation `index`.
// Temperature 0 is greedy. A negative `eos` disables early stopping.
// `out_len` receives the number of tokens written to `out_tokens`.
//
// # Safety
// `set` must come from [`spa_adaptations_load`]; `prompt` must hold
// `prompt_len` ids (it may be null when `prompt_len` is 0); `out_tokens`
// must hold `capacity` elements.
enum SpaStatus spa_adaptations_generate(const struct SpaAdaptationSet *set,
                                        size_t index,
                                        const size_t *prompt,
                                        size_t prompt_len,
                                        size_t max_len,
                                        double temperature,
                                        int64_t eos,
                                        uint64_t seed,
                                        size_t *out_tokens,
                                        size_t capacity,
                                        size_t *out_len);

// # Safety
// `set` must be null or come from [`spa_adaptations_load`], and not be used
// afterwards.
void spa_adaptations_free(struct SpaAdaptationSet *set);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SPA_H */
