#ifndef CSSNET_H
#define CSSNET_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum CssStatus {
  CSS_STATUS_OK = 0,
  CSS_STATUS_NULL_ARGUMENT = 1,
  CSS_STATUS_INVALID_UTF8 = 2,
  /**
   * A precondition on shapes, indices or values failed.
   */
  CSS_STATUS_CONTRACT = 3,
  /**
   * Malformed or inconsistent configuration.
   */
  CSS_STATUS_CONFIG = 4,
  CSS_STATUS_MISSING_INPUT = 5,
  CSS_STATUS_IO = 6,
  CSS_STATUS_JSON = 7,
  /**
   * Non-finite values or a diverged training run.
   */
  CSS_STATUS_NUMERIC = 8,
  /**
   * The corpus generator could not satisfy the request.
   */
  CSS_STATUS_GENERATION = 9,
  /**
   * A Rust panic was caught at the boundary.
   */
  CSS_STATUS_PANIC = 10,
} CssStatus;

/**
 * A generated or loaded corpus.
 */
typedef struct CssCorpus CssCorpus;

/**
 * A trained model together with the checkpoint it came from.
 */
typedef struct CssModel CssModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *cssnet_version(void);

/**
 * Message of the last failure on this thread, or null. The pointer stays
 * valid until the next failing call on this thread.
 */
const char *cssnet_last_error(void);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed already.
 */
void cssnet_string_free(char *s);

/**
 * Generates a corpus from the `data` and `schema` sections of an
 * experiment config.
 *
 * # Safety
 * `config_json` is null or a NUL-terminated string; `out` is writable.
 */
enum CssStatus cssnet_corpus_generate(const char *config_json, struct CssCorpus **out);

/**
 * Reads a corpus directory written by `cssnet_corpus_write` or the CLI.
 *
 * # Safety
 * `dir` is a NUL-terminated path; `out` is writable.
 */
enum CssStatus cssnet_corpus_read(const char *dir, struct CssCorpus **out);

/**
 * # Safety
 * `corpus` is a live handle; `dir` is a NUL-terminated path.
 */
enum CssStatus cssnet_corpus_write(const struct CssCorpus *corpus, const char *dir);

/**
 * Catalog size, training triplets and held-out queries. Any out pointer
 * may be null.
 *
 * # Safety
 * `corpus` is a live handle; non-null out pointers are writable.
 */
enum CssStatus cssnet_corpus_sizes(const struct CssCorpus *corpus,
                                   size_t *items,
                                   size_t *train,
                                   size_t *queries);

/**
 * Valid-set statistics of the training split as JSON.
 *
 * # Safety
 * `corpus` is a live handle; `out_json` is writable.
 */
enum CssStatus cssnet_corpus_stats(const struct CssCorpus *corpus, char **out_json);

/**
 * # Safety
 * `corpus` is null or a handle not freed before.
 */
void cssnet_corpus_free(struct CssCorpus *corpus);

/**
 * Trains on the corpus' training split with the `model` and `train`
 * sections of an experiment config.
 *
 * # Safety
 * `corpus` is a live handle; `config_json` is null or NUL-terminated;
 * `out` is writable.
 */
enum CssStatus cssnet_model_train(const struct CssCorpus *corpus,
                                  const char *config_json,
                                  struct CssModel **out);

/**
 * # Safety
 * `path` is a NUL-terminated path; `out` is writable.
 */
enum CssStatus cssnet_model_load(const char *path, struct CssModel **out);

/**
 * # Safety
 * `model` is a live handle; `path` is a NUL-terminated path.
 */
enum CssStatus cssnet_model_save(const struct CssModel *model, const char *path);

/**
 * # Safety
 * `model` is null or a handle not freed before.
 */
void cssnet_model_free(struct CssModel *model);

/**
 * Recall metrics on the held-out queries, as the same JSON document the
 * CLI writes to `metrics.json`. `alphas` points to four weights or is
 * null; `ks` may be null when `n_ks` is 0, selecting 1, 10 and 50.
 *
 * # Safety
 * Handles are live; `alphas` holds 4 values when non-null; `ks` holds
 * `n_ks` values; `out_json` is writable.
 */
enum CssStatus cssnet_model_evaluate(const struct CssModel *model,
                                     const struct CssCorpus *corpus,
                                     const double *alphas,
                                     const size_t *ks,
                                     size_t n_ks,
                                     char **out_json);

/**
 * Joint similarity of held-out query `query` to every catalog item,
 * written to `out_scores[0..len]`; `len` must equal the catalog size.
 *
 * # Safety
 * Handles are live; `alphas` holds 4 values when non-null; `out_scores`
 * has room for `len` values.
 */
enum CssStatus cssnet_model_scores(const struct CssModel *model,
                                   const struct CssCorpus *corpus,
                                   size_t query,
                                   const double *alphas,
                                   double *out_scores,
                                   size_t len);

/**
 * Finite-difference gradient check of a tiny full model, configured by
 * the `gradcheck` section of an experiment config.
 *
 * # Safety
 * `config_json` is null or NUL-terminated; `out_max_rel_error` is writable.
 */
enum CssStatus cssnet_gradcheck(const char *config_json, double *out_max_rel_error);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CSSNET_H */
