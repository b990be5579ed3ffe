#ifndef COTFORGE_H
#define COTFORGE_H

/* Generated by cbindgen from crates/ffi/src. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CfLabel {
  CF_LABEL_NEGATIVE = 0,
  CF_LABEL_NEUTRAL = 1,
  CF_LABEL_POSITIVE = 2,
} CfLabel;

typedef enum CfRole {
  CF_ROLE_TEACHER_STAGE1 = 0,
  CF_ROLE_TEACHER_STAGE2 = 1,
  CF_ROLE_TEACHER_FULL = 2,
  CF_ROLE_ASSISTANT_AUG = 3,
  CF_ROLE_FULL = 4,
} CfRole;

typedef enum CfSection {
  CF_SECTION_TEXT_ANALYSIS = 0,
  CF_SECTION_IMAGE_ANALYSIS = 1,
  CF_SECTION_CONFLICT_RESOLUTION = 2,
  CF_SECTION_CONCLUSION = 3,
} CfSection;

typedef enum CfStatus {
  CF_STATUS_OK = 0,
  CF_STATUS_NULL_ARGUMENT = 1,
  CF_STATUS_INVALID_UTF8 = 2,
  CF_STATUS_IO = 3,
  CF_STATUS_FORMAT = 4,
  CF_STATUS_VALIDATION = 5,
  CF_STATUS_CONFLICT = 6,
  CF_STATUS_SHAPE = 7,
  CF_STATUS_DOMAIN = 8,
  CF_STATUS_PANIC = 99,
} CfStatus;

/**
 * Opaque reasoning dataset.
 */
typedef struct CfDataset CfDataset;

/**
 * Opaque result of parsing one model response.
 */
typedef struct CfParse CfParse;

typedef struct CfClassification {
  size_t total;
  double accuracy;
  double weighted_f1;
  double macro_f1;
} CfClassification;

typedef struct CfCountCheck {
  size_t expected;
  size_t reported;
  size_t diff;
  bool ok;
} CfCountCheck;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next `cf_` call on the same thread.
 */
const char *cf_last_error(void);

/**
 * Static name of a status code.
 */
const char *cf_status_name(enum CfStatus status);

/**
 * Library version as a static string.
 */
const char *cf_version(void);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and must not be used afterwards.
 */
void cf_string_free(char *s);

/**
 * Loads a JSON Lines dataset and its `.meta.json` sidecar.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out_dataset` writable.
 */
enum CfStatus cf_dataset_load(const char *path, struct CfDataset **out_dataset);

/**
 * Union of two datasets. The inputs are left untouched.
 *
 * # Safety
 * `a` and `b` must be live handles and `out_dataset` writable.
 */
enum CfStatus cf_dataset_merge(const struct CfDataset *a,
                               const struct CfDataset *b,
                               struct CfDataset **out_dataset);

/**
 * Writes the dataset and its sidecar.
 *
 * # Safety
 * `dataset` must be a live handle and `path` a NUL-terminated string.
 */
enum CfStatus cf_dataset_save(const struct CfDataset *dataset, const char *path);

/**
 * Number of entries; 0 for a null handle.
 *
 * # Safety
 * `dataset` must be null or a live handle.
 */
size_t cf_dataset_len(const struct CfDataset *dataset);

/**
 * # Safety
 * `dataset` must be a live handle and `out_role` writable.
 */
enum CfStatus cf_dataset_role(const struct CfDataset *dataset, enum CfRole *out_role);

/**
 * Releases a dataset handle. Null is ignored.
 *
 * # Safety
 * `dataset` must come from this library and must not be used afterwards.
 */
void cf_dataset_free(struct CfDataset *dataset);

/**
 * `softmax(z / tau)` into `out_probs`, which holds `n` values.
 *
 * # Safety
 * `z` and `out_probs` must point to `n` doubles.
 */
enum CfStatus cf_softmax(const double *z, size_t n, double tau, double *out_probs);

/**
 * `KL(p || q)` in nats over `n` outcomes.
 *
 * # Safety
 * `p` and `q` must point to `n` doubles and `out_kl` be writable.
 */
enum CfStatus cf_kl_divergence(const double *p, const double *q, size_t n, double *out_kl);

/**
 * Sentence BLEU-4 of two texts after the library's tokenization.
 *
 * # Safety
 * Both strings must be NUL-terminated and `out_score` writable.
 */
enum CfStatus cf_bleu(const char *hyp, const char *reference, double *out_score);

/**
 * # Safety
 * Both strings must be NUL-terminated and `out_score` writable.
 */
enum CfStatus cf_rouge_l(const char *hyp, const char *reference, double *out_score);

/**
 * # Safety
 * Both strings must be NUL-terminated and `out_score` writable.
 */
enum CfStatus cf_meteor(const char *hyp, const char *reference, double *out_score);

/**
 * Accuracy and F1 scores over labels given as `CfLabel` values.
 *
 * # Safety
 * `gold` and `pred` must point to `n` ints and `out_report` be writable.
 */
enum CfStatus cf_classification(const int32_t *gold,
                                const int32_t *pred,
                                size_t n,
                                struct CfClassification *out_report);

/**
 * Compares a reported training-set size with `n + round(accuracy * n)`.
 *
 * # Safety
 * `out_check` must be writable.
 */
enum CfStatus cf_count_consistency(size_t n,
                                   double accuracy,
                                   size_t reported,
                                   size_t tolerance,
                                   struct CfCountCheck *out_check);

/**
 * Parses a raw response. Malformed text is not an error: the handle then
 * reports its defects.
 *
 * # Safety
 * `raw` must be a NUL-terminated string and `out_parse` writable.
 */
enum CfStatus cf_parse(const char *raw, struct CfParse **out_parse);

/**
 * True when the response parsed into a chain and a label.
 *
 * # Safety
 * `p` must be null or a live handle.
 */
bool cf_parse_ok(const struct CfParse *p);

/**
 * # Safety
 * `p` must be a live handle and `out_label` writable.
 */
enum CfStatus cf_parse_label(const struct CfParse *p, enum CfLabel *out_label);

/**
 * Copies one section's text; free it with `cf_string_free`.
 *
 * # Safety
 * `p` must be a live handle and `out_text` writable.
 */
enum CfStatus cf_parse_section(const struct CfParse *p, enum CfSection section, char **out_text);

/**
 * Number of defects; 0 for a successful parse or a null handle.
 *
 * # Safety
 * `p` must be null or a live handle.
 */
size_t cf_parse_defect_count(const struct CfParse *p);

/**
 * Short description of defect `index`, such as `missing-section(conclusion)`.
 *
 * # Safety
 * `p` must be a live handle and `out_text` writable.
 */
enum CfStatus cf_parse_defect(const struct CfParse *p, size_t index, char **out_text);

/**
 * Releases a parse handle. Null is ignored.
 *
 * # Safety
 * `p` must come from this library and must not be used afterwards.
 */
void cf_parse_free(struct CfParse *p);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* COTFORGE_H */
