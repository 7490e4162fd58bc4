#ifndef NERSCRIBE_H
#define NERSCRIBE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum NsStatus {
  NsStatus_Ok = 0,
  NsStatus_NullArgument = 1,
  NsStatus_InvalidUtf8 = 2,
  /**
   * The input does not parse under the requested tag scheme.
   */
  NsStatus_ParseError = 3,
  /**
   * An argument is out of range or inconsistent (bad index, empty
   * reference, unalignable span).
   */
  NsStatus_InvalidArgument = 4,
  /**
   * A model file is malformed or a model produced invalid logits.
   */
  NsStatus_ModelError = 5,
  /**
   * A panic was caught at the boundary.
   */
  NsStatus_Panic = 6,
} NsStatus;

typedef enum NsScheme {
  NsScheme_SpanMarker = 0,
  NsScheme_Bio = 1,
} NsScheme;

/**
 * Opaque table-driven decoding model.
 */
typedef struct NsModel NsModel;

/**
 * Opaque parsed transcript.
 */
typedef struct NsTranscript NsTranscript;

/**
 * One entity as character offsets into the transcript text.
 */
typedef struct NsSpan {
  size_t start_char;
  size_t end_char;
} NsSpan;

typedef struct NsCounts {
  size_t true_positives;
  size_t false_positives;
  size_t false_negatives;
} NsCounts;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null. Valid until the next
 * call into this library on the same thread; do not free.
 */
const char *ns_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *ns_version(void);

/**
 * # Safety
 * `s` must be null or a string returned by this library, not yet freed.
 */
void ns_string_free(char *s);

/**
 * Parses `input` under `scheme`; `strict` rejects BIO continuation tags
 * that do not follow their own entity.
 *
 * # Safety
 * `input` must be a NUL-terminated string and `out` a valid pointer.
 */
enum NsStatus ns_transcript_parse(const char *input,
                                  enum NsScheme scheme,
                                  bool strict,
                                  struct NsTranscript **out);

/**
 * # Safety
 * `t` must be null or a handle from [`ns_transcript_parse`], not yet freed.
 */
void ns_transcript_free(struct NsTranscript *t);

/**
 * # Safety
 * `t` must be a live transcript handle and `out` a valid pointer.
 */
enum NsStatus ns_transcript_serialize(const struct NsTranscript *t,
                                      enum NsScheme scheme,
                                      char **out);

/**
 * Plain text with all tags removed.
 *
 * # Safety
 * `t` must be a live transcript handle and `out` a valid pointer.
 */
enum NsStatus ns_transcript_text(const struct NsTranscript *t, char **out);

/**
 * Number of entities; 0 for a null handle.
 *
 * # Safety
 * `t` must be null or a live transcript handle.
 */
size_t ns_transcript_entity_count(const struct NsTranscript *t);

/**
 * Offsets and label of entity `index`, in text order. Either out-pointer
 * may be null to skip it.
 *
 * # Safety
 * `t` must be a live transcript handle; non-null out-pointers must be valid.
 */
enum NsStatus ns_transcript_entity(const struct NsTranscript *t,
                                   size_t index,
                                   struct NsSpan *span,
                                   char **label);

/**
 * Re-serializes `input` from one scheme to another.
 *
 * # Safety
 * `input` must be a NUL-terminated string and `out` a valid pointer.
 */
enum NsStatus ns_convert(const char *input,
                         enum NsScheme from,
                         enum NsScheme to,
                         bool strict,
                         char **out);

/**
 * Word error rate under the default normalizer (lowercase, trimmed
 * punctuation, collapsed whitespace).
 *
 * # Safety
 * Both strings must be NUL-terminated and `rate` a valid pointer.
 */
enum NsStatus ns_wer(const char *reference, const char *hypothesis, double *rate);

/**
 * Strict entity match counts of `pred` against `gold`.
 *
 * # Safety
 * Both handles must be live and `out` a valid pointer.
 */
enum NsStatus ns_entity_f1(const struct NsTranscript *gold,
                           const struct NsTranscript *pred,
                           struct NsCounts *out);

/**
 * Softmax of `logits` after adding `bias` to entry `start`; writes `len`
 * probabilities to `out`.
 *
 * # Safety
 * `logits` and `out` must point to `len` doubles.
 */
enum NsStatus ns_biased_softmax(const double *logits,
                                size_t len,
                                size_t start,
                                double bias,
                                double *out);

/**
 * Loads a table model from its JSON text.
 *
 * # Safety
 * `json` must be a NUL-terminated string and `out` a valid pointer.
 */
enum NsStatus ns_model_from_json(const char *json, struct NsModel **out);

/**
 * # Safety
 * `m` must be null or a handle from [`ns_model_from_json`], not yet freed.
 */
void ns_model_free(struct NsModel *m);

/**
 * Greedy decoding for a prompt of `n_labels` positive labels. With
 * `constrain`, only prompted labels may be emitted.
 *
 * # Safety
 * `m` must be a live model handle, `labels` must point to `n_labels`
 * NUL-terminated strings (or be null when `n_labels` is 0), and `out` must
 * be a valid pointer.
 */
enum NsStatus ns_model_decode(const struct NsModel *m,
                              const char *const *labels,
                              size_t n_labels,
                              double bias,
                              bool constrain,
                              char **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NERSCRIBE_H */
