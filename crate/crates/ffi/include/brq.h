#ifndef BRQ_H
#define BRQ_H

/* Generated by cbindgen. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum {
  BRQ_STATUS_OK = 0,
  BRQ_STATUS_NULL_POINTER = 1,
  BRQ_STATUS_INVALID_ARGUMENT = 2,
  BRQ_STATUS_SHAPE = 3,
  BRQ_STATUS_BUFFER_TOO_SMALL = 4,
  BRQ_STATUS_SIGNAL_TOO_SHORT = 5,
  BRQ_STATUS_INTERNAL = 6,
  BRQ_STATUS_PANIC = 7,
} BrqStatus;

/**
 * Frozen random-projection quantizer bank.
 */
typedef struct BrqBank BrqBank;

/**
 * Parameters for [`brq_bank_new`].
 */
typedef struct {
  uint64_t seed;
  uintptr_t n_codebooks;
  uintptr_t codebook_size;
  uintptr_t codebook_dim;
  uintptr_t stack_factor;
  uintptr_t input_dim;
} BrqBankSpec;

/**
 * Per-codebook breakdown is written to caller arrays; this holds the scalars.
 */
typedef struct {
  double total;
  uintptr_t masked_positions;
} BrqLossSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *brq_version(void);

/**
 * Message for the last failed call on this thread, or null after a success.
 * The pointer stays valid until the next call into the library on this thread.
 */
const char *brq_last_error_message(void);

/**
 * Builds a bank from `spec` and stores the handle in `*out`.
 */
BrqStatus brq_bank_new(BrqBankSpec spec, BrqBank **out);

/**
 * Releases a bank. Null is ignored.
 */
void brq_bank_free(BrqBank *bank);

/**
 * Number of target positions produced for `frames` input frames.
 */
uintptr_t brq_bank_target_len(const BrqBank *bank, uintptr_t frames);

/**
 * SHA-256 of the bank's projection and codebook matrices, written to `out[32]`.
 */
BrqStatus brq_bank_checksum(const BrqBank *bank, uint8_t *out);

/**
 * Quantizes a `frames × dim` normalized feature matrix. Writes
 * `n_codebooks × target_len(frames)` indices to `out` (capacity `out_len`).
 */
BrqStatus brq_bank_quantize(const BrqBank *bank,
                            const double *features,
                            uintptr_t frames,
                            uintptr_t dim,
                            uint32_t *out,
                            uintptr_t out_len);

/**
 * 80-bin log-mel features with the default 25 ms / 10 ms framing.
 * `*out_frames` always receives the frame count; pass `out = NULL` to query
 * it. Otherwise `out` must hold `frames * 80` values (`out_len`).
 */
BrqStatus brq_log_mel(const double *samples,
                      uintptr_t n_samples,
                      uint32_t sample_rate_hz,
                      double *out,
                      uintptr_t out_len,
                      uintptr_t *out_frames);

/**
 * Span mask over `frames` frames; `out[t]` is 1 when frame `t` is masked.
 */
BrqStatus brq_sample_mask(uintptr_t frames,
                          double p_start,
                          uintptr_t span,
                          uint64_t seed,
                          uint8_t *out);

/**
 * Cluster-specific codebook weights for an utterance in `cluster`, written to `out[n_codebooks]`.
 */
BrqStatus brq_codebook_weights(uintptr_t cluster,
                               uintptr_t n_codebooks,
                               double primary_weight,
                               double secondary_weight,
                               double *out);

/**
 * Weighted masked CE + KL objective.
 *
 * `probs` and `sims` are `n_codebooks × positions × vocab`; `targets` is
 * `n_codebooks × positions`; `masked` is `positions` bytes (non-zero = masked).
 * `sims` may be null when `w_kl == 0`; `weights` (`n_codebooks`) may be null
 * for uniform weights. Per-codebook CE and KL go to `out_ce` / `out_kl` when
 * those are non-null.
 */
BrqStatus brq_combined_loss(const double *probs,
                            const uint32_t *targets,
                            const double *sims,
                            const uint8_t *masked,
                            uintptr_t n_codebooks,
                            uintptr_t positions,
                            uintptr_t vocab,
                            double w_ce,
                            double w_kl,
                            const double *weights,
                            BrqLossSummary *out,
                            double *out_ce,
                            double *out_kl);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BRQ_H */
