#ifndef MEG_FFI_H
#define MEG_FFI_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum MegStatus {
  MEG_STATUS_OK = 0,
  MEG_STATUS_NULL_POINTER = 1,
  MEG_STATUS_INVALID_ARGUMENT = 2,
  MEG_STATUS_CONFIG = 3,
  MEG_STATUS_IO = 4,
  MEG_STATUS_PROTOCOL = 5,
  MEG_STATUS_CHANNEL = 6,
  MEG_STATUS_METRIC = 7,
  // The caller's buffer is too small; the required size was still written.
  MEG_STATUS_BUFFER_TOO_SMALL = 8,
  MEG_STATUS_PANIC = 9,
} MegStatus;

// `MegChannel` selects the fading model for [`meg_ue_receive`].
typedef enum MegChannel {
  MEG_CHANNEL_AWGN = 0,
  MEG_CHANNEL_RAYLEIGH_BLOCK = 1,
} MegChannel;

// Opaque experiment configuration.
typedef struct MegConfig MegConfig;

// Opaque set of trained (or untrained) models.
typedef struct MegDeployment MegDeployment;

// Opaque seed frame.
typedef struct MegFrame MegFrame;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the last error message of this thread into `buf` (NUL
// terminated) and returns the buffer size it needs. Pass a null `buf` to
// query the size.
//
// # Safety
// `buf` must be null or valid for `cap` bytes.
size_t meg_last_error(char *buf, size_t cap);

// Library version as a static NUL-terminated string.
const char *meg_version(void);

// Built-in preset by name: `"desk"` or `"paper-arithmetic"`.
//
// # Safety
// `name` must be a NUL-terminated string; `out` must be writable.
enum MegStatus meg_config_preset(const char *name, struct MegConfig **out);

// Parses and validates a TOML config.
//
// # Safety
// `toml` must be a NUL-terminated string; `out` must be writable.
enum MegStatus meg_config_from_toml(const char *toml, struct MegConfig **out);

// Writes the 16-hex-digit config hash. `needed` (optional) receives the
// buffer size required, 17.
//
// # Safety
// `cfg` must come from this library; `buf` must be valid for `cap` bytes.
enum MegStatus meg_config_hash(const struct MegConfig *cfg, char *buf, size_t cap, size_t *needed);

// # Safety
// `cfg` must be null or come from this library, and is invalid afterwards.
void meg_config_free(struct MegConfig *cfg);

// Loads a trained bundle (`meg train` output) and checks it against `cfg`.
//
// # Safety
// `cfg` must come from this library; `dir` must be a NUL-terminated path.
enum MegStatus meg_deployment_load(const struct MegConfig *cfg,
                                   const char *dir,
                                   struct MegDeployment **out);

// Randomly initialized models for the config's architecture and rates.
//
// # Safety
// `cfg` must come from this library; `out` must be writable.
enum MegStatus meg_deployment_untrained(const struct MegConfig *cfg,
                                        uint64_t seed,
                                        struct MegDeployment **out);

// Number of `f32` values in one generated image.
//
// # Safety
// `deploy` must be null or come from this library.
size_t meg_deployment_image_len(const struct MegDeployment *deploy);

// # Safety
// `deploy` must be null or come from this library, and is invalid afterwards.
void meg_deployment_free(struct MegDeployment *deploy);

// Edge-server side: samples the latent for `prompt` and compresses it into a
// seed frame. `link_snr_db` picks the codec trained nearest to it; pass NaN
// when the link quality is unknown.
//
// # Safety
// Pointers must come from this library or be valid NUL-terminated strings.
enum MegStatus meg_es_generate(const struct MegDeployment *deploy,
                               const char *prompt,
                               double f_c,
                               uint64_t noise_seed,
                               size_t block_length,
                               double link_snr_db,
                               struct MegFrame **out);

// User-equipment side: sends `frame` over the channel with unit power per
// block and decodes the received seed into `image` (values in [0, 1]).
// An infinite `snr_db` bypasses the channel.
//
// # Safety
// `image` must be valid for `cap` floats.
enum MegStatus meg_ue_receive(const struct MegDeployment *deploy,
                              const struct MegFrame *frame,
                              enum MegChannel channel,
                              double snr_db,
                              uint64_t channel_seed,
                              float *image,
                              size_t cap);

// Parses a wire-format frame.
//
// # Safety
// `bytes` must be valid for `len` bytes.
enum MegStatus meg_frame_decode(const uint8_t *bytes, size_t len, struct MegFrame **out);

// Serializes `frame`. `written` receives the encoded size even when the
// buffer is too small, so a null `buf` queries the size.
//
// # Safety
// `buf` must be null or valid for `cap` bytes; `written` must be writable.
enum MegStatus meg_frame_encode(const struct MegFrame *frame,
                                uint8_t *buf,
                                size_t cap,
                                size_t *written);

// Number of seed symbols carried by the frame.
//
// # Safety
// `frame` must be null or come from this library.
size_t meg_frame_symbols(const struct MegFrame *frame);

// Compression rate recorded in the header; NaN for a null frame.
//
// # Safety
// `frame` must be null or come from this library.
double meg_frame_f_c(const struct MegFrame *frame);

// # Safety
// `frame` must be null or come from this library, and is invalid afterwards.
void meg_frame_free(struct MegFrame *frame);

// PSNR in dB between two equal-length signals with peak `i_max`.
// Identical inputs give +infinity.
//
// # Safety
// `a` and `b` must be valid for `len` doubles; `out` must be writable.
enum MegStatus meg_psnr(const double *a, const double *b, size_t len, double i_max, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MEG_FFI_H */
