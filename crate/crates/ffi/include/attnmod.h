#ifndef ATTNMOD_H
#define ATTNMOD_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum AttnmodStatus {
  ATTNMOD_STATUS_OK = 0,
  ATTNMOD_STATUS_NULL_POINTER = 1,
  ATTNMOD_STATUS_INVALID_ARGUMENT = 2,
  ATTNMOD_STATUS_UNKNOWN_BLOCK = 3,
  ATTNMOD_STATUS_IO = 4,
  ATTNMOD_STATUS_CHECKPOINT = 5,
  ATTNMOD_STATUS_NUMERIC = 6,
  ATTNMOD_STATUS_BUFFER_TOO_SMALL = 7,
  ATTNMOD_STATUS_PANIC = 8,
} AttnmodStatus;

// A loaded network.
typedef struct AttnmodModel AttnmodModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread; empty after success.
// The pointer stays valid until the next call on this thread.
const char *attnmod_last_error(void);

// Library version as a static NUL-terminated string.
const char *attnmod_version(void);

// Loads a checkpoint file.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a writable pointer.
enum AttnmodStatus attnmod_model_load(const char *path, struct AttnmodModel **out);

// Builds an untrained network with the default configuration.
//
// # Safety
// `out` must be a writable pointer.
enum AttnmodStatus attnmod_model_init(uint64_t seed, struct AttnmodModel **out);

// Releases a model. Null is accepted.
//
// # Safety
// `model` must come from this library and not be used afterwards.
void attnmod_model_free(struct AttnmodModel *model);

// Number of `f32` values in one generated image (`3·H·W`).
//
// # Safety
// `model` must be a live handle and `out` writable.
enum AttnmodStatus attnmod_model_image_len(const struct AttnmodModel *model, size_t *out);

// Number of addressable attention blocks.
//
// # Safety
// `model` must be a live handle and `out` writable.
enum AttnmodStatus attnmod_model_block_count(const struct AttnmodModel *model, size_t *out);

// Short code of block `index`, e.g. `U1A1A2`. The pointer lives as long as
// the model.
//
// # Safety
// `model` must be a live handle and `out` writable.
enum AttnmodStatus attnmod_model_block_code(const struct AttnmodModel *model,
                                            size_t index,
                                            const char **out);

// Runs one generation described by a JSON request, for example
// `{"seed": 0, "prompt": [0, 6, 11, 13], "attnmod": [{"block": "U1A1A2",
// "start": -20.0, "rate": {"constant": 1.0}}]}`, and writes the `[3×H×W]`
// image in `[−1, 1]` to `image`.
//
// # Safety
// `model` must be a live handle, `request_json` NUL-terminated and `image`
// valid for `image_len` floats.
enum AttnmodStatus attnmod_denoise(const struct AttnmodModel *model,
                                   const char *request_json,
                                   float *image,
                                   size_t image_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ATTNMOD_H */
