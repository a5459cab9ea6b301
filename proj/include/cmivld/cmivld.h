// Copyright 2026 The cmivld Authors
// SPDX-License-Identifier: Apache-2.0

// C interface to the cmivld core.
//
// Objects are opaque handles released with their *_free function. Every
// fallible call returns a cmivld_status; on failure the message is available
// from cmivld_last_error() on the calling thread until the next failing call.
// Structured inputs and outputs are UTF-8 JSON strings. Output strings are
// heap-allocated by the library and must be released with cmivld_free_string.

#ifndef CMIVLD_CMIVLD_H_
#define CMIVLD_CMIVLD_H_

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define CMIVLD_API __declspec(dllexport)
#else
#define CMIVLD_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum cmivld_status {
  CMIVLD_OK = 0,
  CMIVLD_INVALID_INPUT = 1,
  CMIVLD_INVALID_CONFIG = 2,
  CMIVLD_SEQUENCE_TOO_LONG = 3,
  CMIVLD_INDEX = 4,
  CMIVLD_IO = 5,
  CMIVLD_NOT_FOUND = 6,
  CMIVLD_CORRUPT_CHECKPOINT = 7,
  CMIVLD_UNSUPPORTED_FORMAT = 8,
  CMIVLD_ENUMERATION_TOO_LARGE = 9,
  CMIVLD_NUMERICAL = 10,
  CMIVLD_INTERNAL = 100
} cmivld_status;

typedef struct cmivld_corpus cmivld_corpus;
typedef struct cmivld_model cmivld_model;
typedef struct cmivld_purifier cmivld_purifier;

CMIVLD_API const char* cmivld_version(void);
CMIVLD_API const char* cmivld_status_name(cmivld_status status);
CMIVLD_API const char* cmivld_last_error(void);
CMIVLD_API void cmivld_free_string(char* s);

// Seed of the labeled substream of a root seed.
CMIVLD_API uint64_t cmivld_derive_seed(uint64_t root, const char* label);

// Corpus. Generation config: {"world": {...}, "n_scenes", "objects_per_scene",
// "bias", "seed", "first_scene_id"}; omitted keys take their defaults.
// A saved corpus is a directory holding world.json, scenes.jsonl and
// captions.jsonl.
CMIVLD_API cmivld_status cmivld_corpus_generate(const char* config_json, cmivld_corpus** out);
CMIVLD_API cmivld_status cmivld_corpus_load(const char* dir, cmivld_corpus** out);
CMIVLD_API cmivld_status cmivld_corpus_save(const cmivld_corpus* corpus, const char* dir);
// The first max_scenes scenes and their captions.
CMIVLD_API cmivld_status cmivld_corpus_subset(const cmivld_corpus* corpus, size_t max_scenes,
                                              cmivld_corpus** out);
CMIVLD_API cmivld_status cmivld_corpus_info(const cmivld_corpus* corpus, char** out_json);
CMIVLD_API void cmivld_corpus_free(cmivld_corpus* corpus);

// Backbone model. Training options: {"learning_rate", "epochs", "batch_size",
// "max_steps", "image_dropout", "grad_clip", "qa_per_scene", "seed"}.
CMIVLD_API cmivld_status cmivld_model_create(const char* config_json, uint64_t seed,
                                             cmivld_model** out);
CMIVLD_API cmivld_status cmivld_model_train(cmivld_model* model, const cmivld_corpus* corpus,
                                            const char* options_json, char** out_report);
CMIVLD_API cmivld_status cmivld_model_save(const cmivld_model* model, const char* path);
CMIVLD_API cmivld_status cmivld_model_load(const char* path, cmivld_model** out);
CMIVLD_API cmivld_status cmivld_model_info(const cmivld_model* model, char** out_json);
CMIVLD_API void cmivld_model_free(cmivld_model* model);

// Purifier. A null config_json sizes the purifier for the model. Training
// options: {"alpha", "beta", "gamma", "tau", "learning_rate", "epochs",
// "batch_size", "attention": "masked"|"unmasked", "seed"}.
CMIVLD_API cmivld_status cmivld_purifier_create(const cmivld_model* model,
                                                const char* config_json, uint64_t seed,
                                                cmivld_purifier** out);
CMIVLD_API cmivld_status cmivld_purifier_train(cmivld_purifier* purifier,
                                               const cmivld_model* model,
                                               const cmivld_corpus* corpus,
                                               const char* options_json, char** out_report);
// Hard-mask retained counts on every caption step of the corpus.
CMIVLD_API cmivld_status cmivld_purifier_retention(const cmivld_purifier* purifier,
                                                   const cmivld_model* model,
                                                   const cmivld_corpus* corpus, double gamma,
                                                   uint64_t seed, char** out_json);
CMIVLD_API cmivld_status cmivld_purifier_save(const cmivld_purifier* purifier, const char* path);
CMIVLD_API cmivld_status cmivld_purifier_load(const char* path, cmivld_purifier** out);
CMIVLD_API cmivld_status cmivld_purifier_info(const cmivld_purifier* purifier, char** out_json);
CMIVLD_API void cmivld_purifier_free(cmivld_purifier* purifier);

// Decoding. decode_json holds DecodeConfig fields ("variant", "lambda",
// "gamma", "delta", "alpha", "sampler", "top_p", "seed", "max_new_tokens",
// "step_order", ...). The purifier may be null for variants that do not use it.
CMIVLD_API cmivld_status cmivld_decode(const cmivld_model* model,
                                       const cmivld_purifier* purifier,
                                       const cmivld_corpus* corpus, int scene_id,
                                       const char* decode_json, char** out_json);
// Captions every scene of the corpus and scores them.
CMIVLD_API cmivld_status cmivld_eval_chair(const cmivld_model* model,
                                           const cmivld_purifier* purifier,
                                           const cmivld_corpus* corpus, const char* decode_json,
                                           char** out_json);
// Yes/no presence probe over balanced questions drawn from the corpus.
CMIVLD_API cmivld_status cmivld_eval_pope(const cmivld_model* model,
                                          const cmivld_purifier* purifier,
                                          const cmivld_corpus* corpus, const char* decode_json,
                                          int n_questions, uint64_t seed, char** out_json);

// Analysis. Oracle query: {"prefix": [...], "target": token (greedy if
// omitted), "k", "alpha", "keep_all", "cap"}. A non-null purifier adds its
// top-k mask and score for comparison.
CMIVLD_API cmivld_status cmivld_oracle_search(const cmivld_model* model,
                                              const cmivld_purifier* purifier,
                                              const cmivld_corpus* corpus, int scene_id,
                                              const char* query_json, char** out_json);
// With a null model, every trial draws a fresh random model of the given
// config (null config_json: defaults).
CMIVLD_API cmivld_status cmivld_verify_factorization(const cmivld_model* model,
                                                     const char* config_json, int trials,
                                                     uint64_t seed, char** out_json);
CMIVLD_API cmivld_status cmivld_cpmi(const cmivld_model* model, const cmivld_corpus* corpus,
                                     int scene_id, const int* tokens, size_t n_tokens,
                                     char** out_json);
// Finite-difference check of the purifier training loss, in double precision.
CMIVLD_API cmivld_status cmivld_gradcheck(int n_configs, uint64_t seed, double h,
                                          char** out_json);

#ifdef __cplusplus
}
#endif

#endif  // CMIVLD_CMIVLD_H_
