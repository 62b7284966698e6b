/* Copyright (c) 2026, The bglab Authors
 * SPDX-License-Identifier: Apache-2.0 */

#ifndef BGLAB_BGLAB_H_
#define BGLAB_BGLAB_H_

#include <stddef.h>
#include <stdint.h>

#if defined(BGLAB_BUILDING_LIBRARY)
#define BGLAB_API __attribute__((visibility("default")))
#else
#define BGLAB_API
#endif

#ifdef __cplusplus
extern "C" {
#endif

/* Return codes. The CLI uses the same numbers as exit codes. */
typedef enum bglab_status {
  BGLAB_OK = 0,
  BGLAB_ERR_INTERNAL = 1,
  BGLAB_ERR_USAGE = 2,
  BGLAB_ERR_DATA = 3,
  BGLAB_ERR_BUDGET = 4
} bglab_status;

typedef struct bglab_oracle bglab_oracle;
typedef struct bglab_dataset bglab_dataset;
typedef struct bglab_model bglab_model;
typedef struct bglab_kappa_table bglab_kappa_table;

enum { BGLAB_VOCAB_SIZE = 64, BGLAB_EVAL_ACTIONS = 62, BGLAB_FIRST_EVAL_TOKEN = 2 };

BGLAB_API const char* bglab_version(void);

/* Message of the last failed call on this thread; "" if none. */
BGLAB_API const char* bglab_last_error(void);

/* Frees strings returned through char** out-parameters. */
BGLAB_API void bglab_string_free(char* s);

/* Progress messages from long-running calls. NULL disables logging. */
typedef void (*bglab_log_fn)(const char* message, void* user);
BGLAB_API void bglab_set_log_callback(bglab_log_fn fn, void* user);

/* ---- Run configuration ------------------------------------------------ */

/* Applies the JSON objects in order (each may be NULL or "") on top of the
 * defaults and returns the validated, fully resolved config with its hash
 * under "run_hash". */
BGLAB_API bglab_status bglab_config_resolve(const char* base_json, const char* override_json, char** resolved_json);

/* Reads a JSON config file; same resolution as above. */
BGLAB_API bglab_status bglab_config_load(const char* path, const char* override_json, char** resolved_json);

/* ---- Pipeline commands -------------------------------------------------
 * config_json is a (possibly partial) run config. Each call returns a JSON
 * object describing the written artifacts. */

BGLAB_API bglab_status bglab_run_gen(const char* config_json, const char* out_dir, int force, char** result_json);
BGLAB_API bglab_status bglab_run_train(const char* config_json, const char* dataset_path, const char* out_dir,
                                       char** result_json);
BGLAB_API bglab_status bglab_run_select_lambda(const char* config_json, const char* dataset_path, const char* out_dir,
                                               char** result_json);
BGLAB_API bglab_status bglab_run_kappa(const char* config_json, const char* checkpoint_path, const char* dataset_path,
                                       const char* out_dir, int exact, int resume, char** result_json);
/* models_json: [{"name": ..., "checkpoint": ..., "table": ...}, ...] */
BGLAB_API bglab_status bglab_run_analyze(const char* config_json, const char* dataset_path, const char* models_json,
                                         const char* out_dir, char** result_json);
/* Concatenates flat report CSVs into out_csv (may be NULL) and returns a
 * text table. */
BGLAB_API bglab_status bglab_run_report(const char* const* report_paths, size_t count, const char* out_csv,
                                        char** table_text);

/* ---- Oracle ------------------------------------------------------------ */

/* domain: "dialogue", "math" or "code". */
BGLAB_API bglab_status bglab_oracle_create(const char* domain, bglab_oracle** out);
BGLAB_API bglab_status bglab_oracle_load(const char* path, bglab_oracle** out);
BGLAB_API void bglab_oracle_free(bglab_oracle* oracle);
BGLAB_API int bglab_oracle_length(const bglab_oracle* oracle);
/* kind: 0 deterministic, 1 flexible, 2 high-risk. */
BGLAB_API bglab_status bglab_oracle_state_kind(const bglab_oracle* oracle, int position, int* kind);
/* Writes BGLAB_VOCAB_SIZE probabilities. */
BGLAB_API bglab_status bglab_oracle_teacher_probs(const bglab_oracle* oracle, int position, double* probs);
/* 1 - H / log K over the candidate set; choice states only. */
BGLAB_API bglab_status bglab_oracle_confidence(const bglab_oracle* oracle, int position, double* out);
/* Writes bglab_oracle_length() tokens. */
BGLAB_API bglab_status bglab_oracle_sample(const bglab_oracle* oracle, uint64_t seed, int32_t* tokens);

/* ---- Dataset ----------------------------------------------------------- */

BGLAB_API bglab_status bglab_dataset_generate(const bglab_oracle* oracle, uint64_t seed, bglab_dataset** out);
BGLAB_API bglab_status bglab_dataset_load(const char* path, bglab_dataset** out);
BGLAB_API void bglab_dataset_free(bglab_dataset* dataset);
/* Reads only the header of a dataset file. */
BGLAB_API bglab_status bglab_dataset_domain(const char* path, char** domain);
/* split: "train", "val" or "eval". */
BGLAB_API bglab_status bglab_dataset_count(const bglab_dataset* dataset, const char* split, size_t* count);
/* Writes the template length worth of tokens. */
BGLAB_API bglab_status bglab_dataset_example(const bglab_dataset* dataset, const char* split, size_t index,
                                             int32_t* tokens);

/* ---- Student model ----------------------------------------------------- */

/* model_json: the "model" section of a run config; NULL for defaults. */
BGLAB_API bglab_status bglab_model_init(const char* model_json, uint64_t seed, bglab_model** out);
BGLAB_API bglab_status bglab_model_load(const char* checkpoint_path, bglab_model** out);
BGLAB_API void bglab_model_free(bglab_model* model);
BGLAB_API bglab_status bglab_model_id(const bglab_model* model, char** id);
BGLAB_API bglab_status bglab_model_parameter_count(const bglab_model* model, size_t* count);
/* Next-token distribution after [BOS, prefix...]. Writes BGLAB_VOCAB_SIZE values. */
BGLAB_API bglab_status bglab_model_next_probs(const bglab_model* model, const int32_t* prefix, size_t length,
                                              double* probs);

/* ---- Sensitivity ------------------------------------------------------- */

/* Uses the dataset's eval split. prune_eps = 0 is exact. */
BGLAB_API bglab_status bglab_kappa_compute(const bglab_model* model, const bglab_dataset* dataset, double prune_eps,
                                           bglab_kappa_table** out);
BGLAB_API bglab_status bglab_kappa_load(const char* path, bglab_kappa_table** out);
BGLAB_API void bglab_kappa_free(bglab_kappa_table* table);
BGLAB_API bglab_status bglab_kappa_shape(const bglab_kappa_table* table, int* examples, int* template_length);
/* kappa: BGLAB_EVAL_ACTIONS values (may be NULL). Any scalar output may be NULL. */
BGLAB_API bglab_status bglab_kappa_state(const bglab_kappa_table* table, int example, int position, double* kappa,
                                         double* kappa_state, double* error_bound);
BGLAB_API bglab_status bglab_kappa_save(const bglab_kappa_table* table, const char* path);

/* ---- Analysis ---------------------------------------------------------- */

/* model NULL rolls out the oracle itself. Uses the dataset's eval split. */
BGLAB_API bglab_status bglab_exposure_bias(const bglab_model* model, const bglab_dataset* dataset, int repeats,
                                           uint64_t seed, double* eb, double* se);
BGLAB_API bglab_status bglab_spearman(const double* x, const double* y, size_t n, double* rho);

#ifdef __cplusplus
}
#endif

#endif /* BGLAB_BGLAB_H_ */
