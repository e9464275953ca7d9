#ifndef CBMLAB_H
#define CBMLAB_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum cbmlab_status {
  CBMLAB_OK = 0,
  CBMLAB_INVALID_ARGUMENT = 1,
  CBMLAB_PARSE_ERROR = 2,
  CBMLAB_IO_ERROR = 3,
  CBMLAB_NUMERIC_ERROR = 4,
  CBMLAB_UNSUPPORTED = 5,
  CBMLAB_UNKNOWN_ERROR = 6
} cbmlab_status;

/* Version string, static storage; do not free. */
const char* cbmlab_version(void);

/* Message of the last failure on the calling thread, empty when the last
 * call succeeded. Static storage; do not free. */
const char* cbmlab_last_error(void);

/* Frees a string the library handed out. NULL is a no-op. */
void cbmlab_string_free(char* s);

/* Runs one subcommand: gen, noise, train, intervene, analyze, theory or
 * sweep. args_json is a JSON object (NULL or "" for defaults). On CBMLAB_OK,
 * *result_json (when non-NULL) receives {"ok":bool,"summary":str,"detail":..}
 * to free with cbmlab_string_free. "ok" is false only for a theory run whose
 * checks failed; hard errors return a non-OK status instead. */
cbmlab_status cbmlab_run(const char* command, const char* args_json, char** result_json);

/* ---- opaque handles ---- */

typedef struct cbmlab_dataset cbmlab_dataset;
typedef struct cbmlab_model cbmlab_model;

/* spec_json uses the gen config's dataset keys (n, d, k, num_classes, ...);
 * NULL or "" takes every default. */
cbmlab_status cbmlab_dataset_generate(const char* spec_json, cbmlab_dataset** out);
cbmlab_status cbmlab_dataset_load(const char* csv_path, cbmlab_dataset** out);
cbmlab_status cbmlab_dataset_save(const cbmlab_dataset* ds, const char* csv_path);
cbmlab_status cbmlab_dataset_shape(const cbmlab_dataset* ds, uint64_t* n, uint64_t* d,
                                   uint64_t* k, uint64_t* num_classes);
void cbmlab_dataset_free(cbmlab_dataset* ds);

/* config_json uses the train config's train-section keys (strategy, concept,
 * target, ...); NULL or "" takes every default. val may be NULL. */
cbmlab_status cbmlab_model_train(const cbmlab_dataset* train, const cbmlab_dataset* val,
                                 const char* config_json, cbmlab_model** out);
cbmlab_status cbmlab_model_load(const char* path, cbmlab_model** out);
cbmlab_status cbmlab_model_save(const cbmlab_model* model, const char* path);
cbmlab_status cbmlab_model_task_accuracy(const cbmlab_model* model, const cbmlab_dataset* ds,
                                         double* accuracy);
/* x holds d inputs. class_out receives the predicted class; concept_probs,
 * when non-NULL, must have room for k doubles. */
cbmlab_status cbmlab_model_predict(const cbmlab_model* model, const double* x, size_t d,
                                   int* class_out, double* concept_probs);
void cbmlab_model_free(cbmlab_model* model);

#ifdef __cplusplus
}
#endif

#endif
