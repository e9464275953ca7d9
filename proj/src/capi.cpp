#include "cbmlab/cbmlab.h"

#include <cstdlib>
#include <cstring>
#include <new>
#include <string>

#include <json.hpp>

#include "cbmlab/common.hpp"
#include "cbmlab/dataset.hpp"
#include "cbmlab/harness.hpp"
#include "cbmlab/model.hpp"
#include "cbmlab/optim.hpp"

struct cbmlab_dataset {
  cbmlab::LabeledDataset ds;
};

struct cbmlab_model {
  cbmlab::CbmModel model;
};

namespace {

using nlohmann::json;

thread_local std::string g_last_error;

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (out) std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

cbmlab_status fail(cbmlab_status code, const char* msg) {
  g_last_error = msg;
  return code;
}

// Exceptions never cross the C boundary; each maps onto a status while the
// message lands in the thread's last-error slot.
template <typename Fn>
cbmlab_status guarded(Fn&& fn) {
  try {
    fn();
    g_last_error.clear();
    return CBMLAB_OK;
  } catch (const cbmlab::ValidationError& e) {
    return fail(CBMLAB_INVALID_ARGUMENT, e.what());
  } catch (const cbmlab::ParseError& e) {
    return fail(CBMLAB_PARSE_ERROR, e.what());
  } catch (const cbmlab::IoError& e) {
    return fail(CBMLAB_IO_ERROR, e.what());
  } catch (const cbmlab::NumericError& e) {
    return fail(CBMLAB_NUMERIC_ERROR, e.what());
  } catch (const cbmlab::UnsupportedError& e) {
    return fail(CBMLAB_UNSUPPORTED, e.what());
  } catch (const json::exception& e) {
    return fail(CBMLAB_PARSE_ERROR, e.what());
  } catch (const std::exception& e) {
    return fail(CBMLAB_UNKNOWN_ERROR, e.what());
  } catch (...) {
    return fail(CBMLAB_UNKNOWN_ERROR, "unknown failure");
  }
}

json parse_args(const char* text, const char* what) {
  if (!text || !*text) return json::object();
  json parsed;
  try {
    parsed = json::parse(text);
  } catch (const json::exception& e) {
    throw cbmlab::ParseError(std::string(what) + ": " + e.what());
  }
  if (!parsed.is_object())
    throw cbmlab::ValidationError(std::string(what) + ": expected a JSON object");
  return parsed;
}

}  // namespace

extern "C" {

const char* cbmlab_version(void) { return cbmlab::version(); }

const char* cbmlab_last_error(void) { return g_last_error.c_str(); }

void cbmlab_string_free(char* s) { std::free(s); }

cbmlab_status cbmlab_run(const char* command, const char* args_json, char** result_json) {
  if (result_json) *result_json = nullptr;
  if (!command) return fail(CBMLAB_INVALID_ARGUMENT, "command is null");
  return guarded([&] {
    json args = parse_args(args_json, "args");
    cbmlab::CommandResult res = cbmlab::run_command(command, args);
    if (result_json) {
      json out;
      out["ok"] = res.ok;
      out["summary"] = res.summary;
      out["detail"] = res.detail;
      *result_json = dup_string(out.dump());
      if (!*result_json) throw std::bad_alloc();
    }
  });
}

cbmlab_status cbmlab_dataset_generate(const char* spec_json, cbmlab_dataset** out) {
  if (out) *out = nullptr;
  if (!out) return fail(CBMLAB_INVALID_ARGUMENT, "out is null");
  return guarded([&] {
    json spec = parse_args(spec_json, "spec");
    auto ds = cbmlab::generate_synthetic(cbmlab::synthetic_spec_from_json(spec));
    *out = new cbmlab_dataset{std::move(ds)};
  });
}

cbmlab_status cbmlab_dataset_load(const char* csv_path, cbmlab_dataset** out) {
  if (out) *out = nullptr;
  if (!out) return fail(CBMLAB_INVALID_ARGUMENT, "out is null");
  if (!csv_path) return fail(CBMLAB_INVALID_ARGUMENT, "csv_path is null");
  return guarded([&] { *out = new cbmlab_dataset{cbmlab::load_csv(csv_path)}; });
}

cbmlab_status cbmlab_dataset_save(const cbmlab_dataset* ds, const char* csv_path) {
  if (!ds) return fail(CBMLAB_INVALID_ARGUMENT, "dataset handle is null");
  if (!csv_path) return fail(CBMLAB_INVALID_ARGUMENT, "csv_path is null");
  return guarded([&] { cbmlab::save_csv(ds->ds, csv_path); });
}

cbmlab_status cbmlab_dataset_shape(const cbmlab_dataset* ds, uint64_t* n, uint64_t* d,
                                   uint64_t* k, uint64_t* num_classes) {
  if (!ds) return fail(CBMLAB_INVALID_ARGUMENT, "dataset handle is null");
  if (n) *n = ds->ds.n();
  if (d) *d = ds->ds.d();
  if (k) *k = ds->ds.k();
  if (num_classes) *num_classes = ds->ds.num_classes();
  g_last_error.clear();
  return CBMLAB_OK;
}

void cbmlab_dataset_free(cbmlab_dataset* ds) { delete ds; }

cbmlab_status cbmlab_model_train(const cbmlab_dataset* train, const cbmlab_dataset* val,
                                 const char* config_json, cbmlab_model** out) {
  if (out) *out = nullptr;
  if (!out) return fail(CBMLAB_INVALID_ARGUMENT, "out is null");
  if (!train) return fail(CBMLAB_INVALID_ARGUMENT, "train dataset handle is null");
  return guarded([&] {
    json section = parse_args(config_json, "config");
    cbmlab::TrainConfig cfg = cbmlab::train_config_from_json(section);
    auto res = cbmlab::train(train->ds, val ? &val->ds : nullptr, cfg);
    *out = new cbmlab_model{std::move(res.model)};
  });
}

cbmlab_status cbmlab_model_load(const char* path, cbmlab_model** out) {
  if (out) *out = nullptr;
  if (!out) return fail(CBMLAB_INVALID_ARGUMENT, "out is null");
  if (!path) return fail(CBMLAB_INVALID_ARGUMENT, "path is null");
  return guarded([&] { *out = new cbmlab_model{cbmlab::load_model(path)}; });
}

cbmlab_status cbmlab_model_save(const cbmlab_model* model, const char* path) {
  if (!model) return fail(CBMLAB_INVALID_ARGUMENT, "model handle is null");
  if (!path) return fail(CBMLAB_INVALID_ARGUMENT, "path is null");
  return guarded([&] { cbmlab::save_model(model->model, path); });
}

cbmlab_status cbmlab_model_task_accuracy(const cbmlab_model* model, const cbmlab_dataset* ds,
                                         double* accuracy) {
  if (!model) return fail(CBMLAB_INVALID_ARGUMENT, "model handle is null");
  if (!ds) return fail(CBMLAB_INVALID_ARGUMENT, "dataset handle is null");
  if (!accuracy) return fail(CBMLAB_INVALID_ARGUMENT, "accuracy is null");
  return guarded([&] { *accuracy = cbmlab::task_accuracy(model->model, ds->ds); });
}

cbmlab_status cbmlab_model_predict(const cbmlab_model* model, const double* x, size_t d,
                                   int* class_out, double* concept_probs) {
  if (!model) return fail(CBMLAB_INVALID_ARGUMENT, "model handle is null");
  if (!x) return fail(CBMLAB_INVALID_ARGUMENT, "x is null");
  if (!class_out) return fail(CBMLAB_INVALID_ARGUMENT, "class_out is null");
  if (d != model->model.g.d()) return fail(CBMLAB_INVALID_ARGUMENT, "x has the wrong width");
  return guarded([&] {
    auto fwd = model->model.g.forward({x, d});
    *class_out = cbmlab::predict_class(model->model.f, fwd.probs);
    if (concept_probs)
      std::memcpy(concept_probs, fwd.probs.data(), fwd.probs.size() * sizeof(double));
  });
}

void cbmlab_model_free(cbmlab_model* model) { delete model; }

}  // extern "C"
