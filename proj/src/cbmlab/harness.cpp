#include "cbmlab/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <thread>

#include "cbmlab/analysis.hpp"
#include "cbmlab/common.hpp"
#include "cbmlab/dataset.hpp"
#include "cbmlab/intervene.hpp"
#include "cbmlab/model.hpp"
#include "cbmlab/optim.hpp"

namespace cbmlab {

namespace fs = std::filesystem;
using nlohmann::json;
using Clock = std::chrono::steady_clock;

const char* version() { return "0.1.0"; }

namespace {

const json* find(const json& obj, const std::string& key) {
  if (!obj.is_object()) return nullptr;
  auto it = obj.find(key);
  return it == obj.end() ? nullptr : &*it;
}

void check_keys(const json& obj, const std::string& where,
                std::initializer_list<std::string_view> allowed) {
  if (obj.is_null()) return;
  if (!obj.is_object()) throw ValidationError(where + ": expected an object");
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool known = false;
    for (auto a : allowed)
      if (it.key() == a) {
        known = true;
        break;
      }
    if (!known) throw ValidationError(where + ": unknown key \"" + it.key() + "\"");
  }
}

double field_double(const json& obj, const char* key, double fallback, const std::string& where) {
  const json* v = find(obj, key);
  if (!v) return fallback;
  if (!v->is_number()) throw ValidationError(where + "." + key + ": expected a number");
  return v->get<double>();
}

int field_int(const json& obj, const char* key, int fallback, const std::string& where) {
  const json* v = find(obj, key);
  if (!v) return fallback;
  if (!v->is_number_integer() && !v->is_number_unsigned())
    throw ValidationError(where + "." + key + ": expected an integer");
  return v->get<int>();
}

std::uint64_t field_u64(const json& obj, const char* key, std::uint64_t fallback,
                        const std::string& where) {
  const json* v = find(obj, key);
  if (!v) return fallback;
  if (!v->is_number_unsigned() && !(v->is_number_integer() && v->get<std::int64_t>() >= 0))
    throw ValidationError(where + "." + key + ": expected a non-negative integer");
  return v->get<std::uint64_t>();
}

std::size_t field_size(const json& obj, const char* key, std::size_t fallback,
                       const std::string& where) {
  return (std::size_t)field_u64(obj, key, fallback, where);
}

bool field_bool(const json& obj, const char* key, bool fallback, const std::string& where) {
  const json* v = find(obj, key);
  if (!v) return fallback;
  if (!v->is_boolean()) throw ValidationError(where + "." + key + ": expected a boolean");
  return v->get<bool>();
}

std::string field_string(const json& obj, const char* key, const std::string& fallback,
                         const std::string& where) {
  const json* v = find(obj, key);
  if (!v) return fallback;
  if (!v->is_string()) throw ValidationError(where + "." + key + ": expected a string");
  return v->get<std::string>();
}

json load_json_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("missing artifact: " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

void write_text_file(const fs::path& path, std::string_view text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  out.close();
  if (!out) throw IoError("write failed: " + path.string());
}

void write_json_file(const fs::path& path, const json& j) {
  write_text_file(path, j.dump(2) + "\n");
}

std::string abs_path(const std::string& p) {
  return fs::absolute(fs::path(p)).lexically_normal().string();
}

fs::path out_dir(const json& args, const std::string& where) {
  std::string o = field_string(args, "out", "", where);
  if (o.empty()) throw ValidationError(where + ": missing output directory (--out)");
  fs::path p = fs::absolute(o).lexically_normal();
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) throw IoError("cannot create " + p.string() + ": " + ec.message());
  return p;
}

fs::path subdir(const fs::path& base, const char* name) {
  fs::path p = base / name;
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) throw IoError("cannot create " + p.string() + ": " + ec.message());
  return p;
}

long long ms_since(Clock::time_point t0) {
  return std::chrono::duration_cast<std::chrono::milliseconds>(Clock::now() - t0).count();
}

// The record names every artifact of the run; "config" alone reproduces them
// bit-exactly. duration_ms is the only field that varies between repeats.
void write_run_record(const fs::path& dir, const std::string& command, const json& config,
                      std::vector<std::string> artifacts, Clock::time_point t0) {
  std::sort(artifacts.begin(), artifacts.end());
  json rec;
  rec["version"] = version();
  rec["command"] = command;
  rec["config"] = config;
  rec["artifacts"] = artifacts;
  rec["duration_ms"] = ms_since(t0);
  write_json_file(dir / "run_record.json", rec);
}

std::string fmt4(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}

// ---- config resolution ----
// Each resolver folds defaults and derived seeds into an explicit JSON object
// so the stored config has no unresolved state left.

json resolve_dataset(const json* sec, std::uint64_t default_seed, const std::string& where) {
  if (sec && find(*sec, "path")) {
    check_keys(*sec, where, {"path"});
    std::string p = field_string(*sec, "path", "", where);
    if (p.empty()) throw ValidationError(where + ".path: expected a file path");
    json out;
    out["path"] = abs_path(p);
    return out;
  }
  json none = json::object();
  const json& s = sec ? *sec : none;
  check_keys(s, where,
             {"n", "d", "k", "num_classes", "prototype_min_hamming", "concept_flip_rate",
              "input_noise", "seed", "concept_groups"});
  SyntheticSpec def;
  json out;
  out["n"] = field_size(s, "n", def.n, where);
  out["d"] = field_size(s, "d", def.d, where);
  out["k"] = field_size(s, "k", def.k, where);
  out["num_classes"] = field_size(s, "num_classes", def.num_classes, where);
  out["prototype_min_hamming"] = field_int(s, "prototype_min_hamming", def.prototype_min_hamming, where);
  out["concept_flip_rate"] = field_double(s, "concept_flip_rate", def.concept_flip_rate, where);
  out["input_noise"] = field_double(s, "input_noise", def.input_noise, where);
  out["seed"] = field_u64(s, "seed", default_seed, where);
  out["concept_groups"] = field_int(s, "concept_groups", def.concept_groups, where);
  return out;
}

SyntheticSpec synthetic_from_json(const json& j) {
  SyntheticSpec s;
  s.n = j.at("n").get<std::size_t>();
  s.d = j.at("d").get<std::size_t>();
  s.k = j.at("k").get<std::size_t>();
  s.num_classes = j.at("num_classes").get<std::size_t>();
  s.prototype_min_hamming = j.at("prototype_min_hamming").get<int>();
  s.concept_flip_rate = j.at("concept_flip_rate").get<double>();
  s.input_noise = j.at("input_noise").get<double>();
  s.seed = j.at("seed").get<std::uint64_t>();
  s.concept_groups = j.at("concept_groups").get<int>();
  return s;
}

LabeledDataset materialize_dataset(const json& resolved) {
  if (resolved.contains("path")) return load_csv(resolved.at("path").get<std::string>());
  return generate_synthetic(synthetic_from_json(resolved));
}

json resolve_split(const json* sec, std::uint64_t default_seed) {
  json none = json::object();
  const json& s = sec ? *sec : none;
  check_keys(s, "split", {"train", "val", "test", "seed"});
  SplitFractions def;
  json out;
  out["train"] = field_double(s, "train", def.train, "split");
  out["val"] = field_double(s, "val", def.val, "split");
  out["test"] = field_double(s, "test", def.test, "split");
  out["seed"] = field_u64(s, "seed", default_seed, "split");
  return out;
}

json resolve_noise(const json& s, std::uint64_t default_seed, const std::string& where) {
  check_keys(s, where, {"kind", "rate", "scope", "seed"});
  json out;
  out["kind"] = to_string(noise_kind_from_string(field_string(s, "kind", "symmetric", where)));
  out["rate"] = field_double(s, "rate", 0.0, where);
  out["scope"] = to_string(noise_scope_from_string(field_string(s, "scope", "concepts", where)));
  out["seed"] = field_u64(s, "seed", default_seed, where);
  return out;
}

NoiseSpec noise_from_json(const json& j) {
  NoiseSpec spec;
  spec.kind = noise_kind_from_string(j.at("kind").get<std::string>());
  spec.rate = j.at("rate").get<double>();
  spec.apply_to = noise_scope_from_string(j.at("scope").get<std::string>());
  spec.seed = j.at("seed").get<std::uint64_t>();
  return spec;
}

json resolve_optimizer(const json* sec, const std::string& where) {
  json none = json::object();
  const json& s = sec ? *sec : none;
  check_keys(s, where,
             {"kind", "learning_rate", "momentum", "weight_decay", "rho", "epochs", "batch_size",
              "plateau"});
  OptimizerSpec def;
  json out;
  out["kind"] = to_string(opt_kind_from_string(field_string(s, "kind", "sgd", where)));
  out["learning_rate"] = field_double(s, "learning_rate", def.learning_rate, where);
  out["momentum"] = field_double(s, "momentum", def.momentum, where);
  out["weight_decay"] = field_double(s, "weight_decay", def.weight_decay, where);
  out["rho"] = field_double(s, "rho", def.rho, where);
  out["epochs"] = field_int(s, "epochs", def.epochs, where);
  out["batch_size"] = field_int(s, "batch_size", def.batch_size, where);
  if (const json* p = find(s, "plateau")) {
    check_keys(*p, where + ".plateau", {"factor", "patience"});
    PlateauSpec pd;
    json pj;
    pj["factor"] = field_double(*p, "factor", pd.factor, where + ".plateau");
    pj["patience"] = field_int(*p, "patience", pd.patience, where + ".plateau");
    out["plateau"] = pj;
  }
  return out;
}

OptimizerSpec optimizer_from_json(const json& j) {
  OptimizerSpec s;
  s.kind = opt_kind_from_string(j.at("kind").get<std::string>());
  s.learning_rate = j.at("learning_rate").get<double>();
  s.momentum = j.at("momentum").get<double>();
  s.weight_decay = j.at("weight_decay").get<double>();
  s.rho = j.at("rho").get<double>();
  s.epochs = j.at("epochs").get<int>();
  s.batch_size = j.at("batch_size").get<int>();
  if (j.contains("plateau")) {
    PlateauSpec p;
    p.factor = j.at("plateau").at("factor").get<double>();
    p.patience = j.at("plateau").at("patience").get<int>();
    s.plateau = p;
  }
  return s;
}

json resolve_train_section(const json* sec, std::uint64_t default_seed, const std::string& where) {
  json none = json::object();
  const json& s = sec ? *sec : none;
  check_keys(s, where,
             {"strategy", "lambda", "concept", "target", "weighted_concept_loss",
              "bottleneck_width", "head_bias", "seed"});
  TrainConfig def;
  json out;
  out["strategy"] =
      to_string(strategy_from_string(field_string(s, "strategy", "independent", where)));
  out["lambda"] = field_double(s, "lambda", def.lambda, where);
  out["concept"] = resolve_optimizer(find(s, "concept"), where + ".concept");
  out["target"] = resolve_optimizer(find(s, "target"), where + ".target");
  out["weighted_concept_loss"] =
      field_bool(s, "weighted_concept_loss", def.weighted_concept_loss, where);
  out["bottleneck_width"] = field_size(s, "bottleneck_width", def.bottleneck_width, where);
  out["head_bias"] = field_bool(s, "head_bias", def.head_bias, where);
  out["seed"] = field_u64(s, "seed", default_seed, where);
  return out;
}

TrainConfig train_config_from_resolved(const json& j) {
  TrainConfig cfg;
  cfg.strategy = strategy_from_string(j.at("strategy").get<std::string>());
  cfg.lambda = j.at("lambda").get<double>();
  cfg.concept_opt = optimizer_from_json(j.at("concept"));
  cfg.target_opt = optimizer_from_json(j.at("target"));
  cfg.weighted_concept_loss = j.at("weighted_concept_loss").get<bool>();
  cfg.bottleneck_width = j.at("bottleneck_width").get<std::size_t>();
  cfg.head_bias = j.at("head_bias").get<bool>();
  cfg.seed = j.at("seed").get<std::uint64_t>();
  return cfg;
}

// Seeds for the stages default to named sub-streams of the top-level seed, so
// one --seed value pins the whole pipeline while any stage stays overridable.
json resolve_train_args(const json& args) {
  check_keys(args, "train", {"dataset", "split", "noise", "train", "seed", "out"});
  std::uint64_t base = field_u64(args, "seed", 0, "train");
  json out;
  out["seed"] = base;
  out["dataset"] = resolve_dataset(find(args, "dataset"), derive_seed(base, "dataset"), "dataset");
  out["split"] = resolve_split(find(args, "split"), derive_seed(base, "split"));
  if (const json* n = find(args, "noise"))
    out["noise"] = resolve_noise(*n, derive_seed(base, "noise"), "noise");
  out["train"] = resolve_train_section(find(args, "train"), derive_seed(base, "train"), "train");
  return out;
}

struct TrainRun {
  CbmModel model;
  TrainHistory history;
  json metrics;
  double test_task_acc = 0.0;
  double test_concept_acc = 0.0;
  double test_f_on_true = 0.0;
};

// The shared pipeline behind `train` and every sweep cell: materialize the
// dataset, split, corrupt the train and val parts (test stays clean as the
// evaluation reference), fit, and score against the clean test split.
TrainRun run_train_pipeline(const json& resolved) {
  LabeledDataset full = materialize_dataset(resolved.at("dataset"));
  const json& sj = resolved.at("split");
  SplitFractions fractions;
  fractions.train = sj.at("train").get<double>();
  fractions.val = sj.at("val").get<double>();
  fractions.test = sj.at("test").get<double>();
  SplitResult split = stratified_split(full, fractions, sj.at("seed").get<std::uint64_t>());

  if (resolved.contains("noise")) {
    NoiseSpec base = noise_from_json(resolved.at("noise"));
    NoiseSpec tr = base;
    tr.seed = derive_seed(base.seed, "train");
    split.train = inject_noise(split.train, tr).data;
    if (split.val.n() > 0) {
      NoiseSpec va = base;
      va.seed = derive_seed(base.seed, "val");
      split.val = inject_noise(split.val, va).data;
    }
  }

  TrainConfig cfg = train_config_from_resolved(resolved.at("train"));
  TrainResult fit = train(split.train, split.val.n() > 0 ? &split.val : nullptr, cfg);

  TrainRun run;
  run.model = std::move(fit.model);
  run.history = std::move(fit.history);

  json data;
  data["n"] = full.n();
  data["d"] = full.d();
  data["k"] = full.k();
  data["num_classes"] = full.num_classes();
  data["n_train"] = split.train.n();
  data["n_val"] = split.val.n();
  data["n_test"] = split.test.n();
  run.metrics["data"] = data;
  run.metrics["seed"] = resolved.at("seed").get<std::uint64_t>();

  json fin = json::object(), finv = json::object();
  for (const auto& phase : run.history.phases) {
    if (phase.epochs.empty()) continue;
    const EpochMetrics& em = phase.epochs.back();
    for (const auto& [name, v] : em.train) fin[phase.phase + "." + name] = v;
    fin[phase.phase + ".lr"] = em.lr;
    for (const auto& [name, v] : em.val) finv[phase.phase + "." + name] = v;
  }
  run.metrics["final"] = fin;
  if (!finv.empty()) run.metrics["final_val"] = finv;

  if (split.test.n() > 0) {
    const LabeledDataset& test = split.test;
    run.test_task_acc = task_accuracy(run.model, test);
    run.test_f_on_true = task_accuracy_on_true_concepts(run.model.f, test);
    auto per_concept = per_concept_accuracy(run.model.g, test);
    double acc_sum = 0.0;
    for (double a : per_concept) acc_sum += a;
    run.test_concept_acc = acc_sum / (double)per_concept.size();
    json t;
    t["task_accuracy"] = run.test_task_acc;
    t["task_loss"] = mean_task_loss(run.model, test);
    t["concept_accuracy"] = run.test_concept_acc;
    t["concept_loss"] = mean_concept_loss(run.model.g, test, {});
    t["task_accuracy_on_true_concepts"] = run.test_f_on_true;
    run.metrics["test"] = t;
  }
  return run;
}

// Rebuild the evaluation split of an earlier training run from its stored
// config. Noise is not replayed: evaluation and intervention consult the
// clean ground truth.
LabeledDataset eval_split_of_run(const json& run_config, const std::string& which) {
  LabeledDataset full = materialize_dataset(run_config.at("dataset"));
  const json& sj = run_config.at("split");
  SplitFractions fractions;
  fractions.train = sj.at("train").get<double>();
  fractions.val = sj.at("val").get<double>();
  fractions.test = sj.at("test").get<double>();
  SplitResult split = stratified_split(full, fractions, sj.at("seed").get<std::uint64_t>());
  if (which == "train") return std::move(split.train);
  if (which == "val") return std::move(split.val);
  if (which == "test") return std::move(split.test);
  throw ValidationError("split: expected train, val or test, got \"" + which + "\"");
}

json run_config_of(const fs::path& run_dir) {
  return load_json_file(run_dir / "config.json");
}

CbmModel model_of_run(const fs::path& run_dir) {
  fs::path p = run_dir / "model.json";
  if (!fs::exists(p)) throw IoError("missing artifact: " + p.string());
  return load_model(p);
}

std::size_t count_ones(const std::vector<std::uint8_t>& mask) {
  std::size_t c = 0;
  for (std::uint8_t b : mask) c += b;
  return c;
}

}  // namespace

SyntheticSpec synthetic_spec_from_json(const json& spec) {
  json resolved = resolve_dataset(&spec, SyntheticSpec{}.seed, "dataset");
  if (resolved.contains("path"))
    throw ValidationError("dataset: expected a synthetic spec, not a path");
  return synthetic_from_json(resolved);
}

TrainConfig train_config_from_json(const json& section) {
  std::uint64_t seed = field_u64(section, "seed", 0, "train");
  return train_config_from_resolved(resolve_train_section(&section, seed, "train"));
}

std::vector<std::size_t> parse_budgets(const std::string& text, std::size_t k) {
  auto parse_tok = [&](const std::string& tok) -> std::size_t {
    if (tok == "k") return k;
    if (tok.empty() || tok.find_first_not_of("0123456789") != std::string::npos)
      throw ValidationError("budgets: expected an integer or k, got \"" + tok + "\"");
    return (std::size_t)std::stoull(tok);
  };
  if (text.empty()) throw ValidationError("budgets: empty specification");
  auto colon = text.find(':');
  if (colon != std::string::npos) {
    std::size_t lo = parse_tok(text.substr(0, colon));
    std::size_t hi = parse_tok(text.substr(colon + 1));
    if (lo > hi) throw ValidationError("budgets: range start exceeds end in \"" + text + "\"");
    std::vector<std::size_t> out;
    for (std::size_t b = lo; b <= hi; ++b) out.push_back(b);
    return out;
  }
  std::vector<std::size_t> out;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    auto comma = text.find(',', pos);
    if (comma == std::string::npos) comma = text.size();
    out.push_back(parse_tok(text.substr(pos, comma - pos)));
    pos = comma + 1;
  }
  return out;
}

CommandResult cmd_gen(const json& args) {
  auto t0 = Clock::now();
  check_keys(args, "gen", {"dataset", "seed", "out"});
  fs::path out = out_dir(args, "gen");
  json dsj = resolve_dataset(find(args, "dataset"), SyntheticSpec{}.seed, "dataset");
  if (dsj.contains("path"))
    throw ValidationError("gen: dataset.path is an input, pass a synthetic spec instead");
  if (find(args, "seed")) dsj["seed"] = field_u64(args, "seed", 0, "gen");
  json config;
  config["dataset"] = dsj;

  LabeledDataset ds = generate_synthetic(synthetic_from_json(dsj));
  fs::path csv = out / "dataset.csv";
  save_csv(ds, csv);
  write_json_file(out / "config.json", config);
  write_run_record(out, "gen", config,
                   {"config.json", "dataset.csv", sidecar_path(csv).filename().string()}, t0);

  CommandResult res;
  res.detail["csv"] = csv.string();
  res.detail["meta"] = sidecar_path(csv).string();
  res.detail["n"] = ds.n();
  res.detail["d"] = ds.d();
  res.detail["k"] = ds.k();
  res.detail["num_classes"] = ds.num_classes();
  res.summary = "gen: " + std::to_string(ds.n()) + "x" + std::to_string(ds.d()) + " inputs, " +
                std::to_string(ds.k()) + " concepts, " + std::to_string(ds.num_classes()) +
                " classes -> " + csv.string();
  return res;
}

CommandResult cmd_noise(const json& args) {
  auto t0 = Clock::now();
  check_keys(args, "noise", {"data", "noise", "seed", "out"});
  fs::path out = out_dir(args, "noise");
  std::string data = field_string(args, "data", "", "noise");
  if (data.empty()) throw ValidationError("noise: missing input dataset (--data)");
  json none = json::object();
  const json* sec = find(args, "noise");
  json nj = resolve_noise(sec ? *sec : none, 0, "noise");
  if (find(args, "seed")) nj["seed"] = field_u64(args, "seed", 0, "noise");
  json config;
  config["data"] = abs_path(data);
  config["noise"] = nj;

  LabeledDataset ds = load_csv(config["data"].get<std::string>());
  NoiseResult noised = inject_noise(ds, noise_from_json(nj));
  fs::path csv = out / "dataset.csv";
  save_csv(noised.data, csv);

  std::size_t concept_flips = count_ones(noised.concept_mask);
  std::size_t target_flips = count_ones(noised.target_mask);
  json summary;
  summary["kind"] = nj["kind"];
  summary["scope"] = nj["scope"];
  summary["rate"] = nj["rate"];
  summary["seed"] = nj["seed"];
  summary["n"] = ds.n();
  summary["k"] = ds.k();
  summary["concept_flips"] = concept_flips;
  summary["concept_flip_rate"] =
      ds.n() > 0 ? (double)concept_flips / ((double)ds.n() * (double)ds.k()) : 0.0;
  summary["target_flips"] = target_flips;
  summary["target_flip_rate"] = ds.n() > 0 ? (double)target_flips / (double)ds.n() : 0.0;
  write_json_file(out / "noise_summary.json", summary);
  write_json_file(out / "config.json", config);
  write_run_record(out, "noise", config,
                   {"config.json", "dataset.csv", sidecar_path(csv).filename().string(),
                    "noise_summary.json"},
                   t0);

  CommandResult res;
  res.detail = summary;
  res.detail["csv"] = csv.string();
  res.summary = "noise: " + nj["kind"].get<std::string>() + "/" + nj["scope"].get<std::string>() +
                " rate " + fmt4(nj["rate"].get<double>()) + ", flipped " +
                std::to_string(concept_flips) + " concept bits and " +
                std::to_string(target_flips) + " labels -> " + csv.string();
  return res;
}

CommandResult cmd_train(const json& args) {
  auto t0 = Clock::now();
  fs::path out = out_dir(args, "train");
  json config = resolve_train_args(args);
  TrainRun run = run_train_pipeline(config);

  write_json_file(out / "config.json", config);
  save_model(run.model, out / "model.json");
  save_history_csv(run.history, out / "history.csv");
  write_json_file(out / "metrics.json", run.metrics);
  write_run_record(out, "train", config,
                   {"config.json", "history.csv", "metrics.json", "model.json"}, t0);

  CommandResult res;
  res.detail = run.metrics;
  res.detail["out"] = out.string();
  std::string strategy = config["train"]["strategy"].get<std::string>();
  if (run.metrics.contains("test")) {
    res.summary = "train: " + strategy + ", test task accuracy " + fmt4(run.test_task_acc) +
                  ", concept accuracy " + fmt4(run.test_concept_acc) + " -> " + out.string();
  } else {
    res.summary = "train: " + strategy + " finished -> " + out.string();
  }
  return res;
}

CommandResult cmd_intervene(const json& args) {
  auto t0 = Clock::now();
  check_keys(args, "intervene",
             {"run", "criterion", "mode", "budgets", "adaptive", "seed", "split", "ranking",
              "out"});
  fs::path out = out_dir(args, "intervene");
  std::string run_dir = field_string(args, "run", "", "intervene");
  if (run_dir.empty()) throw ValidationError("intervene: missing training run directory (--run)");
  fs::path run_path = fs::absolute(run_dir).lexically_normal();

  CbmModel model = model_of_run(run_path);
  json run_config = run_config_of(run_path);
  std::string split = field_string(args, "split", "test", "intervene");
  LabeledDataset eval_ds = eval_split_of_run(run_config, split);
  if (eval_ds.n() == 0) throw ValidationError("intervene: the " + split + " split is empty");
  if (model.g.k() != eval_ds.k() || model.g.d() != eval_ds.d())
    throw ValidationError("intervene: model shape does not match the evaluation data");
  const std::size_t k = eval_ds.k();

  InterventionPolicy policy;
  std::string crit = field_string(args, "criterion", "", "intervene");
  if (crit.empty()) throw ValidationError("intervene: missing criterion (--criterion)");
  policy.criterion = criterion_from_string(crit);
  policy.mode = intervention_mode_from_string(field_string(args, "mode", "correct", "intervene"));
  policy.adaptive = field_bool(args, "adaptive", false, "intervene");
  policy.seed = field_u64(args, "seed", 0, "intervene");

  json config;
  config["run"] = run_path.string();
  config["criterion"] = to_string(policy.criterion);
  config["mode"] = to_string(policy.mode);
  config["adaptive"] = policy.adaptive;
  config["seed"] = policy.seed;
  config["split"] = split;

  if (policy.criterion == Criterion::susceptibility) {
    std::string ranking = field_string(args, "ranking", "", "intervene");
    if (ranking.empty())
      throw ValidationError(
          "intervene: the susceptibility criterion needs --ranking pointing at an analyze "
          "artifact with per-class rankings");
    fs::path rp = fs::absolute(ranking).lexically_normal();
    json rj = load_json_file(rp);
    const json* per_class = find(rj, "per_class");
    if (!per_class || !per_class->is_object())
      throw ValidationError("intervene: " + rp.string() + " has no per_class ranking object");
    for (auto it = per_class->begin(); it != per_class->end(); ++it) {
      int cls = 0;
      try {
        cls = std::stoi(it.key());
      } catch (const std::exception&) {
        throw ParseError(rp.string() + ": per_class key \"" + it.key() + "\" is not a class id");
      }
      try {
        policy.class_ranking[cls] = it.value().get<std::vector<std::size_t>>();
      } catch (const json::exception&) {
        throw ParseError(rp.string() + ": per_class[" + it.key() +
                         "] must be an array of concept indices");
      }
    }
    config["ranking"] = rp.string();
  } else if (find(args, "ranking")) {
    throw ValidationError("intervene: --ranking only applies to the susceptibility criterion");
  }

  std::vector<std::size_t> budgets;
  if (const json* b = find(args, "budgets")) {
    if (b->is_string()) {
      budgets = parse_budgets(b->get<std::string>(), k);
    } else if (b->is_array()) {
      for (const auto& e : *b)
        if (!e.is_number_unsigned() && !(e.is_number_integer() && e.get<std::int64_t>() >= 0))
          throw ValidationError("intervene.budgets: expected non-negative integers");
      budgets = b->get<std::vector<std::size_t>>();
    } else {
      throw ValidationError("intervene.budgets: expected a string or an array");
    }
  } else {
    budgets = parse_budgets("0:k", k);
  }
  if (budgets.empty()) throw ValidationError("intervene: budgets resolved to an empty list");
  config["budgets"] = budgets;

  InterventionOutcome outcome = intervention_curve(model, eval_ds, policy, budgets);
  double area = curve_area(outcome);

  fs::path curves = subdir(out, "curves");
  std::string curve_name = to_string(policy.criterion) + "-" + to_string(policy.mode) + ".csv";
  write_text_file(curves / curve_name, outcome_csv(outcome));

  json detail;
  detail["criterion"] = config["criterion"];
  detail["mode"] = config["mode"];
  detail["adaptive"] = policy.adaptive;
  detail["seed"] = policy.seed;
  detail["split"] = split;
  detail["budgets"] = outcome.budgets;
  detail["accuracy"] = outcome.accuracy;
  detail["area"] = area;
  detail["n_samples"] = outcome.n_samples;
  write_json_file(out / "intervention.json", detail);
  write_json_file(out / "config.json", config);
  write_run_record(out, "intervene", config,
                   {"config.json", "curves/" + curve_name, "intervention.json"}, t0);

  CommandResult res;
  res.detail = detail;
  res.summary = "intervene: " + config["criterion"].get<std::string>() + "/" +
                config["mode"].get<std::string>() + " on " + split + ", curve area " + fmt4(area) +
                " over budgets " + std::to_string(budgets.front()) + ".." +
                std::to_string(budgets.back()) + " -> " + (curves / curve_name).string();
  return res;
}

CommandResult cmd_analyze(const json& args) {
  auto t0 = Clock::now();
  check_keys(args, "analyze", {"kind", "clean", "noisy", "split", "s", "out"});
  std::string kind = field_string(args, "kind", "susceptibility", "analyze");
  if (kind != "susceptibility")
    throw ValidationError("analyze: unknown kind \"" + kind + "\" (expected susceptibility)");
  fs::path out = out_dir(args, "analyze");
  std::string clean = field_string(args, "clean", "", "analyze");
  std::string noisy = field_string(args, "noisy", "", "analyze");
  if (clean.empty() || noisy.empty())
    throw ValidationError("analyze: susceptibility needs --clean and --noisy run directories");
  fs::path clean_path = fs::absolute(clean).lexically_normal();
  fs::path noisy_path = fs::absolute(noisy).lexically_normal();

  CbmModel clean_model = model_of_run(clean_path);
  CbmModel noisy_model = model_of_run(noisy_path);
  json clean_config = run_config_of(clean_path);
  std::string split = field_string(args, "split", "test", "analyze");
  LabeledDataset eval_ds = eval_split_of_run(clean_config, split);
  if (eval_ds.n() == 0) throw ValidationError("analyze: the " + split + " split is empty");
  if (clean_model.g.k() != eval_ds.k() || noisy_model.g.k() != eval_ds.k())
    throw ValidationError("analyze: model concept widths do not match the evaluation data");

  SusceptibilityReport report = susceptible_set(clean_model.g, noisy_model.g, eval_ds, true);
  std::size_t s = field_size(args, "s", report.susceptible.size(), "analyze");
  ConceptDiagnostics diag = concept_diagnostics(noisy_model, eval_ds, report.susceptible, s);
  AlignmentReport align = alignment_proxy(noisy_model.g, eval_ds);

  json config;
  config["kind"] = kind;
  config["clean"] = clean_path.string();
  config["noisy"] = noisy_path.string();
  config["split"] = split;
  config["s"] = s;

  json detail;
  detail["acc_clean"] = report.acc_clean;
  detail["acc_noisy"] = report.acc_noisy;
  detail["delta"] = report.delta;
  detail["mean_delta"] = report.mean_delta;
  detail["susceptible"] = report.susceptible;
  json per_class = json::object();
  for (const auto& [cls, ranking] : report.per_class) per_class[std::to_string(cls)] = ranking;
  detail["per_class"] = per_class;
  detail["s"] = s;
  json dj;
  dj["entropy"] = diag.entropy;
  dj["loss_delta"] = diag.delta;
  dj["pearson_in_set"] = diag.pearson_in_set ? json(*diag.pearson_in_set) : json(nullptr);
  dj["pearson_out_set"] = diag.pearson_out_set ? json(*diag.pearson_out_set) : json(nullptr);
  dj["tau"] = diag.tau;
  dj["tau_normalized"] = diag.tau_normalized;
  json oj;
  oj["top_delta"] = diag.overlap.top_delta;
  oj["top_u"] = diag.overlap.top_u;
  oj["exact_match"] = diag.overlap.exact_match;
  oj["overlap_fraction"] = diag.overlap.overlap_fraction;
  dj["overlap"] = oj;
  detail["diagnostics"] = dj;
  json aj;
  aj["auc"] = align.auc;
  aj["mean_auc"] = align.mean_auc;
  detail["alignment"] = aj;

  write_text_file(out / "susceptibility.csv", susceptibility_csv(report));
  write_json_file(out / "analysis.json", detail);
  write_json_file(out / "config.json", config);
  write_run_record(out, "analyze", config,
                   {"analysis.json", "config.json", "susceptibility.csv"}, t0);

  CommandResult res;
  res.detail = detail;
  res.summary = "analyze: " + std::to_string(report.susceptible.size()) + " of " +
                std::to_string(eval_ds.k()) + " concepts susceptible, mean drop " +
                fmt4(report.mean_delta) + ", top-" + std::to_string(s) + " overlap " +
                fmt4(diag.overlap.overlap_fraction) + " -> " + (out / "analysis.json").string();
  return res;
}

CommandResult cmd_theory(const json& args) {
  auto t0 = Clock::now();
  check_keys(args, "theory", {"check", "seed", "out"});
  std::string which = field_string(args, "check", "all", "theory");
  std::uint64_t seed = field_u64(args, "seed", 0, "theory");
  const bool all = which == "all";

  std::vector<CheckReport> reports;
  json extras = json::object();

  if (all || which == "gradients")
    reports.push_back(check_gradients(50, 1e-6, derive_seed(seed, "theory/gradients")));
  if (all || which == "jsam-decomposition")
    reports.push_back(
        check_jsam_decomposition(100, 3, 2, 2, 1e-10, derive_seed(seed, "theory/jsam")));
  if (all || which == "error-entropy") {
    std::vector<double> grid;
    for (int i = 1; i <= 9; ++i) grid.push_back(0.1 * i);
    reports.push_back(
        check_error_entropy(grid, 100000, 0.005, derive_seed(seed, "theory/error-entropy")));
  }
  if (all || which == "ranking-consistency") {
    const std::vector<double> sigmas{1.0, 0.1, 0.01, 0.001, 0.0};
    auto taus =
        simulate_ranking_consistency(20, 1.0, sigmas, 1000, derive_seed(seed, "theory/ranking"));
    // Pass requires the exact zero at sigma=0, a small tail, and a trend that
    // never rises by more than Monte-Carlo slack as sigma shrinks.
    bool pass = taus.back() == 0.0 && taus[3] < 0.01;
    for (std::size_t i = 0; i + 2 < taus.size(); ++i)
      if (taus[i + 1] > taus[i] + 0.01) pass = false;
    CheckReport rep;
    rep.name = "ranking-consistency";
    rep.trials = 1000;
    rep.max_error = taus[3];
    rep.tolerance = 0.01;
    rep.pass = pass;
    reports.push_back(rep);
    extras["ranking-consistency"] = {{"sigmas", sigmas}, {"mean_tau", taus}};
  }
  if (all || which == "recovery-at-zero") {
    const std::vector<double> sigmas{0.5, 0.1, 0.0};
    const std::vector<std::pair<std::size_t, std::size_t>> pairs{{10, 3}, {20, 5}, {6, 6}};
    double worst = 1.0;
    json rows = json::array();
    for (auto [k, s] : pairs) {
      auto tag = "theory/recovery/k=" + std::to_string(k) + "|s=" + std::to_string(s);
      auto probs = simulate_recovery(k, s, 1.0, sigmas, 400, derive_seed(seed, tag));
      worst = std::min(worst, probs.back());
      rows.push_back({{"k", k}, {"s", s}, {"sigmas", sigmas}, {"p_exact", probs}});
    }
    CheckReport rep;
    rep.name = "recovery-at-zero";
    rep.trials = 400;
    rep.max_error = 1.0 - worst;
    rep.tolerance = 0.0;
    rep.pass = worst == 1.0;
    reports.push_back(rep);
    extras["recovery-at-zero"] = rows;
  }

  if (reports.empty())
    throw ValidationError(
        "theory: unknown check \"" + which +
        "\" (expected all, gradients, jsam-decomposition, error-entropy, ranking-consistency or "
        "recovery-at-zero)");

  json config;
  config["check"] = which;
  config["seed"] = seed;

  bool ok = true;
  json checks = json::array();
  std::string failing;
  std::string csv = "check,trials,stat,tolerance,pass\n";
  for (const auto& rep : reports) {
    ok = ok && rep.pass;
    if (!rep.pass) failing += (failing.empty() ? "" : ", ") + rep.name;
    json cj;
    cj["name"] = rep.name;
    cj["trials"] = rep.trials;
    cj["stat"] = rep.max_error;
    cj["tolerance"] = rep.tolerance;
    cj["pass"] = rep.pass;
    if (extras.contains(rep.name)) cj["detail"] = extras[rep.name];
    checks.push_back(cj);
    csv += rep.name + "," + std::to_string(rep.trials) + "," + format_g17(rep.max_error) + "," +
           format_g17(rep.tolerance) + "," + (rep.pass ? "1" : "0") + "\n";
  }
  json detail;
  detail["pass"] = ok;
  detail["checks"] = checks;

  if (find(args, "out")) {
    fs::path out = out_dir(args, "theory");
    write_text_file(out / "theory.csv", csv);
    write_json_file(out / "theory.json", detail);
    write_json_file(out / "config.json", config);
    write_run_record(out, "theory", config, {"config.json", "theory.csv", "theory.json"}, t0);
  }

  CommandResult res;
  res.ok = ok;
  res.detail = detail;
  if (ok)
    res.summary =
        "theory: " + std::to_string(reports.size()) + "/" + std::to_string(reports.size()) +
        " checks passed";
  else
    res.summary = "theory: FAILED " + failing;
  return res;
}

namespace {

std::size_t resolve_workers(const json& args) {
  if (find(args, "workers")) {
    int w = field_int(args, "workers", 1, "sweep");
    if (w < 1) throw ValidationError("sweep.workers: must be >= 1");
    return (std::size_t)w;
  }
  if (const char* env = std::getenv("CBMLAB_WORKERS")) {
    std::string text(env);
    if (text.empty() || text.find_first_not_of("0123456789") != std::string::npos || text == "0")
      throw ValidationError("CBMLAB_WORKERS must be a positive integer, got \"" + text + "\"");
    return (std::size_t)std::stoull(text);
  }
  unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : std::min(hw, 8u);
}

std::vector<double> axis_doubles(const json& grid, const char* key, double fallback) {
  const json* v = find(grid, key);
  if (!v) return {fallback};
  if (!v->is_array() || v->empty())
    throw ValidationError(std::string("sweep.grid.") + key + ": expected a non-empty array");
  std::vector<double> out;
  for (const auto& e : *v) {
    if (!e.is_number())
      throw ValidationError(std::string("sweep.grid.") + key + ": expected numbers");
    out.push_back(e.get<double>());
  }
  return out;
}

std::vector<std::string> axis_strings(const json& grid, const char* key,
                                      const std::string& fallback) {
  const json* v = find(grid, key);
  if (!v) return {fallback};
  if (!v->is_array() || v->empty())
    throw ValidationError(std::string("sweep.grid.") + key + ": expected a non-empty array");
  std::vector<std::string> out;
  for (const auto& e : *v) {
    if (!e.is_string())
      throw ValidationError(std::string("sweep.grid.") + key + ": expected strings");
    out.push_back(e.get<std::string>());
  }
  return out;
}

struct SweepCell {
  std::string strategy;
  std::string optimizer;
  std::string noise_kind;
  std::string noise_scope;
  double noise_rate = 0.0;
};

struct CellStats {
  double task_acc = 0.0;
  double concept_acc = 0.0;
  double f_on_true = 0.0;
};

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / (double)v.size();
}

// Sample standard deviation; a single seed reports 0.
double std_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  double m = mean_of(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / (double)(v.size() - 1));
}

}  // namespace

CommandResult cmd_sweep(const json& args) {
  auto t0 = Clock::now();
  check_keys(args, "sweep", {"base", "grid", "seeds", "workers", "out"});
  fs::path out = out_dir(args, "sweep");

  const json* seeds_j = find(args, "seeds");
  if (!seeds_j || !seeds_j->is_array() || seeds_j->empty())
    throw ValidationError("sweep.seeds: expected a non-empty array of seeds");
  std::vector<std::uint64_t> seeds;
  for (const auto& e : *seeds_j) {
    if (!e.is_number_unsigned() && !(e.is_number_integer() && e.get<std::int64_t>() >= 0))
      throw ValidationError("sweep.seeds: expected non-negative integers");
    seeds.push_back(e.get<std::uint64_t>());
  }

  json none = json::object();
  const json* base_p = find(args, "base");
  const json& base = base_p ? *base_p : none;
  check_keys(base, "sweep.base", {"dataset", "split", "noise", "train"});
  const json* base_noise = find(base, "noise");
  const json* base_train = find(base, "train");

  std::string def_kind = base_noise ? field_string(*base_noise, "kind", "symmetric", "sweep.base.noise")
                                    : "symmetric";
  std::string def_scope = base_noise ? field_string(*base_noise, "scope", "concepts", "sweep.base.noise")
                                     : "concepts";
  double def_rate = base_noise ? field_double(*base_noise, "rate", 0.0, "sweep.base.noise") : 0.0;
  std::string def_strategy =
      base_train ? field_string(*base_train, "strategy", "independent", "sweep.base.train")
                 : "independent";
  std::string def_opt = "sgd";
  if (base_train)
    if (const json* c = find(*base_train, "concept"))
      def_opt = field_string(*c, "kind", "sgd", "sweep.base.train.concept");

  const json* grid_p = find(args, "grid");
  const json& grid = grid_p ? *grid_p : none;
  check_keys(grid, "sweep.grid",
             {"noise_rate", "noise_kind", "noise_scope", "optimizer", "strategy"});
  auto rates = axis_doubles(grid, "noise_rate", def_rate);
  auto kinds = axis_strings(grid, "noise_kind", def_kind);
  auto scopes = axis_strings(grid, "noise_scope", def_scope);
  auto opts = axis_strings(grid, "optimizer", def_opt);
  auto strategies = axis_strings(grid, "strategy", def_strategy);
  for (const auto& s : kinds) noise_kind_from_string(s);
  for (const auto& s : scopes) noise_scope_from_string(s);
  for (const auto& s : opts) opt_kind_from_string(s);
  for (const auto& s : strategies) strategy_from_string(s);

  std::vector<SweepCell> cells;
  for (const auto& st : strategies)
    for (const auto& op : opts)
      for (const auto& kd : kinds)
        for (const auto& sc : scopes)
          for (double rt : rates) cells.push_back({st, op, kd, sc, rt});

  // One resolved train config per (cell, seed). Dataset, split and init seeds
  // depend only on the run seed, so cells are paired: a cell comparison sees
  // the same data with only the cell coordinates changed. The noise stream is
  // additionally salted with the cell tag to decouple realizations.
  struct Task {
    std::size_t cell = 0;
    std::uint64_t seed = 0;
    json config;
  };
  std::vector<Task> tasks;
  for (std::size_t ci = 0; ci < cells.size(); ++ci) {
    const SweepCell& cell = cells[ci];
    for (std::uint64_t s : seeds) {
      json run_args = base;
      run_args.erase("noise");
      json noise = base_noise ? *base_noise : json::object();
      noise["kind"] = cell.noise_kind;
      noise["scope"] = cell.noise_scope;
      noise["rate"] = cell.noise_rate;
      run_args["noise"] = noise;
      json train_sec = base_train ? *base_train : json::object();
      train_sec["strategy"] = cell.strategy;
      json concept_sec = find(train_sec, "concept") ? train_sec["concept"] : json::object();
      concept_sec["kind"] = cell.optimizer;
      train_sec["concept"] = concept_sec;
      run_args["train"] = train_sec;
      run_args["seed"] = s;
      json resolved = resolve_train_args(run_args);
      std::string tag = "kind=" + cell.noise_kind + "|scope=" + cell.noise_scope +
                        "|rate=" + format_g17(cell.noise_rate);
      resolved["noise"]["seed"] =
          derive_seed(resolved["noise"]["seed"].get<std::uint64_t>(), tag);
      tasks.push_back({ci, s, std::move(resolved)});
    }
  }

  std::size_t workers = std::min(resolve_workers(args), tasks.size());
  std::vector<CellStats> results(tasks.size());
  std::atomic<std::size_t> next{0};
  std::atomic<bool> stop{false};
  std::mutex err_mx;
  std::exception_ptr first_err;
  auto work = [&] {
    for (;;) {
      std::size_t i = next.fetch_add(1);
      if (i >= tasks.size() || stop.load()) return;
      try {
        TrainRun run = run_train_pipeline(tasks[i].config);
        results[i] = {run.test_task_acc, run.test_concept_acc, run.test_f_on_true};
      } catch (...) {
        std::lock_guard<std::mutex> lock(err_mx);
        if (!first_err) first_err = std::current_exception();
        stop.store(true);
        return;
      }
    }
  };
  if (workers <= 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
    for (auto& th : pool) th.join();
  }
  if (first_err) std::rethrow_exception(first_err);

  // Canonical join order: tasks were laid out cell-major, seed-minor.
  std::string runs_csv =
      "strategy,optimizer,noise_kind,noise_scope,noise_rate,seed,task_accuracy,"
      "concept_accuracy,accuracy_on_true_concepts\n";
  std::string agg_csv =
      "strategy,optimizer,noise_kind,noise_scope,noise_rate,seeds,task_accuracy_mean,"
      "task_accuracy_std,concept_accuracy_mean,concept_accuracy_std,"
      "accuracy_on_true_concepts_mean,accuracy_on_true_concepts_std\n";
  std::size_t ti = 0;
  for (std::size_t ci = 0; ci < cells.size(); ++ci) {
    const SweepCell& cell = cells[ci];
    std::string prefix = cell.strategy + "," + cell.optimizer + "," + cell.noise_kind + "," +
                         cell.noise_scope + "," + format_g17(cell.noise_rate);
    std::vector<double> task, conc, truth;
    for (std::size_t si = 0; si < seeds.size(); ++si, ++ti) {
      const CellStats& r = results[ti];
      task.push_back(r.task_acc);
      conc.push_back(r.concept_acc);
      truth.push_back(r.f_on_true);
      runs_csv += prefix + "," + std::to_string(seeds[si]) + "," + format_g17(r.task_acc) + "," +
                  format_g17(r.concept_acc) + "," + format_g17(r.f_on_true) + "\n";
    }
    agg_csv += prefix + "," + std::to_string(seeds.size()) + "," + format_g17(mean_of(task)) +
               "," + format_g17(std_of(task)) + "," + format_g17(mean_of(conc)) + "," +
               format_g17(std_of(conc)) + "," + format_g17(mean_of(truth)) + "," +
               format_g17(std_of(truth)) + "\n";
  }

  // Workers never enter the stored config: the artifact bytes must not depend
  // on the execution width.
  json config;
  config["base"] = base;
  json grid_out;
  grid_out["noise_rate"] = rates;
  grid_out["noise_kind"] = kinds;
  grid_out["noise_scope"] = scopes;
  grid_out["optimizer"] = opts;
  grid_out["strategy"] = strategies;
  config["grid"] = grid_out;
  config["seeds"] = seeds;

  write_text_file(out / "sweep.csv", agg_csv);
  write_text_file(out / "runs.csv", runs_csv);
  write_json_file(out / "config.json", config);
  write_run_record(out, "sweep", config, {"config.json", "runs.csv", "sweep.csv"}, t0);

  CommandResult res;
  res.detail["cells"] = cells.size();
  res.detail["seeds"] = seeds.size();
  res.detail["runs"] = tasks.size();
  res.detail["csv"] = (out / "sweep.csv").string();
  res.summary = "sweep: " + std::to_string(cells.size()) + " cells x " +
                std::to_string(seeds.size()) + " seeds = " + std::to_string(tasks.size()) +
                " runs -> " + (out / "sweep.csv").string();
  return res;
}

CommandResult run_command(const std::string& name, const json& args) {
  const json& a = args.is_null() ? json::object() : args;
  if (name == "gen") return cmd_gen(a);
  if (name == "noise") return cmd_noise(a);
  if (name == "train") return cmd_train(a);
  if (name == "intervene") return cmd_intervene(a);
  if (name == "analyze") return cmd_analyze(a);
  if (name == "theory") return cmd_theory(a);
  if (name == "sweep") return cmd_sweep(a);
  throw ValidationError("unknown command \"" + name + "\"");
}

}  // namespace cbmlab
