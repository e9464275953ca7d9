// Command-line front end. Flags are folded into a JSON argument object (a
// --config file supplies the base, explicit flags win) and handed to the
// shared library; nothing here touches the data structures directly.

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include <cbmlab/cbmlab.h>

namespace {

using nlohmann::json;

json load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CLI::ValidationError("--config", "cannot open " + path);
  try {
    json parsed = json::parse(in);
    if (!parsed.is_object()) throw CLI::ValidationError("--config", path + " is not a JSON object");
    return parsed;
  } catch (const json::exception& e) {
    throw CLI::ValidationError("--config", path + ": " + e.what());
  }
}

struct Common {
  std::string config;
  std::string out;
  std::uint64_t seed = 0;
  int workers = 0;
  CLI::Option* config_opt = nullptr;
  CLI::Option* out_opt = nullptr;
  CLI::Option* seed_opt = nullptr;
  CLI::Option* workers_opt = nullptr;
};

void add_common(CLI::App* cmd, Common& c, bool with_seed, bool with_workers) {
  c.config_opt = cmd->add_option("--config", c.config, "JSON config file with the argument object");
  c.out_opt = cmd->add_option("--out", c.out, "output directory");
  if (with_seed) c.seed_opt = cmd->add_option("--seed", c.seed, "seed (overrides the config)");
  if (with_workers) c.workers_opt = cmd->add_option("--workers", c.workers, "parallel workers");
}

json base_args(const Common& c) {
  json args = c.config_opt->count() ? load_config(c.config) : json::object();
  if (c.out_opt->count()) args["out"] = c.out;
  if (c.seed_opt && c.seed_opt->count()) args["seed"] = c.seed;
  if (c.workers_opt && c.workers_opt->count()) args["workers"] = c.workers;
  return args;
}

int dispatch(const char* name, const json& args) {
  char* result = nullptr;
  cbmlab_status status = cbmlab_run(name, args.dump().c_str(), &result);
  if (status != CBMLAB_OK) {
    std::fprintf(stderr, "error: %s\n", cbmlab_last_error());
    cbmlab_string_free(result);
    return status == CBMLAB_NUMERIC_ERROR ? 2 : 1;
  }
  json res = json::parse(result);
  cbmlab_string_free(result);
  std::printf("%s\n", res.at("summary").get<std::string>().c_str());
  return res.at("ok").get<bool>() ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"concept bottleneck training, intervention and analysis runs"};
  app.set_version_flag("--version", cbmlab_version());
  app.require_subcommand(1);

  Common gen_c, noise_c, train_c, intervene_c, analyze_c, theory_c, sweep_c;

  CLI::App* gen = app.add_subcommand("gen", "generate a synthetic dataset");
  add_common(gen, gen_c, true, false);

  CLI::App* noise = app.add_subcommand("noise", "write a corrupted copy of a dataset");
  add_common(noise, noise_c, true, false);
  std::string noise_data, noise_kind, noise_scope;
  double noise_rate = 0.0;
  auto* noise_data_opt = noise->add_option("--data", noise_data, "input dataset CSV");
  auto* noise_kind_opt = noise->add_option("--kind", noise_kind, "symmetric, asymmetric or grouped");
  auto* noise_rate_opt = noise->add_option("--rate", noise_rate, "corruption rate in [0,1]");
  auto* noise_scope_opt = noise->add_option("--scope", noise_scope, "concepts, targets or both");

  CLI::App* train = app.add_subcommand("train", "fit a model and record its run directory");
  add_common(train, train_c, true, false);
  std::string train_data;
  auto* train_data_opt = train->add_option("--data", train_data, "dataset CSV (default: synthetic)");

  CLI::App* intervene = app.add_subcommand("intervene", "trace accuracy against concepts corrected");
  add_common(intervene, intervene_c, true, false);
  std::string iv_run, iv_criterion, iv_mode, iv_budgets, iv_ranking, iv_split;
  auto* iv_run_opt = intervene->add_option("--run", iv_run, "training run directory");
  auto* iv_criterion_opt = intervene->add_option(
      "--criterion", iv_criterion, "random, ucp, cctp, lcp, ectp, eudtp or susceptibility");
  auto* iv_mode_opt = intervene->add_option("--mode", iv_mode, "correct or incorrect");
  auto* iv_budgets_opt = intervene->add_option("--budgets", iv_budgets, "e.g. 5, 1,4,9 or 0:k");
  auto* iv_adaptive_opt = intervene->add_flag("--adaptive", "re-score after each replacement");
  auto* iv_ranking_opt =
      intervene->add_option("--ranking", iv_ranking, "analysis artifact with per-class rankings");
  auto* iv_split_opt = intervene->add_option("--split", iv_split, "train, val or test");

  CLI::App* analyze = app.add_subcommand("analyze", "compare a clean and a noisy run");
  add_common(analyze, analyze_c, false, false);
  std::string an_kind = "susceptibility", an_clean, an_noisy, an_split;
  std::uint64_t an_s = 0;
  analyze->add_option("kind", an_kind, "analysis kind (susceptibility)");
  auto* an_clean_opt = analyze->add_option("--clean", an_clean, "clean training run directory");
  auto* an_noisy_opt = analyze->add_option("--noisy", an_noisy, "noisy training run directory");
  auto* an_split_opt = analyze->add_option("--split", an_split, "train, val or test");
  auto* an_s_opt = analyze->add_option("--s", an_s, "top-s size for the overlap diagnostic");

  CLI::App* theory = app.add_subcommand("theory", "run the numeric self-checks");
  add_common(theory, theory_c, true, false);
  std::string th_check;
  auto* th_check_opt = theory->add_option("--check", th_check, "check name or all");

  CLI::App* sweep = app.add_subcommand("sweep", "run a seeded grid and aggregate the results");
  add_common(sweep, sweep_c, false, true);

  // Config loading and flag overlay can also raise CLI errors, so the whole
  // dispatch sits inside the parse handler.
  try {
    app.parse(argc, argv);

    if (gen->parsed()) return dispatch("gen", base_args(gen_c));

    if (noise->parsed()) {
      json args = base_args(noise_c);
      if (noise_data_opt->count()) args["data"] = noise_data;
      if (noise_kind_opt->count()) args["noise"]["kind"] = noise_kind;
      if (noise_rate_opt->count()) args["noise"]["rate"] = noise_rate;
      if (noise_scope_opt->count()) args["noise"]["scope"] = noise_scope;
      return dispatch("noise", args);
    }

    if (train->parsed()) {
      json args = base_args(train_c);
      if (train_data_opt->count()) args["dataset"] = {{"path", train_data}};
      return dispatch("train", args);
    }

    if (intervene->parsed()) {
      json args = base_args(intervene_c);
      if (iv_run_opt->count()) args["run"] = iv_run;
      if (iv_criterion_opt->count()) args["criterion"] = iv_criterion;
      if (iv_mode_opt->count()) args["mode"] = iv_mode;
      if (iv_budgets_opt->count()) args["budgets"] = iv_budgets;
      if (iv_adaptive_opt->count()) args["adaptive"] = true;
      if (iv_ranking_opt->count()) args["ranking"] = iv_ranking;
      if (iv_split_opt->count()) args["split"] = iv_split;
      return dispatch("intervene", args);
    }

    if (analyze->parsed()) {
      json args = base_args(analyze_c);
      args["kind"] = an_kind;
      if (an_clean_opt->count()) args["clean"] = an_clean;
      if (an_noisy_opt->count()) args["noisy"] = an_noisy;
      if (an_split_opt->count()) args["split"] = an_split;
      if (an_s_opt->count()) args["s"] = an_s;
      return dispatch("analyze", args);
    }

    if (theory->parsed()) {
      json args = base_args(theory_c);
      if (th_check_opt->count()) args["check"] = th_check;
      return dispatch("theory", args);
    }

    if (sweep->parsed()) return dispatch("sweep", base_args(sweep_c));
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 1;
}
