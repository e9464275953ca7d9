#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "cbmlab/dataset.hpp"
#include "cbmlab/optim.hpp"

namespace cbmlab {

// Stamped into every run record; bump on artifact-format changes.
const char* version();

// Outcome of one subcommand. `ok` turns false only when a theory check misses
// its tolerance; hard errors surface as exceptions instead.
struct CommandResult {
  std::string summary;
  nlohmann::json detail;
  bool ok = true;
};

// Subcommands take a JSON argument object (the CLI assembles it from flags
// and an optional config file) and write their artifacts under args["out"].
// Unknown keys are rejected. Every command stores the fully resolved
// configuration it ran with, so a run can be repeated bit-exactly from its
// run record alone.
CommandResult cmd_gen(const nlohmann::json& args);
CommandResult cmd_noise(const nlohmann::json& args);
CommandResult cmd_train(const nlohmann::json& args);
CommandResult cmd_intervene(const nlohmann::json& args);
CommandResult cmd_analyze(const nlohmann::json& args);
CommandResult cmd_theory(const nlohmann::json& args);
CommandResult cmd_sweep(const nlohmann::json& args);

CommandResult run_command(const std::string& name, const nlohmann::json& args);

// "5", "1,4,9", or an inclusive range "0:16"; the letter k stands for the
// concept count.
std::vector<std::size_t> parse_budgets(const std::string& text, std::size_t k);

// JSON-to-struct bridges with defaults folded in and unknown keys rejected;
// the same schemas the subcommand configs use.
SyntheticSpec synthetic_spec_from_json(const nlohmann::json& spec);
TrainConfig train_config_from_json(const nlohmann::json& section);

}  // namespace cbmlab
