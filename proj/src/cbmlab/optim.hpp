#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cbmlab/dataset.hpp"
#include "cbmlab/model.hpp"

namespace cbmlab {

enum class OptKind { sgd, sam, jsam };

std::string to_string(OptKind k);
OptKind opt_kind_from_string(const std::string& s);

struct PlateauSpec {
  double factor = 0.1;
  int patience = 10;
};

struct OptimizerSpec {
  OptKind kind = OptKind::sgd;
  double learning_rate = 0.01;
  double momentum = 0.0;
  double weight_decay = 0.0;
  double rho = 0.05;  // perturbation radius for sam/jsam
  int epochs = 100;
  int batch_size = 64;
  std::optional<PlateauSpec> plateau;
};

void validate_optimizer(const OptimizerSpec& spec, const std::string& where);

// Mutable view over the parameter blocks a phase trains. Gradient containers
// mirror the block order.
struct ParamView {
  std::vector<std::span<double>> blocks;
};

using GradVec = std::vector<std::vector<double>>;

GradVec zero_grads(const ParamView& params);
double grad_norm(const GradVec& grads);

struct SgdState {
  GradVec momentum;  // sized on first use
  double lr = 0.0;   // current rate; plateau decay lowers it
};

// Heavy-ball SGD. Weight decay is added to the gradient first, then the
// momentum buffer is updated and applied.
void sgd_step(ParamView& params, const GradVec& grads, const OptimizerSpec& spec,
              SgdState& state);

// Sharpness-aware step: climb to w + rho * g/|g|, take the gradient there,
// apply it at w through sgd_step. `grads_at_w` is the already-computed batch
// gradient; `reeval` recomputes the batch gradient at the current (perturbed)
// parameters. |g| below 1e-12 falls back to plain SGD.
void sam_step(ParamView& params, const GradVec& grads_at_w, const std::function<GradVec()>& reeval,
              const OptimizerSpec& spec, SgdState& state);

// Per-sample effective gradient of the Jacobian-only SAM variant for the BCE
// concept loss: the residual stays at w while the Jacobian factor is evaluated
// at the SAM-perturbed weights, which collapses to a closed form. Requires a
// bias-free concept head.
struct JsamSampleGrads {
  Matrix dW;
  Matrix dV;
  double loss = 0.0;
};
JsamSampleGrads jsam_sample_grads(const ConceptPredictor& g, std::span<const double> x,
                                  const std::uint8_t* c, std::span<const double> pos_weights,
                                  double rho);

// Batch version: averages per-sample effective gradients, then applies them
// through sgd_step (so momentum/decay behave exactly like SGD).
void jsam_step(ConceptPredictor& g, const LabeledDataset& ds,
               std::span<const std::size_t> batch, std::span<const double> pos_weights,
               const OptimizerSpec& spec, SgdState& state);

struct TrainConfig {
  Strategy strategy = Strategy::independent;
  double lambda = 1.0;           // joint concept-loss weight
  OptimizerSpec concept_opt;     // concept phase; also the joint phase
  OptimizerSpec target_opt;      // classifier phase (independent/sequential)
  bool weighted_concept_loss = false;
  std::size_t bottleneck_width = 0;  // m; 0 means max(d, k)
  bool head_bias = false;
  std::uint64_t seed = 0;
};

void validate_train_config(const TrainConfig& cfg);

struct EpochMetrics {
  int epoch = 0;
  double lr = 0.0;
  std::map<std::string, double> train;
  std::map<std::string, double> val;  // empty when no validation split given
};

struct PhaseHistory {
  std::string phase;  // "concept", "target" or "joint"
  std::vector<EpochMetrics> epochs;
};

struct TrainHistory {
  std::uint64_t seed = 0;
  std::vector<PhaseHistory> phases;
};

// Long format: epoch,split,metric,value with metric names "<phase>.<name>".
void save_history_csv(const TrainHistory& history, const std::filesystem::path& path);
std::string history_csv_string(const TrainHistory& history);

struct TrainResult {
  CbmModel model;
  TrainHistory history;
};

// val_ds may be null; plateau scheduling then watches the training loss.
// Deterministic: identical data, config and seed give identical results.
TrainResult train(const LabeledDataset& train_ds, const LabeledDataset* val_ds,
                  const TrainConfig& cfg);

}  // namespace cbmlab
