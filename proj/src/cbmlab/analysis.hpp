#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cbmlab/dataset.hpp"
#include "cbmlab/model.hpp"

namespace cbmlab {

// Natural-log entropies with the 0*ln(0) = 0 convention.
double binary_entropy(double p);
double categorical_entropy(std::span<const double> p);
// KL(p || q); infinite when q vanishes where p does not.
double kl_divergence(std::span<const double> p, std::span<const double> q);

// Fraction of samples with threshold(chat_i, 0.5) == c_i, per concept. Ties at
// exactly 0.5 predict 1.
std::vector<double> per_concept_accuracy(const ConceptPredictor& g, const LabeledDataset& ds);

struct SusceptibilityReport {
  std::vector<double> acc_clean;
  std::vector<double> acc_noisy;
  std::vector<double> delta;  // acc_clean - acc_noisy
  double mean_delta = 0.0;
  std::vector<std::size_t> susceptible;  // ascending indices, strict exceedance
  // Only for classes present in the evaluation split: concepts ranked by the
  // class-restricted accuracy drop, descending, ties to the lowest index.
  std::map<int, std::vector<std::size_t>> per_class;
};

// S = { i : delta_i > mean(delta) }, strict.
std::vector<std::size_t> susceptible_from_deltas(std::span<const double> delta);

SusceptibilityReport susceptible_set(const ConceptPredictor& clean, const ConceptPredictor& noisy,
                                     const LabeledDataset& eval_ds, bool per_class);

// delta_i = mean over samples of task-loss reduction from snapping concept i
// to its ground-truth bit.
std::vector<double> loss_susceptibility(const CbmModel& model, const LabeledDataset& ds);

// Sample correlation; zero variance in either argument is an error.
double pearson(std::span<const double> a, std::span<const double> b);

// Number of pairs ranked in opposite order by the two score vectors. Pairs
// tied in either vector are not discordant.
std::size_t kendall_tau_distance(std::span<const double> a, std::span<const double> b);

struct TopSOverlap {
  std::vector<std::size_t> top_delta;  // by descending delta, ties to lowest index
  std::vector<std::size_t> top_u;      // by descending u
  bool exact_match = false;
  double overlap_fraction = 0.0;  // |intersection| / s; 1 when s == 0
};
TopSOverlap top_s_overlap(std::span<const double> delta, std::span<const double> u, std::size_t s);

struct SaliencyEntry {
  std::size_t concept_index = 0;
  double weight = 0.0;  // signed classifier weight
};
// Concepts ordered by |U_{y,i}| descending, ties to the lowest index.
std::vector<SaliencyEntry> concept_saliency(const TargetPredictor& f, int y, std::size_t top_n);

struct AlignmentReport {
  std::vector<double> auc;  // per concept; degenerate labels give 0.5
  double mean_auc = 0.0;
};
// Rank-based ROC-AUC of predicted concept probabilities against the bits,
// ties credited 0.5. A stand-in interpretability score, not a claim of
// equivalence to any published alignment metric.
AlignmentReport alignment_proxy(const ConceptPredictor& g, const LabeledDataset& ds);

struct ConceptDiagnostics {
  std::vector<double> entropy;  // u_i, mean per-sample binary entropy
  std::vector<double> delta;    // loss susceptibility
  std::optional<double> pearson_in_set;   // correlation of (u, delta) within `susceptible`
  std::optional<double> pearson_out_set;  // and within its complement
  TopSOverlap overlap;
  std::size_t tau = 0;
  double tau_normalized = 0.0;  // tau / (k(k-1)/2)
};
ConceptDiagnostics concept_diagnostics(const CbmModel& model, const LabeledDataset& ds,
                                       std::span<const std::size_t> susceptible, std::size_t s);

struct CheckReport {
  std::string name;
  std::size_t trials = 0;
  double max_error = 0.0;
  double tolerance = 0.0;
  bool pass = false;
};

// Analytic concept/target/joint gradients vs central finite differences on
// random small instances; max relative l2 error.
CheckReport check_gradients(std::size_t trials, double tolerance, std::uint64_t seed);

// Closed-form effective gradient vs a direct numeric evaluation that moves
// only the Jacobian factor to the perturbed weights; max absolute deviation.
CheckReport check_jsam_decomposition(std::size_t trials, std::size_t d, std::size_t m,
                                     std::size_t k, double tolerance, std::uint64_t seed);

// Monte-Carlo E|chat - c| with c ~ Bernoulli(chat) against 2*chat*(1-chat).
CheckReport check_error_entropy(std::span<const double> chat_grid, std::size_t trials,
                                double tolerance, std::uint64_t seed);

// Mean normalized Kendall distance between rankings of u and alpha*u + noise,
// one entry per sigma.
std::vector<double> simulate_ranking_consistency(std::size_t k, double alpha,
                                                 std::span<const double> sigmas,
                                                 std::size_t trials, std::uint64_t seed);

// Probability that the top-s sets of u and alpha*u + noise coincide exactly,
// one entry per sigma.
std::vector<double> simulate_recovery(std::size_t k, std::size_t s, double alpha,
                                      std::span<const double> sigmas, std::size_t trials,
                                      std::uint64_t seed);

// Table `concept,acc_clean,acc_noisy,delta,in_S`.
std::string susceptibility_csv(const SusceptibilityReport& report);

}  // namespace cbmlab
