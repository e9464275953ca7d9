#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "cbmlab/dataset.hpp"
#include "cbmlab/model.hpp"

namespace cbmlab {

enum class Criterion { random, ucp, cctp, lcp, ectp, eudtp, susceptibility };
enum class InterventionMode { correct, incorrect };

std::string to_string(Criterion c);
Criterion criterion_from_string(const std::string& s);
std::string to_string(InterventionMode m);
InterventionMode intervention_mode_from_string(const std::string& s);

struct InterventionPolicy {
  Criterion criterion = Criterion::random;
  InterventionMode mode = InterventionMode::correct;
  std::uint64_t seed = 0;   // random criterion: per-sample stream
  bool adaptive = false;    // re-score after each single replacement
  // susceptibility criterion: class -> concepts ranked most-susceptible-first.
  std::map<int, std::vector<std::size_t>> class_ranking;
};

// Whether the criterion consults ground truth (or a report built from it)
// when scoring, as opposed to only the model's own outputs.
bool needs_oracle(Criterion c);

// Score vector, length k. `chat` is the un-intervened concept probabilities;
// `cstar` may be null unless the criterion needs it; `sample_index` seeds the
// random criterion and selects the class ranking row via `y`.
std::vector<double> score_concepts(const CbmModel& model, const InterventionPolicy& policy,
                                   std::span<const double> chat, const std::uint8_t* cstar, int y,
                                   std::size_t sample_index);

// min(budget, k) distinct indices. Descending score order except eudtp, whose
// scores are entropy deltas where the most negative is the best pick; ties go
// to the lowest index.
std::vector<std::size_t> select(std::span<const double> scores, std::size_t budget, Criterion c);

// correct: chat'_i = cstar_i; incorrect: chat'_i = 1 - cstar_i. Exact 0/1
// values; the input vector is not mutated.
std::vector<double> apply_intervention(std::span<const double> chat,
                                       std::span<const std::size_t> indices,
                                       const std::uint8_t* cstar, InterventionMode mode);

struct InterventionOutcome {
  std::vector<std::size_t> budgets;
  std::vector<double> accuracy;  // task accuracy per budget
  Criterion criterion = Criterion::random;
  InterventionMode mode = InterventionMode::correct;
  std::size_t n_samples = 0;
  // Selected concepts per sample at the largest budget evaluated.
  std::vector<std::vector<std::size_t>> selected_at_max;
};

// Static protocol: scores computed once from the un-intervened probabilities,
// then each budget keeps the top prefix. policy.adaptive instead re-scores
// after every single replacement (random/lcp/susceptibility degenerate to the
// static selection, their scores being fixed per sample).
InterventionOutcome intervention_curve(const CbmModel& model, const LabeledDataset& ds,
                                       const InterventionPolicy& policy,
                                       std::span<const std::size_t> budgets);

// Rows `budget,criterion,mode,accuracy,n_samples`.
std::string outcome_csv(const InterventionOutcome& outcome);

// Trapezoid area under (budget, accuracy), normalized by the budget span so
// curves over the same grid are comparable.
double curve_area(const InterventionOutcome& outcome);

}  // namespace cbmlab
