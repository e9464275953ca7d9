#include "cbmlab/intervene.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "cbmlab/analysis.hpp"
#include "cbmlab/common.hpp"

namespace cbmlab {

std::string to_string(Criterion c) {
  switch (c) {
    case Criterion::random: return "random";
    case Criterion::ucp: return "ucp";
    case Criterion::cctp: return "cctp";
    case Criterion::lcp: return "lcp";
    case Criterion::ectp: return "ectp";
    case Criterion::eudtp: return "eudtp";
    case Criterion::susceptibility: return "susceptibility";
  }
  return "random";
}

Criterion criterion_from_string(const std::string& s) {
  for (Criterion c : {Criterion::random, Criterion::ucp, Criterion::cctp, Criterion::lcp,
                      Criterion::ectp, Criterion::eudtp, Criterion::susceptibility})
    if (s == to_string(c)) return c;
  throw ValidationError("unknown intervention criterion \"" + s + "\"");
}

std::string to_string(InterventionMode m) {
  return m == InterventionMode::correct ? "correct" : "incorrect";
}

InterventionMode intervention_mode_from_string(const std::string& s) {
  if (s == "correct") return InterventionMode::correct;
  if (s == "incorrect") return InterventionMode::incorrect;
  throw ValidationError("unknown intervention mode \"" + s + "\"");
}

bool needs_oracle(Criterion c) {
  return c == Criterion::lcp || c == Criterion::susceptibility;
}

std::vector<double> score_concepts(const CbmModel& model, const InterventionPolicy& policy,
                                   std::span<const double> chat, const std::uint8_t* cstar, int y,
                                   std::size_t sample_index) {
  const std::size_t k = chat.size();
  std::vector<double> s(k, 0.0);
  switch (policy.criterion) {
    case Criterion::random: {
      auto rng = make_rng(derive_seed(policy.seed, (std::uint64_t)sample_index));
      std::uniform_real_distribution<double> unit(0.0, 1.0);
      for (double& v : s) v = unit(rng);
      break;
    }
    case Criterion::ucp:
      for (std::size_t i = 0; i < k; ++i) s[i] = binary_entropy(chat[i]);
      break;
    case Criterion::cctp: {
      // |chat_i| * sum_j |U_{j,i}|: the linear classifier's total sensitivity
      // to coordinate i, scaled by the activation.
      for (std::size_t i = 0; i < k; ++i) {
        double col = 0.0;
        for (std::size_t j = 0; j < model.f.num_classes(); ++j) col += std::abs(model.f.U(j, i));
        s[i] = std::abs(chat[i]) * col;
      }
      break;
    }
    case Criterion::lcp:
      if (!cstar) throw ValidationError("lcp scoring needs ground-truth concepts");
      for (std::size_t i = 0; i < k; ++i) s[i] = std::abs(chat[i] - (double)cstar[i]);
      break;
    case Criterion::ectp:
    case Criterion::eudtp: {
      const auto base = model.f.probs(chat);
      std::vector<double> work(chat.begin(), chat.end());
      const double base_entropy = categorical_entropy(base);
      for (std::size_t i = 0; i < k; ++i) {
        const double orig = work[i];
        work[i] = 0.0;
        const auto p0 = model.f.probs(work);
        work[i] = 1.0;
        const auto p1 = model.f.probs(work);
        work[i] = orig;
        if (policy.criterion == Criterion::ectp)
          s[i] = (1.0 - chat[i]) * kl_divergence(p0, base) + chat[i] * kl_divergence(p1, base);
        else
          s[i] = (1.0 - chat[i]) * categorical_entropy(p0) + chat[i] * categorical_entropy(p1) -
                 base_entropy;
      }
      break;
    }
    case Criterion::susceptibility: {
      const auto it = policy.class_ranking.find(y);
      if (it == policy.class_ranking.end())
        throw ValidationError("susceptibility scoring has no ranking for class " +
                              std::to_string(y));
      // Ranked-position scores so descending selection follows the report.
      for (std::size_t pos = 0; pos < it->second.size(); ++pos) {
        const std::size_t idx = it->second[pos];
        if (idx >= k) throw ValidationError("susceptibility ranking index out of range");
        s[idx] = (double)(it->second.size() - pos);
      }
      break;
    }
  }
  return s;
}

std::vector<std::size_t> select(std::span<const double> scores, std::size_t budget, Criterion c) {
  const bool ascending = c == Criterion::eudtp;
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return ascending ? scores[a] < scores[b] : scores[a] > scores[b];
    return a < b;
  });
  idx.resize(std::min(budget, scores.size()));
  return idx;
}

std::vector<double> apply_intervention(std::span<const double> chat,
                                       std::span<const std::size_t> indices,
                                       const std::uint8_t* cstar, InterventionMode mode) {
  if (!cstar) throw ValidationError("intervention needs ground-truth concepts");
  std::vector<double> out(chat.begin(), chat.end());
  for (std::size_t i : indices) {
    if (i >= out.size()) throw ValidationError("intervention index out of range");
    const double truth = (double)cstar[i];
    out[i] = mode == InterventionMode::correct ? truth : 1.0 - truth;
  }
  return out;
}

InterventionOutcome intervention_curve(const CbmModel& model, const LabeledDataset& ds,
                                       const InterventionPolicy& policy,
                                       std::span<const std::size_t> budgets) {
  if (model.g.k() != ds.k() || model.g.d() != ds.d() ||
      model.f.num_classes() != ds.num_classes())
    throw ValidationError("intervention_curve: model/dataset shape mismatch");
  if (ds.n() == 0) throw ValidationError("intervention_curve: empty dataset");
  const std::size_t k = ds.k();

  InterventionOutcome out;
  out.budgets.assign(budgets.begin(), budgets.end());
  out.criterion = policy.criterion;
  out.mode = policy.mode;
  out.n_samples = ds.n();
  out.accuracy.assign(budgets.size(), 0.0);
  out.selected_at_max.resize(ds.n());

  const std::size_t max_budget =
      budgets.empty() ? 0 : std::min(*std::max_element(budgets.begin(), budgets.end()), k);

  for (std::size_t i = 0; i < ds.n(); ++i) {
    const auto chat = model.g.forward(ds.inputs.row(i)).probs;
    const std::uint8_t* cstar = ds.concepts.data() + i * k;
    const int y = ds.targets[i];

    // Ranking of all k concepts; budgets take prefixes.
    std::vector<std::size_t> ranking;
    if (!policy.adaptive) {
      const auto scores = score_concepts(model, policy, chat, cstar, y, i);
      ranking = select(scores, k, policy.criterion);
    } else {
      // Greedy re-scoring: commit one concept at a time against the partially
      // intervened vector.
      std::vector<double> work = chat;
      std::vector<bool> taken(k, false);
      for (std::size_t step = 0; step < max_budget; ++step) {
        const auto scores = score_concepts(model, policy, work, cstar, y, i);
        const auto order = select(scores, k, policy.criterion);
        std::size_t pick = k;
        for (std::size_t cand : order)
          if (!taken[cand]) {
            pick = cand;
            break;
          }
        if (pick == k) break;
        taken[pick] = true;
        ranking.push_back(pick);
        const std::size_t one[] = {pick};
        work = apply_intervention(work, one, cstar, policy.mode);
      }
    }

    for (std::size_t bi = 0; bi < out.budgets.size(); ++bi) {
      const std::size_t take = std::min(out.budgets[bi], ranking.size());
      const std::span<const std::size_t> chosen(ranking.data(), take);
      const auto applied = apply_intervention(chat, chosen, cstar, policy.mode);
      out.accuracy[bi] += predict_class(model.f, applied) == y;
    }
    ranking.resize(std::min(max_budget, ranking.size()));
    out.selected_at_max[i] = std::move(ranking);
  }
  for (double& a : out.accuracy) a /= (double)ds.n();
  return out;
}

std::string outcome_csv(const InterventionOutcome& outcome) {
  std::string out = "budget,criterion,mode,accuracy,n_samples\n";
  for (std::size_t i = 0; i < outcome.budgets.size(); ++i)
    out += std::to_string(outcome.budgets[i]) + "," + to_string(outcome.criterion) + "," +
           to_string(outcome.mode) + "," + format_g17(outcome.accuracy[i]) + "," +
           std::to_string(outcome.n_samples) + "\n";
  return out;
}

double curve_area(const InterventionOutcome& outcome) {
  if (outcome.budgets.empty()) throw ValidationError("curve_area: empty curve");
  std::vector<std::size_t> order(outcome.budgets.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return outcome.budgets[a] < outcome.budgets[b]; });
  const double span =
      (double)(outcome.budgets[order.back()] - outcome.budgets[order.front()]);
  if (span == 0.0) return outcome.accuracy[order.front()];
  double area = 0.0;
  for (std::size_t t = 0; t + 1 < order.size(); ++t) {
    const double db =
        (double)(outcome.budgets[order[t + 1]] - outcome.budgets[order[t]]);
    area += 0.5 * db * (outcome.accuracy[order[t]] + outcome.accuracy[order[t + 1]]);
  }
  return area / span;
}

}  // namespace cbmlab
