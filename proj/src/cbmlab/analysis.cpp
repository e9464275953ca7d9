#include "cbmlab/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <random>

#include "cbmlab/common.hpp"
#include "cbmlab/optim.hpp"

namespace cbmlab {

double binary_entropy(double p) {
  if (p < 0.0 || p > 1.0 || !std::isfinite(p))
    throw ValidationError("binary_entropy: probability out of [0, 1]");
  double h = 0.0;
  if (p > 0.0) h -= p * std::log(p);
  if (p < 1.0) h -= (1.0 - p) * std::log(1.0 - p);
  return h;
}

double categorical_entropy(std::span<const double> p) {
  double h = 0.0;
  for (double v : p)
    if (v > 0.0) h -= v * std::log(v);
  return h;
}

double kl_divergence(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw ValidationError("kl_divergence: length mismatch");
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] <= 0.0) continue;
    if (q[i] <= 0.0) return std::numeric_limits<double>::infinity();
    kl += p[i] * (std::log(p[i]) - std::log(q[i]));
  }
  return kl;
}

std::vector<double> per_concept_accuracy(const ConceptPredictor& g, const LabeledDataset& ds) {
  if (g.k() != ds.k() || g.d() != ds.d())
    throw ValidationError("per_concept_accuracy: model/dataset shape mismatch");
  if (ds.n() == 0) throw ValidationError("per_concept_accuracy: empty dataset");
  std::vector<double> acc(ds.k(), 0.0);
  for (std::size_t i = 0; i < ds.n(); ++i) {
    const auto fwd = g.forward(ds.inputs.row(i));
    for (std::size_t j = 0; j < ds.k(); ++j)
      acc[j] += (fwd.probs[j] >= 0.5 ? 1 : 0) == ds.bit(i, j);
  }
  for (double& v : acc) v /= (double)ds.n();
  return acc;
}

std::vector<std::size_t> susceptible_from_deltas(std::span<const double> delta) {
  if (delta.empty()) return {};
  const double mean =
      std::accumulate(delta.begin(), delta.end(), 0.0) / (double)delta.size();
  std::vector<std::size_t> s;
  for (std::size_t i = 0; i < delta.size(); ++i)
    if (delta[i] > mean) s.push_back(i);
  return s;
}

namespace {

// Indices ordered by descending score, ties broken toward the lowest index.
std::vector<std::size_t> rank_descending(std::span<const double> scores) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  });
  return idx;
}

}  // namespace

SusceptibilityReport susceptible_set(const ConceptPredictor& clean, const ConceptPredictor& noisy,
                                     const LabeledDataset& eval_ds, bool per_class) {
  if (clean.k() != noisy.k() || clean.d() != noisy.d())
    throw ValidationError("susceptible_set: the two predictors disagree on shape");
  const std::size_t k = eval_ds.k(), n = eval_ds.n();

  SusceptibilityReport rep;
  rep.acc_clean = per_concept_accuracy(clean, eval_ds);
  rep.acc_noisy = per_concept_accuracy(noisy, eval_ds);
  rep.delta.resize(k);
  for (std::size_t j = 0; j < k; ++j) rep.delta[j] = rep.acc_clean[j] - rep.acc_noisy[j];
  rep.mean_delta = std::accumulate(rep.delta.begin(), rep.delta.end(), 0.0) / (double)k;
  rep.susceptible = susceptible_from_deltas(rep.delta);

  if (per_class) {
    const std::size_t classes = eval_ds.num_classes();
    Matrix hits_clean((std::size_t)classes, k), hits_noisy((std::size_t)classes, k);
    std::vector<std::size_t> count(classes, 0);
    for (std::size_t i = 0; i < n; ++i) {
      const auto y = (std::size_t)eval_ds.targets[i];
      ++count[y];
      const auto fc = clean.forward(eval_ds.inputs.row(i));
      const auto fn = noisy.forward(eval_ds.inputs.row(i));
      for (std::size_t j = 0; j < k; ++j) {
        hits_clean(y, j) += (fc.probs[j] >= 0.5 ? 1 : 0) == eval_ds.bit(i, j);
        hits_noisy(y, j) += (fn.probs[j] >= 0.5 ? 1 : 0) == eval_ds.bit(i, j);
      }
    }
    for (std::size_t y = 0; y < classes; ++y) {
      if (count[y] == 0) continue;  // class absent from the split
      std::vector<double> d(k);
      for (std::size_t j = 0; j < k; ++j)
        d[j] = (hits_clean(y, j) - hits_noisy(y, j)) / (double)count[y];
      rep.per_class[(int)y] = rank_descending(d);
    }
  }
  return rep;
}

std::vector<double> loss_susceptibility(const CbmModel& model, const LabeledDataset& ds) {
  if (model.g.k() != ds.k() || model.g.d() != ds.d() || model.f.num_classes() != ds.num_classes())
    throw ValidationError("loss_susceptibility: model/dataset shape mismatch");
  if (ds.n() == 0) throw ValidationError("loss_susceptibility: empty dataset");
  const std::size_t k = ds.k();
  std::vector<double> delta(k, 0.0);
  for (std::size_t i = 0; i < ds.n(); ++i) {
    auto chat = model.g.forward(ds.inputs.row(i)).probs;
    const double base = task_loss(model.f.scores(chat), ds.targets[i]);
    for (std::size_t j = 0; j < k; ++j) {
      const double orig = chat[j];
      chat[j] = (double)ds.bit(i, j);
      delta[j] += base - task_loss(model.f.scores(chat), ds.targets[i]);
      chat[j] = orig;
    }
  }
  for (double& v : delta) v /= (double)ds.n();
  return delta;
}

double pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ValidationError("pearson: length mismatch");
  if (a.size() < 2) throw ValidationError("pearson: need at least two points");
  const double n = (double)a.size();
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double cov = 0.0, va = 0.0, vb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    cov += (a[i] - ma) * (b[i] - mb);
    va += (a[i] - ma) * (a[i] - ma);
    vb += (b[i] - mb) * (b[i] - mb);
  }
  if (va == 0.0 || vb == 0.0)
    throw NumericError("pearson: correlation undefined for a zero-variance vector");
  return cov / std::sqrt(va * vb);
}

std::size_t kendall_tau_distance(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ValidationError("kendall_tau_distance: length mismatch");
  std::size_t discordant = 0;
  for (std::size_t i = 0; i + 1 < a.size(); ++i)
    for (std::size_t j = i + 1; j < a.size(); ++j)
      discordant += (a[i] - a[j]) * (b[i] - b[j]) < 0.0;
  return discordant;
}

TopSOverlap top_s_overlap(std::span<const double> delta, std::span<const double> u,
                          std::size_t s) {
  if (delta.size() != u.size()) throw ValidationError("top_s_overlap: length mismatch");
  const std::size_t take = std::min(s, delta.size());

  TopSOverlap out;
  auto rd = rank_descending(delta);
  auto ru = rank_descending(u);
  out.top_delta.assign(rd.begin(), rd.begin() + take);
  out.top_u.assign(ru.begin(), ru.begin() + take);

  auto sd = out.top_delta, su = out.top_u;
  std::sort(sd.begin(), sd.end());
  std::sort(su.begin(), su.end());
  std::vector<std::size_t> common;
  std::set_intersection(sd.begin(), sd.end(), su.begin(), su.end(), std::back_inserter(common));
  out.exact_match = sd == su;
  out.overlap_fraction = take == 0 ? 1.0 : (double)common.size() / (double)take;
  return out;
}

std::vector<SaliencyEntry> concept_saliency(const TargetPredictor& f, int y, std::size_t top_n) {
  if (y < 0 || (std::size_t)y >= f.num_classes())
    throw ValidationError("concept_saliency: class index out of range");
  std::vector<double> mag(f.k());
  const auto row = f.U.row((std::size_t)y);
  for (std::size_t i = 0; i < f.k(); ++i) mag[i] = std::abs(row[i]);
  const auto order = rank_descending(mag);
  std::vector<SaliencyEntry> out;
  const std::size_t take = std::min(top_n, f.k());
  out.reserve(take);
  for (std::size_t t = 0; t < take; ++t) out.push_back({order[t], row[order[t]]});
  return out;
}

AlignmentReport alignment_proxy(const ConceptPredictor& g, const LabeledDataset& ds) {
  if (g.k() != ds.k() || g.d() != ds.d())
    throw ValidationError("alignment_proxy: model/dataset shape mismatch");
  if (ds.n() == 0) throw ValidationError("alignment_proxy: empty dataset");
  const std::size_t n = ds.n(), k = ds.k();
  const Matrix probs = concept_prob_matrix(g, ds);

  AlignmentReport rep;
  rep.auc.resize(k, 0.5);
  for (std::size_t j = 0; j < k; ++j) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(),
              [&](std::size_t a, std::size_t b) { return probs(a, j) < probs(b, j); });

    std::size_t n_pos = 0;
    for (std::size_t i = 0; i < n; ++i) n_pos += ds.bit(i, j);
    const std::size_t n_neg = n - n_pos;
    if (n_pos == 0 || n_neg == 0) continue;  // degenerate: 0.5 by convention

    // Average ranks over ties, then the Mann-Whitney identity.
    double rank_sum_pos = 0.0;
    std::size_t s = 0;
    while (s < n) {
      std::size_t e = s;
      while (e + 1 < n && probs(idx[e + 1], j) == probs(idx[s], j)) ++e;
      const double avg_rank = 0.5 * ((double)(s + 1) + (double)(e + 1));
      for (std::size_t t = s; t <= e; ++t)
        if (ds.bit(idx[t], j)) rank_sum_pos += avg_rank;
      s = e + 1;
    }
    rep.auc[j] = (rank_sum_pos - 0.5 * (double)n_pos * ((double)n_pos + 1.0)) /
                 ((double)n_pos * (double)n_neg);
  }
  rep.mean_auc = std::accumulate(rep.auc.begin(), rep.auc.end(), 0.0) / (double)k;
  return rep;
}

ConceptDiagnostics concept_diagnostics(const CbmModel& model, const LabeledDataset& ds,
                                       std::span<const std::size_t> susceptible, std::size_t s) {
  const std::size_t k = ds.k();
  ConceptDiagnostics diag;
  diag.entropy.assign(k, 0.0);
  for (std::size_t i = 0; i < ds.n(); ++i) {
    const auto fwd = model.g.forward(ds.inputs.row(i));
    for (std::size_t j = 0; j < k; ++j) diag.entropy[j] += binary_entropy(fwd.probs[j]);
  }
  for (double& v : diag.entropy) v /= (double)ds.n();
  diag.delta = loss_susceptibility(model, ds);

  std::vector<bool> in_set(k, false);
  for (std::size_t i : susceptible) {
    if (i >= k) throw ValidationError("concept_diagnostics: susceptible index out of range");
    in_set[i] = true;
  }
  const auto restricted = [&](bool want) -> std::optional<double> {
    std::vector<double> u, d;
    for (std::size_t j = 0; j < k; ++j)
      if (in_set[j] == want) {
        u.push_back(diag.entropy[j]);
        d.push_back(diag.delta[j]);
      }
    if (u.size() < 2) return std::nullopt;
    try {
      return pearson(u, d);
    } catch (const NumericError&) {
      return std::nullopt;
    }
  };
  diag.pearson_in_set = restricted(true);
  diag.pearson_out_set = restricted(false);
  diag.overlap = top_s_overlap(diag.delta, diag.entropy, s);
  diag.tau = kendall_tau_distance(diag.delta, diag.entropy);
  const double pairs = 0.5 * (double)k * ((double)k - 1.0);
  diag.tau_normalized = pairs > 0.0 ? (double)diag.tau / pairs : 0.0;
  return diag;
}

namespace {

std::vector<double> fd_gradient(std::vector<std::span<double>> blocks,
                                const std::function<double()>& loss, double h) {
  std::vector<double> grad;
  for (auto blk : blocks)
    for (double& th : blk) {
      const double orig = th;
      th = orig + h;
      const double up = loss();
      th = orig - h;
      const double dn = loss();
      th = orig;
      grad.push_back((up - dn) / (2.0 * h));
    }
  return grad;
}

double rel_l2_error(std::span<const double> got, std::span<const double> want) {
  double diff = 0.0, ref = 0.0;
  for (std::size_t i = 0; i < got.size(); ++i) {
    diff += (got[i] - want[i]) * (got[i] - want[i]);
    ref += want[i] * want[i];
  }
  return std::sqrt(diff) / std::max(std::sqrt(ref), 1e-12);
}

void append(std::vector<double>& into, std::span<const double> v) {
  into.insert(into.end(), v.begin(), v.end());
}

}  // namespace

CheckReport check_gradients(std::size_t trials, double tolerance, std::uint64_t seed) {
  CheckReport rep;
  rep.name = "gradients";
  rep.trials = trials;
  rep.tolerance = tolerance;

  auto rng = make_rng(derive_seed(seed, "check-gradients"));
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double h = 1e-5;

  for (std::size_t t = 0; t < trials; ++t) {
    const std::size_t d = 2 + (std::size_t)(unit(rng) * 5), m = 2 + (std::size_t)(unit(rng) * 4),
                      k = 2 + (std::size_t)(unit(rng) * 4),
                      classes = 2 + (std::size_t)(unit(rng) * 4);
    const bool bias = t % 2 == 1;
    CbmModel model = init_model(d, k, classes, m, Strategy::joint, bias, derive_seed(seed, t));

    std::vector<double> x(d);
    for (double& v : x) v = gauss(rng);
    std::vector<std::uint8_t> c(k);
    for (auto& v : c) v = unit(rng) < 0.5;
    const int y = (int)(unit(rng) * (double)classes);
    std::vector<double> wts;
    if (t % 3 == 0) {
      wts.resize(k);
      for (double& v : wts) v = 0.5 + 2.5 * unit(rng);
    }
    const double lambda = 0.2 + 1.8 * unit(rng);

    auto& g = model.g;
    auto& f = model.f;

    {
      std::vector<std::span<double>> blocks{g.W.flat(), g.V.flat()};
      if (bias) blocks.push_back(g.head_bias);
      const auto fd = fd_gradient(
          blocks, [&] { return concept_loss(g.forward(x).logits, c.data(), wts); }, h);
      const auto an = concept_grads(g, x, c.data(), wts);
      std::vector<double> flat;
      append(flat, an.dW.flat());
      append(flat, an.dV.flat());
      if (bias) append(flat, an.dbias);
      rep.max_error = std::max(rep.max_error, rel_l2_error(flat, fd));
    }
    {
      std::vector<double> chat(k);
      for (double& v : chat) v = unit(rng);
      std::vector<std::span<double>> blocks{f.U.flat(), std::span<double>(f.bias)};
      const auto fd = fd_gradient(blocks, [&] { return task_loss(f.scores(chat), y); }, h);
      const auto an = target_grads(f, chat, y);
      std::vector<double> flat;
      append(flat, an.dU.flat());
      append(flat, an.dbias);
      rep.max_error = std::max(rep.max_error, rel_l2_error(flat, fd));
    }
    {
      std::vector<std::span<double>> blocks{g.W.flat(), g.V.flat()};
      if (bias) blocks.push_back(g.head_bias);
      blocks.push_back(f.U.flat());
      blocks.push_back(f.bias);
      const auto fd = fd_gradient(
          blocks,
          [&] {
            const auto fwd = g.forward(x);
            return task_loss(f.scores(fwd.probs), y) +
                   lambda * concept_loss(fwd.logits, c.data(), wts);
          },
          h);
      const auto an = joint_grads(model, x, c.data(), y, lambda, wts);
      std::vector<double> flat;
      append(flat, an.concept_part.dW.flat());
      append(flat, an.concept_part.dV.flat());
      if (bias) append(flat, an.concept_part.dbias);
      append(flat, an.target_part.dU.flat());
      append(flat, an.target_part.dbias);
      rep.max_error = std::max(rep.max_error, rel_l2_error(flat, fd));
    }
  }
  rep.pass = rep.max_error < tolerance;
  return rep;
}

CheckReport check_jsam_decomposition(std::size_t trials, std::size_t d, std::size_t m,
                                     std::size_t k, double tolerance, std::uint64_t seed) {
  CheckReport rep;
  rep.name = "jsam-decomposition";
  rep.trials = trials;
  rep.tolerance = tolerance;

  auto rng = make_rng(derive_seed(seed, "check-jsam"));
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  for (std::size_t t = 0; t < trials; ++t) {
    ConceptPredictor g;
    g.W = Matrix(m, d);
    g.V = Matrix(k, m);
    for (double& v : g.W.flat()) v = gauss(rng);
    for (double& v : g.V.flat()) v = gauss(rng);
    std::vector<double> x(d);
    for (double& v : x) v = gauss(rng);
    std::vector<std::uint8_t> c(k);
    for (auto& v : c) v = unit(rng) < 0.5;
    const double rho = 0.05 + 0.45 * unit(rng);

    const auto closed = jsam_sample_grads(g, x, c.data(), {}, rho);

    // Direct evaluation: residual fixed at w, Jacobian factor moved to the
    // perturbed weights.
    const auto fwd = g.forward(x);
    const auto r = concept_residuals(fwd.probs, c.data(), {});
    std::vector<double> pull(m, 0.0);
    for (std::size_t j = 0; j < k; ++j) axpy(r[j], g.V.row(j), pull);
    double r_sq = 0.0;
    for (double v : r) r_sq += v * v;
    const double norm = std::sqrt(sq_norm(pull) * sq_norm(x) + r_sq * sq_norm(fwd.z));

    Matrix dW(m, d), dV(k, m);
    if (norm < 1e-12) {
      add_outer(dW, 1.0, pull, x);
      for (std::size_t j = 0; j < k; ++j)
        for (std::size_t i = 0; i < m; ++i) dV(j, i) = r[j] * fwd.z[i];
    } else {
      Matrix W2 = g.W;
      add_outer(W2, rho / norm, pull, x);
      Matrix V2 = g.V;
      for (std::size_t j = 0; j < k; ++j) axpy(rho / norm * r[j], fwd.z, V2.row(j));
      std::vector<double> pull2(m, 0.0);
      for (std::size_t j = 0; j < k; ++j) axpy(r[j], V2.row(j), pull2);
      add_outer(dW, 1.0, pull2, x);
      std::vector<double> z2(m);
      matvec(W2, x, z2);
      for (std::size_t j = 0; j < k; ++j)
        for (std::size_t i = 0; i < m; ++i) dV(j, i) = r[j] * z2[i];
    }

    for (std::size_t i = 0; i < dW.flat().size(); ++i)
      rep.max_error = std::max(rep.max_error, std::abs(dW.flat()[i] - closed.dW.flat()[i]));
    for (std::size_t i = 0; i < dV.flat().size(); ++i)
      rep.max_error = std::max(rep.max_error, std::abs(dV.flat()[i] - closed.dV.flat()[i]));
  }
  rep.pass = rep.max_error < tolerance;
  return rep;
}

CheckReport check_error_entropy(std::span<const double> chat_grid, std::size_t trials,
                                double tolerance, std::uint64_t seed) {
  CheckReport rep;
  rep.name = "error-entropy";
  rep.trials = trials;
  rep.tolerance = tolerance;
  for (std::size_t gi = 0; gi < chat_grid.size(); ++gi) {
    const double chat = chat_grid[gi];
    if (chat < 0.0 || chat > 1.0)
      throw ValidationError("check_error_entropy: grid value out of [0, 1]");
    auto rng = make_rng(derive_seed(seed, gi));
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    double acc = 0.0;
    for (std::size_t t = 0; t < trials; ++t) {
      const double bit = unit(rng) < chat ? 1.0 : 0.0;
      acc += std::abs(chat - bit);
    }
    const double expected = 2.0 * chat * (1.0 - chat);
    rep.max_error = std::max(rep.max_error, std::abs(acc / (double)trials - expected));
  }
  rep.pass = rep.max_error < tolerance;
  return rep;
}

namespace {

// Shared generative model: u ~ U(0,1)^k, delta = alpha*u + N(0, sigma^2).
template <class PerTrial>
void noisy_ranking_trials(std::size_t k, double alpha, double sigma, std::size_t trials,
                          std::uint64_t seed, PerTrial fn) {
  auto rng = make_rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<double> u(k), delta(k);
  for (std::size_t t = 0; t < trials; ++t) {
    for (std::size_t i = 0; i < k; ++i) {
      u[i] = unit(rng);
      delta[i] = alpha * u[i] + (sigma > 0.0 ? sigma * gauss(rng) : 0.0);
    }
    fn(u, delta);
  }
}

}  // namespace

std::vector<double> simulate_ranking_consistency(std::size_t k, double alpha,
                                                 std::span<const double> sigmas,
                                                 std::size_t trials, std::uint64_t seed) {
  if (k < 2) throw ValidationError("simulate_ranking_consistency: need k >= 2");
  if (trials < 1) throw ValidationError("simulate_ranking_consistency: need trials >= 1");
  const double pairs = 0.5 * (double)k * ((double)k - 1.0);
  std::vector<double> out;
  out.reserve(sigmas.size());
  for (std::size_t si = 0; si < sigmas.size(); ++si) {
    if (sigmas[si] < 0.0) throw ValidationError("simulate_ranking_consistency: sigma < 0");
    double acc = 0.0;
    noisy_ranking_trials(k, alpha, sigmas[si], trials, derive_seed(seed, si),
                         [&](const std::vector<double>& u, const std::vector<double>& delta) {
                           acc += (double)kendall_tau_distance(delta, u) / pairs;
                         });
    out.push_back(acc / (double)trials);
  }
  return out;
}

std::vector<double> simulate_recovery(std::size_t k, std::size_t s, double alpha,
                                      std::span<const double> sigmas, std::size_t trials,
                                      std::uint64_t seed) {
  if (k < 1) throw ValidationError("simulate_recovery: need k >= 1");
  if (trials < 1) throw ValidationError("simulate_recovery: need trials >= 1");
  std::vector<double> out;
  out.reserve(sigmas.size());
  for (std::size_t si = 0; si < sigmas.size(); ++si) {
    if (sigmas[si] < 0.0) throw ValidationError("simulate_recovery: sigma < 0");
    std::size_t matches = 0;
    noisy_ranking_trials(k, alpha, sigmas[si], trials, derive_seed(seed, si),
                         [&](const std::vector<double>& u, const std::vector<double>& delta) {
                           matches += top_s_overlap(delta, u, s).exact_match;
                         });
    out.push_back((double)matches / (double)trials);
  }
  return out;
}

std::string susceptibility_csv(const SusceptibilityReport& report) {
  std::string out = "concept,acc_clean,acc_noisy,delta,in_S\n";
  std::vector<bool> in_set(report.delta.size(), false);
  for (std::size_t i : report.susceptible) in_set[i] = true;
  for (std::size_t j = 0; j < report.delta.size(); ++j) {
    out += std::to_string(j) + "," + format_g17(report.acc_clean[j]) + "," +
           format_g17(report.acc_noisy[j]) + "," + format_g17(report.delta[j]) + "," +
           (in_set[j] ? "1" : "0") + "\n";
  }
  return out;
}

}  // namespace cbmlab
