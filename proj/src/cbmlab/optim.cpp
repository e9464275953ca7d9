#include "cbmlab/optim.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include "cbmlab/common.hpp"

namespace cbmlab {

std::string to_string(OptKind k) {
  switch (k) {
    case OptKind::sgd: return "sgd";
    case OptKind::sam: return "sam";
    case OptKind::jsam: return "jsam";
  }
  return "sgd";
}

OptKind opt_kind_from_string(const std::string& s) {
  if (s == "sgd") return OptKind::sgd;
  if (s == "sam") return OptKind::sam;
  if (s == "jsam") return OptKind::jsam;
  throw ValidationError("unknown optimizer kind \"" + s + "\"");
}

void validate_optimizer(const OptimizerSpec& spec, const std::string& where) {
  if (spec.learning_rate < 0.0 || !std::isfinite(spec.learning_rate))
    throw ValidationError(where + ": learning_rate must be >= 0 and finite");
  if (spec.momentum < 0.0 || spec.momentum >= 1.0)
    throw ValidationError(where + ": momentum must lie in [0, 1)");
  if (spec.weight_decay < 0.0 || !std::isfinite(spec.weight_decay))
    throw ValidationError(where + ": weight_decay must be >= 0");
  if (spec.rho < 0.0 || !std::isfinite(spec.rho))
    throw ValidationError(where + ": rho must be >= 0");
  if (spec.kind != OptKind::sgd && spec.rho == 0.0)
    throw ValidationError(where + ": " + to_string(spec.kind) + " needs rho > 0");
  if (spec.epochs < 1) throw ValidationError(where + ": epochs must be >= 1");
  if (spec.batch_size < 1) throw ValidationError(where + ": batch_size must be >= 1");
  if (spec.plateau) {
    if (!(spec.plateau->factor > 0.0) || spec.plateau->factor >= 1.0)
      throw ValidationError(where + ": plateau factor must lie in (0, 1)");
    if (spec.plateau->patience < 1)
      throw ValidationError(where + ": plateau patience must be >= 1");
  }
}

GradVec zero_grads(const ParamView& params) {
  GradVec out;
  out.reserve(params.blocks.size());
  for (auto blk : params.blocks) out.emplace_back(blk.size(), 0.0);
  return out;
}

double grad_norm(const GradVec& grads) {
  double acc = 0.0;
  for (const auto& blk : grads)
    for (double v : blk) acc += v * v;
  return std::sqrt(acc);
}

void sgd_step(ParamView& params, const GradVec& grads, const OptimizerSpec& spec,
              SgdState& state) {
  assert(grads.size() == params.blocks.size());
  if (state.momentum.empty()) state.momentum = zero_grads(params);
  for (std::size_t b = 0; b < params.blocks.size(); ++b) {
    auto blk = params.blocks[b];
    assert(grads[b].size() == blk.size());
    for (std::size_t i = 0; i < blk.size(); ++i) {
      const double g = grads[b][i] + spec.weight_decay * blk[i];
      double& buf = state.momentum[b][i];
      buf = spec.momentum * buf + g;
      blk[i] -= state.lr * buf;
    }
  }
}

void sam_step(ParamView& params, const GradVec& grads_at_w, const std::function<GradVec()>& reeval,
              const OptimizerSpec& spec, SgdState& state) {
  const double norm = grad_norm(grads_at_w);
  if (norm < 1e-12) {
    sgd_step(params, grads_at_w, spec, state);
    return;
  }
  const double scale = spec.rho / norm;
  std::vector<std::vector<double>> saved;
  saved.reserve(params.blocks.size());
  for (auto blk : params.blocks) saved.emplace_back(blk.begin(), blk.end());
  for (std::size_t b = 0; b < params.blocks.size(); ++b)
    for (std::size_t i = 0; i < params.blocks[b].size(); ++i)
      params.blocks[b][i] += scale * grads_at_w[b][i];
  const GradVec at_peak = reeval();
  // Snapshot restore: the descent step must leave from w exactly.
  for (std::size_t b = 0; b < params.blocks.size(); ++b)
    std::copy(saved[b].begin(), saved[b].end(), params.blocks[b].begin());
  sgd_step(params, at_peak, spec, state);
}

JsamSampleGrads jsam_sample_grads(const ConceptPredictor& g, std::span<const double> x,
                                  const std::uint8_t* c, std::span<const double> pos_weights,
                                  double rho) {
  if (g.has_head_bias())
    throw UnsupportedError("jsam requires a bias-free concept head");
  const auto fwd = g.forward(x);
  const auto r = concept_residuals(fwd.probs, c, pos_weights);

  JsamSampleGrads out;
  out.loss = concept_loss(fwd.logits, c, pos_weights);

  // Plain gradient: dW = (sum_j r_j v_j) x^T, dV_j = r_j z.
  std::vector<double> pull(g.m(), 0.0);
  for (std::size_t j = 0; j < g.k(); ++j) axpy(r[j], g.V.row(j), pull);
  out.dW = Matrix(g.m(), g.d());
  add_outer(out.dW, 1.0, pull, x);
  out.dV = Matrix(g.k(), g.m());
  for (std::size_t j = 0; j < g.k(); ++j) {
    auto row = out.dV.row(j);
    for (std::size_t i = 0; i < g.m(); ++i) row[i] = r[j] * fwd.z[i];
  }

  const double x_sq = sq_norm(x);
  const double z_sq = sq_norm(fwd.z);
  double r_sq = 0.0;
  for (double v : r) r_sq += v * v;
  const double norm = std::sqrt(sq_norm(pull) * x_sq + r_sq * z_sq);
  if (norm < 1e-12 || rho == 0.0) return out;  // zero residuals: plain gradient

  // Moving only the Jacobian factor to the perturbed weights adds one rank-one
  // term per block.
  add_outer(out.dW, rho * r_sq / norm, fwd.z, x);
  for (std::size_t j = 0; j < g.k(); ++j)
    axpy(rho * r[j] * x_sq / norm, pull, out.dV.row(j));
  return out;
}

void jsam_step(ConceptPredictor& g, const LabeledDataset& ds,
               std::span<const std::size_t> batch, std::span<const double> pos_weights,
               const OptimizerSpec& spec, SgdState& state) {
  assert(!batch.empty());
  ParamView params;
  params.blocks = {g.W.flat(), g.V.flat()};
  GradVec acc = zero_grads(params);
  for (std::size_t idx : batch) {
    const auto s = jsam_sample_grads(g, ds.inputs.row(idx), ds.concepts.data() + idx * ds.k(),
                                     pos_weights, spec.rho);
    for (std::size_t i = 0; i < acc[0].size(); ++i) acc[0][i] += s.dW.flat()[i];
    for (std::size_t i = 0; i < acc[1].size(); ++i) acc[1][i] += s.dV.flat()[i];
  }
  const double inv = 1.0 / (double)batch.size();
  for (auto& blk : acc)
    for (double& v : blk) v *= inv;
  sgd_step(params, acc, spec, state);
}

void validate_train_config(const TrainConfig& cfg) {
  validate_optimizer(cfg.concept_opt,
                     cfg.strategy == Strategy::joint ? "joint optimizer" : "concept optimizer");
  if (cfg.strategy != Strategy::joint) validate_optimizer(cfg.target_opt, "target optimizer");
  if (cfg.lambda < 0.0 || !std::isfinite(cfg.lambda))
    throw ValidationError("train: lambda must be >= 0");
  if (cfg.strategy != Strategy::joint && cfg.target_opt.kind == OptKind::jsam)
    throw UnsupportedError(
        "jsam is defined for the binary-concept loss; the classifier phase trains with "
        "cross-entropy");
  if (cfg.strategy == Strategy::joint && cfg.concept_opt.kind == OptKind::jsam)
    throw UnsupportedError("jsam does not apply to the joint objective");
  if (cfg.head_bias && cfg.concept_opt.kind == OptKind::jsam)
    throw UnsupportedError("jsam requires a bias-free concept head");
}

namespace {

struct PhaseDriver {
  std::string name;
  std::size_t n = 0;
  ParamView params;
  // Averaged batch gradient and mean batch loss at the current parameters.
  std::function<std::pair<GradVec, double>(std::span<const std::size_t>)> batch_grads;
  // Re-evaluation hook for the SAM ascent; always the plain loss gradient.
  std::function<GradVec(std::span<const std::size_t>)> plain_grads;
  std::function<void(EpochMetrics&)> fill_metrics;
};

void run_phase(PhaseDriver& drv, const OptimizerSpec& spec, std::uint64_t shuffle_seed,
               TrainHistory& history) {
  SgdState state;
  state.lr = spec.learning_rate;
  PhaseHistory ph;
  ph.phase = drv.name;

  std::vector<std::size_t> order(drv.n);
  std::iota(order.begin(), order.end(), 0);
  auto rng = make_rng(shuffle_seed);

  double best = std::numeric_limits<double>::infinity();
  int stall = 0;
  for (int epoch = 0; epoch < spec.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    std::size_t batch_index = 0;
    for (std::size_t start = 0; start < order.size();
         start += (std::size_t)spec.batch_size, ++batch_index) {
      const std::size_t len = std::min((std::size_t)spec.batch_size, order.size() - start);
      const std::span<const std::size_t> chunk(order.data() + start, len);
      auto [grads, loss] = drv.batch_grads(chunk);
      if (!std::isfinite(loss))
        throw NumericError("training diverged: non-finite loss in " + drv.name +
                           " phase at epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(batch_index));
      if (spec.kind == OptKind::sam)
        sam_step(
            drv.params, grads, [&] { return drv.plain_grads(chunk); }, spec, state);
      else
        sgd_step(drv.params, grads, spec, state);
    }

    EpochMetrics em;
    em.epoch = epoch;
    em.lr = state.lr;
    drv.fill_metrics(em);
    for (const auto& [name, v] : em.train)
      if (!std::isfinite(v))
        throw NumericError("training diverged: non-finite " + name + " in " + drv.name +
                           " phase at epoch " + std::to_string(epoch));

    const double monitored = em.val.count("loss") ? em.val.at("loss") : em.train.at("loss");
    if (monitored < best) {
      best = monitored;
      stall = 0;
    } else {
      ++stall;
      if (spec.plateau && stall >= spec.plateau->patience) {
        state.lr *= spec.plateau->factor;
        stall = 0;
      }
    }
    ph.epochs.push_back(std::move(em));
  }
  history.phases.push_back(std::move(ph));
}

double matrix_task_loss(const TargetPredictor& f, const Matrix& c, const std::vector<int>& y) {
  if (c.rows() == 0) return 0.0;
  double acc = 0.0;
  for (std::size_t i = 0; i < c.rows(); ++i) acc += task_loss(f.scores(c.row(i)), y[i]);
  return acc / (double)c.rows();
}

double matrix_task_accuracy(const TargetPredictor& f, const Matrix& c, const std::vector<int>& y) {
  if (c.rows() == 0) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < c.rows(); ++i) hits += predict_class(f, c.row(i)) == y[i];
  return (double)hits / (double)c.rows();
}

Matrix concepts_as_doubles(const LabeledDataset& ds) {
  Matrix c(ds.n(), ds.k());
  for (std::size_t i = 0; i < ds.n(); ++i)
    for (std::size_t j = 0; j < ds.k(); ++j) c(i, j) = (double)ds.bit(i, j);
  return c;
}

}  // namespace

TrainResult train(const LabeledDataset& train_ds, const LabeledDataset* val_ds,
                  const TrainConfig& cfg) {
  train_ds.validate();
  if (train_ds.n() == 0) throw ValidationError("train: training split is empty");
  if (val_ds) {
    val_ds->validate();
    if (val_ds->d() != train_ds.d() || val_ds->k() != train_ds.k() ||
        val_ds->num_classes() != train_ds.num_classes())
      throw ValidationError("train: validation split shape does not match the training split");
  }
  validate_train_config(cfg);
  const bool have_val = val_ds && val_ds->n() > 0;

  const std::size_t d = train_ds.d(), k = train_ds.k(), classes = train_ds.num_classes();
  const std::size_t m = cfg.bottleneck_width ? cfg.bottleneck_width : std::max(d, k);

  TrainResult res;
  res.model = init_model(d, k, classes, m, cfg.strategy, cfg.head_bias, cfg.seed);
  res.history.seed = cfg.seed;
  auto& model = res.model;
  auto& g = model.g;
  auto& f = model.f;

  std::vector<double> wts;
  if (cfg.weighted_concept_loss) wts = positive_class_weights(train_ds);

  const auto concept_param_view = [&] {
    ParamView pv;
    pv.blocks = {g.W.flat(), g.V.flat()};
    if (g.has_head_bias()) pv.blocks.push_back(g.head_bias);
    return pv;
  };

  if (cfg.strategy == Strategy::joint) {
    PhaseDriver drv;
    drv.name = "joint";
    drv.n = train_ds.n();
    drv.params = concept_param_view();
    drv.params.blocks.push_back(f.U.flat());
    drv.params.blocks.push_back(f.bias);

    auto grads_of = [&](std::span<const std::size_t> chunk) {
      GradVec acc = zero_grads(drv.params);
      double loss = 0.0;
      for (std::size_t idx : chunk) {
        const auto jg = joint_grads(model, train_ds.inputs.row(idx),
                                    train_ds.concepts.data() + idx * k, train_ds.targets[idx],
                                    cfg.lambda, wts);
        loss += jg.loss;
        std::size_t b = 0;
        for (double v : jg.concept_part.dW.flat()) acc[0][b++] += v;
        b = 0;
        for (double v : jg.concept_part.dV.flat()) acc[1][b++] += v;
        std::size_t blk = 2;
        if (g.has_head_bias()) {
          b = 0;
          for (double v : jg.concept_part.dbias) acc[blk][b++] += v;
          ++blk;
        }
        b = 0;
        for (double v : jg.target_part.dU.flat()) acc[blk][b++] += v;
        b = 0;
        for (double v : jg.target_part.dbias) acc[blk + 1][b++] += v;
      }
      const double inv = 1.0 / (double)chunk.size();
      for (auto& blkv : acc)
        for (double& v : blkv) v *= inv;
      return std::make_pair(std::move(acc), loss * inv);
    };
    drv.batch_grads = grads_of;
    drv.plain_grads = [grads_of](std::span<const std::size_t> chunk) {
      return grads_of(chunk).first;
    };

    auto split_metrics = [&](const LabeledDataset& ds, std::map<std::string, double>& into) {
      double total = 0, tl = 0, cl = 0;
      std::size_t task_hits = 0, concept_hits = 0;
      for (std::size_t i = 0; i < ds.n(); ++i) {
        const auto fwd = g.forward(ds.inputs.row(i));
        const auto s = f.scores(fwd.probs);
        const double sample_tl = task_loss(s, ds.targets[i]);
        const double sample_cl = concept_loss(fwd.logits, ds.concepts.data() + i * k, wts);
        tl += sample_tl;
        cl += sample_cl;
        total += sample_tl + cfg.lambda * sample_cl;
        task_hits += predict_class(f, fwd.probs) == ds.targets[i];
        for (std::size_t j = 0; j < k; ++j)
          concept_hits += (fwd.probs[j] >= 0.5 ? 1 : 0) == ds.bit(i, j);
      }
      const double inv = 1.0 / (double)ds.n();
      into["loss"] = total * inv;
      into["task_loss"] = tl * inv;
      into["concept_loss"] = cl * inv;
      into["task_acc"] = (double)task_hits * inv;
      into["concept_acc"] = (double)concept_hits * inv / (double)k;
    };
    drv.fill_metrics = [&](EpochMetrics& em) {
      split_metrics(train_ds, em.train);
      if (have_val) split_metrics(*val_ds, em.val);
    };

    run_phase(drv, cfg.concept_opt, derive_seed(cfg.seed, "joint/shuffle"), res.history);
    return res;
  }

  // Concept phase.
  {
    PhaseDriver drv;
    drv.name = "concept";
    drv.n = train_ds.n();
    drv.params = concept_param_view();

    auto plain = [&](std::span<const std::size_t> chunk) {
      GradVec acc = zero_grads(drv.params);
      double loss = 0.0;
      for (std::size_t idx : chunk) {
        const auto cg =
            concept_grads(g, train_ds.inputs.row(idx), train_ds.concepts.data() + idx * k, wts);
        loss += cg.loss;
        std::size_t b = 0;
        for (double v : cg.dW.flat()) acc[0][b++] += v;
        b = 0;
        for (double v : cg.dV.flat()) acc[1][b++] += v;
        if (g.has_head_bias()) {
          b = 0;
          for (double v : cg.dbias) acc[2][b++] += v;
        }
      }
      const double inv = 1.0 / (double)chunk.size();
      for (auto& blkv : acc)
        for (double& v : blkv) v *= inv;
      return std::make_pair(std::move(acc), loss * inv);
    };
    if (cfg.concept_opt.kind == OptKind::jsam) {
      drv.batch_grads = [&](std::span<const std::size_t> chunk) {
        GradVec acc = zero_grads(drv.params);
        double loss = 0.0;
        for (std::size_t idx : chunk) {
          const auto sg = jsam_sample_grads(g, train_ds.inputs.row(idx),
                                            train_ds.concepts.data() + idx * k, wts,
                                            cfg.concept_opt.rho);
          loss += sg.loss;
          std::size_t b = 0;
          for (double v : sg.dW.flat()) acc[0][b++] += v;
          b = 0;
          for (double v : sg.dV.flat()) acc[1][b++] += v;
        }
        const double inv = 1.0 / (double)chunk.size();
        for (auto& blkv : acc)
          for (double& v : blkv) v *= inv;
        return std::make_pair(std::move(acc), loss * inv);
      };
    } else {
      drv.batch_grads = plain;
    }
    drv.plain_grads = [plain](std::span<const std::size_t> chunk) { return plain(chunk).first; };

    auto split_metrics = [&](const LabeledDataset& ds, std::map<std::string, double>& into) {
      double loss = 0.0;
      std::size_t hits = 0;
      for (std::size_t i = 0; i < ds.n(); ++i) {
        const auto fwd = g.forward(ds.inputs.row(i));
        loss += concept_loss(fwd.logits, ds.concepts.data() + i * k, wts);
        for (std::size_t j = 0; j < k; ++j)
          hits += (fwd.probs[j] >= 0.5 ? 1 : 0) == ds.bit(i, j);
      }
      into["loss"] = loss / (double)ds.n();
      into["concept_acc"] = (double)hits / (double)(ds.n() * k);
    };
    drv.fill_metrics = [&](EpochMetrics& em) {
      split_metrics(train_ds, em.train);
      if (have_val) split_metrics(*val_ds, em.val);
    };

    run_phase(drv, cfg.concept_opt, derive_seed(cfg.seed, "concept/shuffle"), res.history);
  }

  // Classifier phase: ground-truth bits for independent, concept probabilities
  // for sequential.
  const Matrix c_train = cfg.strategy == Strategy::independent ? concepts_as_doubles(train_ds)
                                                               : concept_prob_matrix(g, train_ds);
  Matrix c_val;
  if (have_val)
    c_val = cfg.strategy == Strategy::independent ? concepts_as_doubles(*val_ds)
                                                  : concept_prob_matrix(g, *val_ds);

  {
    PhaseDriver drv;
    drv.name = "target";
    drv.n = train_ds.n();
    drv.params.blocks = {f.U.flat(), f.bias};

    auto plain = [&](std::span<const std::size_t> chunk) {
      GradVec acc = zero_grads(drv.params);
      double loss = 0.0;
      for (std::size_t idx : chunk) {
        const auto tg = target_grads(f, c_train.row(idx), train_ds.targets[idx]);
        loss += tg.loss;
        std::size_t b = 0;
        for (double v : tg.dU.flat()) acc[0][b++] += v;
        b = 0;
        for (double v : tg.dbias) acc[1][b++] += v;
      }
      const double inv = 1.0 / (double)chunk.size();
      for (auto& blkv : acc)
        for (double& v : blkv) v *= inv;
      return std::make_pair(std::move(acc), loss * inv);
    };
    drv.batch_grads = plain;
    drv.plain_grads = [plain](std::span<const std::size_t> chunk) { return plain(chunk).first; };
    drv.fill_metrics = [&](EpochMetrics& em) {
      em.train["loss"] = matrix_task_loss(f, c_train, train_ds.targets);
      em.train["task_acc"] = matrix_task_accuracy(f, c_train, train_ds.targets);
      if (have_val) {
        em.val["loss"] = matrix_task_loss(f, c_val, val_ds->targets);
        em.val["task_acc"] = matrix_task_accuracy(f, c_val, val_ds->targets);
      }
    };

    run_phase(drv, cfg.target_opt, derive_seed(cfg.seed, "target/shuffle"), res.history);
  }
  return res;
}

std::string history_csv_string(const TrainHistory& history) {
  std::string out = "epoch,split,metric,value\n";
  for (const auto& ph : history.phases)
    for (const auto& em : ph.epochs) {
      const std::string epoch = std::to_string(em.epoch);
      for (const auto& [name, v] : em.train)
        out += epoch + ",train," + ph.phase + "." + name + "," + format_g17(v) + "\n";
      out += epoch + ",train," + ph.phase + ".lr," + format_g17(em.lr) + "\n";
      for (const auto& [name, v] : em.val)
        out += epoch + ",val," + ph.phase + "." + name + "," + format_g17(v) + "\n";
    }
  return out;
}

void save_history_csv(const TrainHistory& history, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << history_csv_string(history);
  out.flush();
  if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace cbmlab
