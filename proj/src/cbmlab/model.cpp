#include "cbmlab/model.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <random>

#include "cbmlab/common.hpp"

namespace cbmlab {

using nlohmann::json;

double sigmoid(double g) {
  if (g >= 0.0) return 1.0 / (1.0 + std::exp(-g));
  const double e = std::exp(g);
  return e / (1.0 + e);
}

double log_sigmoid(double g) {
  if (g >= 0.0) return -std::log1p(std::exp(-g));
  return g - std::log1p(std::exp(g));
}

double log_sum_exp(std::span<const double> v) {
  assert(!v.empty());
  const double hi = *std::max_element(v.begin(), v.end());
  double acc = 0.0;
  for (double x : v) acc += std::exp(x - hi);
  return hi + std::log(acc);
}

std::vector<double> softmax(std::span<const double> scores) {
  assert(!scores.empty());
  const double hi = *std::max_element(scores.begin(), scores.end());
  std::vector<double> out(scores.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    out[i] = std::exp(scores[i] - hi);
    acc += out[i];
  }
  for (double& p : out) p /= acc;
  return out;
}

ConceptForward ConceptPredictor::forward(std::span<const double> x) const {
  ConceptForward fwd;
  fwd.z = matvec(W, x);
  fwd.logits = matvec(V, fwd.z);
  if (has_head_bias())
    for (std::size_t j = 0; j < fwd.logits.size(); ++j) fwd.logits[j] += head_bias[j];
  fwd.probs.resize(fwd.logits.size());
  for (std::size_t j = 0; j < fwd.logits.size(); ++j) fwd.probs[j] = sigmoid(fwd.logits[j]);
  return fwd;
}

std::vector<double> TargetPredictor::scores(std::span<const double> c) const {
  auto s = matvec(U, c);
  for (std::size_t i = 0; i < s.size(); ++i) s[i] += bias[i];
  return s;
}

std::vector<double> TargetPredictor::probs(std::span<const double> c) const {
  return softmax(scores(c));
}

std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::independent: return "independent";
    case Strategy::sequential: return "sequential";
    case Strategy::joint: return "joint";
  }
  return "independent";
}

Strategy strategy_from_string(const std::string& s) {
  if (s == "independent") return Strategy::independent;
  if (s == "sequential") return Strategy::sequential;
  if (s == "joint") return Strategy::joint;
  throw ValidationError("unknown training strategy \"" + s + "\"");
}

CbmModel init_model(std::size_t d, std::size_t k, std::size_t num_classes, std::size_t m,
                    Strategy strategy, bool head_bias, std::uint64_t seed) {
  if (d == 0 || k == 0 || num_classes == 0 || m == 0)
    throw ValidationError("init_model: all dimensions must be positive");
  auto rng = make_rng(derive_seed(seed, "init"));
  std::normal_distribution<double> gauss(0.0, 1.0);

  CbmModel model;
  model.strategy = strategy;
  model.g.W = Matrix(m, d);
  const double w_scale = 1.0 / std::sqrt((double)d);
  for (double& v : model.g.W.flat()) v = gauss(rng) * w_scale;
  model.g.V = Matrix(k, m);
  const double v_scale = 1.0 / std::sqrt((double)m);
  for (double& v : model.g.V.flat()) v = gauss(rng) * v_scale;
  if (head_bias) model.g.head_bias.assign(k, 0.0);
  model.f.U = Matrix(num_classes, k);
  const double u_scale = 1.0 / std::sqrt((double)k);
  for (double& v : model.f.U.flat()) v = gauss(rng) * u_scale;
  model.f.bias.assign(num_classes, 0.0);
  return model;
}

double concept_loss(std::span<const double> logits, const std::uint8_t* c,
                    std::span<const double> pos_weights) {
  assert(pos_weights.empty() || pos_weights.size() == logits.size());
  double loss = 0.0;
  for (std::size_t j = 0; j < logits.size(); ++j) {
    const double w = pos_weights.empty() ? 1.0 : pos_weights[j];
    if (c[j])
      loss -= w * log_sigmoid(logits[j]);
    else
      loss -= log_sigmoid(-logits[j]);
  }
  return loss;
}

double task_loss(std::span<const double> scores, int y) {
  assert(y >= 0 && (std::size_t)y < scores.size());
  return log_sum_exp(scores) - scores[(std::size_t)y];
}

std::vector<double> concept_residuals(std::span<const double> probs, const std::uint8_t* c,
                                      std::span<const double> pos_weights) {
  assert(pos_weights.empty() || pos_weights.size() == probs.size());
  std::vector<double> r(probs.size());
  for (std::size_t j = 0; j < probs.size(); ++j) {
    const double w = pos_weights.empty() ? 1.0 : pos_weights[j];
    r[j] = c[j] ? -w * (1.0 - probs[j]) : probs[j];
  }
  return r;
}

ConceptGrads concept_grads(const ConceptPredictor& g, std::span<const double> x,
                           const std::uint8_t* c, std::span<const double> pos_weights) {
  const auto fwd = g.forward(x);
  const auto r = concept_residuals(fwd.probs, c, pos_weights);

  ConceptGrads out;
  out.loss = concept_loss(fwd.logits, c, pos_weights);
  out.dV = Matrix(g.k(), g.m());
  for (std::size_t j = 0; j < g.k(); ++j) {
    auto row = out.dV.row(j);
    for (std::size_t i = 0; i < g.m(); ++i) row[i] = r[j] * fwd.z[i];
  }
  // dW = (sum_j r_j v_j) x^T
  std::vector<double> pull(g.m(), 0.0);
  for (std::size_t j = 0; j < g.k(); ++j) axpy(r[j], g.V.row(j), pull);
  out.dW = Matrix(g.m(), g.d());
  add_outer(out.dW, 1.0, pull, x);
  if (g.has_head_bias()) out.dbias = r;
  return out;
}

TargetGrads target_grads(const TargetPredictor& f, std::span<const double> c, int y) {
  const auto s = f.scores(c);
  auto r = softmax(s);
  r[(std::size_t)y] -= 1.0;

  TargetGrads out;
  out.loss = task_loss(s, y);
  out.dU = Matrix(f.num_classes(), f.k());
  add_outer(out.dU, 1.0, r, c);
  out.dbias = std::move(r);
  return out;
}

JointGrads joint_grads(const CbmModel& model, std::span<const double> x, const std::uint8_t* c,
                       int y, double lambda, std::span<const double> pos_weights) {
  const auto& g = model.g;
  const auto& f = model.f;
  const auto fwd = g.forward(x);
  const auto s = f.scores(fwd.probs);
  auto r_task = softmax(s);
  r_task[(std::size_t)y] -= 1.0;

  JointGrads out;
  out.task_component = task_loss(s, y);
  out.concept_component = concept_loss(fwd.logits, c, pos_weights);
  out.loss = out.task_component + lambda * out.concept_component;

  out.target_part.loss = out.task_component;
  out.target_part.dU = Matrix(f.num_classes(), f.k());
  add_outer(out.target_part.dU, 1.0, r_task, fwd.probs);
  out.target_part.dbias = r_task;

  // Back through the concept sigmoids: t_j = (U^T r)_j p_j (1-p_j) + lambda * bce_j
  std::vector<double> back(f.k());
  matvec_t(f.U, r_task, back);
  const auto r_bce = concept_residuals(fwd.probs, c, pos_weights);
  std::vector<double> t(g.k());
  for (std::size_t j = 0; j < g.k(); ++j)
    t[j] = back[j] * fwd.probs[j] * (1.0 - fwd.probs[j]) + lambda * r_bce[j];

  out.concept_part.loss = out.concept_component;
  out.concept_part.dV = Matrix(g.k(), g.m());
  for (std::size_t j = 0; j < g.k(); ++j) {
    auto row = out.concept_part.dV.row(j);
    for (std::size_t i = 0; i < g.m(); ++i) row[i] = t[j] * fwd.z[i];
  }
  std::vector<double> pull(g.m(), 0.0);
  for (std::size_t j = 0; j < g.k(); ++j) axpy(t[j], g.V.row(j), pull);
  out.concept_part.dW = Matrix(g.m(), g.d());
  add_outer(out.concept_part.dW, 1.0, pull, x);
  if (g.has_head_bias()) out.concept_part.dbias = t;
  return out;
}

std::vector<double> positive_class_weights(const LabeledDataset& train) {
  std::vector<double> w(train.k());
  for (std::size_t j = 0; j < train.k(); ++j) {
    std::size_t pos = 0;
    for (std::size_t i = 0; i < train.n(); ++i) pos += train.bit(i, j);
    const std::size_t neg = train.n() - pos;
    w[j] = (double)std::max<std::size_t>(neg, 1) / (double)std::max<std::size_t>(pos, 1);
  }
  return w;
}

namespace {

json matrix_to_json(const Matrix& m) {
  return json(std::vector<double>(m.flat().begin(), m.flat().end()));
}

Matrix matrix_from_json(const json& j, std::size_t rows, std::size_t cols,
                        const std::string& name) {
  const auto flat = j.get<std::vector<double>>();
  if (flat.size() != rows * cols)
    throw ParseError("checkpoint: " + name + " has " + std::to_string(flat.size()) +
                     " entries, expected " + std::to_string(rows * cols));
  Matrix m(rows, cols);
  std::copy(flat.begin(), flat.end(), m.flat().begin());
  return m;
}

}  // namespace

void save_model(const CbmModel& model, const std::filesystem::path& path) {
  json j;
  j["format"] = "cbmlab.model.v1";
  j["strategy"] = to_string(model.strategy);
  j["d"] = model.g.d();
  j["m"] = model.g.m();
  j["k"] = model.g.k();
  j["classes"] = model.f.num_classes();
  j["W"] = matrix_to_json(model.g.W);
  j["V"] = matrix_to_json(model.g.V);
  j["head_bias"] = model.g.has_head_bias() ? json(model.g.head_bias) : json(nullptr);
  j["U"] = matrix_to_json(model.f.U);
  j["bias"] = json(model.f.bias);

  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << j.dump(2) << "\n";
  out.flush();
  if (!out) throw IoError("failed writing " + path.string());
}

CbmModel load_model(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  try {
    if (j.at("format").get<std::string>() != "cbmlab.model.v1")
      throw ParseError(path.string() + ": unknown checkpoint format");
    const auto d = j.at("d").get<std::size_t>();
    const auto m = j.at("m").get<std::size_t>();
    const auto k = j.at("k").get<std::size_t>();
    const auto classes = j.at("classes").get<std::size_t>();
    CbmModel model;
    model.strategy = strategy_from_string(j.at("strategy").get<std::string>());
    model.g.W = matrix_from_json(j.at("W"), m, d, "W");
    model.g.V = matrix_from_json(j.at("V"), k, m, "V");
    if (!j.at("head_bias").is_null()) {
      model.g.head_bias = j.at("head_bias").get<std::vector<double>>();
      if (model.g.head_bias.size() != k)
        throw ParseError(path.string() + ": head_bias size mismatch");
    }
    model.f.U = matrix_from_json(j.at("U"), classes, k, "U");
    model.f.bias = j.at("bias").get<std::vector<double>>();
    if (model.f.bias.size() != classes) throw ParseError(path.string() + ": bias size mismatch");
    return model;
  } catch (const json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

Matrix concept_prob_matrix(const ConceptPredictor& g, const LabeledDataset& ds) {
  Matrix probs(ds.n(), g.k());
  for (std::size_t i = 0; i < ds.n(); ++i) {
    const auto fwd = g.forward(ds.inputs.row(i));
    std::copy(fwd.probs.begin(), fwd.probs.end(), probs.row(i).begin());
  }
  return probs;
}

int predict_class(const TargetPredictor& f, std::span<const double> c) {
  const auto s = f.scores(c);
  std::size_t best = 0;
  for (std::size_t i = 1; i < s.size(); ++i)
    if (s[i] > s[best]) best = i;
  return (int)best;
}

double task_accuracy(const CbmModel& model, const LabeledDataset& ds) {
  if (ds.n() == 0) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < ds.n(); ++i) {
    const auto fwd = model.g.forward(ds.inputs.row(i));
    hits += predict_class(model.f, fwd.probs) == ds.targets[i];
  }
  return (double)hits / (double)ds.n();
}

double task_accuracy_on_true_concepts(const TargetPredictor& f, const LabeledDataset& ds) {
  if (ds.n() == 0) return 0.0;
  std::vector<double> c(ds.k());
  std::size_t hits = 0;
  for (std::size_t i = 0; i < ds.n(); ++i) {
    for (std::size_t j = 0; j < ds.k(); ++j) c[j] = (double)ds.bit(i, j);
    hits += predict_class(f, c) == ds.targets[i];
  }
  return (double)hits / (double)ds.n();
}

double mean_concept_loss(const ConceptPredictor& g, const LabeledDataset& ds,
                         std::span<const double> pos_weights) {
  if (ds.n() == 0) return 0.0;
  double acc = 0.0;
  for (std::size_t i = 0; i < ds.n(); ++i) {
    const auto fwd = g.forward(ds.inputs.row(i));
    acc += concept_loss(fwd.logits, ds.concepts.data() + i * ds.k(), pos_weights);
  }
  return acc / (double)ds.n();
}

double mean_task_loss(const CbmModel& model, const LabeledDataset& ds) {
  if (ds.n() == 0) return 0.0;
  double acc = 0.0;
  for (std::size_t i = 0; i < ds.n(); ++i) {
    const auto fwd = model.g.forward(ds.inputs.row(i));
    acc += task_loss(model.f.scores(fwd.probs), ds.targets[i]);
  }
  return acc / (double)ds.n();
}

}  // namespace cbmlab
