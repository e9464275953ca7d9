#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "cbmlab/common.hpp"
#include "cbmlab/dataset.hpp"
#include "cbmlab/model.hpp"
#include "cbmlab/optim.hpp"

using namespace cbmlab;

namespace {

OptimizerSpec plain_sgd(double lr) {
  OptimizerSpec spec;
  spec.kind = OptKind::sgd;
  spec.learning_rate = lr;
  return spec;
}

// One scalar parameter, explicit recurrence.
double run_scalar_sgd(double w0, const std::vector<double>& grads, const OptimizerSpec& spec) {
  std::vector<double> w{w0};
  ParamView pv;
  pv.blocks = {std::span<double>(w)};
  SgdState st;
  st.lr = spec.learning_rate;
  for (double g : grads) sgd_step(pv, GradVec{{g}}, spec, st);
  return w[0];
}

LabeledDataset constant_loss_dataset(std::size_t n) {
  LabeledDataset ds;
  ds.inputs = Matrix(n, 2);  // all-zero inputs freeze every gradient
  ds.concepts.assign(n, 1);
  ds.targets.resize(n);
  for (std::size_t i = 0; i < n; ++i) ds.targets[i] = (int)(i % 2);
  ds.concept_names = {"c0"};
  ds.class_names = {"a", "b"};
  ds.validate();
  return ds;
}

// J-SAM reference route: keep the residual at w, evaluate the Jacobian factor
// at the SAM-perturbed weights, no closed-form simplification.
struct JacobianRoute {
  Matrix dW, dV;
};
JacobianRoute jacobian_route(const ConceptPredictor& g, std::span<const double> x,
                             const std::uint8_t* c, std::span<const double> wts, double rho) {
  const auto fwd = g.forward(x);
  const auto r = concept_residuals(fwd.probs, c, wts);

  std::vector<double> pull(g.m(), 0.0);
  for (std::size_t j = 0; j < g.k(); ++j) axpy(r[j], g.V.row(j), pull);
  double r_sq = 0.0;
  for (double v : r) r_sq += v * v;
  const double norm = std::sqrt(sq_norm(pull) * sq_norm(x) + r_sq * sq_norm(fwd.z));

  JacobianRoute out;
  out.dW = Matrix(g.m(), g.d());
  out.dV = Matrix(g.k(), g.m());
  if (norm < 1e-12 || rho == 0.0) {
    add_outer(out.dW, 1.0, pull, x);
    for (std::size_t j = 0; j < g.k(); ++j)
      for (std::size_t i = 0; i < g.m(); ++i) out.dV(j, i) = r[j] * fwd.z[i];
    return out;
  }

  // Perturbed weights: eps_W = rho/norm * pull x^T, eps_vj = rho/norm * r_j z.
  Matrix W2 = g.W;
  add_outer(W2, rho / norm, pull, x);
  Matrix V2 = g.V;
  for (std::size_t j = 0; j < g.k(); ++j) axpy(rho / norm * r[j], fwd.z, V2.row(j));

  std::vector<double> pull2(g.m(), 0.0);
  for (std::size_t j = 0; j < g.k(); ++j) axpy(r[j], V2.row(j), pull2);
  add_outer(out.dW, 1.0, pull2, x);

  std::vector<double> z2(g.m());
  matvec(W2, x, z2);
  for (std::size_t j = 0; j < g.k(); ++j)
    for (std::size_t i = 0; i < g.m(); ++i) out.dV(j, i) = r[j] * z2[i];
  return out;
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.flat().size(); ++i)
    m = std::max(m, std::abs(a.flat()[i] - b.flat()[i]));
  return m;
}

double last_metric(const TrainHistory& h, const std::string& phase, const std::string& name) {
  for (const auto& ph : h.phases)
    if (ph.phase == phase) return ph.epochs.back().train.at(name);
  FAIL("phase not found: ", phase);
  return 0.0;
}

}  // namespace

TEST_CASE("sgd step is exact without momentum or decay") {
  // 0.5 * 0.25 = 0.125 is exactly representable, so the update is bit-exact.
  OptimizerSpec spec = plain_sgd(0.5);
  CHECK(run_scalar_sgd(1.0, {0.25}, spec) == 0.875);
  CHECK(run_scalar_sgd(1.0, {0.25, 0.25}, spec) == 0.75);
}

TEST_CASE("sgd with lr=0 leaves parameters untouched") {
  OptimizerSpec spec = plain_sgd(0.0);
  spec.momentum = 0.9;
  spec.weight_decay = 0.1;
  CHECK(run_scalar_sgd(3.0, {1.0, -2.0, 5.0}, spec) == 3.0);
}

TEST_CASE("sgd momentum follows the scalar recurrence") {
  OptimizerSpec spec = plain_sgd(0.1);
  spec.momentum = 0.9;
  // buf1 = 0.5, w1 = 1 - 0.05 = 0.95; buf2 = 0.9*0.5 + 0.5 = 0.95,
  // w2 = 0.95 - 0.095 = 0.855.
  CHECK(run_scalar_sgd(1.0, {0.5}, spec) == doctest::Approx(0.95).epsilon(1e-15));
  CHECK(run_scalar_sgd(1.0, {0.5, 0.5}, spec) == doctest::Approx(0.855).epsilon(1e-15));
}

TEST_CASE("weight decay is added to the gradient before the momentum update") {
  OptimizerSpec spec = plain_sgd(1.0);
  spec.momentum = 0.9;
  spec.weight_decay = 0.5;
  // w=2, g=0: step1 g'=1, buf=1, w=1; step2 g'=0.5, buf=0.9+0.5=1.4, w=-0.4.
  CHECK(run_scalar_sgd(2.0, {0.0}, spec) == 1.0);
  CHECK(run_scalar_sgd(2.0, {0.0, 0.0}, spec) == doctest::Approx(-0.4).epsilon(1e-15));
}

TEST_CASE("sam perturbs by rho * g/|g| and descends from the original point") {
  std::vector<double> w{3.0, 4.0};
  ParamView pv;
  pv.blocks = {std::span<double>(w)};
  OptimizerSpec spec;
  spec.kind = OptKind::sam;
  spec.rho = 0.05;
  spec.learning_rate = 1.0;
  SgdState st;
  st.lr = 1.0;

  std::vector<double> seen;
  auto reeval = [&] {
    seen = w;  // capture the perturbed parameters
    return GradVec{{0.0, 0.0}};
  };
  sam_step(pv, GradVec{{3.0, 4.0}}, reeval, spec, st);
  REQUIRE(seen.size() == 2);
  CHECK(seen[0] == doctest::Approx(3.03).epsilon(1e-14));
  CHECK(seen[1] == doctest::Approx(4.04).epsilon(1e-14));
  // Zero gradient at the peak: parameters restored exactly.
  CHECK(w[0] == 3.0);
  CHECK(w[1] == 4.0);
}

TEST_CASE("sam on the scalar quadratic matches the closed form") {
  // l(w) = w^2/2 at w=1, rho=0.1, lr=1: perturbed grad 1.1, new w = -0.1.
  std::vector<double> w{1.0};
  ParamView pv;
  pv.blocks = {std::span<double>(w)};
  OptimizerSpec spec;
  spec.kind = OptKind::sam;
  spec.rho = 0.1;
  spec.learning_rate = 1.0;
  SgdState st;
  st.lr = 1.0;
  sam_step(pv, GradVec{{1.0}}, [&] { return GradVec{{w[0]}}; }, spec, st);
  CHECK(w[0] == doctest::Approx(-0.1).epsilon(1e-12));
}

TEST_CASE("sam with rho=0 reproduces sgd bit for bit") {
  for (double momentum : {0.0, 0.9}) {
    OptimizerSpec sam_spec;
    sam_spec.kind = OptKind::sam;
    sam_spec.rho = 0.0;
    sam_spec.learning_rate = 0.3;
    sam_spec.momentum = momentum;
    sam_spec.weight_decay = 0.01;
    OptimizerSpec sgd_spec = sam_spec;
    sgd_spec.kind = OptKind::sgd;

    std::vector<double> a{1.0, -2.0, 0.5}, b = a;
    ParamView pa, pb;
    pa.blocks = {std::span<double>(a)};
    pb.blocks = {std::span<double>(b)};
    SgdState sa, sb;
    sa.lr = sb.lr = 0.3;
    const GradVec g{{0.2, -0.7, 1.5}};
    for (int step = 0; step < 3; ++step) {
      sam_step(pa, g, [&] { return g; }, sam_spec, sa);
      sgd_step(pb, g, sgd_spec, sb);
    }
    CHECK(a == b);
  }
}

TEST_CASE("sam falls back to sgd when the gradient underflows") {
  std::vector<double> w{2.0};
  ParamView pv;
  pv.blocks = {std::span<double>(w)};
  OptimizerSpec spec;
  spec.kind = OptKind::sam;
  spec.rho = 0.05;
  spec.learning_rate = 1.0;
  spec.weight_decay = 0.5;  // decay still acts on a zero gradient
  SgdState st;
  st.lr = 1.0;
  bool reevaluated = false;
  sam_step(pv, GradVec{{1e-13}}, [&] {
    reevaluated = true;
    return GradVec{{0.0}};
  }, spec, st);
  CHECK_FALSE(reevaluated);
  CHECK(w[0] == doctest::Approx(2.0 - (1e-13 + 0.5 * 2.0)).epsilon(1e-15));
}

TEST_CASE("optimizer validation rejects out-of-range fields") {
  const auto ok = [](const OptimizerSpec& s) { validate_optimizer(s, "opt"); };
  OptimizerSpec spec;
  CHECK_NOTHROW(ok(spec));
  spec.learning_rate = 0.0;
  CHECK_NOTHROW(ok(spec));  // lr=0 is a legal degenerate configuration
  spec.learning_rate = -0.1;
  CHECK_THROWS_AS(ok(spec), ValidationError);
  spec = {};
  spec.momentum = 1.0;
  CHECK_THROWS_AS(ok(spec), ValidationError);
  spec = {};
  spec.weight_decay = -1.0;
  CHECK_THROWS_AS(ok(spec), ValidationError);
  spec = {};
  spec.kind = OptKind::sam;
  spec.rho = 0.0;
  CHECK_THROWS_AS(ok(spec), ValidationError);
  spec.kind = OptKind::jsam;
  CHECK_THROWS_AS(ok(spec), ValidationError);
  spec = {};
  spec.epochs = 0;
  CHECK_THROWS_AS(ok(spec), ValidationError);
  spec = {};
  spec.batch_size = 0;
  CHECK_THROWS_AS(ok(spec), ValidationError);
  spec = {};
  spec.plateau = PlateauSpec{1.0, 5};
  CHECK_THROWS_AS(ok(spec), ValidationError);
  spec.plateau = PlateauSpec{0.5, 0};
  CHECK_THROWS_AS(ok(spec), ValidationError);
}

TEST_CASE("optimizer kind names round-trip") {
  for (OptKind k : {OptKind::sgd, OptKind::sam, OptKind::jsam})
    CHECK(opt_kind_from_string(to_string(k)) == k);
  CHECK_THROWS_AS(opt_kind_from_string("adam"), ValidationError);
}

TEST_CASE("jsam closed form matches the perturbed-Jacobian evaluation") {
  auto rng = make_rng(41);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_int_distribution<int> bit(0, 1);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t d = 3, m = 2, k = 2;
    ConceptPredictor g;
    g.W = Matrix(m, d);
    g.V = Matrix(k, m);
    for (double& v : g.W.flat()) v = gauss(rng);
    for (double& v : g.V.flat()) v = gauss(rng);
    std::vector<double> x(d);
    for (double& v : x) v = gauss(rng);
    std::vector<std::uint8_t> c(k);
    for (auto& v : c) v = (std::uint8_t)bit(rng);
    std::vector<double> wts;
    if (trial % 2) {
      wts.resize(k);
      for (double& v : wts) v = 0.5 + std::abs(gauss(rng));
    }
    const double rho = 0.05 + 0.1 * trial;

    const auto closed = jsam_sample_grads(g, x, c.data(), wts, rho);
    const auto numeric = jacobian_route(g, x, c.data(), wts, rho);
    CHECK(max_abs_diff(closed.dW, numeric.dW) < 1e-10);
    CHECK(max_abs_diff(closed.dV, numeric.dV) < 1e-10);
  }
}

TEST_CASE("jsam with rho=0 equals the plain gradient") {
  auto rng = make_rng(99);
  std::normal_distribution<double> gauss(0.0, 1.0);
  ConceptPredictor g;
  g.W = Matrix(2, 3);
  g.V = Matrix(4, 2);
  for (double& v : g.W.flat()) v = gauss(rng);
  for (double& v : g.V.flat()) v = gauss(rng);
  std::vector<double> x{0.3, -1.2, 0.7};
  std::vector<std::uint8_t> c{1, 0, 0, 1};

  const auto plain = concept_grads(g, x, c.data(), {});
  const auto eff = jsam_sample_grads(g, x, c.data(), {}, 0.0);
  CHECK(max_abs_diff(eff.dW, plain.dW) < 1e-15);
  CHECK(max_abs_diff(eff.dV, plain.dV) < 1e-15);
  CHECK(eff.loss == doctest::Approx(plain.loss).epsilon(1e-15));
}

TEST_CASE("jsam reduces to the plain gradient when every residual vanishes") {
  // Saturated negative logits underflow to probability exactly 0, so with
  // all-zero concepts the residual vector is exactly zero.
  ConceptPredictor g;
  g.W = Matrix(1, 1);
  g.W(0, 0) = 1.0;
  g.V = Matrix(2, 1);
  g.V(0, 0) = -800.0;
  g.V(1, 0) = -900.0;
  std::vector<double> x{1.0};
  std::vector<std::uint8_t> c{0, 0};
  const auto eff = jsam_sample_grads(g, x, c.data(), {}, 0.5);
  for (double v : eff.dW.flat()) CHECK(v == 0.0);
  for (double v : eff.dV.flat()) CHECK(v == 0.0);
  CHECK(eff.loss == 0.0);
}

TEST_CASE("jsam rejects a concept head with bias") {
  ConceptPredictor g;
  g.W = Matrix(1, 1);
  g.V = Matrix(1, 1);
  g.head_bias = {0.0};
  std::vector<double> x{1.0};
  std::vector<std::uint8_t> c{1};
  CHECK_THROWS_AS(jsam_sample_grads(g, x, c.data(), {}, 0.1), UnsupportedError);
}

TEST_CASE("jsam_step averages per-sample updates before the descent step") {
  SyntheticSpec sspec;
  sspec.n = 6;
  sspec.d = 4;
  sspec.k = 3;
  sspec.num_classes = 2;
  sspec.prototype_min_hamming = 1;
  sspec.seed = 11;
  const auto ds = generate_synthetic(sspec);

  CbmModel model = init_model(4, 3, 2, 4, Strategy::independent, false, 5);
  OptimizerSpec spec;
  spec.kind = OptKind::jsam;
  spec.rho = 0.1;
  spec.learning_rate = 0.25;
  spec.momentum = 0.5;

  // Reference: average the closed-form sample gradients by hand, then apply
  // one sgd_step.
  ConceptPredictor ref = model.g;
  {
    GradVec acc{std::vector<double>(ref.W.flat().size(), 0.0),
                std::vector<double>(ref.V.flat().size(), 0.0)};
    for (std::size_t i = 0; i < ds.n(); ++i) {
      const auto s =
          jsam_sample_grads(ref, ds.inputs.row(i), ds.concepts.data() + i * ds.k(), {}, spec.rho);
      for (std::size_t t = 0; t < acc[0].size(); ++t) acc[0][t] += s.dW.flat()[t];
      for (std::size_t t = 0; t < acc[1].size(); ++t) acc[1][t] += s.dV.flat()[t];
    }
    const double inv = 1.0 / (double)ds.n();  // reciprocal, as the batch loop scales
    for (auto& blk : acc)
      for (double& v : blk) v *= inv;
    ParamView pv;
    pv.blocks = {ref.W.flat(), ref.V.flat()};
    SgdState st;
    st.lr = spec.learning_rate;
    sgd_step(pv, acc, spec, st);
  }

  ConceptPredictor got = model.g;
  {
    std::vector<std::size_t> batch(ds.n());
    std::iota(batch.begin(), batch.end(), 0);
    SgdState st;
    st.lr = spec.learning_rate;
    jsam_step(got, ds, batch, {}, spec, st);
  }
  CHECK(got.W == ref.W);
  CHECK(got.V == ref.V);
}

TEST_CASE("train config validation gates jsam and lambda") {
  TrainConfig cfg;
  CHECK_NOTHROW(validate_train_config(cfg));

  cfg = {};
  cfg.target_opt.kind = OptKind::jsam;
  cfg.target_opt.rho = 0.1;
  CHECK_THROWS_AS(validate_train_config(cfg), UnsupportedError);

  cfg = {};
  cfg.strategy = Strategy::joint;
  cfg.concept_opt.kind = OptKind::jsam;
  cfg.concept_opt.rho = 0.1;
  CHECK_THROWS_AS(validate_train_config(cfg), UnsupportedError);

  cfg = {};
  cfg.head_bias = true;
  cfg.concept_opt.kind = OptKind::jsam;
  cfg.concept_opt.rho = 0.1;
  CHECK_THROWS_AS(validate_train_config(cfg), UnsupportedError);

  cfg = {};
  cfg.lambda = -1.0;
  CHECK_THROWS_AS(validate_train_config(cfg), ValidationError);
}

TEST_CASE("independent training solves the separable benchmark") {
  SyntheticSpec sspec;
  sspec.n = 240;
  sspec.d = 10;
  sspec.k = 8;
  sspec.num_classes = 4;
  sspec.prototype_min_hamming = 2;
  sspec.input_noise = 0.0;
  sspec.seed = 7;
  const auto ds = generate_synthetic(sspec);

  TrainConfig cfg;
  cfg.strategy = Strategy::independent;
  cfg.seed = 3;
  cfg.concept_opt = plain_sgd(0.2);
  cfg.concept_opt.momentum = 0.9;
  cfg.concept_opt.epochs = 120;
  cfg.concept_opt.batch_size = 32;
  cfg.target_opt = plain_sgd(0.5);
  cfg.target_opt.momentum = 0.9;
  cfg.target_opt.epochs = 200;
  cfg.target_opt.batch_size = 64;

  const auto res = train(ds, nullptr, cfg);
  CHECK(last_metric(res.history, "concept", "concept_acc") >= 0.99);
  CHECK(task_accuracy_on_true_concepts(res.model.f, ds) == 1.0);
  CHECK(last_metric(res.history, "target", "task_acc") == 1.0);
}

TEST_CASE("training is deterministic and seed-sensitive") {
  SyntheticSpec sspec;
  sspec.n = 60;
  sspec.d = 6;
  sspec.k = 5;
  sspec.num_classes = 3;
  sspec.prototype_min_hamming = 1;
  sspec.seed = 21;
  const auto ds = generate_synthetic(sspec);
  const auto split = stratified_split(ds, {0.7, 0.15, 0.15}, 1);

  TrainConfig cfg;
  cfg.strategy = Strategy::sequential;
  cfg.seed = 12;
  cfg.concept_opt = plain_sgd(0.1);
  cfg.concept_opt.epochs = 5;
  cfg.concept_opt.batch_size = 16;
  cfg.target_opt = plain_sgd(0.1);
  cfg.target_opt.epochs = 4;
  cfg.target_opt.batch_size = 16;

  const auto a = train(split.train, &split.val, cfg);
  const auto b = train(split.train, &split.val, cfg);
  CHECK(a.model.g.W == b.model.g.W);
  CHECK(a.model.g.V == b.model.g.V);
  CHECK(a.model.f.U == b.model.f.U);
  CHECK(history_csv_string(a.history) == history_csv_string(b.history));

  cfg.seed = 13;
  const auto c = train(split.train, &split.val, cfg);
  CHECK(a.model.g.W != c.model.g.W);
}

TEST_CASE("training with lr=0 returns the initialization") {
  SyntheticSpec sspec;
  sspec.n = 30;
  sspec.d = 5;
  sspec.k = 4;
  sspec.num_classes = 2;
  sspec.prototype_min_hamming = 1;
  sspec.seed = 2;
  const auto ds = generate_synthetic(sspec);

  TrainConfig cfg;
  cfg.strategy = Strategy::independent;
  cfg.seed = 77;
  cfg.concept_opt = plain_sgd(0.0);
  cfg.concept_opt.epochs = 3;
  cfg.target_opt = plain_sgd(0.0);
  cfg.target_opt.epochs = 3;

  const auto res = train(ds, nullptr, cfg);
  const auto fresh = init_model(5, 4, 2, 5, Strategy::independent, false, 77);
  CHECK(res.model.g.W == fresh.g.W);
  CHECK(res.model.g.V == fresh.g.V);
  CHECK(res.model.f.U == fresh.f.U);
  CHECK(res.model.f.bias == fresh.f.bias);
}

TEST_CASE("divergent training aborts with a diagnostic") {
  SyntheticSpec sspec;
  sspec.n = 40;
  sspec.d = 6;
  sspec.k = 4;
  sspec.num_classes = 2;
  sspec.prototype_min_hamming = 1;
  sspec.seed = 4;
  const auto ds = generate_synthetic(sspec);

  TrainConfig cfg;
  cfg.strategy = Strategy::independent;
  cfg.concept_opt = plain_sgd(1e18);
  cfg.concept_opt.momentum = 0.9;
  cfg.concept_opt.epochs = 10;
  cfg.concept_opt.batch_size = 8;
  cfg.target_opt = plain_sgd(0.1);
  cfg.target_opt.epochs = 1;

  try {
    (void)train(ds, nullptr, cfg);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("epoch") != std::string::npos);
  }
}

TEST_CASE("plateau decay fires after `patience` stalled epochs") {
  const auto ds = constant_loss_dataset(8);

  TrainConfig cfg;
  cfg.strategy = Strategy::independent;
  cfg.seed = 5;
  cfg.concept_opt = plain_sgd(0.5);
  cfg.concept_opt.epochs = 7;
  cfg.concept_opt.batch_size = 4;
  cfg.concept_opt.plateau = PlateauSpec{0.1, 2};
  cfg.target_opt = plain_sgd(0.1);
  cfg.target_opt.epochs = 1;

  const auto res = train(ds, nullptr, cfg);
  const auto& epochs = res.history.phases.at(0).epochs;
  REQUIRE(epochs.size() == 7);
  const std::vector<double> want{0.5, 0.5, 0.5, 0.05, 0.05, 0.005, 0.005};
  for (std::size_t i = 0; i < want.size(); ++i)
    CHECK(epochs[i].lr == doctest::Approx(want[i]).epsilon(1e-12));
}

TEST_CASE("history records every phase and split") {
  SyntheticSpec sspec;
  sspec.n = 60;
  sspec.d = 6;
  sspec.k = 5;
  sspec.num_classes = 3;
  sspec.prototype_min_hamming = 1;
  sspec.seed = 31;
  const auto ds = generate_synthetic(sspec);
  const auto split = stratified_split(ds, {0.7, 0.15, 0.15}, 2);

  TrainConfig cfg;
  cfg.strategy = Strategy::independent;
  cfg.concept_opt = plain_sgd(0.1);
  cfg.concept_opt.epochs = 3;
  cfg.target_opt = plain_sgd(0.1);
  cfg.target_opt.epochs = 2;

  const auto res = train(split.train, &split.val, cfg);
  REQUIRE(res.history.phases.size() == 2);
  CHECK(res.history.phases[0].phase == "concept");
  CHECK(res.history.phases[0].epochs.size() == 3);
  CHECK(res.history.phases[1].phase == "target");
  CHECK(res.history.phases[1].epochs.size() == 2);
  CHECK(res.history.phases[0].epochs[0].train.count("loss") == 1);
  CHECK(res.history.phases[0].epochs[0].train.count("concept_acc") == 1);
  CHECK(res.history.phases[0].epochs[0].val.count("loss") == 1);
  CHECK(res.history.phases[1].epochs[0].train.count("task_acc") == 1);

  const std::string csv = history_csv_string(res.history);
  CHECK(csv.rfind("epoch,split,metric,value\n", 0) == 0);
  CHECK(csv.find("0,train,concept.loss,") != std::string::npos);
  CHECK(csv.find("0,val,concept.loss,") != std::string::npos);
  CHECK(csv.find("0,train,concept.lr,") != std::string::npos);
  CHECK(csv.find("1,train,target.task_acc,") != std::string::npos);
}

TEST_CASE("every strategy and optimizer kind lowers its training loss") {
  SyntheticSpec sspec;
  sspec.n = 120;
  sspec.d = 8;
  sspec.k = 6;
  sspec.num_classes = 3;
  sspec.prototype_min_hamming = 2;
  sspec.input_noise = 0.2;
  sspec.seed = 17;
  const auto ds = generate_synthetic(sspec);

  const auto first_last = [&](const TrainHistory& h, const std::string& phase) {
    for (const auto& ph : h.phases)
      if (ph.phase == phase)
        return std::pair(ph.epochs.front().train.at("loss"), ph.epochs.back().train.at("loss"));
    FAIL("phase not found: ", phase);
    return std::pair(0.0, 0.0);
  };

  TrainConfig cfg;
  cfg.concept_opt = plain_sgd(0.1);
  cfg.concept_opt.epochs = 12;
  cfg.concept_opt.batch_size = 16;
  cfg.target_opt = cfg.concept_opt;

  SUBCASE("independent sgd") {
    cfg.strategy = Strategy::independent;
    const auto res = train(ds, nullptr, cfg);
    auto [c0, c1] = first_last(res.history, "concept");
    CHECK(c1 < c0);
    auto [t0, t1] = first_last(res.history, "target");
    CHECK(t1 < t0);
  }
  SUBCASE("sequential sam") {
    cfg.strategy = Strategy::sequential;
    cfg.concept_opt.kind = OptKind::sam;
    cfg.concept_opt.rho = 0.05;
    const auto res = train(ds, nullptr, cfg);
    auto [c0, c1] = first_last(res.history, "concept");
    CHECK(c1 < c0);
  }
  SUBCASE("concept jsam") {
    cfg.strategy = Strategy::independent;
    cfg.concept_opt.kind = OptKind::jsam;
    cfg.concept_opt.rho = 0.05;
    const auto res = train(ds, nullptr, cfg);
    auto [c0, c1] = first_last(res.history, "concept");
    CHECK(c1 < c0);
  }
  SUBCASE("joint") {
    cfg.strategy = Strategy::joint;
    cfg.lambda = 0.5;
    const auto res = train(ds, nullptr, cfg);
    auto [j0, j1] = first_last(res.history, "joint");
    CHECK(j1 < j0);
    CHECK(res.history.phases.size() == 1);
    const auto& em = res.history.phases[0].epochs.back();
    CHECK(em.train.count("task_loss") == 1);
    CHECK(em.train.count("concept_loss") == 1);
    CHECK(em.train.at("loss") ==
          doctest::Approx(em.train.at("task_loss") + 0.5 * em.train.at("concept_loss"))
              .epsilon(1e-12));
  }
  SUBCASE("weighted concept loss with head bias") {
    cfg.strategy = Strategy::independent;
    cfg.weighted_concept_loss = true;
    cfg.head_bias = true;
    const auto res = train(ds, nullptr, cfg);
    auto [c0, c1] = first_last(res.history, "concept");
    CHECK(c1 < c0);
  }
}

TEST_CASE("partial final batches are handled") {
  SyntheticSpec sspec;
  sspec.n = 5;
  sspec.d = 4;
  sspec.k = 3;
  sspec.num_classes = 2;
  sspec.prototype_min_hamming = 1;
  sspec.seed = 8;
  const auto ds = generate_synthetic(sspec);

  TrainConfig cfg;
  cfg.strategy = Strategy::independent;
  cfg.concept_opt = plain_sgd(0.05);
  cfg.concept_opt.epochs = 2;
  cfg.concept_opt.batch_size = 2;  // chunks of 2, 2, 1
  cfg.target_opt = cfg.concept_opt;
  CHECK_NOTHROW((void)train(ds, nullptr, cfg));
}
