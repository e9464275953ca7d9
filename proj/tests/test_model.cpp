#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>
#include <random>

#include "cbmlab/common.hpp"
#include "cbmlab/model.hpp"
#include "test_util.hpp"

using namespace cbmlab;

namespace {

// Central finite differences over every parameter reachable through `blocks`.
std::vector<double> fd_gradient(std::vector<std::span<double>> blocks,
                                const std::function<double()>& loss, double h = 1e-5) {
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

double rel_vec_error(const std::vector<double>& a, const std::vector<double>& b) {
  REQUIRE(a.size() == b.size());
  double diff = 0, ref = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    ref += a[i] * a[i];
  }
  return std::sqrt(diff) / std::max(std::sqrt(ref), 1e-12);
}

void append(std::vector<double>& out, std::span<const double> v) {
  out.insert(out.end(), v.begin(), v.end());
}

CbmModel random_model(std::mt19937_64& rng, std::size_t d, std::size_t m, std::size_t k,
                      std::size_t classes, bool head_bias) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  CbmModel model;
  model.g.W = Matrix(m, d);
  for (double& v : model.g.W.flat()) v = gauss(rng);
  model.g.V = Matrix(k, m);
  for (double& v : model.g.V.flat()) v = gauss(rng);
  if (head_bias) {
    model.g.head_bias.resize(k);
    for (double& v : model.g.head_bias) v = gauss(rng);
  }
  model.f.U = Matrix(classes, k);
  for (double& v : model.f.U.flat()) v = gauss(rng);
  model.f.bias.resize(classes);
  for (double& v : model.f.bias) v = gauss(rng);
  return model;
}

}  // namespace

TEST_CASE("scalar pieces: sigmoid, log-sigmoid, softmax") {
  CHECK(sigmoid(0.0) == 0.5);
  CHECK(sigmoid(6.0) == doctest::Approx(0.99752737684336523).epsilon(1e-14));
  CHECK(sigmoid(-6.0) == doctest::Approx(1.0 - 0.99752737684336523).epsilon(1e-14));
  CHECK(sigmoid(-800.0) == 0.0);  // clean underflow, not NaN
  CHECK(log_sigmoid(0.0) == doctest::Approx(-0.69314718055994531).epsilon(1e-14));
  CHECK(std::isfinite(log_sigmoid(-800.0)));
  CHECK(log_sigmoid(-800.0) == doctest::Approx(-800.0).epsilon(1e-12));

  const std::vector<double> s{1.0, 0.0};
  const auto p = softmax(s);
  CHECK(p[0] == doctest::Approx(0.73105857863000488).epsilon(1e-14));
  CHECK(p[1] == doctest::Approx(1.0 - 0.73105857863000488).epsilon(1e-14));

  // Shift invariance, including extreme offsets.
  const std::vector<double> shifted{1001.0, 1000.0};
  const auto q = softmax(shifted);
  CHECK(q[0] == doctest::Approx(p[0]).epsilon(1e-14));
  double sum = 0;
  for (double v : q) sum += v;
  CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("losses: frozen values and stability") {
  const std::uint8_t c1[] = {1}, c0[] = {0};
  const std::vector<double> zero{0.0};
  CHECK(concept_loss(zero, c1, {}) == doctest::Approx(0.69314718055994531).epsilon(1e-14));
  CHECK(concept_loss(zero, c0, {}) == doctest::Approx(0.69314718055994531).epsilon(1e-14));

  // Positive-term weighting scales only the c=1 branch.
  const std::vector<double> w3{3.0};
  CHECK(concept_loss(zero, c1, w3) == doctest::Approx(3.0 * 0.69314718055994531).epsilon(1e-14));
  CHECK(concept_loss(zero, c0, w3) == doctest::Approx(0.69314718055994531).epsilon(1e-14));

  const std::vector<double> big{800.0};
  CHECK(std::isfinite(concept_loss(big, c0, {})));
  CHECK(concept_loss(big, c0, {}) == doctest::Approx(800.0).epsilon(1e-12));
  CHECK(concept_loss(big, c1, {}) == doctest::Approx(0.0).epsilon(1e-12));

  const std::vector<double> uniform{0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0};
  CHECK(task_loss(uniform, 3) == doctest::Approx(2.0794415416798359).epsilon(1e-14));
  const std::vector<double> pair{1.0, 0.0};
  CHECK(task_loss(pair, 0) == doctest::Approx(0.31326168751822283).epsilon(1e-14));
  CHECK(task_loss(pair, 1) == doctest::Approx(1.31326168751822283).epsilon(1e-13));
  const std::vector<double> huge{1000.0, 0.0};
  CHECK(std::isfinite(task_loss(huge, 1)));
  CHECK(task_loss(huge, 1) == doctest::Approx(1000.0).epsilon(1e-12));
}

TEST_CASE("residuals match the closed form") {
  const std::vector<double> probs{0.8, 0.3};
  const std::uint8_t c[] = {1, 0};
  const auto r = concept_residuals(probs, c, {});
  CHECK(r[0] == doctest::Approx(-(1.0 - 0.8)).epsilon(1e-14));  // sigma - c with w = 1
  CHECK(r[1] == doctest::Approx(0.3).epsilon(1e-14));

  const std::vector<double> w{2.5, 4.0};
  const auto rw = concept_residuals(probs, c, w);
  CHECK(rw[0] == doctest::Approx(-2.5 * 0.2).epsilon(1e-14));
  CHECK(rw[1] == doctest::Approx(0.3).epsilon(1e-14));  // weight only touches positives
}

TEST_CASE("concept gradients agree with finite differences") {
  std::mt19937_64 rng(101);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> dim(2, 5);
  std::uniform_real_distribution<double> wdist(0.5, 2.0);

  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t d = dim(rng), m = dim(rng), k = dim(rng);
    auto model = random_model(rng, d, m, k, 2, trial % 2 == 1);
    auto& g = model.g;
    std::vector<double> x(d);
    for (double& v : x) v = gauss(rng);
    std::vector<std::uint8_t> c(k);
    for (auto& b : c) b = rng() & 1;
    std::vector<double> weights;
    if (trial % 3 == 0) {
      weights.resize(k);
      for (double& w : weights) w = wdist(rng);
    }

    const auto an = concept_grads(g, x, c.data(), weights);
    CHECK(an.loss == doctest::Approx(concept_loss(g.forward(x).logits, c.data(), weights))
                         .epsilon(1e-14));

    std::vector<std::span<double>> blocks{g.W.flat(), g.V.flat()};
    if (g.has_head_bias()) blocks.push_back(g.head_bias);
    const auto fd = fd_gradient(blocks, [&] {
      return concept_loss(g.forward(x).logits, c.data(), weights);
    });
    std::vector<double> flat;
    append(flat, an.dW.flat());
    append(flat, an.dV.flat());
    if (g.has_head_bias()) append(flat, an.dbias);
    CHECK(rel_vec_error(flat, fd) < 1e-7);
  }
}

TEST_CASE("target gradients: finite differences plus exact structure") {
  std::mt19937_64 rng(202);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> dim(2, 5);

  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t k = dim(rng), classes = dim(rng);
    auto model = random_model(rng, 2, 2, k, classes, false);
    auto& f = model.f;
    std::vector<double> c(k);
    for (double& v : c) v = gauss(rng);
    const int y = (int)(rng() % classes);

    const auto an = target_grads(f, c, y);
    std::vector<std::span<double>> blocks{f.U.flat(), std::span<double>(f.bias)};
    const auto fd = fd_gradient(blocks, [&] { return task_loss(f.scores(c), y); });
    std::vector<double> flat;
    append(flat, an.dU.flat());
    append(flat, an.dbias);
    CHECK(rel_vec_error(flat, fd) < 1e-7);

    // Softmax residuals sum to zero, so the bias gradient does too.
    double bias_sum = 0;
    for (double v : an.dbias) bias_sum += v;
    CHECK(std::abs(bias_sum) < 1e-12);
  }

  // Zero scores, two classes: residual is (p - onehot) = (-.5, .5).
  TargetPredictor f;
  f.U = Matrix(2, 2, 0.0);
  f.bias = {0.0, 0.0};
  const std::vector<double> c{1.0, 0.0};
  const auto an = target_grads(f, c, 0);
  CHECK(an.dbias[0] == doctest::Approx(-0.5).epsilon(1e-14));
  CHECK(an.dbias[1] == doctest::Approx(0.5).epsilon(1e-14));
  CHECK(an.dU(0, 0) == doctest::Approx(-0.5).epsilon(1e-14));
  CHECK(an.dU(1, 0) == doctest::Approx(0.5).epsilon(1e-14));
  CHECK(an.dU(0, 1) == 0.0);
}

TEST_CASE("joint gradients: finite differences and lambda structure") {
  std::mt19937_64 rng(303);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> dim(2, 4);
  std::uniform_real_distribution<double> ldist(0.2, 2.0);

  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t d = dim(rng), m = dim(rng), k = dim(rng), classes = dim(rng);
    auto model = random_model(rng, d, m, k, classes, trial % 2 == 0);
    std::vector<double> x(d);
    for (double& v : x) v = gauss(rng);
    std::vector<std::uint8_t> c(k);
    for (auto& b : c) b = rng() & 1;
    const int y = (int)(rng() % classes);
    const double lambda = ldist(rng);

    auto loss = [&] {
      const auto fwd = model.g.forward(x);
      return task_loss(model.f.scores(fwd.probs), y) +
             lambda * concept_loss(fwd.logits, c.data(), {});
    };
    const auto an = joint_grads(model, x, c.data(), y, lambda, {});
    CHECK(an.loss == doctest::Approx(loss()).epsilon(1e-14));

    std::vector<std::span<double>> blocks{model.g.W.flat(), model.g.V.flat()};
    if (model.g.has_head_bias()) blocks.push_back(model.g.head_bias);
    blocks.push_back(model.f.U.flat());
    blocks.push_back(model.f.bias);
    const auto fd = fd_gradient(blocks, loss);
    std::vector<double> flat;
    append(flat, an.concept_part.dW.flat());
    append(flat, an.concept_part.dV.flat());
    if (model.g.has_head_bias()) append(flat, an.concept_part.dbias);
    append(flat, an.target_part.dU.flat());
    append(flat, an.target_part.dbias);
    CHECK(rel_vec_error(flat, fd) < 1e-6);
  }

  // lambda = 0 leaves only the task pathway; the concept part must equal the
  // pure chain-rule pull with no BCE term.
  std::mt19937_64 rng2(404);
  auto model = random_model(rng2, 3, 3, 3, 3, false);
  std::vector<double> x{0.3, -1.2, 0.7};
  const std::uint8_t c[] = {1, 0, 1};
  const auto j0 = joint_grads(model, x, c, 1, 0.0, {});
  const auto j1 = joint_grads(model, x, c, 1, 1.0, {});
  const auto pure = concept_grads(model.g, x, c, {});
  for (std::size_t i = 0; i < j0.concept_part.dV.size(); ++i) {
    const double lhs = j1.concept_part.dV.flat()[i] - j0.concept_part.dV.flat()[i];
    CHECK(lhs == doctest::Approx(pure.dV.flat()[i]).epsilon(1e-9));
  }
  CHECK(j0.loss == doctest::Approx(j0.task_component).epsilon(1e-14));
}

TEST_CASE("init: fan-in scaling and determinism") {
  const auto a = init_model(64, 16, 8, 32, Strategy::independent, false, 7);
  const auto b = init_model(64, 16, 8, 32, Strategy::independent, false, 7);
  CHECK(a.g.W == b.g.W);
  CHECK(a.f.U == b.f.U);
  CHECK(!a.g.has_head_bias());
  for (double v : a.f.bias) CHECK(v == 0.0);

  // Sample variance of W entries should sit near 1/d.
  double ss = 0;
  for (double v : a.g.W.flat()) ss += v * v;
  const double var = ss / (double)a.g.W.size();
  CHECK(var == doctest::Approx(1.0 / 64.0).epsilon(0.15));

  const auto c = init_model(64, 16, 8, 32, Strategy::independent, false, 8);
  CHECK(c.g.W != a.g.W);
  CHECK_THROWS_AS(init_model(0, 16, 8, 32, Strategy::independent, false, 7), ValidationError);
}

TEST_CASE("checkpoint: save/load round-trips bit-exactly") {
  std::mt19937_64 rng(55);
  for (bool head_bias : {false, true}) {
    auto model = random_model(rng, 5, 4, 3, 6, head_bias);
    model.strategy = head_bias ? Strategy::joint : Strategy::sequential;
    TempDir tmp;
    const auto path = tmp.path / "model.json";
    save_model(model, path);
    const auto back = load_model(path);
    CHECK(back.g.W == model.g.W);
    CHECK(back.g.V == model.g.V);
    CHECK(back.g.head_bias == model.g.head_bias);
    CHECK(back.f.U == model.f.U);
    CHECK(back.f.bias == model.f.bias);
    CHECK(back.strategy == model.strategy);
  }
}

TEST_CASE("checkpoint: malformed files are parse errors") {
  TempDir tmp;
  const auto path = tmp.path / "model.json";
  write_file(path, "{not json");
  CHECK_THROWS_AS(load_model(path), ParseError);
  write_file(path, R"({"format":"cbmlab.model.v1","strategy":"independent","d":2,"m":2,"k":1,)"
                   R"("classes":2,"W":[1,2,3],"V":[1,2],"head_bias":null,"U":[0,0],"bias":[0,0]})");
  CHECK_THROWS_AS(load_model(path), ParseError);
  CHECK_THROWS_AS(load_model(tmp.path / "absent.json"), IoError);
}

TEST_CASE("class weights count positives per concept") {
  LabeledDataset ds;
  ds.inputs = Matrix(4, 1);
  ds.concept_names = {"a", "b", "c"};
  ds.class_names = {"u", "v"};
  ds.targets = {0, 1, 0, 1};
  // concept a: 3 pos; b: 1 pos; c: 0 pos
  ds.concepts = {1, 1, 0,
                 1, 0, 0,
                 1, 0, 0,
                 0, 0, 0};
  const auto w = positive_class_weights(ds);
  CHECK(w[0] == doctest::Approx(1.0 / 3.0).epsilon(1e-14));
  CHECK(w[1] == doctest::Approx(3.0).epsilon(1e-14));
  CHECK(w[2] == doctest::Approx(4.0).epsilon(1e-14));  // floor keeps it finite
}

TEST_CASE("eval helpers: ties, probabilities, accuracies") {
  TargetPredictor f;
  f.U = Matrix(3, 2, 0.0);
  f.bias = {0.0, 0.0, 0.0};
  const std::vector<double> c{0.4, 0.6};
  CHECK(predict_class(f, c) == 0);  // all-tied scores resolve to the lowest index

  f.U(0, 0) = 1.0;
  f.U(1, 1) = 1.0;
  CHECK(predict_class(f, std::vector<double>{1.0, 0.0}) == 0);
  CHECK(predict_class(f, std::vector<double>{0.0, 1.0}) == 1);

  LabeledDataset ds;
  ds.inputs = Matrix(2, 1);
  ds.inputs(0, 0) = 1.0;
  ds.inputs(1, 0) = -1.0;
  ds.concept_names = {"a", "b"};
  ds.class_names = {"u", "v", "w"};
  ds.concepts = {1, 0, 0, 1};
  ds.targets = {0, 1};

  CHECK(task_accuracy_on_true_concepts(f, ds) == 1.0);

  CbmModel model;
  model.g.W = Matrix(1, 1, 0.0);
  model.g.V = Matrix(2, 1, 0.0);
  model.f = f;
  // Zero concept net: probs all 0.5, scores tie, prediction is class 0.
  CHECK(task_accuracy(model, ds) == 0.5);
  CHECK(mean_concept_loss(model.g, ds, {}) ==
        doctest::Approx(2.0 * 0.69314718055994531).epsilon(1e-13));

  const auto probs = concept_prob_matrix(model.g, ds);
  CHECK(probs.rows() == 2);
  CHECK(probs(0, 0) == 0.5);
  CHECK(probs(1, 1) == 0.5);
}
