#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "cbmlab/dataset.hpp"
#include "cbmlab/linalg.hpp"

namespace cbmlab {

double sigmoid(double g);
double log_sigmoid(double g);  // stable log(sigmoid(g))
double log_sum_exp(std::span<const double> v);
std::vector<double> softmax(std::span<const double> scores);

struct ConceptForward {
  std::vector<double> z;       // m
  std::vector<double> logits;  // k
  std::vector<double> probs;   // k
};

// Two-stage linear concept predictor: z = W x, logit_j = <v_j, z> + bias_j.
struct ConceptPredictor {
  Matrix W;                       // m x d
  Matrix V;                       // k x m
  std::vector<double> head_bias;  // empty or size k

  std::size_t m() const { return W.rows(); }
  std::size_t d() const { return W.cols(); }
  std::size_t k() const { return V.rows(); }
  bool has_head_bias() const { return !head_bias.empty(); }

  ConceptForward forward(std::span<const double> x) const;
};

// Linear classifier over concept activations with a softmax readout.
struct TargetPredictor {
  Matrix U;                  // M x k
  std::vector<double> bias;  // M

  std::size_t num_classes() const { return U.rows(); }
  std::size_t k() const { return U.cols(); }

  std::vector<double> scores(std::span<const double> c) const;
  std::vector<double> probs(std::span<const double> c) const;
};

enum class Strategy { independent, sequential, joint };

std::string to_string(Strategy s);
Strategy strategy_from_string(const std::string& s);

struct CbmModel {
  ConceptPredictor g;
  TargetPredictor f;
  Strategy strategy = Strategy::independent;
};

// Weights drawn from N(0, 1/fan_in); biases start at zero.
CbmModel init_model(std::size_t d, std::size_t k, std::size_t num_classes, std::size_t m,
                    Strategy strategy, bool head_bias, std::uint64_t seed);

// Sum over concepts of binary cross-entropy on logits. pos_weights scale the
// positive term only; an empty span means all ones.
double concept_loss(std::span<const double> logits, const std::uint8_t* c,
                    std::span<const double> pos_weights);

// Cross-entropy of the softmax over raw scores against the class index.
double task_loss(std::span<const double> scores, int y);

// d(concept_loss) / d(logit_j).
std::vector<double> concept_residuals(std::span<const double> probs, const std::uint8_t* c,
                                      std::span<const double> pos_weights);

struct ConceptGrads {
  Matrix dW;                   // m x d
  Matrix dV;                   // k x m
  std::vector<double> dbias;   // empty when the predictor has no head bias
  double loss = 0.0;
};
ConceptGrads concept_grads(const ConceptPredictor& g, std::span<const double> x,
                           const std::uint8_t* c, std::span<const double> pos_weights);

struct TargetGrads {
  Matrix dU;                  // M x k
  std::vector<double> dbias;  // M
  double loss = 0.0;
};
TargetGrads target_grads(const TargetPredictor& f, std::span<const double> c, int y);

struct JointGrads {
  ConceptGrads concept_part;  // includes the lambda-scaled concept pull
  TargetGrads target_part;
  double loss = 0.0;  // task + lambda * concept
  double task_component = 0.0;
  double concept_component = 0.0;
};

// f consumes concept probabilities; the task gradient flows back through the
// concept sigmoids.
JointGrads joint_grads(const CbmModel& model, std::span<const double> x, const std::uint8_t* c,
                       int y, double lambda, std::span<const double> pos_weights);

// Per-concept positive-term weight #neg/#pos on the given split, both counts
// floored at one so the weights stay finite and strictly positive.
std::vector<double> positive_class_weights(const LabeledDataset& train);

// JSON checkpoint; doubles round-trip exactly.
void save_model(const CbmModel& model, const std::filesystem::path& path);
CbmModel load_model(const std::filesystem::path& path);

Matrix concept_prob_matrix(const ConceptPredictor& g, const LabeledDataset& ds);
int predict_class(const TargetPredictor& f, std::span<const double> c);  // ties -> lowest index
double task_accuracy(const CbmModel& model, const LabeledDataset& ds);
double task_accuracy_on_true_concepts(const TargetPredictor& f, const LabeledDataset& ds);
double mean_concept_loss(const ConceptPredictor& g, const LabeledDataset& ds,
                         std::span<const double> pos_weights);
double mean_task_loss(const CbmModel& model, const LabeledDataset& ds);

}  // namespace cbmlab
