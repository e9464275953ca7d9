#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "cbmlab/linalg.hpp"

namespace cbmlab {

// Inputs with binary concept annotations and an integer class target per row.
// The class count is carried by class_names, which always has one entry per
// class even when some class has no rows.
struct LabeledDataset {
  Matrix inputs;                       // n x d
  std::vector<std::uint8_t> concepts;  // n x k, row-major, entries 0/1
  std::vector<int> targets;            // n, entries in [0, num_classes)
  std::vector<std::string> concept_names;
  std::vector<std::string> class_names;
  std::vector<int> group_map;  // empty, or size k: concept index -> group id

  std::size_t n() const { return targets.size(); }
  std::size_t d() const { return inputs.cols(); }
  std::size_t k() const { return concept_names.size(); }
  std::size_t num_classes() const { return class_names.size(); }

  std::uint8_t bit(std::size_t i, std::size_t j) const { return concepts[i * k() + j]; }
  std::span<const std::uint8_t> concept_row(std::size_t i) const {
    return {concepts.data() + i * k(), k()};
  }

  void validate() const;  // throws ValidationError on any broken invariant
};

struct SyntheticSpec {
  std::size_t n = 2000;
  std::size_t d = 32;
  std::size_t k = 16;
  std::size_t num_classes = 8;
  int prototype_min_hamming = 4;
  double concept_flip_rate = 0.0;  // per-bit flip applied after prototype copy
  double input_noise = 0.5;        // stddev of additive input noise
  std::uint64_t seed = 0;
  int concept_groups = 0;  // >0 partitions concepts into that many contiguous groups
};

// Class prototypes are rejection-sampled binary codes with pairwise Hamming
// distance >= prototype_min_hamming; inputs are a fixed random linear mix of
// the concept bits plus Gaussian noise. Classes are assigned round-robin, so
// counts are balanced up to a remainder.
LabeledDataset generate_synthetic(const SyntheticSpec& spec);

enum class NoiseKind { symmetric, asymmetric, grouped };
enum class NoiseScope { concepts, targets, both };

std::string to_string(NoiseKind k);
NoiseKind noise_kind_from_string(const std::string& s);
std::string to_string(NoiseScope s);
NoiseScope noise_scope_from_string(const std::string& s);

struct NoiseSpec {
  NoiseKind kind = NoiseKind::symmetric;
  double rate = 0.0;
  NoiseScope apply_to = NoiseScope::concepts;
  std::uint64_t seed = 0;
};

struct NoiseResult {
  LabeledDataset data;
  // Masks mark entries that differ from the clean dataset; empty when the
  // corresponding part was not touched. XOR-ing concept_mask onto the noisy
  // concepts recovers the clean ones.
  std::vector<std::uint8_t> concept_mask;  // n x k
  std::vector<std::uint8_t> target_mask;   // n
};

// Semantics per kind/scope:
//   symmetric  + concepts: each bit flips independently with p = rate
//   symmetric  + targets:  with p = rate the label is redrawn uniformly from
//                          the other classes
//   asymmetric + concepts: with p = rate per (row, j), bit j and bit
//                          (j+1) mod k both toggle
//   asymmetric + targets:  with p = rate the label moves to (y+1) mod M
//   grouped    + concepts: with p = rate per (row, group), one uniformly
//                          chosen concept inside the group flips; requires a
//                          group_map and scope == concepts
// The input is not modified.
NoiseResult inject_noise(const LabeledDataset& ds, const NoiseSpec& spec);

struct SplitFractions {
  double train = 0.6;
  double val = 0.2;
  double test = 0.2;
};

struct SplitResult {
  LabeledDataset train;
  LabeledDataset val;
  LabeledDataset test;
};

// Seeded stratified split. Every class is permuted and allocated across the
// splits so each split's class mix tracks the fractions; a running-deficit
// rule spreads remainders so the global sizes match the fractions too.
SplitResult stratified_split(const LabeledDataset& ds, const SplitFractions& fractions,
                             std::uint64_t seed);

// CSV layout: header x0..x{d-1},c0..c{k-1},y; inputs printed with 17
// significant digits so reloading is exact. Names and groups travel in a JSON
// sidecar next to the CSV.
void save_csv(const LabeledDataset& ds, const std::filesystem::path& csv_path);
LabeledDataset load_csv(const std::filesystem::path& csv_path);
std::filesystem::path sidecar_path(const std::filesystem::path& csv_path);

}  // namespace cbmlab
