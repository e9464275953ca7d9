#include "cbmlab/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <json.hpp>
#include <limits>
#include <map>
#include <random>
#include <sstream>

#include "cbmlab/common.hpp"

namespace cbmlab {

namespace {

using nlohmann::json;

std::string default_concept_name(std::size_t j) { return "concept_" + std::to_string(j); }
std::string default_class_name(std::size_t m) { return "class_" + std::to_string(m); }

std::size_t hamming(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b) {
  std::size_t dist = 0;
  for (std::size_t i = 0; i < a.size(); ++i) dist += a[i] != b[i];
  return dist;
}

LabeledDataset subset(const LabeledDataset& ds, const std::vector<std::size_t>& rows) {
  LabeledDataset out;
  out.inputs = Matrix(rows.size(), ds.d());
  out.concepts.resize(rows.size() * ds.k());
  out.targets.resize(rows.size());
  out.concept_names = ds.concept_names;
  out.class_names = ds.class_names;
  out.group_map = ds.group_map;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const std::size_t src = rows[r];
    std::copy_n(ds.inputs.row(src).data(), ds.d(), out.inputs.row(r).data());
    std::copy_n(ds.concepts.data() + src * ds.k(), ds.k(), out.concepts.data() + r * ds.k());
    out.targets[r] = ds.targets[src];
  }
  return out;
}

// group id -> ascending member concept indices
std::map<int, std::vector<int>> group_members(const std::vector<int>& group_map) {
  std::map<int, std::vector<int>> groups;
  for (std::size_t j = 0; j < group_map.size(); ++j) groups[group_map[j]].push_back((int)j);
  return groups;
}

}  // namespace

void LabeledDataset::validate() const {
  if (inputs.rows() != n())
    throw ValidationError("dataset: inputs have " + std::to_string(inputs.rows()) +
                          " rows but there are " + std::to_string(n()) + " targets");
  if (concepts.size() != n() * k())
    throw ValidationError("dataset: concept matrix has " + std::to_string(concepts.size()) +
                          " entries, expected " + std::to_string(n() * k()));
  if (class_names.empty()) throw ValidationError("dataset: class_names must not be empty");
  if (!group_map.empty() && group_map.size() != k())
    throw ValidationError("dataset: group_map must cover all " + std::to_string(k()) +
                          " concepts, got " + std::to_string(group_map.size()) + " entries");
  for (std::size_t i = 0; i < n(); ++i) {
    if (targets[i] < 0 || (std::size_t)targets[i] >= num_classes())
      throw ValidationError("dataset: target " + std::to_string(targets[i]) + " at row " +
                            std::to_string(i) + " outside [0, " + std::to_string(num_classes()) +
                            ")");
  }
  for (std::size_t i = 0; i < concepts.size(); ++i) {
    if (concepts[i] > 1)
      throw ValidationError("dataset: concept entry " + std::to_string((int)concepts[i]) +
                            " at flat index " + std::to_string(i) + " is not 0/1");
  }
  for (double v : inputs.flat()) {
    if (!std::isfinite(v)) throw ValidationError("dataset: non-finite input value");
  }
}

LabeledDataset generate_synthetic(const SyntheticSpec& spec) {
  if (spec.n == 0) throw ValidationError("synthetic: n must be positive");
  if (spec.d == 0) throw ValidationError("synthetic: d must be positive");
  if (spec.k == 0) throw ValidationError("synthetic: k must be positive");
  if (spec.num_classes == 0) throw ValidationError("synthetic: num_classes must be positive");
  if (spec.k < 63 && spec.num_classes > (1ull << spec.k))
    throw ValidationError("synthetic: num_classes exceeds 2^k distinct concept vectors");
  if (spec.prototype_min_hamming < 1)
    throw ValidationError("synthetic: prototype_min_hamming must be >= 1");
  if (spec.concept_flip_rate < 0.0 || spec.concept_flip_rate > 1.0)
    throw ValidationError("synthetic: concept_flip_rate must lie in [0, 1]");
  if (spec.input_noise < 0.0) throw ValidationError("synthetic: input_noise must be >= 0");
  if (spec.concept_groups < 0 || (std::size_t)spec.concept_groups > spec.k)
    throw ValidationError("synthetic: concept_groups must lie in [0, k]");

  const std::size_t k = spec.k, d = spec.d, n = spec.n, m_classes = spec.num_classes;

  auto proto_rng = make_rng(derive_seed(spec.seed, "prototypes"));
  std::bernoulli_distribution coin(0.5);
  std::vector<std::vector<std::uint8_t>> protos;
  protos.reserve(m_classes);
  constexpr std::size_t kMaxAttempts = 100000;
  std::size_t attempts = 0;
  while (protos.size() < m_classes) {
    if (++attempts > kMaxAttempts)
      throw ValidationError(
          "synthetic: could not place " + std::to_string(m_classes) +
          " prototypes with min Hamming distance " + std::to_string(spec.prototype_min_hamming) +
          " in " + std::to_string(kMaxAttempts) + " attempts; spec looks infeasible");
    std::vector<std::uint8_t> cand(k);
    for (auto& b : cand) b = coin(proto_rng) ? 1 : 0;
    bool ok = true;
    for (const auto& p : protos) {
      if (hamming(cand, p) < (std::size_t)spec.prototype_min_hamming) {
        ok = false;
        break;
      }
    }
    if (ok) protos.push_back(std::move(cand));
  }

  auto mix_rng = make_rng(derive_seed(spec.seed, "mixing"));
  std::normal_distribution<double> gauss(0.0, 1.0);
  Matrix mix(d, k);
  for (double& v : mix.flat()) v = gauss(mix_rng);

  LabeledDataset ds;
  ds.inputs = Matrix(n, d);
  ds.concepts.resize(n * k);
  ds.targets.resize(n);
  ds.concept_names.resize(k);
  for (std::size_t j = 0; j < k; ++j) ds.concept_names[j] = default_concept_name(j);
  ds.class_names.resize(m_classes);
  for (std::size_t m = 0; m < m_classes; ++m) ds.class_names[m] = default_class_name(m);
  if (spec.concept_groups > 0) {
    ds.group_map.resize(k);
    for (std::size_t j = 0; j < k; ++j)
      ds.group_map[j] = (int)((j * (std::size_t)spec.concept_groups) / k);
  }

  auto flip_rng = make_rng(derive_seed(spec.seed, "concept-flips"));
  auto noise_rng = make_rng(derive_seed(spec.seed, "input-noise"));
  std::bernoulli_distribution flip(spec.concept_flip_rate);
  std::vector<double> cvec(k);
  for (std::size_t i = 0; i < n; ++i) {
    const int y = (int)(i % m_classes);
    ds.targets[i] = y;
    std::uint8_t* crow = ds.concepts.data() + i * k;
    for (std::size_t j = 0; j < k; ++j) {
      std::uint8_t b = protos[y][j];
      if (flip(flip_rng)) b ^= 1;
      crow[j] = b;
      cvec[j] = (double)b;
    }
    auto xrow = ds.inputs.row(i);
    matvec(mix, cvec, xrow);
    for (std::size_t c = 0; c < d; ++c) xrow[c] += spec.input_noise * gauss(noise_rng);
  }
  return ds;
}

std::string to_string(NoiseKind k) {
  switch (k) {
    case NoiseKind::symmetric: return "symmetric";
    case NoiseKind::asymmetric: return "asymmetric";
    case NoiseKind::grouped: return "grouped";
  }
  return "symmetric";
}

NoiseKind noise_kind_from_string(const std::string& s) {
  if (s == "symmetric") return NoiseKind::symmetric;
  if (s == "asymmetric") return NoiseKind::asymmetric;
  if (s == "grouped") return NoiseKind::grouped;
  throw ValidationError("unknown noise kind \"" + s + "\"");
}

std::string to_string(NoiseScope s) {
  switch (s) {
    case NoiseScope::concepts: return "concepts";
    case NoiseScope::targets: return "targets";
    case NoiseScope::both: return "both";
  }
  return "concepts";
}

NoiseScope noise_scope_from_string(const std::string& s) {
  if (s == "concepts") return NoiseScope::concepts;
  if (s == "targets") return NoiseScope::targets;
  if (s == "both") return NoiseScope::both;
  throw ValidationError("unknown noise scope \"" + s + "\"");
}

NoiseResult inject_noise(const LabeledDataset& ds, const NoiseSpec& spec) {
  ds.validate();
  if (spec.rate < 0.0 || spec.rate > 1.0)
    throw ValidationError("noise: rate must lie in [0, 1]");
  const bool touch_concepts =
      spec.apply_to == NoiseScope::concepts || spec.apply_to == NoiseScope::both;
  const bool touch_targets =
      spec.apply_to == NoiseScope::targets || spec.apply_to == NoiseScope::both;
  if (spec.kind == NoiseKind::grouped) {
    if (spec.apply_to != NoiseScope::concepts)
      throw ValidationError("noise: grouped corruption is defined for concepts only");
    if (ds.group_map.empty())
      throw ValidationError("noise: grouped corruption requires a dataset group_map");
  }
  if (touch_targets && ds.num_classes() < 2)
    throw ValidationError("noise: target corruption needs at least two classes");

  const std::size_t n = ds.n(), k = ds.k();
  const int m_classes = (int)ds.num_classes();
  NoiseResult res;
  res.data = ds;

  if (touch_concepts) {
    auto rng = make_rng(derive_seed(spec.seed, "concepts"));
    std::bernoulli_distribution hit(spec.rate);
    auto& bits = res.data.concepts;
    switch (spec.kind) {
      case NoiseKind::symmetric:
        for (std::size_t i = 0; i < n * k; ++i)
          if (hit(rng)) bits[i] ^= 1;
        break;
      case NoiseKind::asymmetric:
        // Each triggered position also drags its right neighbour (cyclic).
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < k; ++j)
            if (hit(rng)) {
              bits[i * k + j] ^= 1;
              bits[i * k + (j + 1) % k] ^= 1;
            }
        break;
      case NoiseKind::grouped: {
        const auto groups = group_members(ds.group_map);
        for (std::size_t i = 0; i < n; ++i)
          for (const auto& [gid, members] : groups) {
            (void)gid;
            if (!hit(rng)) continue;
            std::uniform_int_distribution<std::size_t> pick(0, members.size() - 1);
            bits[i * k + (std::size_t)members[pick(rng)]] ^= 1;
          }
        break;
      }
    }
    res.concept_mask.resize(n * k);
    for (std::size_t i = 0; i < n * k; ++i)
      res.concept_mask[i] = (std::uint8_t)(bits[i] != ds.concepts[i]);
  }

  if (touch_targets) {
    auto rng = make_rng(derive_seed(spec.seed, "targets"));
    std::bernoulli_distribution hit(spec.rate);
    res.target_mask.assign(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
      if (!hit(rng)) continue;
      int& y = res.data.targets[i];
      if (spec.kind == NoiseKind::symmetric) {
        std::uniform_int_distribution<int> other(0, m_classes - 2);
        int pick = other(rng);
        y = pick >= y ? pick + 1 : pick;
      } else {
        y = (y + 1) % m_classes;
      }
      res.target_mask[i] = (std::uint8_t)(y != ds.targets[i]);
    }
  }
  return res;
}

SplitResult stratified_split(const LabeledDataset& ds, const SplitFractions& fractions,
                             std::uint64_t seed) {
  ds.validate();
  const double fr[3] = {fractions.train, fractions.val, fractions.test};
  double sum = 0.0;
  for (double f : fr) {
    if (f < 0.0) throw ValidationError("split: fractions must be >= 0");
    sum += f;
  }
  if (std::abs(sum - 1.0) > 1e-9)
    throw ValidationError("split: fractions must sum to 1, got " + format_g17(sum));

  int positive_splits = 0;
  for (double f : fr) positive_splits += f > 0.0;

  std::vector<std::vector<std::size_t>> by_class(ds.num_classes());
  for (std::size_t i = 0; i < ds.n(); ++i) by_class[(std::size_t)ds.targets[i]].push_back(i);

  auto rng = make_rng(derive_seed(seed, "split"));
  std::vector<std::size_t> assigned[3];

  // Remainders are handed to whichever split is furthest behind its running
  // target, so the global sizes track n * fraction even when every class
  // carries the same fractional part.
  double target[3] = {0, 0, 0};
  double allocated[3] = {0, 0, 0};
  for (std::size_t cls = 0; cls < by_class.size(); ++cls) {
    auto& rows = by_class[cls];
    if (rows.empty()) continue;
    if (rows.size() < (std::size_t)positive_splits)
      throw ValidationError("split: class " + std::to_string(cls) + " has " +
                            std::to_string(rows.size()) + " rows, fewer than the " +
                            std::to_string(positive_splits) + " requested splits");
    std::shuffle(rows.begin(), rows.end(), rng);

    std::size_t counts[3];
    std::size_t used = 0;
    for (int s = 0; s < 3; ++s) {
      counts[s] = (std::size_t)std::floor((double)rows.size() * fr[s]);
      used += counts[s];
      target[s] += (double)rows.size() * fr[s];
    }
    for (std::size_t left = rows.size() - used; left > 0; --left) {
      int best = -1;
      double best_deficit = -std::numeric_limits<double>::infinity();
      for (int s = 0; s < 3; ++s) {
        if (fr[s] <= 0.0) continue;
        const double deficit = target[s] - (allocated[s] + (double)counts[s]);
        if (deficit > best_deficit) {
          best_deficit = deficit;
          best = s;
        }
      }
      counts[best] += 1;
    }
    std::size_t offset = 0;
    for (int s = 0; s < 3; ++s) {
      allocated[s] += (double)counts[s];
      for (std::size_t r = 0; r < counts[s]; ++r) assigned[s].push_back(rows[offset + r]);
      offset += counts[s];
    }
  }

  SplitResult out;
  out.train = subset(ds, assigned[0]);
  out.val = subset(ds, assigned[1]);
  out.test = subset(ds, assigned[2]);
  return out;
}

std::filesystem::path sidecar_path(const std::filesystem::path& csv_path) {
  std::filesystem::path p = csv_path;
  if (p.extension() == ".csv") p.replace_extension();
  p += ".meta.json";
  return p;
}

void save_csv(const LabeledDataset& ds, const std::filesystem::path& csv_path) {
  ds.validate();
  std::ofstream out(csv_path);
  if (!out) throw IoError("cannot open " + csv_path.string() + " for writing");

  for (std::size_t c = 0; c < ds.d(); ++c) out << "x" << c << ",";
  for (std::size_t j = 0; j < ds.k(); ++j) out << "c" << j << ",";
  out << "y\n";
  for (std::size_t i = 0; i < ds.n(); ++i) {
    auto xrow = ds.inputs.row(i);
    for (std::size_t c = 0; c < ds.d(); ++c) out << format_g17(xrow[c]) << ",";
    for (std::size_t j = 0; j < ds.k(); ++j) out << (int)ds.bit(i, j) << ",";
    out << ds.targets[i] << "\n";
  }
  out.flush();
  if (!out) throw IoError("failed writing " + csv_path.string());

  json meta;
  meta["concept_names"] = ds.concept_names;
  meta["class_names"] = ds.class_names;
  if (!ds.group_map.empty()) {
    json groups = json::array();
    for (const auto& [gid, members] : group_members(ds.group_map)) {
      (void)gid;
      groups.push_back(members);
    }
    meta["groups"] = groups;
  }
  const auto meta_path = sidecar_path(csv_path);
  std::ofstream mout(meta_path);
  if (!mout) throw IoError("cannot open " + meta_path.string() + " for writing");
  mout << meta.dump(2) << "\n";
  mout.flush();
  if (!mout) throw IoError("failed writing " + meta_path.string());
}

namespace {

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      fields.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  fields.push_back(cur);
  return fields;
}

[[noreturn]] void parse_fail(const std::filesystem::path& path, std::size_t line,
                             const std::string& what) {
  throw ParseError(path.string() + ":" + std::to_string(line) + ": " + what);
}

double parse_double(const std::string& tok, const std::filesystem::path& path, std::size_t line,
                    const std::string& column) {
  const char* begin = tok.c_str();
  char* end = nullptr;
  errno = 0;
  const double v = std::strtod(begin, &end);
  if (end != begin + tok.size() || tok.empty())
    parse_fail(path, line, "column " + column + ": expected a number, got \"" + tok + "\"");
  if (!std::isfinite(v))
    parse_fail(path, line, "column " + column + ": non-finite value \"" + tok + "\"");
  return v;
}

}  // namespace

LabeledDataset load_csv(const std::filesystem::path& csv_path) {
  std::ifstream in(csv_path);
  if (!in) throw IoError("cannot open " + csv_path.string());

  std::string line;
  if (!std::getline(in, line)) throw ParseError(csv_path.string() + ":1: empty file");
  const auto header = split_fields(line);
  std::size_t d = 0, k = 0;
  {
    std::size_t pos = 0;
    while (pos < header.size() && header[pos] == "x" + std::to_string(pos)) ++pos;
    d = pos;
    while (pos < header.size() && header[pos] == "c" + std::to_string(pos - d)) ++pos;
    k = pos - d;
    if (d == 0 || k == 0 || pos + 1 != header.size() || header[pos] != "y")
      parse_fail(csv_path, 1, "header must read x0..x{d-1},c0..c{k-1},y");
  }

  LabeledDataset ds;
  std::vector<double> inputs;
  std::size_t line_no = 1;
  int max_target = -1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto fields = split_fields(line);
    if (fields.size() != header.size())
      parse_fail(csv_path, line_no,
                 "expected " + std::to_string(header.size()) + " fields, got " +
                     std::to_string(fields.size()));
    for (std::size_t c = 0; c < d; ++c)
      inputs.push_back(parse_double(fields[c], csv_path, line_no, header[c]));
    for (std::size_t j = 0; j < k; ++j) {
      const auto& tok = fields[d + j];
      if (tok != "0" && tok != "1")
        parse_fail(csv_path, line_no,
                   "column " + header[d + j] + ": expected 0 or 1, got \"" + tok + "\"");
      ds.concepts.push_back(tok == "1" ? 1 : 0);
    }
    const auto& ytok = fields[d + k];
    char* end = nullptr;
    const long y = std::strtol(ytok.c_str(), &end, 10);
    if (end != ytok.c_str() + ytok.size() || ytok.empty() || y < 0)
      parse_fail(csv_path, line_no,
                 "column y: expected a non-negative integer, got \"" + ytok + "\"");
    ds.targets.push_back((int)y);
    max_target = std::max(max_target, (int)y);
  }
  if (ds.targets.empty()) parse_fail(csv_path, line_no, "no data rows");

  const std::size_t n = ds.targets.size();
  ds.inputs = Matrix(n, d);
  std::copy(inputs.begin(), inputs.end(), ds.inputs.flat().begin());

  ds.concept_names.resize(k);
  for (std::size_t j = 0; j < k; ++j) ds.concept_names[j] = default_concept_name(j);
  const auto meta_path = sidecar_path(csv_path);
  std::size_t num_classes = (std::size_t)(max_target + 1);
  if (std::filesystem::exists(meta_path)) {
    std::ifstream min(meta_path);
    if (!min) throw IoError("cannot open " + meta_path.string());
    json meta;
    try {
      min >> meta;
    } catch (const json::exception& e) {
      throw ParseError(meta_path.string() + ": " + e.what());
    }
    if (meta.contains("concept_names")) {
      auto names = meta.at("concept_names").get<std::vector<std::string>>();
      if (names.size() != k)
        throw ParseError(meta_path.string() + ": concept_names has " +
                         std::to_string(names.size()) + " entries, CSV has " + std::to_string(k) +
                         " concept columns");
      ds.concept_names = std::move(names);
    }
    if (meta.contains("class_names")) {
      auto names = meta.at("class_names").get<std::vector<std::string>>();
      if ((long)names.size() < (long)num_classes)
        throw ParseError(meta_path.string() + ": class_names has " + std::to_string(names.size()) +
                         " entries but targets reach " + std::to_string(max_target));
      ds.class_names = std::move(names);
      num_classes = ds.class_names.size();
    }
    if (meta.contains("groups")) {
      auto groups = meta.at("groups").get<std::vector<std::vector<int>>>();
      ds.group_map.assign(k, -1);
      for (std::size_t g = 0; g < groups.size(); ++g)
        for (int j : groups[g]) {
          if (j < 0 || (std::size_t)j >= k || ds.group_map[(std::size_t)j] != -1)
            throw ParseError(meta_path.string() + ": groups must partition concepts 0.." +
                             std::to_string(k - 1));
          ds.group_map[(std::size_t)j] = (int)g;
        }
      for (int g : ds.group_map)
        if (g == -1)
          throw ParseError(meta_path.string() + ": groups must cover every concept index");
    }
  }
  if (ds.class_names.empty()) {
    ds.class_names.resize(num_classes);
    for (std::size_t m = 0; m < num_classes; ++m) ds.class_names[m] = default_class_name(m);
  }
  ds.validate();
  return ds;
}

}  // namespace cbmlab
