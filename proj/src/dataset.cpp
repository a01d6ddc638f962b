#include "dyndepth/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <Eigen/Cholesky>

#include "dyndepth/errors.hpp"
#include "dyndepth/random.hpp"
#include "json.hpp"

namespace dyndepth {

using nlohmann::json;

const char* difficulty_name(Difficulty d) {
  switch (d) {
    case Difficulty::kEasy: return "easy";
    case Difficulty::kMedium: return "medium";
    case Difficulty::kHard: return "hard";
  }
  return "?";
}

Difficulty parse_difficulty(const std::string& name) {
  if (name == "easy") return Difficulty::kEasy;
  if (name == "medium") return Difficulty::kMedium;
  if (name == "hard") return Difficulty::kHard;
  throw InputError("unknown difficulty '" + name + "'");
}

void DataGenConfig::validate() const {
  if (n < 100) throw ParameterError("dataset: n must be at least 100, got " + std::to_string(n));
  if (easy_fraction < 0 || medium_fraction < 0 || easy_fraction + medium_fraction > 1.0) {
    throw ParameterError("dataset: fractions must be non-negative and sum to at most 1");
  }
  if (num_classes < 2) throw ParameterError("dataset: need at least two classes");
  if (filler_width() < 2) {
    throw ParameterError("dataset: vocabulary " + std::to_string(vocab_size) + " too small for " +
                         std::to_string(num_classes) + " classes");
  }
  if (seq_len < 12) throw ParameterError("dataset: seq_len must be at least 12");
}

int Dataset::count(Difficulty d) const {
  return static_cast<int>(std::count_if(records.begin(), records.end(),
                                        [&](const Record& r) { return r.difficulty == d; }));
}

namespace {

int below(Rng& rng, int n) { return static_cast<int>(rng() % static_cast<std::uint64_t>(n)); }

/// `count` distinct positions from [lo, hi).
std::vector<int> positions(Rng& rng, int lo, int hi, int count) {
  std::vector<int> all(hi - lo);
  for (int i = 0; i < hi - lo; ++i) all[i] = lo + i;
  for (int i = 0; i < count; ++i) std::swap(all[i], all[i + below(rng, hi - lo - i)]);
  all.resize(count);
  return all;
}

Record make_record(const DataGenConfig& c, Difficulty d, Rng& rng) {
  const int w = c.filler_width();
  const int filler_lo = c.group_tokens() + (d == Difficulty::kHard ? w : 0);
  Record r;
  r.difficulty = d;
  r.tokens.resize(c.seq_len);
  for (auto& t : r.tokens) t = filler_lo + below(rng, w);
  auto plant = [&](int group, const std::vector<int>& at) {
    for (int p : at) r.tokens[p] = 4 * group + below(rng, 4);
  };
  if (d == Difficulty::kHard) {
    const int c1 = below(rng, c.num_classes);
    const int c2 = below(rng, c.num_classes);
    const int half = c.seq_len / 2;
    plant(c1, positions(rng, 0, half, 4));
    plant(c2, positions(rng, half, c.seq_len, 4));
    r.label = ((c1 - c2) % c.num_classes + c.num_classes) % c.num_classes;
  } else {
    r.label = below(rng, c.num_classes);
    plant(r.label, positions(rng, 0, c.seq_len, d == Difficulty::kEasy ? 6 : 3));
  }
  return r;
}

std::vector<Record> subset(const std::vector<Record>& records, Difficulty d) {
  std::vector<Record> out;
  for (const auto& r : records) {
    if (r.difficulty == d) out.push_back(r);
  }
  return out;
}

}  // namespace

double linear_probe_accuracy(std::span<const Record> records, int vocab_size, int num_classes) {
  const Index n = static_cast<Index>(records.size());
  if (n < 4) throw InputError("linear_probe_accuracy: need at least 4 records");
  const Index fit = n / 2;
  Matrix x = Matrix::Zero(n, vocab_size + 1);
  Matrix y = Matrix::Zero(n, num_classes);
  for (Index i = 0; i < n; ++i) {
    for (int t : records[i].tokens) x(i, t) += 1.0;
    x(i, vocab_size) = 1.0;
    y(i, records[i].label) = 1.0;
  }
  const auto xf = x.topRows(fit);
  Matrix gram = xf.transpose() * xf;
  gram.diagonal().array() += 1e-3;
  const Matrix w = gram.ldlt().solve(xf.transpose() * y.topRows(fit));
  const Matrix scores = x.bottomRows(n - fit) * w;
  Index correct = 0;
  for (Index i = 0; i < scores.rows(); ++i) {
    Index best;
    scores.row(i).maxCoeff(&best);
    correct += best == records[fit + i].label;
  }
  return static_cast<double>(correct) / static_cast<double>(scores.rows());
}

Dataset generate_dataset(const DataGenConfig& config) {
  config.validate();
  Dataset data;
  data.config = config;
  Rng rng = SeedTree(config.seed).stream("data");
  const int n_easy = static_cast<int>(std::lround(config.n * config.easy_fraction));
  const int n_medium = static_cast<int>(std::lround(config.n * config.medium_fraction));
  if (n_easy + n_medium > config.n) throw ParameterError("dataset: fractions round above n");
  for (int i = 0; i < config.n; ++i) {
    const Difficulty d = i < n_easy ? Difficulty::kEasy
                         : i < n_easy + n_medium ? Difficulty::kMedium
                                                 : Difficulty::kHard;
    data.records.push_back(make_record(config, d, rng));
  }
  for (std::size_t i = data.records.size(); i > 1; --i) {
    std::swap(data.records[i - 1], data.records[rng() % i]);
  }

  const auto easy = subset(data.records, Difficulty::kEasy);
  const auto medium = subset(data.records, Difficulty::kMedium);
  const auto hard = subset(data.records, Difficulty::kHard);
  if (easy.size() >= 4) {
    data.probe.easy_accuracy = linear_probe_accuracy(easy, config.vocab_size, config.num_classes);
  }
  if (medium.size() >= 4) {
    data.probe.medium_accuracy = linear_probe_accuracy(medium, config.vocab_size, config.num_classes);
  }
  if (hard.size() >= 4) {
    data.probe.hard_accuracy = linear_probe_accuracy(hard, config.vocab_size, config.num_classes);
  }
  const bool easy_ok = easy.size() < 4 || data.probe.easy_accuracy >= 0.95;
  const bool hard_ok = hard.size() < 4 || data.probe.hard_accuracy <= 0.60;
  if (!easy_ok || !hard_ok) {
    throw EvaluationError("dataset probe failed: easy accuracy " +
                          std::to_string(data.probe.easy_accuracy) + " (need >= 0.95), hard " +
                          std::to_string(data.probe.hard_accuracy) + " (need <= 0.60)");
  }
  return data;
}

void save_dataset(const std::filesystem::path& path, const Dataset& data) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write dataset " + path.string());
  const auto& c = data.config;
  json header = {
      {"format", "dyndepth-dataset"},
      {"version", 1},
      {"n", c.n},
      {"vocab_size", c.vocab_size},
      {"num_classes", c.num_classes},
      {"seq_len", c.seq_len},
      {"easy_fraction", c.easy_fraction},
      {"medium_fraction", c.medium_fraction},
      {"seed", c.seed},
      {"counts",
       {{"easy", data.count(Difficulty::kEasy)},
        {"medium", data.count(Difficulty::kMedium)},
        {"hard", data.count(Difficulty::kHard)}}},
      {"probe",
       {{"easy_accuracy", data.probe.easy_accuracy},
        {"medium_accuracy", data.probe.medium_accuracy},
        {"hard_accuracy", data.probe.hard_accuracy}}},
  };
  out << header.dump() << "\n";
  for (const auto& r : data.records) {
    json j = {{"tokens", r.tokens}, {"label", r.label}, {"difficulty", difficulty_name(r.difficulty)}};
    j["oracle_depth"] = r.oracle_depth ? json(*r.oracle_depth) : json(nullptr);
    out << j.dump() << "\n";
  }
  if (!out) throw IoError("short write on dataset " + path.string());
}

Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open dataset " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw InputError("dataset " + path.string() + " is empty");
  Dataset data;
  try {
    const json h = json::parse(line);
    if (h.value("format", "") != "dyndepth-dataset") {
      throw InputError("dataset " + path.string() + " has no dyndepth header");
    }
    if (h.at("version").get<int>() != 1) {
      throw VersionError("dataset " + path.string() + " has version " + h.at("version").dump());
    }
    auto& c = data.config;
    c.n = h.at("n");
    c.vocab_size = h.at("vocab_size");
    c.num_classes = h.at("num_classes");
    c.seq_len = h.at("seq_len");
    c.easy_fraction = h.at("easy_fraction");
    c.medium_fraction = h.at("medium_fraction");
    c.seed = h.at("seed");
    data.probe.easy_accuracy = h.at("probe").at("easy_accuracy");
    data.probe.medium_accuracy = h.at("probe").at("medium_accuracy");
    data.probe.hard_accuracy = h.at("probe").at("hard_accuracy");
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty()) continue;
      const json j = json::parse(line);
      Record r;
      r.tokens = j.at("tokens").get<TokenSequence>();
      r.label = j.at("label");
      r.difficulty = parse_difficulty(j.at("difficulty"));
      if (j.contains("oracle_depth") && !j["oracle_depth"].is_null()) r.oracle_depth = j["oracle_depth"].get<int>();
      for (int t : r.tokens) {
        if (t < 0 || t >= c.vocab_size) {
          throw InputError("dataset " + path.string() + " line " + std::to_string(line_no) +
                           ": token " + std::to_string(t) + " outside vocabulary");
        }
      }
      if (r.label < 0 || r.label >= c.num_classes) {
        throw InputError("dataset " + path.string() + " line " + std::to_string(line_no) +
                         ": label out of range");
      }
      data.records.push_back(std::move(r));
    }
  } catch (const json::exception& e) {
    throw InputError("dataset " + path.string() + " is malformed: " + e.what());
  }
  return data;
}

Split split_dataset(const Dataset& data, double train_fraction) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw ParameterError("split_dataset: train fraction must be in (0, 1)");
  }
  const auto n_train = static_cast<std::size_t>(std::lround(data.records.size() * train_fraction));
  Split s;
  s.train.assign(data.records.begin(), data.records.begin() + n_train);
  s.val.assign(data.records.begin() + n_train, data.records.end());
  return s;
}

}  // namespace dyndepth
