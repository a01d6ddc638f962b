#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dyndepth/sequence.hpp"

namespace dyndepth {

enum class Difficulty { kEasy, kMedium, kHard };

const char* difficulty_name(Difficulty d);
Difficulty parse_difficulty(const std::string& name);

struct Record {
  TokenSequence tokens;
  int label = 0;
  Difficulty difficulty = Difficulty::kEasy;
  std::optional<int> oracle_depth;
};

/// Token layout: class c owns tokens [4c, 4c + 4); the rest of the
/// vocabulary is split into an easy filler range and a hard filler range.
///  - easy: 6 tokens of the label's group at random positions.
///  - medium: 3 tokens of the label's group.
///  - hard: 4 tokens of group c1 in the first half, 4 of group c2 in the
///    second half, label (c1 - c2) mod classes.
struct DataGenConfig {
  int n = 5000;
  int vocab_size = 32;
  int num_classes = 4;
  int seq_len = 16;
  double easy_fraction = 0.6;
  double medium_fraction = 0.0;
  std::uint64_t seed = 1;

  void validate() const;
  int group_tokens() const { return 4 * num_classes; }
  int filler_width() const { return (vocab_size - group_tokens()) / 2; }
};

struct ProbeResult {
  double easy_accuracy = 0.0;
  double medium_accuracy = 0.0;  // 0 when there are no medium records
  double hard_accuracy = 0.0;
};

struct Dataset {
  DataGenConfig config;
  ProbeResult probe;
  std::vector<Record> records;

  int count(Difficulty d) const;
};

/// Seed-deterministic generation followed by the bag-of-tokens linear probe.
/// Throws EvaluationError when the probe does not separate easy (>= 0.95)
/// from hard (<= 0.60) records.
Dataset generate_dataset(const DataGenConfig& config);

/// Least-squares linear classifier on token counts, fit on the first half of
/// `records` and scored on the second half.
double linear_probe_accuracy(std::span<const Record> records, int vocab_size, int num_classes);

/// Header line plus one JSON object per record.
void save_dataset(const std::filesystem::path& path, const Dataset& data);
Dataset load_dataset(const std::filesystem::path& path);

struct Split {
  std::vector<Record> train;
  std::vector<Record> val;
};

/// The first round(train_fraction * n) records train, the rest validate.
Split split_dataset(const Dataset& data, double train_fraction = 0.8);

}  // namespace dyndepth
