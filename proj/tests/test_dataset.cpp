#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "dyndepth/dataset.hpp"
#include "dyndepth/errors.hpp"

using namespace dyndepth;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("generate_dataset: exact difficulty counts and token layout") {
  DataGenConfig c;
  c.n = 1000;
  c.easy_fraction = 0.6;
  const auto d = generate_dataset(c);
  CHECK(d.records.size() == 1000);
  CHECK(d.count(Difficulty::kEasy) == 600);
  CHECK(d.count(Difficulty::kHard) == 400);
  for (const auto& r : d.records) {
    REQUIRE(r.tokens.size() == 16);
    int group[4] = {0, 0, 0, 0}, easy_fill = 0, hard_fill = 0;
    for (int t : r.tokens) {
      if (t < 16) ++group[t / 4];
      else if (t < 24) ++easy_fill;
      else ++hard_fill;
    }
    if (r.difficulty == Difficulty::kEasy) {
      CHECK(group[r.label] == 6);
      CHECK(hard_fill == 0);
    } else {
      CHECK(easy_fill == 0);
      int first = -1, second = -1;
      for (int i = 0; i < 8; ++i) {
        if (r.tokens[i] < 16) first = r.tokens[i] / 4;
      }
      for (int i = 8; i < 16; ++i) {
        if (r.tokens[i] < 16) second = r.tokens[i] / 4;
      }
      CHECK(r.label == ((first - second) % 4 + 4) % 4);
    }
  }
}

TEST_CASE("generate_dataset: probe separates easy from hard") {
  const auto d = generate_dataset(DataGenConfig{});
  MESSAGE("probe easy " << d.probe.easy_accuracy << ", hard " << d.probe.hard_accuracy);
  CHECK(d.probe.easy_accuracy >= 0.95);
  CHECK(d.probe.hard_accuracy <= 0.60);
}

TEST_CASE("generate_dataset: medium records carry three class tokens") {
  DataGenConfig c;
  c.n = 400;
  c.easy_fraction = 0.5;
  c.medium_fraction = 0.25;
  const auto d = generate_dataset(c);
  CHECK(d.count(Difficulty::kMedium) == 100);
  for (const auto& r : d.records) {
    if (r.difficulty != Difficulty::kMedium) continue;
    int own = 0;
    for (int t : r.tokens) own += t < 16 && t / 4 == r.label;
    CHECK(own == 3);
  }
}

TEST_CASE("generate_dataset: invalid configurations") {
  DataGenConfig c;
  c.easy_fraction = 0.8;
  c.medium_fraction = 0.3;
  CHECK_THROWS_AS(generate_dataset(c), ParameterError);
  c = DataGenConfig{};
  c.n = 99;
  CHECK_THROWS_AS(generate_dataset(c), ParameterError);
  c = DataGenConfig{};
  c.vocab_size = 18;
  CHECK_THROWS_AS(generate_dataset(c), ParameterError);
}

TEST_CASE("dataset files: same seed gives byte-identical files; round trip") {
  DataGenConfig c;
  c.n = 300;
  c.seed = 42;
  const auto dir = fs::temp_directory_path();
  const auto a = dir / "dyndepth_ds_a.jsonl";
  const auto b = dir / "dyndepth_ds_b.jsonl";
  auto d = generate_dataset(c);
  d.records[0].oracle_depth = 3;
  save_dataset(a, d);
  auto d2 = generate_dataset(c);
  d2.records[0].oracle_depth = 3;
  save_dataset(b, d2);
  CHECK(slurp(a) == slurp(b));

  const auto back = load_dataset(a);
  REQUIRE(back.records.size() == d.records.size());
  CHECK(back.records[0].oracle_depth == 3);
  CHECK_FALSE(back.records[1].oracle_depth.has_value());
  for (std::size_t i = 0; i < d.records.size(); ++i) {
    CHECK(back.records[i].tokens == d.records[i].tokens);
    CHECK(back.records[i].label == d.records[i].label);
    CHECK(back.records[i].difficulty == d.records[i].difficulty);
  }
  CHECK(back.probe.easy_accuracy == d.probe.easy_accuracy);

  const auto split = split_dataset(back);
  CHECK(split.train.size() == 240);
  CHECK(split.val.size() == 60);

  CHECK_THROWS_AS(load_dataset(dir / "dyndepth_no_such_file.jsonl"), IoError);
  {
    std::ofstream bad(b);
    bad << "{\"format\":\"dyndepth-dataset\",\"version\":2}\n";
  }
  CHECK_THROWS_AS(load_dataset(b), VersionError);
  fs::remove(a);
  fs::remove(b);
}
