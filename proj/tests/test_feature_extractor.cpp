#include "doctest.h"

#include <cmath>

#include "dyndepth/feature_extractor.hpp"
#include "oracles.hpp"

using namespace dyndepth;

TEST_CASE("extract: zero weights propagate zeros") {
  const auto p = ExtractorParams::zeros(ExtractorConfig{});
  const TokenSequence tokens = {3, 1, 4, 1, 5};
  const auto f = extract(tokens, p);
  CHECK(f.h1.isZero());
  CHECK(f.h2.isZero());
  CHECK(f.h3.isZero());
}

TEST_CASE("extract: shapes follow same padding and ceil-halving") {
  Rng rng(1);
  const auto p = ExtractorParams::init(ExtractorConfig{}, rng);
  for (int len : {1, 2, 3, 4, 5, 7, 16, 33}) {
    const TokenSequence tokens(len, 2);
    const auto f = extract(tokens, p);
    CHECK(f.h1.rows() == len);
    CHECK(f.h2.rows() == (len + 1) / 2);
    CHECK(f.h3.rows() == ((len + 1) / 2 + 1) / 2);
    CHECK(f.h1.cols() == 64);
    CHECK(f.h2.cols() == 128);
    CHECK(f.h3.cols() == 256);
    CHECK(f.pooled1.size() == 128);
    CHECK(f.pooled2.size() == 256);
    CHECK(f.pooled3.size() == 512);
    CHECK(all_finite(f.h3));
  }
}

TEST_CASE("extract: pooled vectors match the scalar-loop reference") {
  Rng rng(7);
  const auto p = ExtractorParams::init(ExtractorConfig{}, rng);
  const TokenSequence tokens = {0, 5, 31, 7, 7, 12, 19, 2, 30};
  const auto f = extract(tokens, p);
  const auto ref = oracle::scalar_pooled_features(tokens, p);
  const Vector* got[] = {&f.pooled1, &f.pooled2, &f.pooled3};
  for (int s = 0; s < 3; ++s) {
    REQUIRE(static_cast<std::size_t>(got[s]->size()) == ref[s].size());
    double err = 0;
    for (std::size_t i = 0; i < ref[s].size(); ++i) err = std::max(err, std::abs((*got[s])[i] - ref[s][i]));
    CHECK(err < 1e-12);
  }
}

TEST_CASE("extract: input contract") {
  Rng rng(2);
  const auto p = ExtractorParams::init(ExtractorConfig{}, rng);
  CHECK_THROWS_AS(extract(TokenSequence{}, p), InputError);
  CHECK_THROWS_AS(extract(TokenSequence{1, 32}, p), InputError);
  CHECK_THROWS_AS(extract(TokenSequence{-1}, p), InputError);
  CHECK_THROWS_AS(extract(TokenSequence(257, 0), p), InputError);
}

TEST_CASE("extract: swapping two distinct tokens changes h1") {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed);
    const auto p = ExtractorParams::init(ExtractorConfig{}, rng);
    TokenSequence tokens(8);
    for (auto& t : tokens) t = static_cast<int>(rng() % 32);
    tokens[2] = 4;
    tokens[5] = 9;
    TokenSequence swapped = tokens;
    std::swap(swapped[2], swapped[5]);
    CHECK(extract(tokens, p).h1 != extract(swapped, p).h1);
  }
}

TEST_CASE("extract: output change bounded by the product of stage operator norms") {
  Rng rng(11);
  const auto p = ExtractorParams::init(ExtractorConfig{}, rng);
  const auto norms = conv_operator_norm_bounds(p);
  for (int trial = 0; trial < 20; ++trial) {
    const int len = 1 + static_cast<int>(rng() % 20);
    const Matrix x = random_normal(len, 128, 1.0, rng);
    const Matrix dx = random_normal(len, 128, 1e-3 * (1 + trial), rng);
    const auto a = extract_embedded(x, p);
    const auto b = extract_embedded(x + dx, p);
    const double in = dx.norm();
    CHECK((a.h1 - b.h1).norm() <= norms[0] * in * 1.01);
    CHECK((a.h2 - b.h2).norm() <= norms[0] * norms[1] * in * 1.01);
    CHECK((a.h3 - b.h3).norm() <= norms[0] * norms[1] * norms[2] * in * 1.01);
  }
}

TEST_CASE("extract: deterministic for fixed parameters") {
  Rng r1(5), r2(5);
  const auto p1 = ExtractorParams::init(ExtractorConfig{}, r1);
  const auto p2 = ExtractorParams::init(ExtractorConfig{}, r2);
  const TokenSequence tokens = {1, 2, 3, 4, 5, 6};
  CHECK(extract(tokens, p1).pooled3 == extract(tokens, p2).pooled3);
}
