#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "cpmvam/normal.hpp"
#include "cpmvam/rng.hpp"

using namespace cpmvam;

TEST_CASE("philox known-answer vectors", "[rng]") {
  // Reference outputs for the 10-round 4x32 configuration.
  const auto zero = Philox4x32::block_raw({0u, 0u, 0u, 0u}, 0u, 0u);
  CHECK(zero[0] == 0x6627e8d5u);
  CHECK(zero[1] == 0xe169c58du);
  CHECK(zero[2] == 0xbc57ac4cu);
  CHECK(zero[3] == 0x9b00dbd8u);

  const auto ones = Philox4x32::block_raw(
      {0xffffffffu, 0xffffffffu, 0xffffffffu, 0xffffffffu}, 0xffffffffu,
      0xffffffffu);
  CHECK(ones[0] == 0x408f276du);
  CHECK(ones[1] == 0x41c83b0eu);
  CHECK(ones[2] == 0xa20bc7c6u);
  CHECK(ones[3] == 0x6d5451fdu);
}

TEST_CASE("stream is a pure function of the seed", "[rng]") {
  Philox4x32 a(977), b(977), c(978);
  bool saw_difference = false;
  for (int k = 0; k < 256; ++k) {
    const auto va = a.next_u32();
    REQUIRE(va == b.next_u32());
    if (va != c.next_u32()) saw_difference = true;
  }
  CHECK(saw_difference);

  // The full 64-bit seed participates, not just the low word.
  Philox4x32 lo(1), hi(1 + (std::uint64_t(1) << 32));
  CHECK(lo.next_u32() != hi.next_u32());
}

TEST_CASE("block() maps the counter into the first two words", "[rng]") {
  const std::uint64_t ctr = 0x0123456789abcdefull;
  const auto direct = Philox4x32::block(ctr, 7u, 9u);
  const auto manual =
      Philox4x32::block_raw({0x89abcdefu, 0x01234567u, 0u, 0u}, 7u, 9u);
  CHECK(direct == manual);
}

TEST_CASE("uniform01 stays strictly inside the unit interval", "[rng]") {
  Philox4x32 rng(5);
  double mean = 0.0;
  const int kDraws = 100000;
  for (int k = 0; k < kDraws; ++k) {
    const double u = rng.uniform01();
    REQUIRE(u > 0.0);
    REQUIRE(u < 1.0);
    mean += u;
  }
  mean /= kDraws;
  CHECK(mean == Catch::Approx(0.5).margin(0.005));
}

TEST_CASE("uniform_int covers [0,n) without bias", "[rng]") {
  Philox4x32 rng(31);
  const std::uint64_t n = 7;
  std::array<int, 7> counts{};
  const int kDraws = 70000;
  for (int k = 0; k < kDraws; ++k) {
    const std::uint64_t v = rng.uniform_int(n);
    REQUIRE(v < n);
    ++counts[v];
  }
  for (int cell : counts) {
    CHECK(std::abs(cell - 10000) < 500);
  }
  CHECK(rng.uniform_int(1) == 0);
}

TEST_CASE("normal draws match the standard normal law", "[rng][slow]") {
  Philox4x32 rng(424242);
  const int kDraws = 10000;
  std::vector<double> x(kDraws);
  double mean = 0.0, sq = 0.0;
  for (int k = 0; k < kDraws; ++k) {
    x[k] = rng.normal();
    mean += x[k];
    sq += x[k] * x[k];
  }
  mean /= kDraws;
  const double sd = std::sqrt(sq / kDraws - mean * mean);
  CHECK(std::fabs(mean) < 0.03);
  CHECK(sd == Catch::Approx(1.0).margin(0.03));

  // Kolmogorov-Smirnov distance against Phi; 1.63/sqrt(n) is the 1% critical
  // value, so a pass band of 0.02 leaves comfortable slack for a fixed seed.
  std::sort(x.begin(), x.end());
  double dmax = 0.0;
  for (int k = 0; k < kDraws; ++k) {
    const double f = norm_cdf(x[k]);
    dmax = std::max(dmax, std::fabs(f - (k + 1.0) / kDraws));
    dmax = std::max(dmax, std::fabs(f - double(k) / kDraws));
  }
  CHECK(dmax < 0.02);
}
