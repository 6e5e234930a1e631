#pragma once

// Philox4x32-10 counter-based generator. Chosen so simulated cohorts are
// reproducible from (seed, replicate index) alone, with no hidden state.

#include <array>
#include <cstdint>

#include "cpmvam/normal.hpp"

namespace cpmvam {

class Philox4x32 {
 public:
  explicit Philox4x32(std::uint64_t seed)
      : key0_(static_cast<std::uint32_t>(seed)),
        key1_(static_cast<std::uint32_t>(seed >> 32)) {}

  std::uint32_t next_u32() {
    if (pos_ == 4) {
      buf_ = block(counter_++, key0_, key1_);
      pos_ = 0;
    }
    return buf_[pos_++];
  }

  std::uint64_t next_u64() {
    const std::uint64_t lo = next_u32();
    const std::uint64_t hi = next_u32();
    return lo | (hi << 32);
  }

  /// Uniform on the open interval (0,1); safe to feed to inv_norm_cdf.
  double uniform01() {
    return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
  }

  /// Standard normal by inversion, so the draw order fixes the stream.
  double normal() { return inv_norm_cdf(uniform01()); }

  /// Unbiased integer in [0, n) via 128-bit multiply-shift.
  std::uint64_t uniform_int(std::uint64_t n) {
    return static_cast<std::uint64_t>(
        (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  static std::array<std::uint32_t, 4> block(std::uint64_t counter,
                                            std::uint32_t key0,
                                            std::uint32_t key1) {
    std::array<std::uint32_t, 4> c{static_cast<std::uint32_t>(counter),
                                   static_cast<std::uint32_t>(counter >> 32), 0u,
                                   0u};
    return block_raw(c, key0, key1);
  }

  static std::array<std::uint32_t, 4> block_raw(std::array<std::uint32_t, 4> c,
                                                std::uint32_t k0,
                                                std::uint32_t k1) {
    for (int round = 0; round < 10; ++round) {
      if (round > 0) {
        k0 += 0x9E3779B9u;
        k1 += 0xBB67AE85u;
      }
      const std::uint64_t p0 = 0xD2511F53ull * c[0];
      const std::uint64_t p1 = 0xCD9E8D57ull * c[2];
      const std::uint32_t hi0 = static_cast<std::uint32_t>(p0 >> 32);
      const std::uint32_t lo0 = static_cast<std::uint32_t>(p0);
      const std::uint32_t hi1 = static_cast<std::uint32_t>(p1 >> 32);
      const std::uint32_t lo1 = static_cast<std::uint32_t>(p1);
      c = {hi1 ^ c[1] ^ k0, lo1, hi0 ^ c[3] ^ k1, lo0};
    }
    return c;
  }

 private:
  std::uint32_t key0_, key1_;
  std::uint64_t counter_ = 0;
  std::array<std::uint32_t, 4> buf_{};
  int pos_ = 4;
};

}  // namespace cpmvam
