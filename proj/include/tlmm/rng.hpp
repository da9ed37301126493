#pragma once

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <limits>
#include <random>

namespace tlmm {

// Philox4x32-10 (Salmon et al., SC'11).
inline std::array<std::uint32_t, 4> philox4x32_10(std::array<std::uint32_t, 4> ctr,
                                                  std::array<std::uint32_t, 2> key) {
  constexpr std::uint32_t m0 = 0xD2511F53u, m1 = 0xCD9E8D57u;
  constexpr std::uint32_t w0 = 0x9E3779B9u, w1 = 0xBB67AE85u;
  for (int round = 0; round < 10; ++round) {
    const std::uint64_t p0 = static_cast<std::uint64_t>(m0) * ctr[0];
    const std::uint64_t p1 = static_cast<std::uint64_t>(m1) * ctr[2];
    const std::uint32_t hi0 = static_cast<std::uint32_t>(p0 >> 32), lo0 = static_cast<std::uint32_t>(p0);
    const std::uint32_t hi1 = static_cast<std::uint32_t>(p1 >> 32), lo1 = static_cast<std::uint32_t>(p1);
    ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
    key[0] += w0;
    key[1] += w1;
  }
  return ctr;
}

// Counter-based stream identified by (seed, a, b, c). Two streams with different
// identities never share a counter, so draws do not depend on which worker runs them.
class Stream {
public:
  using result_type = std::uint64_t;

  Stream(std::uint64_t seed, std::uint32_t a, std::uint32_t b, std::uint32_t c)
      : key_{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)}, id_{a, b, c} {}

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  result_type operator()() {
    if (pos_ == 2) refill();
    return buf_[pos_++];
  }

  // Uniform on the open interval (0, 1).
  double uniform() { return (static_cast<double>((*this)() >> 11) + 0.5) * 0x1.0p-53; }
  double normal() { return std::normal_distribution<double>()(*this); }
  // Gamma with shape a and rate b.
  double gamma(double shape, double rate) {
    return std::gamma_distribution<double>(shape, 1.0 / rate)(*this);
  }
  Eigen::VectorXd normal_vector(Eigen::Index n) {
    std::normal_distribution<double> nd;
    Eigen::VectorXd z(n);
    for (Eigen::Index i = 0; i < n; ++i) z[i] = nd(*this);
    return z;
  }

private:
  void refill() {
    const auto out = philox4x32_10({counter_++, id_[0], id_[1], id_[2]}, key_);
    buf_[0] = (static_cast<std::uint64_t>(out[1]) << 32) | out[0];
    buf_[1] = (static_cast<std::uint64_t>(out[3]) << 32) | out[2];
    pos_ = 0;
  }

  std::array<std::uint32_t, 2> key_;
  std::array<std::uint32_t, 3> id_;
  std::uint32_t counter_ = 0;
  std::array<std::uint64_t, 2> buf_{};
  int pos_ = 2;
};

// Stable 32-bit tag for a block label built from small integer fields.
constexpr std::uint32_t block_tag(std::uint32_t kind, std::uint32_t a = 0, std::uint32_t b = 0,
                                  std::uint32_t c = 0) {
  return (kind << 24) ^ (a << 16) ^ (b << 8) ^ c;
}

}  // namespace tlmm
