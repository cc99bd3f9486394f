#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <string_view>

namespace qig::rng {

// 64-bit FNV-1a over a purpose tag.
constexpr std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 1469598103934665603ull;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ull;
  }
  return h;
}

std::uint64_t splitmix64(std::uint64_t x);

// Derives an independent stream seed from a root seed and a purpose tag, so
// every consumer of randomness (model weights, calibration data, test
// instances, ...) draws from its own substream of the single user-facing seed.
std::uint64_t sub_seed(std::uint64_t seed, std::string_view purpose);

std::mt19937_64 engine_for(std::uint64_t seed, std::string_view purpose);

// Standard-normal matrix, filled row by row so the layout is reproducible
// independent of Eigen's storage order.
Eigen::MatrixXd standard_normal(Eigen::Index rows, Eigen::Index cols,
                                std::mt19937_64& eng);

}  // namespace qig::rng
