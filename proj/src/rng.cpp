#include "qig/rng.hpp"

namespace qig::rng {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

std::uint64_t sub_seed(std::uint64_t seed, std::string_view purpose) {
  return splitmix64(seed ^ fnv1a(purpose));
}

std::mt19937_64 engine_for(std::uint64_t seed, std::string_view purpose) {
  return std::mt19937_64(sub_seed(seed, purpose));
}

Eigen::MatrixXd standard_normal(Eigen::Index rows, Eigen::Index cols,
                                std::mt19937_64& eng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  Eigen::MatrixXd out(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) out(i, j) = dist(eng);
  return out;
}

}  // namespace qig::rng
