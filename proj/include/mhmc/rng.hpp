#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <random>

namespace mhmc {

/// Seedable generator with an explicit stream index. (seed, stream) pairs map
/// to independent engines, so chain k of an experiment always sees the same
/// draws regardless of which thread runs it.
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0);

  double normal() { return normal_(engine_); }
  double uniform() { return uniform_(engine_); }

  void fill_normal(Eigen::VectorXd& out) {
    for (Eigen::Index i = 0; i < out.size(); ++i) out[i] = normal_(engine_);
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

inline Rng::Rng(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32),
                    0x6d68u};
  engine_.seed(seq);
}

}  // namespace mhmc
