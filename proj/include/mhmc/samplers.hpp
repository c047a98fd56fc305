#pragma once

#include "mhmc/integrators.hpp"
#include "mhmc/rng.hpp"
#include "mhmc/skewflow.hpp"
#include "mhmc/targets.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <vector>

namespace mhmc {

/// Augmented state of the magnetic chain: position, momentum and the sign
/// of the current magnetic term (G or -G).
struct ChainState {
  Eigen::VectorXd theta;
  Eigen::VectorXd p;
  int g_sign = +1;
};

struct SamplerConfig {
  double epsilon = 0.1;
  int n_leapfrog = 10;
  int n_samples = 1000;
  std::uint64_t seed = 0;
  AntisymmetricMatrix g_matrix = AntisymmetricMatrix::zero(1);
  /// Momentum covariance for preconditioned HMC.
  std::optional<Eigen::MatrixXd> mass_matrix;

  void validate(int dim) const;
};

struct SampleRecord {
  long iteration = 0;
  Eigen::VectorXd theta;
  bool accepted = false;
  double energy_error = 0.0;  ///< H(proposal) - H(current); +inf on divergence
  int g_sign_after = +1;
};

struct Transition {
  ChainState state;
  SampleRecord record;
};

enum class SamplerKind { hmc, mhmc, preconditioned };

const char* to_string(SamplerKind kind);
SamplerKind sampler_kind_from_string(const std::string& name);

/// One iteration of magnetic HMC: resample p, integrate under sign·G, flip p
/// and the sign, Metropolis test, flip p and the sign again. A rejected
/// proposal therefore leaves the sign negated. `flow` must have been built
/// for cfg.g_matrix at cfg.epsilon.
Transition mhmc_step(const TargetDensity& target, const ChainState& state,
                     const SamplerConfig& cfg, const MagneticFlowCache& flow, Rng& rng);

/// Convenience overload that builds the flow cache on every call.
Transition mhmc_step(const TargetDensity& target, const ChainState& state,
                     const SamplerConfig& cfg, Rng& rng);

/// Standard HMC. Draws from `rng` in exactly the same order as mhmc_step.
Transition hmc_step(const TargetDensity& target, const ChainState& state,
                    const SamplerConfig& cfg, Rng& rng);

/// HMC with p ~ N(0, M) and kinetic energy pᵀM⁻¹p/2 (cfg.mass_matrix).
Transition preconditioned_hmc_step(const TargetDensity& target, const ChainState& state,
                                   const SamplerConfig& cfg, Rng& rng);

/// Deterministic proposal map flip ∘ (magnetic leapfrog under `sign`)^L.
/// Flips both the momentum and the sign, so applying it twice is the identity.
ChainState proposal_map(const TargetDensity& target, const ChainState& state,
                        const IntegratorConfig& cfg);

struct ChainResult {
  std::vector<SampleRecord> records;
  double acceptance_rate = 0.0;
  double wall_seconds = 0.0;

  /// n_samples x d matrix of recorded positions, skipping the first `burn_in`.
  Eigen::MatrixXd positions(std::size_t burn_in = 0) const;
};

/// Runs cfg.n_samples iterations from `init_theta` with Rng(cfg.seed, stream).
ChainResult run_chain(const TargetDensity& target, const Eigen::VectorXd& init_theta,
                      const SamplerConfig& cfg, SamplerKind kind, std::uint64_t stream = 0);

/// Preconditioned leapfrog with mass M versus the non-canonical leapfrog with
/// F = L⁻ᵀ (M = LLᵀ) on p' = L⁻¹p, mapped back through p = Lp'. Returns the
/// largest θ/p deviation over the cfg.n_steps steps. Throws NotSPD.
double check_preconditioning_equivalence(const TargetDensity& target, const Eigen::MatrixXd& mass,
                                         const PhasePoint& init, const IntegratorConfig& cfg);

/// Canonical leapfrog on θ' = F⁻¹θ with U'(θ') = U(Fθ') versus the
/// non-canonical leapfrog with coupling F. Returns the largest θ/p deviation.
/// Throws SingularMatrix.
double check_change_of_basis_equivalence(const TargetDensity& target, const Eigen::MatrixXd& f,
                                         const PhasePoint& init, const IntegratorConfig& cfg);

}  // namespace mhmc
