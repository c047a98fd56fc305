#pragma once

#include "mhmc/skewflow.hpp"
#include "mhmc/targets.hpp"

#include <Eigen/Dense>

#include <memory>
#include <optional>
#include <vector>

namespace mhmc {

struct PhasePoint {
  Eigen::VectorXd theta;
  Eigen::VectorXd p;

  bool finite() const { return theta.allFinite() && p.allFinite(); }
};

/// Kinetic energy pᵀp/2 plus the target's potential.
double hamiltonian(const TargetDensity& target, const PhasePoint& s);

struct IntegratorConfig {
  double step = 0.1;
  int n_steps = 1;
  /// Magnetic flow for ±G at this step size. Absent means canonical leapfrog.
  std::shared_ptr<const MagneticFlowCache> flow_cache;
  /// Position/momentum coupling of A = [[0, F], [-Fᵀ, G]]; identity if absent.
  std::optional<Eigen::MatrixXd> f;

  /// Builds a config with a flow cache for `g` at `step`.
  static IntegratorConfig magnetic(const AntisymmetricMatrix& g, double step, int n_steps);
  static IntegratorConfig canonical(double step, int n_steps);

  /// Throws Error if step <= 0, n_steps < 0 or the cache step disagrees.
  void validate() const;
};

/// Störmer-Verlet: half kick, drift, half kick. Throws NonFinite.
PhasePoint leapfrog_step(const TargetDensity& target, const PhasePoint& s, double step);

/// Splitting step kick(Fᵀ∇U/2) ∘ momentum_flow(±G) ∘ kick(Fᵀ∇U/2).
/// Requires cfg.flow_cache. Throws NonFinite, DimensionMismatch.
PhasePoint magnetic_leapfrog_step(const TargetDensity& target, const PhasePoint& s,
                                  const IntegratorConfig& cfg, int g_sign);

/// cfg.n_steps integrator steps; magnetic when cfg.flow_cache is set,
/// canonical otherwise. Gradients are reused between consecutive half kicks,
/// which gives the same floating-point result as chaining the single steps.
/// If `trace` is non-null it receives n_steps + 1 points including `s`.
PhasePoint trajectory(const TargetDensity& target, const PhasePoint& s,
                      const IntegratorConfig& cfg, int g_sign,
                      std::vector<PhasePoint>* trace = nullptr);

/// A = [[0, F], [-Fᵀ, sign·G]] (G = 0 when there is no flow cache).
Eigen::MatrixXd structure_matrix(const IntegratorConfig& cfg, int dim, int g_sign);

struct SymplecticResidual {
  double symplectic;   ///< max |JᵀA⁻¹J - A⁻¹|
  double determinant;  ///< | |det J| - 1 |
};

/// Central finite-difference Jacobian J of the L-step flow and the residuals
/// of JᵀA⁻¹J = A⁻¹. Throws SingularMatrix if A is not invertible.
SymplecticResidual check_symplectic(const TargetDensity& target, const PhasePoint& s,
                                    const IntegratorConfig& cfg, int g_sign,
                                    double fd_step = 1e-6);

/// G = [[0,-b₃,b₂],[b₃,0,-b₁],[-b₂,b₁,0]], so that G·p = b × p.
AntisymmetricMatrix magnetic_field_matrix(const Eigen::Vector3d& b);

/// Integrates the non-canonical system (θ̇ = p, ṗ = -∇U + Gp) with G from
/// magnetic_field_matrix(b) and Newton's law for a unit charge
/// (θ̈ = -∇U + θ̇ × B) in the field B = -b that this layout encodes, with
/// RK4 at `rk_step` up to time `horizon`. Returns the largest state deviation
/// seen along the way.
double check_magnetic_equivalence(const TargetDensity& target, const Eigen::Vector3d& b,
                                  const PhasePoint& s, double horizon, double rk_step = 1e-4);

}  // namespace mhmc
