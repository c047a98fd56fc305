#pragma once

#include <Eigen/Dense>

#include <optional>
#include <utility>
#include <vector>

namespace mhmc {

/// A real square matrix with m(i,j) == -m(j,i). Only constructible through
/// validate_antisymmetric() or zero(), so holders can rely on the invariant.
class AntisymmetricMatrix {
 public:
  static AntisymmetricMatrix zero(int dim);

  int dim() const { return static_cast<int>(m_.rows()); }
  const Eigen::MatrixXd& matrix() const { return m_; }
  bool is_zero() const { return m_.isZero(0.0); }

  AntisymmetricMatrix negated() const { return AntisymmetricMatrix(-m_); }

 private:
  explicit AntisymmetricMatrix(Eigen::MatrixXd m) : m_(std::move(m)) {}
  friend AntisymmetricMatrix validate_antisymmetric(const Eigen::MatrixXd&, double);

  Eigen::MatrixXd m_;
};

/// Accepts `m` iff max|m(i,j) + m(j,i)| <= tol. The stored matrix is the
/// antisymmetric part of `m`, so the invariant holds exactly afterwards.
/// Throws NotAntisymmetric naming the worst pair, DimensionMismatch if not square.
AntisymmetricMatrix validate_antisymmetric(const Eigen::MatrixXd& m, double tol = 1e-12);

/// Real canonical form of an antisymmetric matrix:
///
///   basisᵀ G basis = diag([0 -λ₁; λ₁ 0], ..., [0 -λ_k; λ_k 0], 0_{null_dim})
///
/// with basis orthogonal and rates λ sorted descending. Columns (2k, 2k+1)
/// of the basis span the k-th rotation plane; the trailing null_dim columns
/// span the kernel of G.
struct SkewBlockDecomposition {
  std::vector<double> rotation_rates;
  Eigen::MatrixXd basis;
  int null_dim = 0;

  int dim() const { return static_cast<int>(basis.rows()); }
  int block_count() const { return static_cast<int>(rotation_rates.size()); }

  /// The block-diagonal canonical matrix the decomposition claims.
  Eigen::MatrixXd canonical() const;
};

/// Rates below this are folded into the null space.
inline constexpr double kRankTolerance = 1e-10;

/// Throws NumericalFailure when the reconstruction residual exceeds 1e-8.
SkewBlockDecomposition block_decompose(const AntisymmetricMatrix& g);

/// Precomputed exp(±Gε) and Ψ(±Gε) = ∫₀^ε exp(±Gs) ds for one step size.
class MagneticFlowCache {
 public:
  MagneticFlowCache(const AntisymmetricMatrix& g, double step);

  double step() const { return step_; }
  int dim() const { return static_cast<int>(g_.rows()); }
  const Eigen::MatrixXd& g() const { return g_; }
  const SkewBlockDecomposition& decomposition() const { return decomposition_; }

  /// True when G == 0; the flow is then a plain Euler translation.
  bool trivial() const { return trivial_; }

  const Eigen::MatrixXd& exp(int sign) const { return sign > 0 ? exp_pos_ : exp_neg_; }
  const Eigen::MatrixXd& psi(int sign) const { return sign > 0 ? psi_pos_ : psi_neg_; }

 private:
  Eigen::MatrixXd g_;
  double step_;
  SkewBlockDecomposition decomposition_;
  bool trivial_;
  Eigen::MatrixXd exp_pos_, exp_neg_, psi_pos_, psi_neg_;
};

/// Exact flow of dθ/dt = F p, dp/dt = (sign·G) p for time cache.step():
///   θ' = θ + F Ψ(±Gε) p,   p' = exp(±Gε) p.
/// `f` defaults to the identity. Updates theta and p in place.
void momentum_flow_inplace(const MagneticFlowCache& cache, int sign, Eigen::VectorXd& theta,
                           Eigen::VectorXd& p, const Eigen::MatrixXd* f = nullptr);

std::pair<Eigen::VectorXd, Eigen::VectorXd> momentum_flow(
    const MagneticFlowCache& cache, int sign, const Eigen::VectorXd& theta,
    const Eigen::VectorXd& p, const std::optional<Eigen::MatrixXd>& f = std::nullopt);

}  // namespace mhmc
