#pragma once

#include <Eigen/Dense>

#include <functional>
#include <vector>

namespace mhmc {

// Chains are N x d matrices, one row per draw.

/// Normalised empirical autocorrelation of one coordinate for lags
/// 0..max_lag (biased autocovariance over the lag-0 value, so |ρ_k| <= 1).
/// Throws ZeroVariance.
std::vector<double> coordinate_autocorrelation(const Eigen::VectorXd& x, int max_lag);

/// Per-lag autocorrelation averaged over coordinates. Requires
/// N > max_lag. Throws ZeroVariance.
std::vector<double> autocorrelation(const Eigen::MatrixXd& chain, int max_lag);

/// N / (1 + 2Σρ_k) with Geyer's initial positive sequence, clipped to [1, N].
double effective_sample_size(const Eigen::VectorXd& x);
double effective_sample_size(const Eigen::MatrixXd& chain, int coordinate);

/// Squared MMD with the kernel k(x, y) = (1 + ⟨x, y⟩)², biased (V-statistic)
/// form. The kernel's feature map is finite, so this is evaluated in
/// O((n + m) d²) as 2‖m_X - m_Y‖² + ‖S_X - S_Y‖²_F with m the sample means
/// and S the second-moment matrices. Throws DimensionMismatch or Error on
/// empty input.
double mmd_squared(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y);

/// The quadratic kernel itself.
double quadratic_kernel(const Eigen::VectorXd& x, const Eigen::VectorXd& y);

struct BiasMcse {
  double bias;
  double mcse;
  double estimate;  ///< mean over chains of the per-chain estimates
};

/// Per-chain mean of moment(row), then bias = |mean over chains - truth| and
/// mcse = sd(per-chain means) / sqrt(#chains). Throws TooFewChains.
BiasMcse bias_and_mcse(const std::vector<Eigen::MatrixXd>& chains,
                       const std::function<double(const Eigen::VectorXd&)>& moment,
                       double truth);

/// Summary over a set of chains.
struct ChainDiagnostics {
  std::vector<double> autocorr;  ///< averaged over coordinates and chains
  Eigen::VectorXd ess;           ///< per coordinate, averaged over chains
  double mean_acceptance = 0.0;
};

}  // namespace mhmc
