#include "mhmc/diagnostics.hpp"

#include "mhmc/errors.hpp"

#include <unsupported/Eigen/FFT>

#include <algorithm>
#include <cmath>
#include <complex>

namespace mhmc {

namespace {

// Autocovariance sums c_k = Σ_t (x_t - x̄)(x_{t+k} - x̄) for k = 0..n-1 via a
// zero-padded FFT.
std::vector<double> autocovariance_sums(const Eigen::VectorXd& x) {
  const std::size_t n = static_cast<std::size_t>(x.size());
  std::size_t padded = 1;
  while (padded < 2 * n) padded <<= 1;
  const double mean = x.mean();
  std::vector<double> buf(padded, 0.0);
  for (std::size_t i = 0; i < n; ++i) buf[i] = x[static_cast<Eigen::Index>(i)] - mean;

  Eigen::FFT<double> fft;
  std::vector<std::complex<double>> spec;
  fft.fwd(spec, buf);
  for (auto& c : spec) c = std::complex<double>(std::norm(c), 0.0);
  std::vector<double> acov;
  fft.inv(acov, spec);
  acov.resize(n);
  return acov;
}

std::vector<double> normalised_autocorrelation(const Eigen::VectorXd& x) {
  std::vector<double> c = autocovariance_sums(x);
  const double c0 = c.front();
  if (!(c0 > 0.0) || !std::isfinite(c0)) throw ZeroVariance("chain has zero variance");
  for (double& v : c) v /= c0;
  c[0] = 1.0;
  return c;
}

}  // namespace

std::vector<double> coordinate_autocorrelation(const Eigen::VectorXd& x, int max_lag) {
  if (max_lag < 0 || x.size() <= max_lag) {
    throw Error("autocorrelation needs more draws than the maximum lag");
  }
  std::vector<double> rho = normalised_autocorrelation(x);
  rho.resize(static_cast<std::size_t>(max_lag) + 1);
  return rho;
}

std::vector<double> autocorrelation(const Eigen::MatrixXd& chain, int max_lag) {
  if (chain.cols() == 0) throw Error("autocorrelation of an empty chain");
  std::vector<double> avg(static_cast<std::size_t>(max_lag) + 1, 0.0);
  for (Eigen::Index j = 0; j < chain.cols(); ++j) {
    const std::vector<double> rho = coordinate_autocorrelation(chain.col(j), max_lag);
    for (std::size_t k = 0; k < avg.size(); ++k) avg[k] += rho[k];
  }
  for (double& v : avg) v /= static_cast<double>(chain.cols());
  return avg;
}

double effective_sample_size(const Eigen::VectorXd& x) {
  const auto n = x.size();
  if (n == 0) throw Error("effective sample size of an empty chain");
  if (n == 1) return 1.0;
  const std::vector<double> rho = normalised_autocorrelation(x);

  // Geyer's initial positive sequence: sum pairs Γ_m = ρ_2m + ρ_2m+1 while
  // they stay positive.
  double tau = -1.0;
  for (std::size_t m = 0; 2 * m + 1 < rho.size(); ++m) {
    const double gamma = rho[2 * m] + rho[2 * m + 1];
    if (!(gamma > 0.0)) break;
    tau += 2.0 * gamma;
  }
  const double ess = static_cast<double>(n) / tau;
  return std::clamp(ess, 1.0, static_cast<double>(n));
}

double effective_sample_size(const Eigen::MatrixXd& chain, int coordinate) {
  if (coordinate < 0 || coordinate >= chain.cols()) throw Error("coordinate out of range");
  return effective_sample_size(Eigen::VectorXd(chain.col(coordinate)));
}

double quadratic_kernel(const Eigen::VectorXd& x, const Eigen::VectorXd& y) {
  const double k = 1.0 + x.dot(y);
  return k * k;
}

double mmd_squared(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y) {
  if (x.rows() == 0 || y.rows() == 0) throw Error("mmd_squared needs nonempty samples");
  if (x.cols() != y.cols()) throw DimensionMismatch("mmd_squared: sample dimensions differ");
  const Eigen::VectorXd mx = x.colwise().mean().transpose();
  const Eigen::VectorXd my = y.colwise().mean().transpose();
  const Eigen::MatrixXd sx = (x.transpose() * x) / static_cast<double>(x.rows());
  const Eigen::MatrixXd sy = (y.transpose() * y) / static_cast<double>(y.rows());
  return 2.0 * (mx - my).squaredNorm() + (sx - sy).squaredNorm();
}

BiasMcse bias_and_mcse(const std::vector<Eigen::MatrixXd>& chains,
                       const std::function<double(const Eigen::VectorXd&)>& moment,
                       double truth) {
  if (chains.size() < 2) throw TooFewChains("bias_and_mcse needs at least two chains");
  Eigen::VectorXd per_chain(static_cast<Eigen::Index>(chains.size()));
  for (std::size_t c = 0; c < chains.size(); ++c) {
    const Eigen::MatrixXd& ch = chains[c];
    if (ch.rows() == 0) throw Error("bias_and_mcse: empty chain");
    double acc = 0.0;
    for (Eigen::Index i = 0; i < ch.rows(); ++i) acc += moment(ch.row(i).transpose());
    per_chain[static_cast<Eigen::Index>(c)] = acc / static_cast<double>(ch.rows());
  }
  const double m = static_cast<double>(chains.size());
  const double mean = per_chain.mean();
  const double var = (per_chain.array() - mean).square().sum() / (m - 1.0);
  return {std::abs(mean - truth), std::sqrt(var / m), mean};
}

}  // namespace mhmc
