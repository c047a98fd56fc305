#pragma once

#include <Eigen/Dense>

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace mhmc {

/// A potential U(θ) = -log ρ(θ) + const together with its gradient.
///
/// Both callables must be pure; a TargetDensity is shared read-only across
/// chain threads.
class TargetDensity {
 public:
  using PotentialFn = std::function<double(const Eigen::VectorXd&)>;
  using GradientFn = std::function<void(const Eigen::VectorXd&, Eigen::VectorXd&)>;

  TargetDensity(std::string name, int dim, PotentialFn potential, GradientFn gradient);

  const std::string& name() const { return name_; }
  int dim() const { return dim_; }

  double potential(const Eigen::VectorXd& theta) const { return potential_(theta); }
  void gradient(const Eigen::VectorXd& theta, Eigen::VectorXd& out) const {
    gradient_(theta, out);
  }
  Eigen::VectorXd gradient(const Eigen::VectorXd& theta) const {
    Eigen::VectorXd g(dim_);
    gradient_(theta, g);
    return g;
  }

 private:
  std::string name_;
  int dim_;
  PotentialFn potential_;
  GradientFn gradient_;
};

/// U = ½(θ-μ)ᵀΣ⁻¹(θ-μ). Throws NotSPD.
TargetDensity gaussian_target(const Eigen::VectorXd& mean, const Eigen::MatrixXd& covariance);

/// ρ = ½N(μ, Σ) + ½N(-μ, Σ), including normalising constants so that
/// exp(-U) is the mixture density itself. Throws NotSPD.
TargetDensity mixture_target(const Eigen::VectorXd& mu, const Eigen::MatrixXd& sigma);

/// Neal's funnel over (x₁..x_n, v), v last: x_i ~ N(0, e^{-v}), v ~ N(0, v_sd²).
TargetDensity funnel_target(int n, double v_sd);

/// Haario's twisted Gaussian:
/// U = ½(θ₁²/σ₁² + (θ₂ + bθ₁² - bσ₁²)²).
TargetDensity banana_target(double b, double sigma1);

// FitzHugh-Nagumo ------------------------------------------------------------

struct FhnParams {
  double a = 0.2;
  double b = 0.2;
  double c = 3.0;
};

/// Vector field of V̇ = c(V - V³/3 + R), Ṙ = -(V - a + bR)/c.
Eigen::Vector2d fhn_rhs(const FhnParams& params, double v, double r);

/// Solution at each requested time plus forward sensitivities. Row n of
/// `sens_v` is ∂V(tₙ)/∂(a, b, c); likewise `sens_r`.
struct FhnTrajectory {
  std::vector<double> times;
  Eigen::VectorXd v;
  Eigen::VectorXd r;
  Eigen::MatrixXd sens_v;
  Eigen::MatrixXd sens_r;
};

/// Classic RK4 on the 8-state (V, R, sensitivities) system from t = 0 with
/// the given initial state. Each gap between requested times is split into
/// ceil(gap / dt) equal steps so every time is hit exactly. Throws NonFinite
/// if the state blows up and Error on bad arguments.
FhnTrajectory fhn_solve(const FhnParams& params, double init_v, double init_r,
                        const std::vector<double>& times, double dt);

struct FhnObservationSet {
  std::vector<double> times;
  std::vector<double> obs_v;
  std::vector<double> obs_r;
  double noise_sd = 0.1;
  double initial_v = -1.0;
  double initial_r = 1.0;

  /// Throws ConfigError when lengths differ, times are not increasing or
  /// noise_sd is not positive.
  void validate() const;
};

/// Evenly spaced times t_k = t_end·k/(n-1), k = 0..n-1.
std::vector<double> evenly_spaced_times(int n, double t_end);

/// Simulates noisy observations from the model with iid N(0, noise_sd²)
/// noise on both states.
FhnObservationSet synthesize_fhn_observations(const FhnParams& truth,
                                              const std::vector<double>& times, double noise_sd,
                                              double init_v, double init_r, double dt,
                                              std::uint64_t seed);

/// CSV with header `t,v,r`. The noise and initial state are not part of the
/// file and must be supplied.
FhnObservationSet load_fhn_csv(const std::filesystem::path& path, double noise_sd, double init_v,
                               double init_r);
void save_fhn_csv(const std::filesystem::path& path, const FhnObservationSet& obs);

/// Posterior over (a, b, c) with independent N(0, 1) priors and Gaussian
/// observation noise on V and R.
TargetDensity fhn_posterior(FhnObservationSet obs, double dt = 0.01);

}  // namespace mhmc
