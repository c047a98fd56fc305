#include "mhmc/targets.hpp"

#include "mhmc/errors.hpp"
#include "mhmc/rng.hpp"

#include <cmath>
#include <fstream>
#include <memory>
#include <sstream>

namespace mhmc {

TargetDensity::TargetDensity(std::string name, int dim, PotentialFn potential,
                             GradientFn gradient)
    : name_(std::move(name)),
      dim_(dim),
      potential_(std::move(potential)),
      gradient_(std::move(gradient)) {
  if (dim <= 0) throw Error("target dimension must be positive");
}

namespace {

Eigen::LLT<Eigen::MatrixXd> spd_factor(const Eigen::MatrixXd& m, const char* what) {
  if (m.rows() != m.cols()) {
    throw NotSPD(std::string(what) + " must be square");
  }
  const double scale = std::max(1.0, m.cwiseAbs().maxCoeff());
  if ((m - m.transpose()).cwiseAbs().maxCoeff() > 1e-12 * scale) {
    throw NotSPD(std::string(what) + " is not symmetric");
  }
  Eigen::LLT<Eigen::MatrixXd> llt(m);
  if (llt.info() != Eigen::Success) {
    throw NotSPD(std::string(what) + " is not positive definite");
  }
  return llt;
}

}  // namespace

TargetDensity gaussian_target(const Eigen::VectorXd& mean, const Eigen::MatrixXd& covariance) {
  if (covariance.rows() != mean.size()) {
    throw DimensionMismatch("gaussian_target: mean and covariance sizes differ");
  }
  auto llt = spd_factor(covariance, "covariance");
  const int d = static_cast<int>(mean.size());
  const Eigen::MatrixXd precision = llt.solve(Eigen::MatrixXd::Identity(d, d));
  auto potential = [mean, precision](const Eigen::VectorXd& theta) {
    const Eigen::VectorXd z = theta - mean;
    return 0.5 * z.dot(precision * z);
  };
  auto gradient = [mean, precision](const Eigen::VectorXd& theta, Eigen::VectorXd& out) {
    out.noalias() = precision * (theta - mean);
  };
  return TargetDensity("gaussian", d, potential, gradient);
}

TargetDensity mixture_target(const Eigen::VectorXd& mu, const Eigen::MatrixXd& sigma) {
  if (sigma.rows() != mu.size()) {
    throw DimensionMismatch("mixture_target: mean and covariance sizes differ");
  }
  auto llt = spd_factor(sigma, "covariance");
  const int d = static_cast<int>(mu.size());
  const Eigen::MatrixXd precision = llt.solve(Eigen::MatrixXd::Identity(d, d));
  const Eigen::MatrixXd l = llt.matrixL();
  const double log_det = 2.0 * l.diagonal().array().log().sum();
  // -log of ½ times the Gaussian normaliser.
  const double log_norm = std::log(2.0) + 0.5 * d * std::log(2.0 * M_PI) + 0.5 * log_det;

  auto potential = [mu, precision, log_norm](const Eigen::VectorXd& theta) {
    const Eigen::VectorXd a = theta - mu;
    const Eigen::VectorXd b = theta + mu;
    const double qa = 0.5 * a.dot(precision * a);
    const double qb = 0.5 * b.dot(precision * b);
    const double m = std::min(qa, qb);
    return log_norm + m - std::log(std::exp(m - qa) + std::exp(m - qb));
  };
  auto gradient = [mu, precision](const Eigen::VectorXd& theta, Eigen::VectorXd& out) {
    const Eigen::VectorXd a = theta - mu;
    const Eigen::VectorXd b = theta + mu;
    const Eigen::VectorXd pa = precision * a;
    const Eigen::VectorXd pb = precision * b;
    const double qa = 0.5 * a.dot(pa);
    const double qb = 0.5 * b.dot(pb);
    // Responsibility of the +μ component, computed as a logistic of the
    // log-ratio so neither weight underflows to 0/0.
    const double wa = 1.0 / (1.0 + std::exp(qa - qb));
    out = wa * pa + (1.0 - wa) * pb;
  };
  return TargetDensity("mixture", d, potential, gradient);
}

TargetDensity funnel_target(int n, double v_sd) {
  if (n < 1) throw Error("funnel_target: n must be at least 1");
  if (!(v_sd > 0.0)) throw Error("funnel_target: v_sd must be positive");
  const double inv_var = 1.0 / (v_sd * v_sd);
  auto potential = [n, inv_var](const Eigen::VectorXd& theta) {
    const double v = theta[n];
    const double sq = theta.head(n).squaredNorm();
    return 0.5 * std::exp(v) * sq - 0.5 * n * v + 0.5 * v * v * inv_var;
  };
  auto gradient = [n, inv_var](const Eigen::VectorXd& theta, Eigen::VectorXd& out) {
    const double v = theta[n];
    const double ev = std::exp(v);
    out.resize(n + 1);
    out.head(n) = ev * theta.head(n);
    out[n] = 0.5 * ev * theta.head(n).squaredNorm() - 0.5 * n + v * inv_var;
  };
  return TargetDensity("funnel", n + 1, potential, gradient);
}

TargetDensity banana_target(double b, double sigma1) {
  if (!(sigma1 > 0.0)) throw Error("banana_target: sigma1 must be positive");
  const double s2 = sigma1 * sigma1;
  auto potential = [b, s2](const Eigen::VectorXd& t) {
    const double w = t[1] + b * t[0] * t[0] - b * s2;
    return 0.5 * (t[0] * t[0] / s2 + w * w);
  };
  auto gradient = [b, s2](const Eigen::VectorXd& t, Eigen::VectorXd& out) {
    const double w = t[1] + b * t[0] * t[0] - b * s2;
    out.resize(2);
    out[0] = t[0] / s2 + 2.0 * b * t[0] * w;
    out[1] = w;
  };
  return TargetDensity("banana", 2, potential, gradient);
}

// FitzHugh-Nagumo ------------------------------------------------------------

Eigen::Vector2d fhn_rhs(const FhnParams& q, double v, double r) {
  return {q.c * (v - v * v * v / 3.0 + r), -(v - q.a + q.b * r) / q.c};
}

namespace {

using State8 = Eigen::Matrix<double, 8, 1>;

// Layout: V, R, ∂V/∂(a,b,c), ∂R/∂(a,b,c).
State8 augmented_rhs(const FhnParams& q, const State8& y) {
  const double v = y[0], r = y[1];
  const double inner = v - v * v * v / 3.0 + r;
  const double lin = v - q.a + q.b * r;
  const double j11 = q.c * (1.0 - v * v), j12 = q.c;
  const double j21 = -1.0 / q.c, j22 = -q.b / q.c;
  const double dfv[3] = {0.0, 0.0, inner};
  const double dfr[3] = {1.0 / q.c, -r / q.c, lin / (q.c * q.c)};
  State8 out;
  out[0] = q.c * inner;
  out[1] = -lin / q.c;
  for (int k = 0; k < 3; ++k) {
    out[2 + k] = j11 * y[2 + k] + j12 * y[5 + k] + dfv[k];
    out[5 + k] = j21 * y[2 + k] + j22 * y[5 + k] + dfr[k];
  }
  return out;
}

Eigen::Vector2d plain_rhs(const FhnParams& q, const Eigen::Vector2d& y) {
  return fhn_rhs(q, y[0], y[1]);
}

template <typename Vec, typename Rhs>
void rk4_advance(Vec& y, double h, int n_steps, const Rhs& rhs) {
  for (int s = 0; s < n_steps; ++s) {
    const Vec k1 = rhs(y);
    const Vec k2 = rhs(y + 0.5 * h * k1);
    const Vec k3 = rhs(y + 0.5 * h * k2);
    const Vec k4 = rhs(y + h * k3);
    y += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
  }
}

void check_solve_args(const std::vector<double>& times, double dt) {
  if (!(dt > 0.0)) throw Error("fhn_solve: dt must be positive");
  double prev = 0.0;
  for (std::size_t i = 0; i < times.size(); ++i) {
    if (times[i] < prev || (i > 0 && times[i] <= prev)) {
      throw Error("fhn_solve: times must be nonnegative and strictly increasing");
    }
    prev = times[i];
  }
}

int substeps(double gap, double dt) {
  if (gap <= 0.0) return 0;
  return std::max(1, static_cast<int>(std::ceil(gap / dt - 1e-9)));
}

template <typename Vec, typename Rhs, typename Record>
void integrate_to_times(Vec y, const std::vector<double>& times, double dt, const Rhs& rhs,
                        const Record& record) {
  double t = 0.0;
  for (std::size_t n = 0; n < times.size(); ++n) {
    const int m = substeps(times[n] - t, dt);
    if (m > 0) rk4_advance(y, (times[n] - t) / m, m, rhs);
    t = times[n];
    if (!y.allFinite()) {
      throw NonFinite("FitzHugh-Nagumo solution diverged");
    }
    record(n, y);
  }
}

}  // namespace

FhnTrajectory fhn_solve(const FhnParams& params, double init_v, double init_r,
                        const std::vector<double>& times, double dt) {
  check_solve_args(times, dt);
  const int n = static_cast<int>(times.size());
  FhnTrajectory out;
  out.times = times;
  out.v.resize(n);
  out.r.resize(n);
  out.sens_v.resize(n, 3);
  out.sens_r.resize(n, 3);
  State8 y0 = State8::Zero();
  y0[0] = init_v;
  y0[1] = init_r;
  integrate_to_times(
      y0, times, dt, [&](const State8& y) { return augmented_rhs(params, y); },
      [&](std::size_t k, const State8& y) {
        out.v[k] = y[0];
        out.r[k] = y[1];
        out.sens_v.row(k) = y.segment<3>(2).transpose();
        out.sens_r.row(k) = y.segment<3>(5).transpose();
      });
  return out;
}

void FhnObservationSet::validate() const {
  if (obs_v.size() != times.size() || obs_r.size() != times.size()) {
    throw ConfigError("observation lists must share one length");
  }
  for (std::size_t i = 1; i < times.size(); ++i) {
    if (!(times[i] > times[i - 1])) throw ConfigError("observation times must be increasing");
  }
  if (!times.empty() && times[0] < 0.0) throw ConfigError("observation times must be >= 0");
  if (!(noise_sd > 0.0)) throw ConfigError("noise_sd must be positive");
}

std::vector<double> evenly_spaced_times(int n, double t_end) {
  std::vector<double> t(static_cast<std::size_t>(std::max(n, 0)));
  for (int k = 0; k < n; ++k) {
    t[static_cast<std::size_t>(k)] = n == 1 ? 0.0 : t_end * k / (n - 1);
  }
  return t;
}

FhnObservationSet synthesize_fhn_observations(const FhnParams& truth,
                                              const std::vector<double>& times, double noise_sd,
                                              double init_v, double init_r, double dt,
                                              std::uint64_t seed) {
  const FhnTrajectory traj = fhn_solve(truth, init_v, init_r, times, dt);
  Rng rng(seed, 0);
  FhnObservationSet obs;
  obs.times = times;
  obs.noise_sd = noise_sd;
  obs.initial_v = init_v;
  obs.initial_r = init_r;
  for (std::size_t i = 0; i < times.size(); ++i) {
    const double ev = rng.normal();
    const double er = rng.normal();
    obs.obs_v.push_back(traj.v[static_cast<Eigen::Index>(i)] + noise_sd * ev);
    obs.obs_r.push_back(traj.r[static_cast<Eigen::Index>(i)] + noise_sd * er);
  }
  return obs;
}

FhnObservationSet load_fhn_csv(const std::filesystem::path& path, double noise_sd, double init_v,
                               double init_r) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open observation file " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw ConfigError(path.string() + ": empty observation file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "t,v,r") {
    throw ConfigError(path.string() + ":1: expected header 't,v,r'");
  }
  FhnObservationSet obs;
  obs.noise_sd = noise_sd;
  obs.initial_v = init_v;
  obs.initial_r = init_r;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    std::istringstream row(line);
    double t = 0, v = 0, r = 0;
    char c1 = 0, c2 = 0;
    if (!(row >> t >> c1 >> v >> c2 >> r) || c1 != ',' || c2 != ',') {
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": malformed row");
    }
    obs.times.push_back(t);
    obs.obs_v.push_back(v);
    obs.obs_r.push_back(r);
  }
  obs.validate();
  return obs;
}

void save_fhn_csv(const std::filesystem::path& path, const FhnObservationSet& obs) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out.precision(17);
  out << "t,v,r\n";
  for (std::size_t i = 0; i < obs.times.size(); ++i) {
    out << obs.times[i] << ',' << obs.obs_v[i] << ',' << obs.obs_r[i] << '\n';
  }
}

TargetDensity fhn_posterior(FhnObservationSet obs, double dt) {
  obs.validate();
  if (!(dt > 0.0)) throw Error("fhn_posterior: dt must be positive");
  auto shared = std::make_shared<const FhnObservationSet>(std::move(obs));
  auto potential = [shared, dt](const Eigen::VectorXd& theta) {
    const FhnObservationSet& o = *shared;
    const FhnParams q{theta[0], theta[1], theta[2]};
    const double inv2s2 = 1.0 / (2.0 * o.noise_sd * o.noise_sd);
    double u = 0.5 * theta.squaredNorm();
    Eigen::Vector2d y0(o.initial_v, o.initial_r);
    integrate_to_times(
        y0, o.times, dt, [&](const Eigen::Vector2d& y) { return plain_rhs(q, y); },
        [&](std::size_t k, const Eigen::Vector2d& y) {
          const double ev = o.obs_v[k] - y[0];
          const double er = o.obs_r[k] - y[1];
          u += (ev * ev + er * er) * inv2s2;
        });
    return u;
  };
  auto gradient = [shared, dt](const Eigen::VectorXd& theta, Eigen::VectorXd& out) {
    const FhnObservationSet& o = *shared;
    const FhnParams q{theta[0], theta[1], theta[2]};
    const double inv_s2 = 1.0 / (o.noise_sd * o.noise_sd);
    out = theta;
    State8 y0 = State8::Zero();
    y0[0] = o.initial_v;
    y0[1] = o.initial_r;
    integrate_to_times(
        y0, o.times, dt, [&](const State8& y) { return augmented_rhs(q, y); },
        [&](std::size_t k, const State8& y) {
          const double ev = o.obs_v[k] - y[0];
          const double er = o.obs_r[k] - y[1];
          for (int j = 0; j < 3; ++j) {
            out[j] -= (ev * y[2 + j] + er * y[5 + j]) * inv_s2;
          }
        });
  };
  return TargetDensity("fhn", 3, potential, gradient);
}

}  // namespace mhmc
