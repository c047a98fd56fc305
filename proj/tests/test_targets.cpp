#include "doctest.h"

#include "mhmc/errors.hpp"
#include "mhmc/targets.hpp"
#include "oracles.hpp"

#include <filesystem>
#include <fstream>
#include <random>

using namespace mhmc;

namespace {

double rel_error(const Eigen::VectorXd& got, const Eigen::VectorXd& ref) {
  return (got - ref).norm() / std::max(1.0, ref.norm());
}

void check_gradient_at(const TargetDensity& t, const Eigen::VectorXd& theta, double tol = 1e-4) {
  const Eigen::VectorXd fd =
      oracle::fd_gradient([&](const Eigen::VectorXd& x) { return t.potential(x); }, theta);
  CHECK(rel_error(t.gradient(theta), fd) <= tol);
}

}  // namespace

TEST_CASE("gaussian target") {
  SUBCASE("standard normal at the origin") {
    const auto t = gaussian_target(Eigen::VectorXd::Zero(3), Eigen::MatrixXd::Identity(3, 3));
    CHECK(t.potential(Eigen::VectorXd::Zero(3)) == 0.0);
    CHECK(t.gradient(Eigen::VectorXd::Zero(3)).norm() == 0.0);
  }
  SUBCASE("ill-conditioned 2D") {
    const auto t = gaussian_target(Eigen::VectorXd::Zero(2), Eigen::Vector2d(1e6, 1.0).asDiagonal());
    const Eigen::Vector2d g = t.gradient(Eigen::Vector2d(1e3, 1.0));
    CHECK(g[0] == doctest::Approx(1e-3).epsilon(1e-12));
    CHECK(g[1] == doctest::Approx(1.0).epsilon(1e-12));
  }
  SUBCASE("potential matches the log density up to a constant") {
    std::mt19937_64 gen(8);
    Eigen::MatrixXd a = Eigen::MatrixXd::Random(3, 3);
    const Eigen::MatrixXd cov = a * a.transpose() + Eigen::MatrixXd::Identity(3, 3);
    const Eigen::Vector3d mean(0.5, -1.0, 2.0);
    const auto t = gaussian_target(mean, cov);
    const double c0 = t.potential(mean) + std::log(oracle::gaussian_density(mean, mean, cov));
    for (int i = 0; i < 20; ++i) {
      const Eigen::VectorXd x = oracle::random_normal(3, gen);
      CHECK(t.potential(x) + std::log(oracle::gaussian_density(x, mean, cov)) ==
            doctest::Approx(c0).epsilon(1e-10));
      check_gradient_at(t, x);
    }
  }
  SUBCASE("rejects non-SPD covariances") {
    Eigen::Matrix2d bad;
    bad << 1.0, 2.0, 2.0, 1.0;
    CHECK_THROWS_AS(gaussian_target(Eigen::VectorXd::Zero(2), bad), NotSPD);
    Eigen::Matrix2d asym;
    asym << 1.0, 0.5, 0.0, 1.0;
    CHECK_THROWS_AS(gaussian_target(Eigen::VectorXd::Zero(2), asym), NotSPD);
  }
}

TEST_CASE("ten-dimensional multiscale gaussian gradients") {
  Eigen::VectorXd diag = Eigen::VectorXd::Ones(10);
  diag[0] = diag[1] = 1e6;
  std::mt19937_64 gen(1);
  Eigen::MatrixXd q = Eigen::MatrixXd::Random(10, 10).householderQr().householderQ();
  const Eigen::MatrixXd cov = q * diag.asDiagonal() * q.transpose();
  const auto t = gaussian_target(Eigen::VectorXd::Zero(10), 0.5 * (cov + cov.transpose()));
  for (int i = 0; i < 100; ++i) check_gradient_at(t, oracle::random_normal(10, gen));
}

TEST_CASE("mixture target") {
  const Eigen::Vector2d mu(2.5, -2.5);
  const Eigen::Matrix2d sigma = Eigen::Matrix2d::Identity();
  const auto t = mixture_target(mu, sigma);
  auto brute = [&](const Eigen::VectorXd& x) {
    return 0.5 * oracle::gaussian_density(x, mu, sigma) +
           0.5 * oracle::gaussian_density(x, -mu, sigma);
  };

  CHECK(t.gradient(Eigen::Vector2d::Zero()).norm() < 1e-15);
  CHECK(t.potential(mu) == doctest::Approx(-std::log(brute(mu))).epsilon(1e-12));
  const Eigen::VectorXd fd_mu = oracle::fd_gradient(
      [&](const Eigen::VectorXd& x) { return -std::log(brute(x)); }, mu, 1e-6);
  CHECK((t.gradient(mu) - fd_mu).norm() < 1e-8);

  std::mt19937_64 gen(17);
  std::uniform_real_distribution<double> u(-8.0, 8.0);
  for (int i = 0; i < 100; ++i) {
    const Eigen::Vector2d x(u(gen), u(gen));
    CHECK(std::exp(-t.potential(x)) == doctest::Approx(brute(x)).epsilon(1e-10));
    check_gradient_at(t, x);
  }
  // Far out in the tails the direct density underflows but U stays finite.
  const Eigen::Vector2d far(60.0, 60.0);
  CHECK(std::isfinite(t.potential(far)));
  CHECK(t.gradient(far).allFinite());
}

TEST_CASE("mixture density integrates to one over a 10 sigma box") {
  const Eigen::Vector2d mu(2.5, -2.5);
  const auto t = mixture_target(mu, Eigen::Matrix2d::Identity());
  const double half = 12.5;
  std::mt19937_64 gen(4242);
  std::uniform_real_distribution<double> u(-half, half);
  const int n = 1000000;
  double acc = 0.0;
  for (int i = 0; i < n; ++i) acc += std::exp(-t.potential(Eigen::Vector2d(u(gen), u(gen))));
  const double mass = acc / n * (2 * half) * (2 * half);
  CHECK(mass == doctest::Approx(1.0).epsilon(0.02));
}

TEST_CASE("funnel target") {
  const int n = 10;
  const auto t = funnel_target(n, 3.0);
  CHECK(t.dim() == n + 1);
  const Eigen::VectorXd g = t.gradient(Eigen::VectorXd::Zero(n + 1));
  CHECK(g.head(n).norm() == 0.0);
  CHECK(g[n] == doctest::Approx(-n / 2.0));

  std::mt19937_64 gen(23);
  std::normal_distribution<double> vdist(0.0, 1.5);
  for (int i = 0; i < 100; ++i) {
    Eigen::VectorXd x(n + 1);
    const double v = vdist(gen);
    x.head(n) = oracle::random_normal(n, gen) * std::exp(-0.5 * v);
    x[n] = v;
    check_gradient_at(t, x);
  }

  // U differences match the log density differences of the generative model.
  auto logp = [&](const Eigen::VectorXd& x) {
    double s = -0.5 * x[n] * x[n] / 9.0;
    for (int i = 0; i < n; ++i) s += -0.5 * std::exp(x[n]) * x[i] * x[i] + 0.5 * x[n];
    return s;
  };
  const Eigen::VectorXd a = Eigen::VectorXd::Constant(n + 1, 0.3);
  const Eigen::VectorXd b = Eigen::VectorXd::Constant(n + 1, -0.7);
  CHECK(t.potential(a) - t.potential(b) == doctest::Approx(logp(b) - logp(a)).epsilon(1e-12));
}

TEST_CASE("banana target") {
  SUBCASE("b = 0 is an axis-aligned gaussian") {
    const auto t = banana_target(0.0, 10.0);
    const auto g = gaussian_target(Eigen::VectorXd::Zero(2), Eigen::Vector2d(100.0, 1.0).asDiagonal());
    std::mt19937_64 gen(2);
    for (int i = 0; i < 10; ++i) {
      const Eigen::VectorXd x = oracle::random_normal(2, gen);
      CHECK(t.potential(x) == doctest::Approx(g.potential(x)).epsilon(1e-12));
    }
  }
  SUBCASE("gradients") {
    const double b = 0.1, s1 = 10.0;
    const auto t = banana_target(b, s1);
    CHECK(t.gradient(Eigen::Vector2d(0.0, b * s1 * s1))[0] == 0.0);
    std::mt19937_64 gen(3);
    for (int i = 0; i < 100; ++i) {
      Eigen::VectorXd x = oracle::random_normal(2, gen);
      x[0] *= s1;
      check_gradient_at(t, x);
    }
  }
}

TEST_CASE("FitzHugh-Nagumo vector field") {
  const Eigen::Vector2d f = fhn_rhs(FhnParams{}, -1.0, 1.0);
  CHECK(f[0] == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(f[1] == doctest::Approx(-(-1.0 - 0.2 + 0.2) / 3.0).epsilon(1e-15));
}

TEST_CASE("FitzHugh-Nagumo solution and sensitivities") {
  const auto times = evenly_spaced_times(200, 20.0);
  CHECK(times.size() == 200);
  CHECK(times.front() == 0.0);
  CHECK(times.back() == 20.0);

  const FhnParams p{};
  const auto sol = fhn_solve(p, -1.0, 1.0, times, 0.01);
  CHECK(sol.v[0] == -1.0);
  CHECK(sol.r[0] == 1.0);
  CHECK(sol.sens_v.row(0).norm() == 0.0);

  // Independent RK4 reference on the plain 2-state system.
  auto rhs = [&](const Eigen::VectorXd& x) -> Eigen::VectorXd {
    Eigen::VectorXd dx(2);
    dx[0] = p.c * (x[0] - x[0] * x[0] * x[0] / 3.0 + x[1]);
    dx[1] = -(x[0] - p.a + p.b * x[1]) / p.c;
    return dx;
  };
  const Eigen::VectorXd ref = oracle::rk4(rhs, Eigen::Vector2d(-1.0, 1.0), 20.0, 1e-4);
  CHECK(std::abs(sol.v[199] - ref[0]) < 1e-5);
  CHECK(std::abs(sol.r[199] - ref[1]) < 1e-5);

  const double h = 1e-5;
  for (int k = 0; k < 3; ++k) {
    FhnParams hi = p, lo = p;
    double* ph[] = {&hi.a, &hi.b, &hi.c};
    double* pl[] = {&lo.a, &lo.b, &lo.c};
    *ph[k] += h;
    *pl[k] -= h;
    const auto a = fhn_solve(hi, -1.0, 1.0, times, 0.01);
    const auto b = fhn_solve(lo, -1.0, 1.0, times, 0.01);
    const Eigen::VectorXd fd_v = (a.v - b.v) / (2 * h);
    const Eigen::VectorXd fd_r = (a.r - b.r) / (2 * h);
    CHECK((sol.sens_v.col(k) - fd_v).norm() / fd_v.norm() <= 1e-3);
    CHECK((sol.sens_r.col(k) - fd_r).norm() / fd_r.norm() <= 1e-3);
  }

  CHECK_THROWS_AS(fhn_solve(p, -1.0, 1.0, {0.0, 1.0, 0.5}, 0.01), Error);
  CHECK_THROWS_AS(fhn_solve(p, -1.0, 1.0, times, 0.0), Error);
}

TEST_CASE("FitzHugh-Nagumo RK4 convergence order") {
  const FhnParams p{};
  const std::vector<double> times{0.0, 2.0};
  std::vector<double> steps, errs;
  for (double dt : {0.2, 0.1, 0.05, 0.025}) {
    const auto a = fhn_solve(p, -1.0, 1.0, times, dt);
    const auto b = fhn_solve(p, -1.0, 1.0, times, dt / 2);
    steps.push_back(dt);
    errs.push_back(std::max(std::abs(a.v[1] - b.v[1]), std::abs(a.r[1] - b.r[1])));
  }
  const double slope = oracle::loglog_slope(steps, errs);
  CHECK(slope == doctest::Approx(4.0).epsilon(0.3 / 4.0));
}

TEST_CASE("FitzHugh-Nagumo posterior") {
  SUBCASE("no observations gives the prior") {
    FhnObservationSet obs;
    const auto t = fhn_posterior(obs);
    const Eigen::Vector3d th(0.3, -0.4, 2.0);
    CHECK(t.potential(th) == doctest::Approx(0.5 * th.squaredNorm()));
    CHECK((t.gradient(th) - th).norm() < 1e-15);
  }
  SUBCASE("gradient against finite differences") {
    const auto times = evenly_spaced_times(200, 20.0);
    const auto obs = synthesize_fhn_observations(FhnParams{}, times, 0.1, -1.0, 1.0, 0.01, 7);
    const auto t = fhn_posterior(obs);
    check_gradient_at(t, Eigen::Vector3d(0.2, 0.2, 3.0));
    std::mt19937_64 gen(5);
    std::uniform_real_distribution<double> ua(0.0, 0.5), uc(2.5, 3.5);
    for (int i = 0; i < 100; ++i) check_gradient_at(t, Eigen::Vector3d(ua(gen), ua(gen), uc(gen)));
  }
  SUBCASE("potential matches the direct likelihood sum") {
    const auto times = evenly_spaced_times(20, 5.0);
    const auto obs = synthesize_fhn_observations(FhnParams{}, times, 0.1, -1.0, 1.0, 0.01, 9);
    const auto t = fhn_posterior(obs);
    const FhnParams q{0.25, 0.1, 2.8};
    const auto sol = fhn_solve(q, -1.0, 1.0, times, 0.01);
    double u = 0.5 * (q.a * q.a + q.b * q.b + q.c * q.c);
    for (std::size_t i = 0; i < times.size(); ++i) {
      const double dv = obs.obs_v[i] - sol.v[static_cast<Eigen::Index>(i)];
      const double dr = obs.obs_r[i] - sol.r[static_cast<Eigen::Index>(i)];
      u += (dv * dv + dr * dr) / (2 * 0.01);
    }
    CHECK(t.potential(Eigen::Vector3d(q.a, q.b, q.c)) == doctest::Approx(u).epsilon(1e-12));
  }
}

TEST_CASE("observation sets validate and round-trip through CSV") {
  FhnObservationSet bad;
  bad.times = {0.0, 1.0};
  bad.obs_v = {0.0};
  bad.obs_r = {0.0, 0.0};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad.obs_v = {0.0, 0.0};
  bad.noise_sd = 0.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad.noise_sd = 0.1;
  bad.times = {1.0, 1.0};
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  const auto obs = synthesize_fhn_observations(FhnParams{}, evenly_spaced_times(10, 2.0), 0.1,
                                               -1.0, 1.0, 0.01, 1);
  const auto path = std::filesystem::temp_directory_path() / "mhmc_fhn_roundtrip.csv";
  save_fhn_csv(path, obs);
  const auto back = load_fhn_csv(path, 0.1, -1.0, 1.0);
  REQUIRE(back.times.size() == obs.times.size());
  for (std::size_t i = 0; i < obs.times.size(); ++i) {
    CHECK(back.times[i] == obs.times[i]);
    CHECK(back.obs_v[i] == obs.obs_v[i]);
    CHECK(back.obs_r[i] == obs.obs_r[i]);
  }

  {
    std::ofstream f(path);
    f << "time,v,r\n0,1,2\n";
  }
  CHECK_THROWS_AS(load_fhn_csv(path, 0.1, -1.0, 1.0), ConfigError);
  {
    std::ofstream f(path);
    f << "t,v,r\n0,1\n";
  }
  CHECK_THROWS_AS(load_fhn_csv(path, 0.1, -1.0, 1.0), ConfigError);
  std::filesystem::remove(path);
}
