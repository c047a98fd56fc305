#include "doctest.h"

#include "mhmc/diagnostics.hpp"
#include "mhmc/errors.hpp"
#include "mhmc/samplers.hpp"
#include "oracles.hpp"

#include <random>

using namespace mhmc;

namespace {

TargetDensity isotropic(int d) {
  return gaussian_target(Eigen::VectorXd::Zero(d), Eigen::MatrixXd::Identity(d, d));
}

TargetDensity flat(int d) {
  return TargetDensity(
      "flat", d, [](const Eigen::VectorXd&) { return 0.0; },
      [](const Eigen::VectorXd& x, Eigen::VectorXd& g) { g.setZero(x.size()); });
}

AntisymmetricMatrix planar(double g) {
  Eigen::Matrix2d m;
  m << 0.0, -g, g, 0.0;
  return validate_antisymmetric(m);
}

SamplerConfig config(double eps, int l, int n, std::uint64_t seed, AntisymmetricMatrix g) {
  SamplerConfig cfg;
  cfg.epsilon = eps;
  cfg.n_leapfrog = l;
  cfg.n_samples = n;
  cfg.seed = seed;
  cfg.g_matrix = std::move(g);
  return cfg;
}

Eigen::MatrixXd funnel_g(double g) {
  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(11, 11);
  for (int i = 0; i < 10; ++i) {
    m(10, i) = g;
    m(i, 10) = -g;
  }
  return m;
}

}  // namespace

TEST_CASE("sampler kind names") {
  CHECK(sampler_kind_from_string("mhmc") == SamplerKind::mhmc);
  CHECK(std::string(to_string(SamplerKind::preconditioned)) == "preconditioned");
  CHECK_THROWS_AS(sampler_kind_from_string("nuts"), ConfigError);
}

TEST_CASE("free particle proposals are always accepted") {
  const auto t = flat(2);
  const auto cfg = config(0.3, 7, 200, 1, planar(0.5));
  const auto r = run_chain(t, Eigen::Vector2d(0.1, 0.2), cfg, SamplerKind::mhmc);
  CHECK(r.acceptance_rate == 1.0);
  for (const auto& rec : r.records) {
    CHECK(std::abs(rec.energy_error) < 1e-12);
    CHECK(rec.g_sign_after == 1);
  }
}

TEST_CASE("g sign is kept on acceptance and flipped on rejection") {
  const auto t = mixture_target(Eigen::Vector2d(2.5, -2.5), Eigen::Matrix2d::Identity());
  const auto cfg = config(1.9, 40, 2000, 3, planar(0.3));
  const auto r = run_chain(t, Eigen::Vector2d(2.5, -2.5), cfg, SamplerKind::mhmc);
  int prev = +1;
  int rejections = 0;
  for (const auto& rec : r.records) {
    if (rec.accepted) {
      CHECK(rec.g_sign_after == prev);
    } else {
      CHECK(rec.g_sign_after == -prev);
      ++rejections;
    }
    prev = rec.g_sign_after;
  }
  CHECK(rejections > 0);
  CHECK(rejections < 2000);

  // Single step with the sign carried in the state.
  Rng rng(5);
  ChainState s{Eigen::Vector2d(2.5, -2.5), Eigen::Vector2d::Zero(), -1};
  const auto tr = mhmc_step(t, s, cfg, rng);
  CHECK(tr.state.g_sign == (tr.record.accepted ? -1 : 1));
  CHECK(tr.record.g_sign_after == tr.state.g_sign);
}

TEST_CASE("rejected step keeps the position and stores the negated momentum") {
  const auto t = isotropic(2);
  // A huge step makes the proposal essentially always rejected.
  const auto cfg = config(50.0, 3, 1, 0, planar(0.2));
  Rng rng(2);
  const ChainState s{Eigen::Vector2d(0.3, -0.1), Eigen::Vector2d::Zero(), +1};
  Rng probe(2);
  Eigen::VectorXd p0(2);
  probe.fill_normal(p0);
  const auto tr = mhmc_step(t, s, cfg, rng);
  REQUIRE_FALSE(tr.record.accepted);
  CHECK(tr.state.theta == s.theta);
  CHECK(tr.state.p == -p0);
  CHECK(tr.state.g_sign == -1);
}

TEST_CASE("MHMC with G = 0 reproduces HMC bit for bit") {
  const auto t = mixture_target(Eigen::Vector2d(2.5, -2.5), Eigen::Matrix2d::Identity());
  const auto cfg = config(1.5, 33, 1000, 11, AntisymmetricMatrix::zero(2));
  const auto a = run_chain(t, Eigen::Vector2d(0.0, 0.0), cfg, SamplerKind::hmc);
  const auto b = run_chain(t, Eigen::Vector2d(0.0, 0.0), cfg, SamplerKind::mhmc);
  REQUIRE(a.records.size() == b.records.size());
  double worst = 0.0;
  for (std::size_t i = 0; i < a.records.size(); ++i) {
    worst = std::max(worst, (a.records[i].theta - b.records[i].theta).cwiseAbs().maxCoeff());
    CHECK(a.records[i].accepted == b.records[i].accepted);
  }
  CHECK(worst <= 1e-15);
  CHECK(a.acceptance_rate == b.acceptance_rate);
}

TEST_CASE("HMC single proposal follows the leapfrog hand example") {
  // With L = 1 the proposal is one leapfrog step from the drawn momentum.
  const auto t = isotropic(1);
  const auto cfg = config(0.1, 1, 1, 9, AntisymmetricMatrix::zero(1));
  Rng probe(9);
  Eigen::VectorXd p0(1);
  probe.fill_normal(p0);
  const double u = probe.uniform();
  Rng rng(9);
  const auto tr = hmc_step(t, ChainState{Eigen::VectorXd::Constant(1, 1.0), Eigen::VectorXd::Zero(1), 1},
                           cfg, rng);
  const double ph = p0[0] - 0.05 * 1.0;
  const double th = 1.0 + 0.1 * ph;
  const double p1 = ph - 0.05 * th;
  const double dh = 0.5 * (th * th + p1 * p1) - 0.5 * (1.0 + p0[0] * p0[0]);
  CHECK(tr.record.energy_error == doctest::Approx(dh).epsilon(1e-12));
  CHECK(tr.record.accepted == (u < std::exp(-dh)));
  if (tr.record.accepted) CHECK(tr.state.theta[0] == doctest::Approx(th).epsilon(1e-15));
}

TEST_CASE("proposal map is an involution") {
  std::mt19937_64 gen(123);
  std::uniform_int_distribution<int> sign_d(0, 1);
  const auto gauss = isotropic(2);
  const auto mix = mixture_target(Eigen::Vector2d(2.5, -2.5), Eigen::Matrix2d::Identity());
  const auto funnel = funnel_target(10, 3.0);
  std::normal_distribution<double> vdist(0.0, 1.0);
  for (int l : {1, 10, 100}) {
    for (int c = 0; c < 100; ++c) {
      const int which = c % 3;
      const TargetDensity& t = which == 0 ? gauss : which == 1 ? mix : funnel;
      const int d = t.dim();
      const auto g = which == 2 ? validate_antisymmetric(funnel_g(0.2))
                                : validate_antisymmetric(oracle::random_antisymmetric(d, gen));
      const auto icfg = IntegratorConfig::magnetic(g, which == 2 ? 0.05 : 0.1, l);
      ChainState x{oracle::random_normal(d, gen), oracle::random_normal(d, gen),
                   sign_d(gen) ? 1 : -1};
      if (which == 2) x.theta[10] = vdist(gen);
      const ChainState y = proposal_map(t, x, icfg);
      const ChainState z = proposal_map(t, y, icfg);
      const double scale = std::max({1.0, x.theta.norm(), x.p.norm()});
      CHECK((z.theta - x.theta).norm() / scale <= 1e-10);
      CHECK((z.p - x.p).norm() / scale <= 1e-10);
      CHECK(z.g_sign == x.g_sign);
      CHECK(y.g_sign == -x.g_sign);
    }
  }
}

TEST_CASE("chains are deterministic and n_samples = 0 is empty") {
  const auto t = banana_target(0.1, 10.0);
  auto cfg = config(0.5, 10, 300, 77, planar(0.2));
  const auto a = run_chain(t, Eigen::Vector2d(1, 0), cfg, SamplerKind::mhmc, 4);
  const auto b = run_chain(t, Eigen::Vector2d(1, 0), cfg, SamplerKind::mhmc, 4);
  for (std::size_t i = 0; i < a.records.size(); ++i) {
    CHECK(a.records[i].theta == b.records[i].theta);
    CHECK(a.records[i].iteration == static_cast<long>(i));
  }
  const auto c = run_chain(t, Eigen::Vector2d(1, 0), cfg, SamplerKind::mhmc, 5);
  CHECK(c.records.back().theta != a.records.back().theta);

  cfg.n_samples = 0;
  const auto e = run_chain(t, Eigen::Vector2d(1, 0), cfg, SamplerKind::mhmc);
  CHECK(e.records.empty());
  CHECK(e.acceptance_rate == 0.0);
  CHECK(e.positions().size() == 0);
}

TEST_CASE("config validation") {
  const auto t = isotropic(2);
  std::mt19937_64 gen(1);
  auto cfg = config(0.1, 10, 10, 0, validate_antisymmetric(oracle::random_antisymmetric(3, gen)));
  CHECK_THROWS_AS(run_chain(t, Eigen::Vector2d::Zero(), cfg, SamplerKind::mhmc), DimensionMismatch);
  cfg.g_matrix = planar(0.1);
  CHECK_THROWS_AS(run_chain(t, Eigen::Vector3d::Zero(), cfg, SamplerKind::mhmc), DimensionMismatch);
  cfg.epsilon = -1.0;
  CHECK_THROWS_AS(run_chain(t, Eigen::Vector2d::Zero(), cfg, SamplerKind::mhmc), Error);
  cfg.epsilon = 0.1;
  CHECK_THROWS_AS(run_chain(t, Eigen::Vector2d::Zero(), cfg, SamplerKind::preconditioned), Error);
}

TEST_CASE("diverging trajectories count as rejections") {
  const TargetDensity t(
      "explode", 1, [](const Eigen::VectorXd& x) { return -std::exp(x[0] * x[0]); },
      [](const Eigen::VectorXd& x, Eigen::VectorXd& g) {
        g.resize(1);
        g[0] = -2 * x[0] * std::exp(x[0] * x[0]);
      });
  const auto cfg = config(1.0, 50, 5, 0, AntisymmetricMatrix::zero(1));
  const auto r = run_chain(t, Eigen::VectorXd::Constant(1, 3.0), cfg, SamplerKind::mhmc);
  for (const auto& rec : r.records) {
    CHECK_FALSE(rec.accepted);
    CHECK(rec.energy_error == std::numeric_limits<double>::infinity());
    CHECK(rec.theta[0] == 3.0);
  }
}

TEST_CASE("acceptance rate on the mixture at the benchmark settings") {
  const auto t = mixture_target(Eigen::Vector2d(2.5, -2.5), Eigen::Matrix2d::Identity());
  const auto cfg = config(1.5, 33, 15000, 2024, AntisymmetricMatrix::zero(2));
  const auto r = run_chain(t, Eigen::Vector2d(2.5, -2.5), cfg, SamplerKind::hmc);
  CHECK(r.acceptance_rate == doctest::Approx(0.74).epsilon(0.05 / 0.74));

  // Mean Metropolis probability agrees with the observed rate.
  Eigen::VectorXd acc(static_cast<Eigen::Index>(r.records.size()));
  for (std::size_t i = 0; i < r.records.size(); ++i) {
    acc[static_cast<Eigen::Index>(i)] = std::min(1.0, std::exp(-r.records[i].energy_error));
  }
  const double mean = acc.mean();
  const double se = std::sqrt((acc.array() - mean).square().mean() / acc.size());
  CHECK(std::abs(mean - r.acceptance_rate) <= 2 * std::sqrt(se * se + mean * (1 - mean) / acc.size()));
}

TEST_CASE("MHMC leaves the isotropic gaussian invariant") {
  const auto t = isotropic(2);
  const auto cfg = config(0.3, 10, 2000, 99, planar(0.2));
  std::vector<Eigen::MatrixXd> chains;
  for (int c = 0; c < 20; ++c) {
    chains.push_back(run_chain(t, Eigen::Vector2d::Zero(), cfg, SamplerKind::mhmc,
                               static_cast<std::uint64_t>(c))
                         .positions(100));
  }
  for (int k = 0; k < 2; ++k) {
    const auto m1 = bias_and_mcse(chains, [k](const Eigen::VectorXd& x) { return x[k]; }, 0.0);
    const auto m2 = bias_and_mcse(chains, [k](const Eigen::VectorXd& x) { return x[k] * x[k]; }, 1.0);
    CHECK(m1.bias <= 3 * m1.mcse);
    CHECK(m2.bias <= 3 * m2.mcse);
  }
}

TEST_CASE("HMC transition counts satisfy detailed balance") {
  const auto t = isotropic(1);
  const auto cfg = config(0.8, 2, 1000000, 31337, AntisymmetricMatrix::zero(1));
  const auto r = run_chain(t, Eigen::VectorXd::Zero(1), cfg, SamplerKind::hmc);
  const int bins = 20;
  auto bin = [&](double x) {
    const int b = static_cast<int>(std::floor((x + 3.0) / 6.0 * bins));
    return std::clamp(b, 0, bins - 1);
  };
  Eigen::MatrixXd counts = Eigen::MatrixXd::Zero(bins, bins);
  int prev = bin(r.records.front().theta[0]);
  for (std::size_t i = 1; i < r.records.size(); ++i) {
    const int cur = bin(r.records[i].theta[0]);
    counts(prev, cur) += 1.0;
    prev = cur;
  }
  int tested = 0;
  for (int a = 0; a < bins; ++a) {
    for (int b = a + 1; b < bins; ++b) {
      const double n = counts(a, b) + counts(b, a);
      if (n < 10) continue;
      ++tested;
      CHECK(std::abs(counts(a, b) - counts(b, a)) <= 3.0 * std::sqrt(n));
    }
  }
  CHECK(tested > 50);
}

TEST_CASE("preconditioning equals a coupled non-canonical flow") {
  const auto t = gaussian_target(Eigen::Vector2d(0.5, -0.5), Eigen::Vector2d(4.0, 0.25).asDiagonal());
  const PhasePoint init{Eigen::Vector2d(1.0, 0.3), Eigen::Vector2d(-0.4, 1.1)};
  const auto icfg = IntegratorConfig::canonical(0.1, 50);
  CHECK(check_preconditioning_equivalence(t, Eigen::Matrix2d::Identity(), init, icfg) == 0.0);
  CHECK(check_preconditioning_equivalence(t, Eigen::Vector2d(4.0, 0.25).asDiagonal(), init, icfg) <=
        1e-10);

  std::mt19937_64 gen(6);
  const auto t3 = mixture_target(Eigen::Vector3d(1.0, -1.0, 0.5), Eigen::Matrix3d::Identity());
  for (int c = 0; c < 20; ++c) {
    const Eigen::MatrixXd a = Eigen::MatrixXd::Random(3, 3);
    const Eigen::MatrixXd m = a * a.transpose() + 0.5 * Eigen::MatrixXd::Identity(3, 3);
    const PhasePoint s{oracle::random_normal(3, gen), oracle::random_normal(3, gen)};
    CHECK(check_preconditioning_equivalence(t3, m, s, IntegratorConfig::canonical(0.05, 50)) <= 1e-9);
  }
  Eigen::Matrix2d bad;
  bad << 1, 2, 2, 1;
  CHECK_THROWS_AS(check_preconditioning_equivalence(t, bad, init, icfg), NotSPD);
}

TEST_CASE("change of basis equals a coupled non-canonical flow") {
  const auto t = gaussian_target(Eigen::Vector2d(0.5, -0.5), Eigen::Vector2d(2.0, 0.5).asDiagonal());
  const PhasePoint init{Eigen::Vector2d(1.0, 0.3), Eigen::Vector2d(-0.4, 1.1)};
  const auto icfg = IntegratorConfig::canonical(0.05, 50);
  CHECK(check_change_of_basis_equivalence(t, Eigen::Matrix2d::Identity(), init, icfg) <= 1e-15);
  Eigen::Matrix2d f;
  f << 2, 0, 1, 1;
  CHECK(check_change_of_basis_equivalence(t, f, init, icfg) <= 1e-10);

  std::mt19937_64 gen(7);
  int done = 0;
  while (done < 20) {
    const Eigen::MatrixXd r = Eigen::MatrixXd::Identity(2, 2) + 0.5 * Eigen::MatrixXd::Random(2, 2);
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(r);
    if (svd.singularValues()(0) / svd.singularValues()(1) >= 10.0) continue;
    const PhasePoint s{oracle::random_normal(2, gen), oracle::random_normal(2, gen)};
    CHECK(check_change_of_basis_equivalence(t, r, s, icfg) <= 1e-9);
    ++done;
  }
  CHECK_THROWS_AS(check_change_of_basis_equivalence(t, Eigen::Matrix2d::Zero(), init, icfg),
                  SingularMatrix);
}

TEST_CASE("preconditioned HMC samples the target") {
  const auto t = gaussian_target(Eigen::Vector2d::Zero(), Eigen::Vector2d(100.0, 1.0).asDiagonal());
  SamplerConfig cfg = config(0.5, 5, 20000, 4, AntisymmetricMatrix::zero(2));
  cfg.mass_matrix = Eigen::Matrix2d(Eigen::Vector2d(0.01, 1.0).asDiagonal());
  const auto r = run_chain(t, Eigen::Vector2d::Zero(), cfg, SamplerKind::preconditioned);
  const Eigen::MatrixXd x = r.positions(1000);
  CHECK(r.acceptance_rate > 0.8);
  CHECK(x.col(0).squaredNorm() / x.rows() == doctest::Approx(100.0).epsilon(0.1));
  CHECK(x.col(1).squaredNorm() / x.rows() == doctest::Approx(1.0).epsilon(0.1));
}
