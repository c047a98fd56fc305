#include "mhmc/samplers.hpp"

#include "mhmc/errors.hpp"

#include <chrono>
#include <cmath>
#include <limits>

namespace mhmc {

void SamplerConfig::validate(int dim) const {
  if (!(epsilon > 0.0) || !std::isfinite(epsilon)) throw Error("epsilon must be positive");
  if (n_leapfrog < 1) throw Error("n_leapfrog must be positive");
  if (n_samples < 0) throw Error("n_samples must be nonnegative");
  // A zero G of any size stands for "no magnetic term".
  if (!g_matrix.is_zero() && g_matrix.dim() != dim) {
    throw DimensionMismatch("G dimension does not match the target");
  }
  if (mass_matrix && (mass_matrix->rows() != dim || mass_matrix->cols() != dim)) {
    throw DimensionMismatch("mass matrix dimension does not match the target");
  }
}

const char* to_string(SamplerKind kind) {
  switch (kind) {
    case SamplerKind::hmc: return "hmc";
    case SamplerKind::mhmc: return "mhmc";
    case SamplerKind::preconditioned: return "preconditioned";
  }
  return "?";
}

SamplerKind sampler_kind_from_string(const std::string& name) {
  if (name == "hmc") return SamplerKind::hmc;
  if (name == "mhmc") return SamplerKind::mhmc;
  if (name == "preconditioned") return SamplerKind::preconditioned;
  throw ConfigError("unknown sampler kind '" + name + "'");
}

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

struct Proposal {
  PhasePoint point;
  double energy_error;  // +inf when the trajectory diverged
};

// Shares a borrowed cache through the IntegratorConfig without owning it.
std::shared_ptr<const MagneticFlowCache> borrow(const MagneticFlowCache& flow) {
  return std::shared_ptr<const MagneticFlowCache>(std::shared_ptr<void>(), &flow);
}

template <typename Integrate, typename Energy>
Proposal propose(const PhasePoint& start, double h_old, const Integrate& integrate,
                 const Energy& energy) {
  try {
    PhasePoint end = integrate(start);
    const double dh = energy(end) - h_old;
    return {std::move(end), std::isnan(dh) ? kInf : dh};
  } catch (const NonFinite&) {
    return {start, kInf};
  }
}

// Metropolis test shared by all kernels; always consumes one uniform.
bool metropolis_accept(double energy_error, Rng& rng) {
  const double u = rng.uniform();
  return energy_error < kInf && u < std::exp(-energy_error);
}

}  // namespace

Transition mhmc_step(const TargetDensity& target, const ChainState& state,
                     const SamplerConfig& cfg, const MagneticFlowCache& flow, Rng& rng) {
  const int d = target.dim();
  if (flow.dim() != d) throw DimensionMismatch("G dimension does not match the target");

  PhasePoint start{state.theta, Eigen::VectorXd(d)};
  rng.fill_normal(start.p);
  const double h_old = hamiltonian(target, start);

  IntegratorConfig icfg;
  icfg.step = cfg.epsilon;
  icfg.n_steps = cfg.n_leapfrog;
  icfg.flow_cache = borrow(flow);
  const int sign = state.g_sign;
  Proposal prop = propose(
      start, h_old, [&](const PhasePoint& s) { return trajectory(target, s, icfg, sign); },
      [&](const PhasePoint& s) { return hamiltonian(target, s); });

  // Flip momentum and G on the proposal.
  ChainState proposed{std::move(prop.point.theta), -prop.point.p, -sign};
  const bool accepted = metropolis_accept(prop.energy_error, rng);

  Transition out;
  out.state = accepted ? std::move(proposed) : ChainState{state.theta, start.p, sign};
  out.state.p = -out.state.p;
  out.state.g_sign = -out.state.g_sign;

  out.record.theta = out.state.theta;
  out.record.accepted = accepted;
  out.record.energy_error = prop.energy_error;
  out.record.g_sign_after = out.state.g_sign;
  return out;
}

Transition mhmc_step(const TargetDensity& target, const ChainState& state,
                     const SamplerConfig& cfg, Rng& rng) {
  const int d = target.dim();
  const MagneticFlowCache flow(
      cfg.g_matrix.is_zero() ? AntisymmetricMatrix::zero(d) : cfg.g_matrix, cfg.epsilon);
  return mhmc_step(target, state, cfg, flow, rng);
}

Transition hmc_step(const TargetDensity& target, const ChainState& state,
                    const SamplerConfig& cfg, Rng& rng) {
  const int d = target.dim();
  PhasePoint start{state.theta, Eigen::VectorXd(d)};
  rng.fill_normal(start.p);
  const double h_old = hamiltonian(target, start);

  const IntegratorConfig icfg = IntegratorConfig::canonical(cfg.epsilon, cfg.n_leapfrog);
  Proposal prop = propose(
      start, h_old, [&](const PhasePoint& s) { return trajectory(target, s, icfg, +1); },
      [&](const PhasePoint& s) { return hamiltonian(target, s); });
  const bool accepted = metropolis_accept(prop.energy_error, rng);

  Transition out;
  out.state.theta = accepted ? prop.point.theta : state.theta;
  // Flip, test, flip back: the stored momentum ends up as the negation of
  // the retained one, as in the magnetic kernel.
  out.state.p = accepted ? Eigen::VectorXd(prop.point.p) : Eigen::VectorXd(-start.p);
  out.state.g_sign = state.g_sign;
  out.record.theta = out.state.theta;
  out.record.accepted = accepted;
  out.record.energy_error = prop.energy_error;
  out.record.g_sign_after = out.state.g_sign;
  return out;
}

namespace {

struct MassFactor {
  Eigen::MatrixXd chol;     // M = L Lᵀ
  Eigen::MatrixXd inverse;  // M⁻¹
};

MassFactor factor_mass(const Eigen::MatrixXd& mass) {
  if (mass.rows() != mass.cols() ||
      (mass - mass.transpose()).cwiseAbs().maxCoeff() >
          1e-12 * std::max(1.0, mass.cwiseAbs().maxCoeff())) {
    throw NotSPD("mass matrix is not symmetric");
  }
  Eigen::LLT<Eigen::MatrixXd> llt(mass);
  if (llt.info() != Eigen::Success) throw NotSPD("mass matrix is not positive definite");
  const auto n = mass.rows();
  return {llt.matrixL(), llt.solve(Eigen::MatrixXd::Identity(n, n))};
}

// Leapfrog for H = U(θ) + pᵀM⁻¹p/2.
PhasePoint preconditioned_trajectory(const TargetDensity& target, PhasePoint cur,
                                     const Eigen::MatrixXd& mass_inv, double step, int n_steps,
                                     std::vector<PhasePoint>* trace = nullptr) {
  const double half = 0.5 * step;
  Eigen::VectorXd grad(target.dim());
  if (trace) trace->push_back(cur);
  target.gradient(cur.theta, grad);
  for (int k = 0; k < n_steps; ++k) {
    cur.p -= half * grad;
    cur.theta += step * (mass_inv * cur.p);
    target.gradient(cur.theta, grad);
    cur.p -= half * grad;
    if (!cur.finite()) throw NonFinite("preconditioned leapfrog diverged");
    if (trace) trace->push_back(cur);
  }
  return cur;
}

}  // namespace

Transition preconditioned_hmc_step(const TargetDensity& target, const ChainState& state,
                                   const SamplerConfig& cfg, Rng& rng) {
  if (!cfg.mass_matrix) throw Error("preconditioned HMC requires a mass matrix");
  const MassFactor mf = factor_mass(*cfg.mass_matrix);
  const int d = target.dim();
  Eigen::VectorXd z(d);
  rng.fill_normal(z);
  PhasePoint start{state.theta, mf.chol * z};
  auto energy = [&](const PhasePoint& s) {
    return target.potential(s.theta) + 0.5 * s.p.dot(mf.inverse * s.p);
  };
  const double h_old = energy(start);
  Proposal prop = propose(
      start, h_old,
      [&](const PhasePoint& s) {
        return preconditioned_trajectory(target, s, mf.inverse, cfg.epsilon, cfg.n_leapfrog);
      },
      energy);
  const bool accepted = metropolis_accept(prop.energy_error, rng);

  Transition out;
  out.state.theta = accepted ? prop.point.theta : state.theta;
  out.state.p = accepted ? Eigen::VectorXd(prop.point.p) : Eigen::VectorXd(-start.p);
  out.state.g_sign = state.g_sign;
  out.record.theta = out.state.theta;
  out.record.accepted = accepted;
  out.record.energy_error = prop.energy_error;
  out.record.g_sign_after = out.state.g_sign;
  return out;
}

ChainState proposal_map(const TargetDensity& target, const ChainState& state,
                        const IntegratorConfig& cfg) {
  const PhasePoint end = trajectory(target, {state.theta, state.p}, cfg, state.g_sign);
  return {end.theta, -end.p, -state.g_sign};
}

Eigen::MatrixXd ChainResult::positions(std::size_t burn_in) const {
  if (records.empty() || burn_in >= records.size()) return Eigen::MatrixXd(0, 0);
  const auto n = static_cast<Eigen::Index>(records.size() - burn_in);
  const auto d = records.front().theta.size();
  Eigen::MatrixXd out(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    out.row(i) = records[burn_in + static_cast<std::size_t>(i)].theta.transpose();
  }
  return out;
}

ChainResult run_chain(const TargetDensity& target, const Eigen::VectorXd& init_theta,
                      const SamplerConfig& cfg, SamplerKind kind, std::uint64_t stream) {
  const int d = target.dim();
  if (init_theta.size() != d) throw DimensionMismatch("initial position has wrong dimension");
  cfg.validate(d);

  std::optional<MagneticFlowCache> flow;
  if (kind == SamplerKind::mhmc) {
    flow.emplace(cfg.g_matrix.is_zero() ? AntisymmetricMatrix::zero(d) : cfg.g_matrix,
                 cfg.epsilon);
  }
  if (kind == SamplerKind::preconditioned && !cfg.mass_matrix) {
    throw Error("preconditioned HMC requires a mass matrix");
  }

  Rng rng(cfg.seed, stream);
  ChainState state{init_theta, Eigen::VectorXd::Zero(d), +1};
  ChainResult result;
  result.records.reserve(static_cast<std::size_t>(cfg.n_samples));
  long accepted = 0;

  const auto t0 = std::chrono::steady_clock::now();
  for (int i = 0; i < cfg.n_samples; ++i) {
    Transition tr;
    switch (kind) {
      case SamplerKind::hmc: tr = hmc_step(target, state, cfg, rng); break;
      case SamplerKind::mhmc: tr = mhmc_step(target, state, cfg, *flow, rng); break;
      case SamplerKind::preconditioned: tr = preconditioned_hmc_step(target, state, cfg, rng); break;
    }
    tr.record.iteration = i;
    accepted += tr.record.accepted ? 1 : 0;
    state = std::move(tr.state);
    result.records.push_back(std::move(tr.record));
  }
  const auto t1 = std::chrono::steady_clock::now();
  result.wall_seconds = std::chrono::duration<double>(t1 - t0).count();
  result.acceptance_rate =
      cfg.n_samples > 0 ? static_cast<double>(accepted) / cfg.n_samples : 0.0;
  return result;
}

double check_preconditioning_equivalence(const TargetDensity& target, const Eigen::MatrixXd& mass,
                                         const PhasePoint& init, const IntegratorConfig& cfg) {
  const MassFactor mf = factor_mass(mass);
  const int d = target.dim();

  std::vector<PhasePoint> direct;
  preconditioned_trajectory(target, init, mf.inverse, cfg.step, cfg.n_steps, &direct);

  // F = L⁻ᵀ so that F Fᵀ = M⁻¹; p' = L⁻¹ p is standard normal.
  const Eigen::MatrixXd l_inv =
      mf.chol.triangularView<Eigen::Lower>().solve(Eigen::MatrixXd::Identity(d, d));
  IntegratorConfig nc = IntegratorConfig::canonical(cfg.step, cfg.n_steps);
  nc.f = l_inv.transpose();
  const PhasePoint start{init.theta, l_inv * init.p};
  std::vector<PhasePoint> transformed;
  trajectory(target, start, nc, +1, &transformed);

  double worst = 0.0;
  for (std::size_t k = 0; k < direct.size(); ++k) {
    const Eigen::VectorXd p_back = mf.chol * transformed[k].p;
    worst = std::max(worst, (direct[k].theta - transformed[k].theta).cwiseAbs().maxCoeff());
    worst = std::max(worst, (direct[k].p - p_back).cwiseAbs().maxCoeff());
  }
  return worst;
}

double check_change_of_basis_equivalence(const TargetDensity& target, const Eigen::MatrixXd& f,
                                         const PhasePoint& init, const IntegratorConfig& cfg) {
  const int d = target.dim();
  if (f.rows() != d || f.cols() != d) throw DimensionMismatch("F has wrong dimension");
  Eigen::FullPivLU<Eigen::MatrixXd> lu(f);
  if (!lu.isInvertible()) throw SingularMatrix("F is not invertible");

  // U'(θ') = U(Fθ'), ∇U'(θ') = Fᵀ ∇U(Fθ').
  const TargetDensity pulled_back(
      target.name() + "_rebased", d,
      [&target, f](const Eigen::VectorXd& tp) { return target.potential(f * tp); },
      [&target, f](const Eigen::VectorXd& tp, Eigen::VectorXd& out) {
        out.noalias() = f.transpose() * target.gradient(f * tp);
      });
  std::vector<PhasePoint> rebased;
  trajectory(pulled_back, {lu.solve(init.theta), init.p},
             IntegratorConfig::canonical(cfg.step, cfg.n_steps), +1, &rebased);

  IntegratorConfig nc = IntegratorConfig::canonical(cfg.step, cfg.n_steps);
  nc.f = f;
  std::vector<PhasePoint> coupled;
  trajectory(target, init, nc, +1, &coupled);

  double worst = 0.0;
  for (std::size_t k = 0; k < rebased.size(); ++k) {
    const Eigen::VectorXd theta_back = f * rebased[k].theta;
    worst = std::max(worst, (theta_back - coupled[k].theta).cwiseAbs().maxCoeff());
    worst = std::max(worst, (rebased[k].p - coupled[k].p).cwiseAbs().maxCoeff());
  }
  return worst;
}

}  // namespace mhmc
