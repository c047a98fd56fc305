#include "mhmc/integrators.hpp"

#include "mhmc/errors.hpp"

#include <cmath>

namespace mhmc {

double hamiltonian(const TargetDensity& target, const PhasePoint& s) {
  return target.potential(s.theta) + 0.5 * s.p.squaredNorm();
}

IntegratorConfig IntegratorConfig::magnetic(const AntisymmetricMatrix& g, double step,
                                            int n_steps) {
  IntegratorConfig cfg;
  cfg.step = step;
  cfg.n_steps = n_steps;
  cfg.flow_cache = std::make_shared<const MagneticFlowCache>(g, step);
  return cfg;
}

IntegratorConfig IntegratorConfig::canonical(double step, int n_steps) {
  IntegratorConfig cfg;
  cfg.step = step;
  cfg.n_steps = n_steps;
  return cfg;
}

void IntegratorConfig::validate() const {
  if (!(step > 0.0) || !std::isfinite(step)) throw Error("integrator step must be positive");
  if (n_steps < 0) throw Error("integrator step count must be nonnegative");
  if (flow_cache && flow_cache->step() != step) {
    throw Error("flow cache was built for a different step size");
  }
}

namespace {

void check_dims(const TargetDensity& target, const PhasePoint& s) {
  if (s.theta.size() != target.dim() || s.p.size() != target.dim()) {
    throw DimensionMismatch("phase point dimension does not match the target");
  }
}

void require_finite(const PhasePoint& s) {
  if (!s.finite()) throw NonFinite("integrator produced a non-finite state");
}

// p ← p - (ε/2) Fᵀ ∇U
void half_kick(Eigen::VectorXd& p, const Eigen::VectorXd& grad, double half,
               const Eigen::MatrixXd* f) {
  if (f == nullptr) {
    p -= half * grad;
  } else {
    p -= half * (f->transpose() * grad);
  }
}

}  // namespace

PhasePoint leapfrog_step(const TargetDensity& target, const PhasePoint& s, double step) {
  check_dims(target, s);
  const double half = 0.5 * step;
  PhasePoint out = s;
  Eigen::VectorXd grad(target.dim());
  target.gradient(out.theta, grad);
  out.p -= half * grad;
  out.theta += step * out.p;
  target.gradient(out.theta, grad);
  out.p -= half * grad;
  require_finite(out);
  return out;
}

PhasePoint magnetic_leapfrog_step(const TargetDensity& target, const PhasePoint& s,
                                  const IntegratorConfig& cfg, int g_sign) {
  check_dims(target, s);
  if (!cfg.flow_cache) throw Error("magnetic leapfrog requires a flow cache");
  if (cfg.flow_cache->step() != cfg.step) {
    throw Error("flow cache was built for a different step size");
  }
  const Eigen::MatrixXd* f = cfg.f ? &*cfg.f : nullptr;
  const double half = 0.5 * cfg.step;
  PhasePoint out = s;
  Eigen::VectorXd grad(target.dim());
  target.gradient(out.theta, grad);
  half_kick(out.p, grad, half, f);
  momentum_flow_inplace(*cfg.flow_cache, g_sign, out.theta, out.p, f);
  target.gradient(out.theta, grad);
  half_kick(out.p, grad, half, f);
  require_finite(out);
  return out;
}

PhasePoint trajectory(const TargetDensity& target, const PhasePoint& s,
                      const IntegratorConfig& cfg, int g_sign, std::vector<PhasePoint>* trace) {
  check_dims(target, s);
  cfg.validate();
  const Eigen::MatrixXd* f = cfg.f ? &*cfg.f : nullptr;
  const MagneticFlowCache* cache = cfg.flow_cache.get();
  const double half = 0.5 * cfg.step;

  PhasePoint cur = s;
  if (trace != nullptr) {
    trace->clear();
    trace->reserve(static_cast<std::size_t>(cfg.n_steps) + 1);
    trace->push_back(cur);
  }
  if (cfg.n_steps == 0) return cur;

  Eigen::VectorXd grad(target.dim());
  target.gradient(cur.theta, grad);
  for (int k = 0; k < cfg.n_steps; ++k) {
    half_kick(cur.p, grad, half, f);
    if (cache != nullptr) {
      momentum_flow_inplace(*cache, g_sign, cur.theta, cur.p, f);
    } else if (f == nullptr) {
      cur.theta += cfg.step * cur.p;
    } else {
      cur.theta += cfg.step * (*f * cur.p);
    }
    target.gradient(cur.theta, grad);
    half_kick(cur.p, grad, half, f);
    require_finite(cur);
    if (trace != nullptr) trace->push_back(cur);
  }
  return cur;
}

Eigen::MatrixXd structure_matrix(const IntegratorConfig& cfg, int dim, int g_sign) {
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(2 * dim, 2 * dim);
  const Eigen::MatrixXd f = cfg.f ? *cfg.f : Eigen::MatrixXd::Identity(dim, dim);
  a.topRightCorner(dim, dim) = f;
  a.bottomLeftCorner(dim, dim) = -f.transpose();
  if (cfg.flow_cache) {
    a.bottomRightCorner(dim, dim) = static_cast<double>(g_sign) * cfg.flow_cache->g();
  }
  return a;
}

SymplecticResidual check_symplectic(const TargetDensity& target, const PhasePoint& s,
                                    const IntegratorConfig& cfg, int g_sign, double fd_step) {
  const int d = target.dim();
  const Eigen::MatrixXd a = structure_matrix(cfg, d, g_sign);
  Eigen::FullPivLU<Eigen::MatrixXd> lu(a);
  if (!lu.isInvertible()) throw SingularMatrix("structure matrix A is singular");
  const Eigen::MatrixXd a_inv = lu.inverse();

  auto flow = [&](const Eigen::VectorXd& x) {
    PhasePoint in{x.head(d), x.tail(d)};
    const PhasePoint out = trajectory(target, in, cfg, g_sign);
    Eigen::VectorXd y(2 * d);
    y << out.theta, out.p;
    return y;
  };

  Eigen::VectorXd x(2 * d);
  x << s.theta, s.p;
  Eigen::MatrixXd jac(2 * d, 2 * d);
  for (int i = 0; i < 2 * d; ++i) {
    Eigen::VectorXd xp = x, xm = x;
    xp[i] += fd_step;
    xm[i] -= fd_step;
    jac.col(i) = (flow(xp) - flow(xm)) / (xp[i] - xm[i]);
  }
  SymplecticResidual r;
  r.symplectic = (jac.transpose() * a_inv * jac - a_inv).cwiseAbs().maxCoeff();
  r.determinant = std::abs(std::abs(jac.determinant()) - 1.0);
  return r;
}

AntisymmetricMatrix magnetic_field_matrix(const Eigen::Vector3d& b) {
  Eigen::MatrixXd g(3, 3);
  g << 0.0, -b[2], b[1],
       b[2], 0.0, -b[0],
       -b[1], b[0], 0.0;
  return validate_antisymmetric(g, 0.0);
}

double check_magnetic_equivalence(const TargetDensity& target, const Eigen::Vector3d& b,
                                  const PhasePoint& s, double horizon, double rk_step) {
  if (target.dim() != 3) throw DimensionMismatch("magnetic equivalence check needs d = 3");
  check_dims(target, s);
  using Vec6 = Eigen::Matrix<double, 6, 1>;
  const Eigen::Matrix3d g = magnetic_field_matrix(b).matrix();

  Eigen::VectorXd grad(3);
  auto non_canonical = [&](const Vec6& y) {
    target.gradient(y.head<3>(), grad);
    Vec6 dy;
    dy.head<3>() = y.tail<3>();
    dy.tail<3>() = -grad + g * y.tail<3>();
    return dy;
  };
  // With this layout G·p = b × p = p × (-b), so the matching particle sees
  // the field -b under the force law θ̈ = -∇U + θ̇ × B.
  const Eigen::Vector3d field = -b;
  auto newton = [&](const Vec6& y) {
    target.gradient(y.head<3>(), grad);
    const Eigen::Vector3d vel = y.tail<3>();
    Vec6 dy;
    dy.head<3>() = vel;
    dy.tail<3>() = -grad + vel.cross(field);
    return dy;
  };
  auto rk4 = [](Vec6& y, double h, const auto& rhs) {
    const Vec6 k1 = rhs(y);
    const Vec6 k2 = rhs(y + 0.5 * h * k1);
    const Vec6 k3 = rhs(y + 0.5 * h * k2);
    const Vec6 k4 = rhs(y + h * k3);
    y += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
  };

  Vec6 y1, y2;
  y1 << s.theta, s.p;
  y2 = y1;
  const int n = std::max(1, static_cast<int>(std::lround(horizon / rk_step)));
  const double h = horizon / n;
  double worst = 0.0;
  for (int k = 0; k < n; ++k) {
    rk4(y1, h, non_canonical);
    rk4(y2, h, newton);
    worst = std::max(worst, (y1 - y2).cwiseAbs().maxCoeff());
  }
  if (!y1.allFinite() || !y2.allFinite()) throw NonFinite("magnetic equivalence diverged");
  return worst;
}

}  // namespace mhmc
