#include "mhmc/skewflow.hpp"

#include "mhmc/errors.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace mhmc {

NotAntisymmetric::NotAntisymmetric(int row, int col, double residual)
    : Error([&] {
        std::ostringstream os;
        os << "matrix is not antisymmetric: |m(" << row << "," << col << ") + m(" << col << ","
           << row << ")| = " << residual;
        return os.str();
      }()),
      row_(row),
      col_(col),
      residual_(residual) {}

AntisymmetricMatrix AntisymmetricMatrix::zero(int dim) {
  return AntisymmetricMatrix(Eigen::MatrixXd::Zero(dim, dim));
}

AntisymmetricMatrix validate_antisymmetric(const Eigen::MatrixXd& m, double tol) {
  if (m.rows() != m.cols()) {
    throw DimensionMismatch("antisymmetric matrix must be square");
  }
  const int d = static_cast<int>(m.rows());
  double worst = -1.0;
  int wi = 0, wj = 0;
  for (int i = 0; i < d; ++i) {
    for (int j = i; j < d; ++j) {
      double r = std::abs(m(i, j) + m(j, i));
      if (std::isnan(r)) r = std::numeric_limits<double>::infinity();
      if (r > worst) {
        worst = r;
        wi = i;
        wj = j;
      }
    }
  }
  if (d > 0 && !(worst <= tol)) {
    throw NotAntisymmetric(wi, wj, worst);
  }
  Eigen::MatrixXd a = 0.5 * (m - m.transpose());
  return AntisymmetricMatrix(std::move(a));
}

Eigen::MatrixXd SkewBlockDecomposition::canonical() const {
  const int d = dim();
  Eigen::MatrixXd c = Eigen::MatrixXd::Zero(d, d);
  for (int k = 0; k < block_count(); ++k) {
    c(2 * k, 2 * k + 1) = -rotation_rates[k];
    c(2 * k + 1, 2 * k) = rotation_rates[k];
  }
  return c;
}

namespace {

struct Plane {
  double rate;
  Eigen::Vector2i columns;  // columns of the Schur basis
  bool flip;                // negate the second column to make the rate positive
};

}  // namespace

SkewBlockDecomposition block_decompose(const AntisymmetricMatrix& g) {
  const int d = g.dim();
  SkewBlockDecomposition out;
  if (g.is_zero()) {
    out.basis = Eigen::MatrixXd::Identity(d, d);
    out.null_dim = d;
    return out;
  }

  // G is normal, so its real Schur form is block diagonal: 2x2 rotation
  // generators for each conjugate pair ±iλ and 1x1 zeros for the kernel.
  Eigen::RealSchur<Eigen::MatrixXd> schur(g.matrix());
  if (schur.info() != Eigen::Success) {
    throw NumericalFailure("real Schur reduction of G did not converge");
  }
  const Eigen::MatrixXd& t = schur.matrixT();
  const Eigen::MatrixXd& u = schur.matrixU();

  std::vector<Plane> planes;
  std::vector<int> null_cols;
  for (int i = 0; i < d;) {
    if (i + 1 < d && t(i + 1, i) != 0.0) {
      const double rate = 0.5 * (t(i + 1, i) - t(i, i + 1));
      if (std::abs(rate) < kRankTolerance) {
        null_cols.push_back(i);
        null_cols.push_back(i + 1);
      } else {
        planes.push_back({std::abs(rate), {i, i + 1}, rate < 0.0});
      }
      i += 2;
    } else {
      null_cols.push_back(i);
      i += 1;
    }
  }

  std::stable_sort(planes.begin(), planes.end(),
                   [](const Plane& a, const Plane& b) { return a.rate > b.rate; });

  out.basis.resize(d, d);
  int col = 0;
  for (const Plane& pl : planes) {
    out.rotation_rates.push_back(pl.rate);
    out.basis.col(col++) = u.col(pl.columns[0]);
    out.basis.col(col++) = pl.flip ? Eigen::VectorXd(-u.col(pl.columns[1]))
                                   : Eigen::VectorXd(u.col(pl.columns[1]));
  }
  for (int c : null_cols) {
    out.basis.col(col++) = u.col(c);
  }
  out.null_dim = static_cast<int>(null_cols.size());

  const double recon =
      (out.basis.transpose() * g.matrix() * out.basis - out.canonical()).cwiseAbs().maxCoeff();
  const double ortho =
      (out.basis * out.basis.transpose() - Eigen::MatrixXd::Identity(d, d)).cwiseAbs().maxCoeff();
  if (!(recon <= 1e-8) || !(ortho <= 1e-8)) {
    std::ostringstream os;
    os << "block decomposition residual too large (reconstruction " << recon
       << ", orthogonality " << ortho << ")";
    throw NumericalFailure(os.str());
  }
  return out;
}

MagneticFlowCache::MagneticFlowCache(const AntisymmetricMatrix& g, double step)
    : g_(g.matrix()), step_(step), decomposition_(block_decompose(g)), trivial_(g.is_zero()) {
  if (!(step > 0.0) || !std::isfinite(step)) {
    throw NumericalFailure("flow step must be positive and finite");
  }
  const int d = g.dim();
  const auto id = Eigen::MatrixXd::Identity(d, d);
  if (trivial_) {
    exp_pos_ = exp_neg_ = id;
    psi_pos_ = psi_neg_ = step * id;
    return;
  }

  Eigen::MatrixXd e_pos = Eigen::MatrixXd::Zero(d, d);
  Eigen::MatrixXd e_neg = Eigen::MatrixXd::Zero(d, d);
  Eigen::MatrixXd s_pos = Eigen::MatrixXd::Zero(d, d);
  Eigen::MatrixXd s_neg = Eigen::MatrixXd::Zero(d, d);
  const auto& dec = decomposition_;
  for (int k = 0; k < dec.block_count(); ++k) {
    const double lam = dec.rotation_rates[k];
    const double c = std::cos(lam * step);
    const double s = std::sin(lam * step);
    const double h = std::sin(0.5 * lam * step);
    const double one_minus_c = 2.0 * h * h / lam;  // (1 - cos λε) / λ
    const double sinc = s / lam;
    const int i = 2 * k;
    e_pos(i, i) = c;
    e_pos(i, i + 1) = -s;
    e_pos(i + 1, i) = s;
    e_pos(i + 1, i + 1) = c;
    e_neg(i, i) = c;
    e_neg(i, i + 1) = s;
    e_neg(i + 1, i) = -s;
    e_neg(i + 1, i + 1) = c;
    s_pos(i, i) = sinc;
    s_pos(i, i + 1) = -one_minus_c;
    s_pos(i + 1, i) = one_minus_c;
    s_pos(i + 1, i + 1) = sinc;
    s_neg(i, i) = sinc;
    s_neg(i, i + 1) = one_minus_c;
    s_neg(i + 1, i) = -one_minus_c;
    s_neg(i + 1, i + 1) = sinc;
  }
  for (int j = 2 * dec.block_count(); j < d; ++j) {
    e_pos(j, j) = e_neg(j, j) = 1.0;
    s_pos(j, j) = s_neg(j, j) = step;
  }
  const Eigen::MatrixXd& q = dec.basis;
  exp_pos_ = q * e_pos * q.transpose();
  exp_neg_ = q * e_neg * q.transpose();
  psi_pos_ = q * s_pos * q.transpose();
  psi_neg_ = q * s_neg * q.transpose();
}

void momentum_flow_inplace(const MagneticFlowCache& cache, int sign, Eigen::VectorXd& theta,
                           Eigen::VectorXd& p, const Eigen::MatrixXd* f) {
  const int d = cache.dim();
  if (theta.size() != d || p.size() != d) {
    throw DimensionMismatch("momentum_flow: state dimension does not match G");
  }
  if (f != nullptr && (f->rows() != d || f->cols() != d)) {
    throw DimensionMismatch("momentum_flow: F dimension does not match G");
  }
  if (cache.trivial()) {
    if (f == nullptr) {
      theta += cache.step() * p;
    } else {
      theta += cache.step() * (*f * p);
    }
    return;
  }
  const Eigen::VectorXd drift = cache.psi(sign) * p;
  if (f == nullptr) {
    theta += drift;
  } else {
    theta += *f * drift;
  }
  p = cache.exp(sign) * p;
}

std::pair<Eigen::VectorXd, Eigen::VectorXd> momentum_flow(const MagneticFlowCache& cache,
                                                          int sign, const Eigen::VectorXd& theta,
                                                          const Eigen::VectorXd& p,
                                                          const std::optional<Eigen::MatrixXd>& f) {
  Eigen::VectorXd t = theta;
  Eigen::VectorXd q = p;
  momentum_flow_inplace(cache, sign, t, q, f ? &*f : nullptr);
  return {std::move(t), std::move(q)};
}

}  // namespace mhmc
