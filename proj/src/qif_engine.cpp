#include "fvicm/qif_engine.hpp"

#include <cmath>

#include "fvicm/errors.hpp"

namespace fvicm {

std::vector<SubjectMean> mean_and_jacobian(const ThetaFull& theta, const LongitudinalDataset& data,
                                           const BasisSpec& spec0, const BasisSpec& spec1) {
  const ParamLayout l = theta.layout();
  if (l.p != data.p || theta.beta1.size() != data.p)
    throw InputError("mean_and_jacobian: index dimension does not match the data");
  if (l.d0 != spec0.dim() || l.d1 != spec1.dim())
    throw InputError("mean_and_jacobian: gamma length does not match the basis dimension");

  std::vector<SubjectMean> out;
  out.reserve(data.subjects.size());
  Eigen::VectorXd b0(l.d0), b1(l.d1), bd0(l.d0), bd1(l.d1);
  for (const auto& s : data.subjects) {
    const int n = s.num_obs();
    SubjectMean sm;
    sm.mu.resize(n);
    sm.mudot.resize(n, l.full_size());
    const double g = s.g;
    for (int j = 0; j < n; ++j) {
      const Eigen::VectorXd xj = s.x.row(j).transpose();
      const double u0 = theta.beta0.dot(xj), u1 = theta.beta1.dot(xj);
      fill_basis(spec0, u0, {b0.data(), static_cast<std::size_t>(l.d0)});
      fill_basis(spec1, u1, {b1.data(), static_cast<std::size_t>(l.d1)});
      if (spec0.degree >= 1) fill_basis_deriv(spec0, u0, {bd0.data(), static_cast<std::size_t>(l.d0)});
      else bd0.setZero();
      if (spec1.degree >= 1) fill_basis_deriv(spec1, u1, {bd1.data(), static_cast<std::size_t>(l.d1)});
      else bd1.setZero();
      sm.mu[j] = b0.dot(theta.gamma0) + g * b1.dot(theta.gamma1);
      sm.mudot.block(j, 0, 1, l.p) = bd0.dot(theta.gamma0) * xj.transpose();
      sm.mudot.block(j, l.p, 1, l.p) = g * bd1.dot(theta.gamma1) * xj.transpose();
      sm.mudot.block(j, 2 * l.p, 1, l.d0) = b0.transpose();
      sm.mudot.block(j, 2 * l.p + l.d0, 1, l.d1) = g * b1.transpose();
    }
    out.push_back(std::move(sm));
  }
  return out;
}

WeightMatrix WeightMatrix::from_cbar(const Eigen::MatrixXd& cbar) {
  WeightMatrix w;
  if (!cbar.allFinite()) throw ConditioningError("moment covariance has non-finite entries");
  w.cbar_ = cbar;
  const double trace = cbar.trace();
  if (trace == 0.0) {
    w.degenerate_ = true;
    return w;
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cbar, Eigen::EigenvaluesOnly);
  const double lo = es.eigenvalues().minCoeff();
  const double hi = es.eigenvalues().maxCoeff();
  if (lo < 1e-10 * hi) {
    w.ridge_ = 1e-8 * trace / static_cast<double>(cbar.rows());
    w.cbar_.diagonal().array() += w.ridge_;
    w.regularized_ = true;
  }
  w.ldlt_.compute(w.cbar_);
  if (w.ldlt_.info() != Eigen::Success || !w.ldlt_.isPositive())
    throw ConditioningError("moment covariance is singular after ridge regularization");
  return w;
}

Eigen::MatrixXd WeightMatrix::solve(const Eigen::MatrixXd& rhs) const {
  if (degenerate_) return Eigen::MatrixXd::Zero(rhs.rows(), rhs.cols());
  return ldlt_.solve(rhs);
}

double WeightMatrix::quad(const Eigen::VectorXd& g) const {
  if (degenerate_) return 0.0;
  return g.dot(ldlt_.solve(g));
}

QifModel::QifModel(const LongitudinalDataset& data, BasisSpec spec0, BasisSpec spec1,
                   BasisKind kind, double scale)
    : data_(&data), spec0_(std::move(spec0)), spec1_(std::move(spec1)), mats_(kind, data) {
  spec0_.validate();
  spec1_.validate();
  set_scale(scale);
}

void QifModel::set_scale(double scale) {
  if (!(scale > 0.0) || !std::isfinite(scale)) throw ConfigError("variance scale must be positive");
  scale_ = scale;
}

void QifModel::set_specs(BasisSpec spec0, BasisSpec spec1) {
  spec0.validate();
  spec1.validate();
  spec0_ = std::move(spec0);
  spec1_ = std::move(spec1);
}

MomentSums QifModel::moments(const ThetaFree& theta, bool derivative) const {
  const KernelContext ctx = make_kernel_context(*data_, spec0_, spec1_, mats_, theta, scale_);
  return exec_ == Execution::serial ? accumulate_moments_serial(ctx, derivative)
                                    : accumulate_moments_parallel(ctx, derivative);
}

ScoreResult QifModel::extended_score(const ThetaFree& theta) const {
  MomentSums m = moments(theta, false);
  return {std::move(m.gbar), std::move(m.g)};
}

QifValue QifModel::qif_value(const ThetaFree& theta) const {
  MomentSums m = moments(theta, false);
  const WeightMatrix w = WeightMatrix::from_cbar(m.cbar);
  QifValue out;
  out.q = data_->num_subjects() * w.quad(m.gbar);
  out.gbar = std::move(m.gbar);
  out.cbar = w.matrix();
  out.regularized = w.regularized();
  return out;
}

ObjectiveEval QifModel::objective(const ThetaFree& theta, const PenaltySpec& penalty,
                                  const WeightMatrix* frozen) const {
  MomentSums m = moments(theta, true);
  ObjectiveEval e;
  e.weight = frozen ? *frozen : WeightMatrix::from_cbar(m.cbar);
  const WeightMatrix& w = e.weight;

  const Eigen::VectorXd flat = theta.flat();
  const Eigen::VectorXd dtheta = penalty.d_free.cwiseProduct(flat);
  const Eigen::VectorXd wg = w.solve(m.gbar);
  const Eigen::MatrixXd wgdot = w.solve(m.gdot);

  e.q = data_->num_subjects() * m.gbar.dot(wg);
  e.penalty = penalty.lambda * flat.dot(dtheta);
  e.value = e.q / data_->num_subjects() + e.penalty;
  e.gradient = 2.0 * m.gdot.transpose() * wg + 2.0 * penalty.lambda * dtheta;
  e.hessian = 2.0 * m.gdot.transpose() * wgdot;
  e.hessian = 0.5 * (e.hessian + e.hessian.transpose()).eval();
  e.hessian.diagonal() += 2.0 * penalty.lambda * penalty.d_free;
  e.gbar = std::move(m.gbar);
  e.gdot = std::move(m.gdot);
  e.regularized = w.regularized();
  return e;
}

double QifModel::objective_value(const ThetaFree& theta, const PenaltySpec& penalty,
                                 const WeightMatrix& frozen) const {
  const MomentSums m = moments(theta, false);
  const Eigen::VectorXd flat = theta.flat();
  return frozen.quad(m.gbar) + penalty.lambda * flat.dot(penalty.d_free.cwiseProduct(flat));
}

double QifModel::residual_variance(const ThetaFree& theta) const {
  const ThetaFull full = to_full(theta);
  double ss = 0.0;
  int n = 0;
  Eigen::VectorXd b0(spec0_.dim()), b1(spec1_.dim());
  for (const auto& s : data_->subjects) {
    for (int j = 0; j < s.num_obs(); ++j) {
      const Eigen::VectorXd xj = s.x.row(j).transpose();
      fill_basis(spec0_, full.beta0.dot(xj), {b0.data(), static_cast<std::size_t>(b0.size())});
      fill_basis(spec1_, full.beta1.dot(xj), {b1.data(), static_cast<std::size_t>(b1.size())});
      const double r = s.y[j] - b0.dot(full.gamma0) - s.g * b1.dot(full.gamma1);
      ss += r * r;
      ++n;
    }
  }
  return ss / n;
}

}  // namespace fvicm
