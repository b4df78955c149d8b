#include "fvicm/theta.hpp"

#include <cmath>

#include "fvicm/errors.hpp"

namespace fvicm {

Eigen::VectorXd ThetaFull::flat() const {
  Eigen::VectorXd v(beta0.size() + beta1.size() + gamma0.size() + gamma1.size());
  v << beta0, beta1, gamma0, gamma1;
  return v;
}

ThetaFull ThetaFull::from_flat(const Eigen::VectorXd& v, const ParamLayout& l) {
  if (v.size() != l.full_size()) throw InputError("ThetaFull::from_flat: size mismatch");
  ThetaFull t;
  t.beta0 = v.segment(0, l.p);
  t.beta1 = v.segment(l.p, l.p);
  t.gamma0 = v.segment(2 * l.p, l.d0);
  t.gamma1 = v.segment(2 * l.p + l.d0, l.d1);
  return t;
}

bool ThetaFull::satisfies_constraints(double tol) const {
  return std::abs(beta0.norm() - 1.0) <= tol && std::abs(beta1.norm() - 1.0) <= tol &&
         beta0[0] > 0.0 && beta1[0] > 0.0;
}

Eigen::VectorXd ThetaFree::flat() const {
  Eigen::VectorXd v(beta0_tail.size() + beta1_tail.size() + gamma0.size() + gamma1.size());
  v << beta0_tail, beta1_tail, gamma0, gamma1;
  return v;
}

ThetaFree ThetaFree::from_flat(const Eigen::VectorXd& v, const ParamLayout& l) {
  if (v.size() != l.free_size()) throw InputError("ThetaFree::from_flat: size mismatch");
  ThetaFree t;
  t.beta0_tail = v.segment(l.free_beta0(), l.tail());
  t.beta1_tail = v.segment(l.free_beta1(), l.tail());
  t.gamma0 = v.segment(l.free_gamma0(), l.d0);
  t.gamma1 = v.segment(l.free_gamma1(), l.d1);
  return t;
}

bool ThetaFree::feasible() const {
  return beta0_tail.squaredNorm() < 1.0 && beta1_tail.squaredNorm() < 1.0;
}

Eigen::VectorXd normalize_index(const Eigen::VectorXd& beta) {
  const double nrm = beta.norm();
  if (!(nrm > 0.0)) throw InputError("cannot normalize a zero index vector");
  const double sign = beta[0] < 0.0 ? -1.0 : 1.0;
  return sign * beta / nrm;
}

namespace {

Eigen::VectorXd lead_from_tail(const Eigen::VectorXd& tail) {
  const double s = tail.squaredNorm();
  if (!(s < 1.0)) throw InputError("index tail outside the unit ball");
  Eigen::VectorXd beta(tail.size() + 1);
  beta[0] = std::sqrt(1.0 - s);
  beta.tail(tail.size()) = tail;
  return beta;
}

}  // namespace

ThetaFree to_free(const ThetaFull& theta) {
  if (!(theta.beta0[0] > 0.0) || !(theta.beta1[0] > 0.0))
    throw InputError("to_free: leading index loadings must be positive");
  ThetaFree f;
  const auto p = theta.beta0.size();
  f.beta0_tail = theta.beta0.tail(p - 1);
  f.beta1_tail = theta.beta1.tail(p - 1);
  f.gamma0 = theta.gamma0;
  f.gamma1 = theta.gamma1;
  return f;
}

ThetaFull to_full(const ThetaFree& theta) {
  ThetaFull t;
  t.beta0 = lead_from_tail(theta.beta0_tail);
  t.beta1 = lead_from_tail(theta.beta1_tail);
  t.gamma0 = theta.gamma0;
  t.gamma1 = theta.gamma1;
  return t;
}

Eigen::MatrixXd index_jacobian(const Eigen::VectorXd& tail) {
  const auto m = tail.size();
  const double lead = std::sqrt(1.0 - tail.squaredNorm());
  Eigen::MatrixXd j(m + 1, m);
  j.row(0) = -tail.transpose() / lead;
  j.bottomRows(m).setIdentity();
  return j;
}

Eigen::MatrixXd theta_jacobian(const ThetaFree& theta) {
  const ParamLayout l = theta.layout();
  Eigen::MatrixXd j = Eigen::MatrixXd::Zero(l.full_size(), l.free_size());
  j.block(0, 0, l.p, l.tail()) = index_jacobian(theta.beta0_tail);
  j.block(l.p, l.tail(), l.p, l.tail()) = index_jacobian(theta.beta1_tail);
  j.block(2 * l.p, l.free_gamma0(), l.d0 + l.d1, l.d0 + l.d1).setIdentity();
  return j;
}

PenaltySpec PenaltySpec::make(double lambda, int p, const BasisSpec& spec0,
                              const BasisSpec& spec1) {
  if (!(lambda >= 0.0)) throw ConfigError("penalty lambda must be nonnegative");
  const ParamLayout l{p, spec0.dim(), spec1.dim()};
  PenaltySpec s;
  s.lambda = lambda;
  s.d_full = Eigen::VectorXd::Zero(l.full_size());
  s.d_free = Eigen::VectorXd::Zero(l.free_size());
  s.d_full.segment(2 * p + spec0.poly_dim(), spec0.num_knots()).setOnes();
  s.d_full.segment(2 * p + l.d0 + spec1.poly_dim(), spec1.num_knots()).setOnes();
  s.d_free.segment(l.free_gamma0() + spec0.poly_dim(), spec0.num_knots()).setOnes();
  s.d_free.segment(l.free_gamma1() + spec1.poly_dim(), spec1.num_knots()).setOnes();
  return s;
}

}  // namespace fvicm
