#pragma once

// Small datasets and direct, loop-level oracles written from the model
// definitions. Nothing here calls the library's basis or moment kernels.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "fvicm/dataset.hpp"
#include "fvicm/qif_kernels.hpp"
#include "fvicm/spline_basis.hpp"
#include "fvicm/theta.hpp"

namespace toy {

using fvicm::BasisSpec;
using fvicm::LongitudinalDataset;

inline LongitudinalDataset random_dataset(int n_subjects, int n_obs, int p, std::uint64_t seed,
                                          bool ragged = false) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::normal_distribution<double> norm(0.0, 1.0);
  LongitudinalDataset d;
  d.p = p;
  for (int i = 0; i < n_subjects; ++i) {
    fvicm::Subject s;
    s.id = "t" + std::to_string(i);
    s.g = i % 3;
    const int n = ragged ? 1 + i % n_obs : n_obs;
    s.x.resize(n, p);
    s.y.resize(n);
    for (int j = 0; j < n; ++j) {
      for (int k = 0; k < p; ++k) s.x(j, k) = unif(rng);
      s.y[j] = norm(rng);
    }
    d.subjects.push_back(std::move(s));
  }
  return d;
}

inline Eigen::VectorXd basis_def(const BasisSpec& spec, double u) {
  Eigen::VectorXd b(spec.degree + 1 + spec.num_knots());
  for (int k = 0; k <= spec.degree; ++k) b[k] = std::pow(u, k);
  for (int k = 0; k < spec.num_knots(); ++k)
    b[spec.degree + 1 + k] = u > spec.knots[k] ? std::pow(u - spec.knots[k], spec.degree) : 0.0;
  return b;
}

inline Eigen::VectorXd basis_deriv_def(const BasisSpec& spec, double u) {
  Eigen::VectorXd b = Eigen::VectorXd::Zero(spec.degree + 1 + spec.num_knots());
  for (int k = 1; k <= spec.degree; ++k) b[k] = k * std::pow(u, k - 1);
  for (int k = 0; k < spec.num_knots(); ++k)
    b[spec.degree + 1 + k] = u > spec.knots[k] ? spec.degree * std::pow(u - spec.knots[k], spec.degree - 1) : 0.0;
  return b;
}

inline Eigen::VectorXd lead_tail(const Eigen::VectorXd& tail) {
  Eigen::VectorXd beta(tail.size() + 1);
  beta[0] = std::sqrt(1.0 - tail.squaredNorm());
  beta.tail(tail.size()) = tail;
  return beta;
}

/// d beta / d tail: first row -tail' / beta_1, identity below.
inline Eigen::MatrixXd tail_jacobian(const Eigen::VectorXd& tail) {
  const int m = static_cast<int>(tail.size());
  Eigen::MatrixXd j = Eigen::MatrixXd::Zero(m + 1, m);
  const double lead = std::sqrt(1.0 - tail.squaredNorm());
  for (int a = 0; a < m; ++a) {
    j(0, a) = -tail[a] / lead;
    j(a + 1, a) = 1.0;
  }
  return j;
}

struct Free {
  Eigen::VectorXd t0, t1, g0, g1;

  Eigen::VectorXd flat() const {
    Eigen::VectorXd v(t0.size() + t1.size() + g0.size() + g1.size());
    v << t0, t1, g0, g1;
    return v;
  }
  static Free unflat(const Eigen::VectorXd& v, int p, int d0, int d1) {
    Free f;
    f.t0 = v.segment(0, p - 1);
    f.t1 = v.segment(p - 1, p - 1);
    f.g0 = v.segment(2 * (p - 1), d0);
    f.g1 = v.segment(2 * (p - 1) + d0, d1);
    return f;
  }
};

inline Free from_lib(const fvicm::ThetaFree& t) { return {t.beta0_tail, t.beta1_tail, t.gamma0, t.gamma1}; }

/// Mean of one subject by the model definition.
inline Eigen::VectorXd mean_def(const Free& th, const fvicm::Subject& s, const BasisSpec& s0, const BasisSpec& s1) {
  const Eigen::VectorXd b0 = lead_tail(th.t0), b1 = lead_tail(th.t1);
  Eigen::VectorXd mu(s.num_obs());
  for (int j = 0; j < s.num_obs(); ++j) {
    const Eigen::VectorXd x = s.x.row(j).transpose();
    mu[j] = basis_def(s0, b0.dot(x)).dot(th.g0) + s.g * basis_def(s1, b1.dot(x)).dot(th.g1);
  }
  return mu;
}

/// d mu / d theta* by the chain rule, column order (tail0, tail1, gamma0, gamma1).
inline Eigen::MatrixXd jacobian_def(const Free& th, const fvicm::Subject& s, const BasisSpec& s0,
                                    const BasisSpec& s1) {
  const int p = static_cast<int>(th.t0.size()) + 1;
  const int d0 = static_cast<int>(th.g0.size()), d1 = static_cast<int>(th.g1.size());
  const Eigen::VectorXd b0 = lead_tail(th.t0), b1 = lead_tail(th.t1);
  const Eigen::MatrixXd j0 = tail_jacobian(th.t0), j1 = tail_jacobian(th.t1);
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(s.num_obs(), 2 * (p - 1) + d0 + d1);
  for (int j = 0; j < s.num_obs(); ++j) {
    const Eigen::VectorXd x = s.x.row(j).transpose();
    const double u0 = b0.dot(x), u1 = b1.dot(x);
    out.block(j, 0, 1, p - 1) = basis_deriv_def(s0, u0).dot(th.g0) * (x.transpose() * j0);
    out.block(j, p - 1, 1, p - 1) = s.g * basis_deriv_def(s1, u1).dot(th.g1) * (x.transpose() * j1);
    out.block(j, 2 * (p - 1), 1, d0) = basis_def(s0, u0).transpose();
    out.block(j, 2 * (p - 1) + d0, 1, d1) = s.g * basis_def(s1, u1).transpose();
  }
  return out;
}

inline std::vector<Eigen::MatrixXd> basis_matrices_def(fvicm::BasisKind kind, int n) {
  std::vector<Eigen::MatrixXd> m{Eigen::MatrixXd::Identity(n, n)};
  if (kind == fvicm::BasisKind::identity_only) return m;
  Eigen::MatrixXd m2 = Eigen::MatrixXd::Zero(n, n);
  for (int a = 0; a < n; ++a)
    for (int b = 0; b < n; ++b)
      if (kind == fvicm::BasisKind::exchangeable ? a != b : std::abs(a - b) == 1) m2(a, b) = 1.0;
  m.push_back(m2);
  return m;
}

struct MomentsDef {
  Eigen::MatrixXd g;  // column per subject
  Eigen::VectorXd gbar;
  Eigen::MatrixXd cbar;
};

inline MomentsDef moments_def(const Free& th, const LongitudinalDataset& d, const BasisSpec& s0,
                              const BasisSpec& s1, fvicm::BasisKind kind, double scale) {
  const int k = static_cast<int>(th.flat().size());
  const int h = kind == fvicm::BasisKind::identity_only ? 1 : 2;
  MomentsDef out;
  out.g = Eigen::MatrixXd::Zero(h * k, d.num_subjects());
  for (int i = 0; i < d.num_subjects(); ++i) {
    const auto& s = d.subjects[i];
    const Eigen::VectorXd r = s.y - mean_def(th, s, s0, s1);
    const Eigen::MatrixXd jm = jacobian_def(th, s, s0, s1);
    const auto mats = basis_matrices_def(kind, s.num_obs());
    for (int a = 0; a < h; ++a) {
      const Eigen::MatrixXd a_half = Eigen::MatrixXd::Identity(s.num_obs(), s.num_obs()) / std::sqrt(scale);
      out.g.block(a * k, i, k, 1) = jm.transpose() * a_half * mats[a] * a_half * r;
    }
  }
  out.gbar = out.g.rowwise().mean();
  out.cbar = out.g * out.g.transpose() / d.num_subjects();
  return out;
}

/// C plus the stated ridge 1e-8 trace / dim whenever lambda_min < 1e-10 lambda_max.
inline Eigen::MatrixXd guarded_def(const Eigen::MatrixXd& c) {
  const Eigen::VectorXd ev = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(c).eigenvalues();
  Eigen::MatrixXd out = c;
  if (ev.minCoeff() < 1e-10 * ev.maxCoeff()) out.diagonal().array() += 1e-8 * c.trace() / c.rows();
  return out;
}

inline double qif_def(const Free& th, const LongitudinalDataset& d, const BasisSpec& s0, const BasisSpec& s1,
                      fvicm::BasisKind kind, double scale) {
  const MomentsDef m = moments_def(th, d, s0, s1, kind, scale);
  return d.num_subjects() * m.gbar.dot(guarded_def(m.cbar).fullPivLu().solve(m.gbar));
}

/// d gbar / d theta* by a five-point stencil on the oracle moments.
inline Eigen::MatrixXd gdot_fd(const Free& th, const LongitudinalDataset& d, const BasisSpec& s0,
                               const BasisSpec& s1, fvicm::BasisKind kind, double scale, double h = 1e-4) {
  const Eigen::VectorXd v = th.flat();
  const int p = static_cast<int>(th.t0.size()) + 1;
  const int d0 = static_cast<int>(th.g0.size()), d1 = static_cast<int>(th.g1.size());
  auto gbar = [&](const Eigen::VectorXd& w) {
    return moments_def(Free::unflat(w, p, d0, d1), d, s0, s1, kind, scale).gbar;
  };
  const Eigen::VectorXd base = gbar(v);
  Eigen::MatrixXd out(base.size(), v.size());
  for (int c = 0; c < v.size(); ++c) {
    Eigen::VectorXd e = Eigen::VectorXd::Zero(v.size());
    e[c] = h;
    out.col(c) = (-gbar(v + 2 * e) + 8 * gbar(v + e) - 8 * gbar(v - e) + gbar(v - 2 * e)) / (12 * h);
  }
  return out;
}

/// Block-diagonal d theta / d theta*.
inline Eigen::MatrixXd theta_jacobian_def(const Free& th) {
  const int p = static_cast<int>(th.t0.size()) + 1;
  const int d0 = static_cast<int>(th.g0.size()), d1 = static_cast<int>(th.g1.size());
  Eigen::MatrixXd j = Eigen::MatrixXd::Zero(2 * p + d0 + d1, 2 * (p - 1) + d0 + d1);
  j.block(0, 0, p, p - 1) = tail_jacobian(th.t0);
  j.block(p, p - 1, p, p - 1) = tail_jacobian(th.t1);
  j.block(2 * p, 2 * (p - 1), d0 + d1, d0 + d1).setIdentity();
  return j;
}

inline double min_knot_distance(const LongitudinalDataset& d, const Eigen::VectorXd& beta, const BasisSpec& spec) {
  double best = 1e300;
  for (const auto& s : d.subjects)
    for (int j = 0; j < s.num_obs(); ++j)
      for (double k : spec.knots) best = std::min(best, std::abs(s.x.row(j).dot(beta) - k));
  return best;
}

inline double rel_err(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  return (a - b).cwiseAbs().maxCoeff() / std::max(1.0, b.cwiseAbs().maxCoeff());
}

}  // namespace toy
