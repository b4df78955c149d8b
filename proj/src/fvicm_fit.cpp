#include "fvicm/fvicm_fit.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <optional>
#include <limits>
#include <numeric>

#include <spdlog/spdlog.h>

#include "fvicm/errors.hpp"

namespace fvicm {

void FitConfig::validate() const {
  if (degree < 1) throw ConfigError("spline degree must be >= 1");
  if (num_knots < 0) throw ConfigError("knot count must be >= 0");
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ConfigError("lambda must be finite and >= 0");
  if (max_outer_iters < 1 || max_inner_iters < 1) throw ConfigError("iteration caps must be >= 1");
  if (!(tol_theta > 0.0) || !(tol_obj > 0.0)) throw ConfigError("tolerances must be positive");
  if (step_halving_max < 1) throw ConfigError("step_halving_max must be >= 1");
  if (accel_depth < 1) throw ConfigError("accel_depth must be >= 1");
}

namespace {

std::vector<double> index_values(const LongitudinalDataset& data, const Eigen::VectorXd& beta) {
  std::vector<double> u;
  u.reserve(static_cast<std::size_t>(data.num_obs()));
  for (const auto& s : data.subjects) {
    const Eigen::VectorXd v = s.x * beta;
    u.insert(u.end(), v.data(), v.data() + v.size());
  }
  return u;
}

Eigen::VectorXd ones_index(int p) {
  return Eigen::VectorXd::Constant(p, 1.0 / std::sqrt(static_cast<double>(p)));
}

std::vector<int> iota_range(int start, int count) {
  std::vector<int> v(static_cast<std::size_t>(count));
  std::iota(v.begin(), v.end(), start);
  return v;
}

struct NewtonOutcome {
  int accepted = 0;
  bool used_gradient_fallback = false;
};

// Block Newton on `idx` with the weight held at `weight`. Indefinite block
// Hessians switch to steepest descent with Armijo backtracking.
NewtonOutcome newton_block(const QifModel& model, ThetaFree& theta, const std::vector<int>& idx,
                           const PenaltySpec& penalty, const WeightMatrix& weight,
                           const FitConfig& config, bool quadratic) {
  NewtonOutcome out;
  if (idx.empty()) return out;
  const ParamLayout layout = theta.layout();
  const auto nb = static_cast<Eigen::Index>(idx.size());

  for (int iter = 0; iter < config.max_inner_iters; ++iter) {
    const ObjectiveEval e = model.objective(theta, penalty, &weight);
    Eigen::VectorXd grad(nb);
    Eigen::MatrixXd hess(nb, nb);
    for (Eigen::Index a = 0; a < nb; ++a) {
      grad[a] = e.gradient[idx[a]];
      for (Eigen::Index b = 0; b < nb; ++b) hess(a, b) = e.hessian(idx[a], idx[b]);
    }

    Eigen::VectorXd dir;
    bool newton = false;
    Eigen::LDLT<Eigen::MatrixXd> ldlt(hess);
    if (ldlt.info() == Eigen::Success && ldlt.isPositive() &&
        (ldlt.vectorD().array() > 1e-14 * std::max(1.0, hess.diagonal().cwiseAbs().maxCoeff())).all()) {
      dir = -ldlt.solve(grad);
      newton = dir.allFinite();
    }
    double step = 1.0;
    if (!newton) {
      dir = -grad;
      out.used_gradient_fallback = true;
      const double gmax = grad.cwiseAbs().maxCoeff();
      if (gmax > 0.0) step = std::min(1.0, 0.1 / gmax);
    }
    const double slope = grad.dot(dir);
    if (!(slope < 0.0)) break;

    const Eigen::VectorXd base = theta.flat();
    const double f0 = e.value;
    bool accepted = false;
    double ft = f0;
    Eigen::VectorXd trial = base;
    for (int h = 0; h <= config.step_halving_max; ++h, step *= 0.5) {
      trial = base;
      for (Eigen::Index a = 0; a < nb; ++a) trial[idx[a]] += step * dir[a];
      const ThetaFree cand = ThetaFree::from_flat(trial, layout);
      if (!cand.feasible() || !trial.allFinite()) continue;
      ft = model.objective_value(cand, penalty, weight);
      const bool ok = newton ? ft < f0 : ft <= f0 + 1e-4 * step * slope;
      if (ok) {
        accepted = true;
        break;
      }
    }
    if (!accepted) break;
    theta = ThetaFree::from_flat(trial, layout);
    ++out.accepted;
    const double moved = (trial - base).cwiseAbs().maxCoeff();
    // The frozen objective is exactly quadratic in gamma: a full Newton step lands on the minimum.
    if (quadratic && newton && step == 1.0) break;
    if (moved < 1e-2 * config.tol_theta || f0 - ft <= 1e-2 * config.tol_obj * std::abs(f0)) break;
  }
  return out;
}

double cu_objective(const QifModel& model, const ThetaFree& theta, const PenaltySpec& penalty,
                    double* q_out = nullptr, bool* regularized = nullptr) {
  const QifValue v = model.qif_value(theta);
  const Eigen::VectorXd flat = theta.flat();
  if (q_out) *q_out = v.q;
  if (regularized) *regularized = v.regularized;
  return v.q / model.data().num_subjects() + penalty.lambda * flat.dot(penalty.d_free.cwiseProduct(flat));
}

// Equal cluster sizes make the exchangeable moments of any within-subject
// constant column a multiple of the identity ones, so C_N can lose rank.
int moment_rank(const Eigen::MatrixXd& cbar) {
  if (cbar.size() == 0) return 0;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cbar, Eigen::EigenvaluesOnly);
  const double top = es.eigenvalues().cwiseAbs().maxCoeff();
  return static_cast<int>((es.eigenvalues().array() > 1e-12 * top).count());
}

}  // namespace

std::pair<BasisSpec, BasisSpec> specs_at(const LongitudinalDataset& data, const Eigen::VectorXd& beta0,
                                         const Eigen::VectorXd& beta1, int degree, int num_knots) {
  BasisSpec s0{degree, place_knots(index_values(data, beta0), num_knots)};
  BasisSpec s1{degree, place_knots(index_values(data, beta1), num_knots)};
  s0.validate();
  s1.validate();
  return {std::move(s0), std::move(s1)};
}

ThetaFull initialize(const LongitudinalDataset& data, const BasisSpec& spec0, const BasisSpec& spec1) {
  if (data.subjects.empty()) throw InputError("initialize: empty dataset");
  const int p = data.p;
  const int d0 = spec0.dim(), d1 = spec1.dim();
  ThetaFull t;
  t.beta0 = ones_index(p);
  t.beta1 = ones_index(p);

  Eigen::MatrixXd gram = Eigen::MatrixXd::Zero(d0 + d1, d0 + d1);
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(d0 + d1);
  Eigen::VectorXd row(d0 + d1);
  double ysum = 0.0;
  for (const auto& s : data.subjects) {
    for (int j = 0; j < s.num_obs(); ++j) {
      const double u0 = s.x.row(j).dot(t.beta0), u1 = s.x.row(j).dot(t.beta1);
      fill_basis(spec0, u0, {row.data(), static_cast<std::size_t>(d0)});
      fill_basis(spec1, u1, {row.data() + d0, static_cast<std::size_t>(d1)});
      row.tail(d1) *= s.g;
      gram.selfadjointView<Eigen::Lower>().rankUpdate(row);
      rhs += s.y[j] * row;
      ysum += s.y[j];
    }
  }
  gram = gram.selfadjointView<Eigen::Lower>();
  gram.diagonal().array() += 1e-6;
  Eigen::LDLT<Eigen::MatrixXd> ldlt(gram);
  Eigen::VectorXd coef;
  if (ldlt.info() == Eigen::Success) coef = ldlt.solve(rhs);
  if (coef.size() == 0 || !coef.allFinite()) {
    spdlog::warn("initialize: ridge least squares failed, using the mean response");
    t.gamma0 = Eigen::VectorXd::Zero(d0);
    t.gamma1 = Eigen::VectorXd::Zero(d1);
    t.gamma0[0] = ysum / data.num_obs();
    return t;
  }
  t.gamma0 = coef.head(d0);
  t.gamma1 = coef.tail(d1);
  return t;
}

Covariance asymptotic_covariance(const QifModel& model, const ThetaFree& theta) {
  const MomentSums m = model.moments(theta, true);
  const WeightMatrix w = WeightMatrix::from_cbar(m.cbar);
  Covariance c;
  c.information = m.gdot.transpose() * w.solve(m.gdot);
  c.information = 0.5 * (c.information + c.information.transpose()).eval();
  const int k = static_cast<int>(c.information.rows());
  const double n = model.data().num_subjects();

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(c.information);
  const Eigen::VectorXd ev = es.eigenvalues();
  const double top = k > 0 ? ev.cwiseAbs().maxCoeff() : 0.0;
  Eigen::VectorXd inv_ev = Eigen::VectorXd::Zero(k);
  for (int i = 0; i < k; ++i) {
    if (ev[i] > 1e-12 * top) inv_ev[i] = 1.0 / ev[i];
    else c.pseudo_inverse = true;
  }
  if (c.pseudo_inverse) spdlog::warn("asymptotic_covariance: singular information, using a pseudo-inverse");
  c.acov_free = es.eigenvectors() * inv_ev.asDiagonal() * es.eigenvectors().transpose() / n;
  c.acov_free = 0.5 * (c.acov_free + c.acov_free.transpose()).eval();
  const Eigen::MatrixXd jac = theta_jacobian(theta);
  c.acov = jac * c.acov_free * jac.transpose();
  c.acov = 0.5 * (c.acov + c.acov.transpose()).eval();
  c.se_free = c.acov_free.diagonal().cwiseMax(0.0).cwiseSqrt();
  c.se = c.acov.diagonal().cwiseMax(0.0).cwiseSqrt();
  return c;
}

FitResult fit_from(const LongitudinalDataset& data, const FitConfig& config, const ThetaFull& start) {
  config.validate();
  data.validate();
  const int p = data.p;

  ThetaFull start_norm = start;
  start_norm.beta0 = normalize_index(start.beta0);
  start_norm.beta1 = normalize_index(start.beta1);
  auto [spec0, spec1] = specs_at(data, start_norm.beta0, start_norm.beta1, config.degree, config.num_knots);
  if (start.gamma0.size() != spec0.dim() || start.gamma1.size() != spec1.dim())
    throw ConfigError("starting gamma does not match the configured basis");

  QifModel model(data, spec0, spec1, config.basis, 1.0);
  model.set_execution(config.execution);
  ThetaFree theta = to_free(start_norm);
  PenaltySpec penalty = PenaltySpec::make(config.lambda, p, spec0, spec1);
  PenaltySpec beta_penalty = PenaltySpec::make(0.0, p, spec0, spec1);
  const ParamLayout layout = theta.layout();
  const std::vector<int> gamma_idx = iota_range(layout.free_gamma0(), layout.d0 + layout.d1);
  const std::vector<int> beta_idx = iota_range(0, layout.num_beta_free());
  const std::vector<int> all_idx = iota_range(0, layout.free_size());

  FitResult res;
  double prev_obj = std::numeric_limits<double>::quiet_NaN();
  // Anderson acceleration of the outer map theta -> T(theta). An extrapolated
  // point is kept only while the fixed-point residual keeps shrinking.
  std::deque<Eigen::VectorXd> hist_x, hist_f;
  std::optional<ThetaFree> fallback;
  double last_residual = std::numeric_limits<double>::infinity();
  for (int it = 1; it <= config.max_outer_iters; ++it) {
    const ThetaFree start = theta;
    const ThetaFull before = to_full(theta);
    if (it > 1 && config.recompute_knots) {
      auto [s0, s1] = specs_at(data, before.beta0, before.beta1, config.degree, config.num_knots);
      if (s0.knots != model.spec0().knots || s1.knots != model.spec1().knots) {
        model.set_specs(std::move(s0), std::move(s1));
        penalty = PenaltySpec::make(config.lambda, p, model.spec0(), model.spec1());
      }
    }

    // One weight per outer iteration: both steps descend the same objective.
    const ObjectiveEval start_eval = model.objective(theta, penalty);
    const WeightMatrix weight = start_eval.weight;

    newton_block(model, theta, gamma_idx, penalty, weight, config, true);                 // Step 1
    if (!beta_idx.empty()) newton_block(model, theta, beta_idx, beta_penalty, weight, config, false);  // Step 2
    if (config.joint_step) newton_block(model, theta, all_idx, penalty, weight, config, false);

    ThetaFull after = to_full(theta);  // Step 3
    after.beta0 = normalize_index(after.beta0);
    after.beta1 = normalize_index(after.beta1);
    theta = to_free(after);

    // The frozen-weight steps can cycle once the weight is refreshed, so the
    // outer step is shortened until the updated objective does not increase.
    // Increases at rounding level do not count.
    const double obj_cap = start_eval.value + 1e-10 * std::abs(start_eval.value);
    double obj_new = cu_objective(model, theta, penalty);
    if (obj_new > obj_cap) {
      const Eigen::VectorXd from = start.flat(), to = theta.flat();
      double alpha = 1.0;
      for (int h = 0; h < config.step_halving_max && obj_new > obj_cap; ++h) {
        alpha *= 0.5;
        theta = ThetaFree::from_flat(from + alpha * (to - from), layout);
        obj_new = cu_objective(model, theta, penalty);
      }
      // No decrease along the segment: keep the full step rather than a
      // vanishing one that would pass the convergence test.
      if (obj_new > obj_cap) {
        ++res.damping_failures;
        theta = ThetaFree::from_flat(to, layout);
      }
      after = to_full(theta);
    }

    IterationRecord rec;
    rec.objective_start = start_eval.value;
    rec.objective_end = model.objective_value(theta, penalty, weight);
    rec.theta_change = (after.flat() - before.flat()).cwiseAbs().maxCoeff();
    res.history.push_back(rec);

    const double rv = model.residual_variance(theta);
    if (rv > 0.0 && std::isfinite(rv)) model.set_scale(rv);

    const double obj = cu_objective(model, theta, penalty);
    const double ref = std::isnan(prev_obj) ? start_eval.value : prev_obj;
    const double rel = std::abs(obj - ref) / std::max(std::abs(ref), 1e-300);
    prev_obj = obj;
    res.iterations = it;
    if (rec.theta_change < config.tol_theta || rel < config.tol_obj) {
      res.converged = true;
      break;
    }
    if (!config.accelerate) continue;

    if (fallback && rec.theta_change > last_residual) {
      theta = *fallback;
      fallback.reset();
      hist_x.clear();
      hist_f.clear();
      last_residual = std::numeric_limits<double>::infinity();
      continue;
    }
    last_residual = rec.theta_change;
    hist_x.push_back(start.flat());
    hist_f.push_back(theta.flat() - hist_x.back());
    if (hist_x.size() > static_cast<std::size_t>(config.accel_depth) + 1) {
      hist_x.pop_front();
      hist_f.pop_front();
    }
    fallback.reset();
    if (hist_f.size() < 2) continue;
    const auto cols = static_cast<Eigen::Index>(hist_f.size() - 1);
    const Eigen::Index dim = hist_f.back().size();
    Eigen::MatrixXd df(dim, cols), dt(dim, cols);
    for (Eigen::Index j = 0; j < cols; ++j) {
      df.col(j) = hist_f[j + 1] - hist_f[j];
      dt.col(j) = (hist_x[j + 1] + hist_f[j + 1]) - (hist_x[j] + hist_f[j]);
    }
    const Eigen::VectorXd coef = df.colPivHouseholderQr().solve(hist_f.back());
    const Eigen::VectorXd cand = theta.flat() - dt * coef;
    const ThetaFree cand_theta = ThetaFree::from_flat(cand, layout);
    if (!cand.allFinite() || !cand_theta.feasible()) {
      hist_x.clear();
      hist_f.clear();
      continue;
    }
    fallback = theta;
    theta = cand_theta;
  }
  if (!res.converged)
    spdlog::debug("fit: no convergence after {} outer iterations", res.iterations);

  res.theta_free_hat = theta;
  res.theta_hat = to_full(theta);
  res.spec0 = model.spec0();
  res.spec1 = model.spec1();
  res.lambda = config.lambda;
  res.basis = config.basis;
  res.scale = model.scale();
  res.objective = cu_objective(model, theta, penalty, &res.q_at_hat, &res.regularized);
  res.num_subjects = data.num_subjects();
  res.num_moments = model.num_moments();
  res.moment_rank = moment_rank(model.moments(theta, false).cbar);
  res.num_free_params = model.num_free_params();

  const Covariance cov = asymptotic_covariance(model, theta);
  res.acov = cov.acov;
  res.acov_free = cov.acov_free;
  res.se = cov.se;
  res.se_free = cov.se_free;
  res.information = cov.information;
  res.acov_pseudo_inverse = cov.pseudo_inverse;

  const auto u0 = index_values(data, res.theta_hat.beta0);
  const auto u1 = index_values(data, res.theta_hat.beta1);
  std::tie(res.u0_min, res.u0_max) = [&] {
    auto [a, b] = std::minmax_element(u0.begin(), u0.end());
    return std::pair{*a, *b};
  }();
  std::tie(res.u1_min, res.u1_max) = [&] {
    auto [a, b] = std::minmax_element(u1.begin(), u1.end());
    return std::pair{*a, *b};
  }();
  std::tie(res.curve0, res.curve1) = eval_curves(res);
  return res;
}

FitResult fit(const LongitudinalDataset& data, const FitConfig& config) {
  config.validate();
  data.validate();
  const Eigen::VectorXd b = ones_index(data.p);
  const auto [spec0, spec1] = specs_at(data, b, b, config.degree, config.num_knots);
  return fit_from(data, config, initialize(data, spec0, spec1));
}

namespace {

CurveGrid curve_for(const BasisSpec& spec, const Eigen::VectorXd& gamma, const Eigen::MatrixXd& cov,
                    double lo, double hi, int points) {
  CurveGrid c;
  const int d = spec.dim();
  Eigen::VectorXd b(d);
  for (int i = 0; i < points; ++i) {
    const double u = points == 1 ? lo : lo + (hi - lo) * i / (points - 1);
    fill_basis(spec, u, {b.data(), static_cast<std::size_t>(d)});
    const double est = b.dot(gamma);
    const double sd = std::sqrt(std::max(0.0, b.dot(cov * b)));
    c.u.push_back(u);
    c.estimate.push_back(est);
    c.lower.push_back(est - 1.96 * sd);
    c.upper.push_back(est + 1.96 * sd);
  }
  return c;
}

}  // namespace

std::pair<CurveGrid, CurveGrid> eval_curves(const FitResult& fit, const GridPolicy& policy) {
  if (policy.num_points < 1) throw ConfigError("curve grid needs at least one point");
  const int p = static_cast<int>(fit.theta_hat.beta0.size());
  const int d0 = fit.spec0.dim(), d1 = fit.spec1.dim();
  const auto [lo0, hi0] = policy.range0.value_or(std::pair{fit.u0_min, fit.u0_max});
  const auto [lo1, hi1] = policy.range1.value_or(std::pair{fit.u1_min, fit.u1_max});
  const Eigen::MatrixXd cov0 = fit.acov.block(2 * p, 2 * p, d0, d0);
  const Eigen::MatrixXd cov1 = fit.acov.block(2 * p + d0, 2 * p + d0, d1, d1);
  return {curve_for(fit.spec0, fit.theta_hat.gamma0, cov0, lo0, hi0, policy.num_points),
          curve_for(fit.spec1, fit.theta_hat.gamma1, cov1, lo1, hi1, policy.num_points)};
}

double in_sample_mse(const FitResult& fit, const LongitudinalDataset& data) {
  const QifModel model(data, fit.spec0, fit.spec1, fit.basis);
  return model.residual_variance(fit.theta_free_hat);
}

}  // namespace fvicm
