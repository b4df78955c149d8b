#include "fvicm/model_select.hpp"

#include <cmath>
#include <exception>
#include <map>

#include <gsl/gsl_cdf.h>
#include <spdlog/spdlog.h>

#include "fvicm/errors.hpp"

namespace fvicm {

void SelectionGrid::validate() const {
  if (degrees.empty() || knot_counts.empty()) throw ConfigError("selection grid needs degrees and knot counts");
  for (int q : degrees)
    if (q < 1) throw ConfigError("selection grid degree must be >= 1");
  for (int k : knot_counts)
    if (k < 0) throw ConfigError("selection grid knot count must be >= 0");
  if (!(lambda_lo > 0.0) || !(lambda_hi > lambda_lo)) throw ConfigError("lambda bracket must be positive and ordered");
  if (golden_max_iters < 1 || !(golden_tol > 0.0)) throw ConfigError("invalid golden-section settings");
  if (fixed_lambda && !(*fixed_lambda >= 0.0)) throw ConfigError("fixed lambda must be >= 0");
}

double bic(double q_at_hat, int k, int n, int h) {
  if (k < 1 || n < 2 || h < 1) throw ConfigError("bic: need k >= 1, N >= 2, h >= 1");
  return q_at_hat + static_cast<double>(h - 1) * k * std::log(static_cast<double>(n));
}

GofResult gof_test(double q_at_hat, int r, int k) {
  GofResult g;
  g.df = r - k;
  if (g.df <= 0) {
    g.saturated = true;
    g.df = 0;
    return g;
  }
  g.p_value = q_at_hat <= 0.0 ? 1.0 : gsl_cdf_chisq_Q(q_at_hat, g.df);
  return g;
}

double effective_df(const Eigen::MatrixXd& qdd, const Eigen::VectorXd& d_free, double lambda, int n) {
  Eigen::MatrixXd a = qdd;
  a.diagonal() += 2.0 * n * lambda * d_free;
  const Eigen::MatrixXd x = a.completeOrthogonalDecomposition().solve(qdd);
  return x.trace();
}

GcvPoint gcv_at(const FitResult& fit, const LongitudinalDataset& data) {
  const int n = data.num_subjects();
  const Eigen::MatrixXd qdd = 2.0 * n * fit.information;
  const PenaltySpec pen = PenaltySpec::make(fit.lambda, data.p, fit.spec0, fit.spec1);
  GcvPoint pt;
  pt.lambda = fit.lambda;
  pt.q = fit.q_at_hat;
  pt.df = effective_df(qdd, pen.d_free, fit.lambda, n);
  const double denom = 1.0 - pt.df / n;
  pt.gcv = (fit.q_at_hat / n) / (denom * denom);
  return pt;
}

GcvSelection gcv_select(const LongitudinalDataset& data, const FitConfig& config, const SelectionGrid& grid) {
  grid.validate();
  GcvSelection out;
  std::map<double, std::pair<GcvPoint, FitResult>> cache;
  auto probe = [&](double log_lambda) -> double {
    auto it = cache.find(log_lambda);
    if (it != cache.end()) return it->second.first.gcv;
    FitConfig c = config;
    c.lambda = std::exp(log_lambda);
    FitResult f = fit(data, c);
    const GcvPoint pt = gcv_at(f, data);
    out.curve.push_back(pt);
    cache.emplace(log_lambda, std::pair{pt, std::move(f)});
    return pt.gcv;
  };

  const double phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double a = std::log(grid.lambda_lo), b = std::log(grid.lambda_hi);
  double c = b - phi * (b - a), d = a + phi * (b - a);
  double fc = probe(c), fd = probe(d);
  for (int it = 0; it < grid.golden_max_iters && (b - a) > grid.golden_tol; ++it) {
    if (fc <= fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - phi * (b - a);
      fc = probe(c);
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + phi * (b - a);
      fd = probe(d);
    }
  }
  // Also consider the bracket ends so a monotone curve lands on the boundary.
  probe(std::log(grid.lambda_lo));
  probe(std::log(grid.lambda_hi));
  auto best = cache.begin();
  for (auto it = cache.begin(); it != cache.end(); ++it)
    if (it->second.first.gcv < best->second.first.gcv) best = it;
  out.lambda_hat = best->second.first.lambda;
  out.fit = std::move(best->second.second);
  return out;
}

std::size_t argmin_bic(const std::vector<Candidate>& cands) {
  if (cands.empty()) throw ConfigError("argmin_bic: no candidates");
  std::size_t best = 0;
  for (std::size_t i = 1; i < cands.size(); ++i) {
    const Candidate& c = cands[i];
    const Candidate& b = cands[best];
    if (c.bic < b.bic || (c.bic == b.bic && (c.k < b.k || (c.k == b.k && c.degree < b.degree)))) best = i;
  }
  return best;
}

SelectionReport select_model(const LongitudinalDataset& data, const FitConfig& base, const SelectionGrid& grid) {
  grid.validate();
  data.validate();
  std::vector<std::pair<int, int>> combos;
  for (int q : grid.degrees)
    for (int k : grid.knot_counts) combos.emplace_back(q, k);
  const auto nc = static_cast<int>(combos.size());
  std::vector<Candidate> cands(combos.size());
  std::vector<FitResult> fits(combos.size());
  std::vector<std::exception_ptr> errors(combos.size());

#pragma omp parallel for schedule(dynamic)
  for (int i = 0; i < nc; ++i) {
    try {
      FitConfig c = base;
      c.degree = combos[i].first;
      c.num_knots = combos[i].second;
      Candidate& cand = cands[i];
      if (grid.fixed_lambda) {
        c.lambda = *grid.fixed_lambda;
        fits[i] = fit(data, c);
      } else {
        GcvSelection g = gcv_select(data, c, grid);
        cand.gcv_curve = std::move(g.curve);
        fits[i] = std::move(g.fit);
      }
      const FitResult& f = fits[i];
      cand.degree = c.degree;
      cand.num_knots = c.num_knots;
      cand.lambda = f.lambda;
      cand.q_at_hat = f.q_at_hat;
      cand.k = f.num_free_params;
      cand.r = f.num_moments;
      const int h = cand.r / cand.k;
      cand.bic = bic(f.q_at_hat, cand.k, data.num_subjects(), h);
      cand.rank = f.moment_rank;
      cand.gof = gof_test(f.q_at_hat, cand.rank, cand.k);
      cand.converged = f.converged;
    } catch (...) {
      errors[i] = std::current_exception();
    }
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);

  SelectionReport rep;
  rep.candidates = std::move(cands);
  rep.chosen = argmin_bic(rep.candidates);
  rep.chosen_fit = std::move(fits[rep.chosen]);
  const Candidate& b = rep.best();
  spdlog::debug("model selection: q={} K={} lambda={:.3g} BIC={:.4f}", b.degree, b.num_knots, b.lambda, b.bic);
  return rep;
}

}  // namespace fvicm
