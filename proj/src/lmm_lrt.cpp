#include "fvicm/lmm_lrt.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <random>

#include <gsl/gsl_multimin.h>
#include <spdlog/spdlog.h>

#include "fvicm/errors.hpp"
#include "fvicm/rng.hpp"

namespace fvicm {

Eigen::MatrixXd LmmDesign::fixed_design() const {
  Eigen::MatrixXd x(num_obs(), w0.cols() + w1.cols());
  x << w0, w1;
  return x;
}

LmmDesign build_lmm(const LongitudinalDataset& data, const Eigen::VectorXd& beta0, const Eigen::VectorXd& beta1,
                    const BasisSpec& spec0, const BasisSpec& spec1) {
  data.validate();
  spec0.validate();
  spec1.validate();
  if (beta0.size() != data.p || beta1.size() != data.p) throw ConfigError("build_lmm: index length differs from p");
  if (spec0.degree != spec1.degree || spec0.num_knots() != spec1.num_knots())
    throw ConfigError("build_lmm: both indices need the same degree and knot count");
  const int n = data.num_obs();
  const int pd = spec0.poly_dim(), k = spec0.num_knots();
  LmmDesign d;
  d.degree = spec0.degree;
  d.num_knots = k;
  d.w0.resize(n, pd);
  d.w1.resize(n, pd);
  d.z0.resize(n, k);
  d.z1.resize(n, k);
  d.y.resize(n);
  Eigen::VectorXd b0(spec0.dim()), b1(spec1.dim());
  int row = 0;
  for (const auto& s : data.subjects) {
    d.sizes.push_back(s.num_obs());
    for (int j = 0; j < s.num_obs(); ++j, ++row) {
      fill_basis(spec0, s.x.row(j).dot(beta0), {b0.data(), static_cast<std::size_t>(b0.size())});
      fill_basis(spec1, s.x.row(j).dot(beta1), {b1.data(), static_cast<std::size_t>(b1.size())});
      b1 *= s.g;
      d.w0.row(row) = b0.head(pd).transpose();
      d.z0.row(row) = b0.tail(k).transpose();
      d.w1.row(row) = b1.head(pd).transpose();
      d.z1.row(row) = b1.tail(k).transpose();
      d.y[row] = s.y[j];
    }
  }
  return d;
}

LmmDesign build_lmm(const FitResult& fit, const LongitudinalDataset& data) {
  return build_lmm(data, fit.theta_hat.beta0, fit.theta_hat.beta1, fit.spec0, fit.spec1);
}

namespace {

// Cross-products of M = [X | Z0 | Z1 | y] reduced to what the restricted
// likelihood needs. The random intercept is handled in closed form per
// subject; Z0 and Z1 enter through a Woodbury identity.
class RemlCore {
 public:
  RemlCore(const LmmDesign& d, const Eigen::VectorXd& y) : design_(d) {
    if (y.size() != d.num_obs()) throw ConfigError("reml: response length differs from the design");
    p_ = static_cast<int>(d.w0.cols() + d.w1.cols());
    k_ = d.num_knots;
    n_ = d.num_obs();
    m_ = p_ + 2 * k_ + 1;
    if (n_ <= p_) throw InputError("reml: need more observations than fixed effects");
    Eigen::MatrixXd mm(n_, m_);
    mm << d.w0, d.w1, d.z0, d.z1, y;
    total_ = mm.transpose() * mm;
    std::map<int, std::pair<int, Eigen::MatrixXd>> groups;
    int row = 0;
    for (int ni : d.sizes) {
      const Eigen::VectorXd s = mm.middleRows(row, ni).colwise().sum().transpose();
      auto& g = groups.try_emplace(ni, 0, Eigen::MatrixXd::Zero(m_, m_)).first->second;
      g.first += 1;
      g.second.noalias() += s * s.transpose();
      row += ni;
    }
    for (auto& [ni, g] : groups) groups_.push_back({ni, g.first, std::move(g.second)});

    Eigen::LDLT<Eigen::MatrixXd> xx(total_.topLeftCorner(p_, p_));
    const Eigen::VectorXd dd = xx.vectorD();
    const double top = dd.cwiseAbs().maxCoeff();
    if (xx.info() != Eigen::Success || !(dd.array() > 1e-12 * std::max(top, 1e-300)).all())
      throw ConditioningError("reml: fixed-effect design is rank deficient");

    active_[0] = *std::max_element(d.sizes.begin(), d.sizes.end()) > 1;
    active_[1] = k_ > 0 && d.z0.cwiseAbs().maxCoeff() > 0.0;
    active_[2] = k_ > 0 && d.z1.cwiseAbs().maxCoeff() > 0.0;
  }

  int p() const { return p_; }
  int k() const { return k_; }
  int n() const { return n_; }
  bool active(int c) const { return active_[c]; }

  struct Eval {
    double neg2 = 0.0;
    double rss = 0.0;  // y'Py in sigma2_eps units
    Eigen::VectorXd fixed;
  };

  Eval eval(const Eigen::Vector3d& r) const {
    Eval out;
    Eigen::MatrixXd psi = total_;
    double logdet_v = 0.0;
    for (const auto& g : groups_) {
      const double c = r[0] / (1.0 + g.size * r[0]);
      psi.noalias() -= c * g.sums;
      logdet_v += g.count * std::log1p(g.size * r[0]);
    }
    const int q = 2 * k_;
    const int xy = p_ + 1;
    Eigen::MatrixXd omega(xy, xy);
    auto pick = [&](const Eigen::MatrixXd& a, int ri, int ci) {
      const int rr = ri < p_ ? ri : m_ - 1;
      const int cc = ci < p_ ? ci : m_ - 1;
      return a(rr, cc);
    };
    for (int i = 0; i < xy; ++i)
      for (int j = 0; j < xy; ++j) omega(i, j) = pick(psi, i, j);
    if (q > 0) {
      Eigen::VectorXd dh(q);
      dh.head(k_).setConstant(std::sqrt(r[1]));
      dh.tail(k_).setConstant(std::sqrt(r[2]));
      Eigen::MatrixXd kt = dh.asDiagonal() * psi.block(p_, p_, q, q) * dh.asDiagonal();
      kt.diagonal().array() += 1.0;
      Eigen::MatrixXd bz(q, xy);
      for (int j = 0; j < xy; ++j) bz.col(j) = psi.block(p_, j < p_ ? j : m_ - 1, q, 1);
      bz = dh.asDiagonal() * bz;
      Eigen::LLT<Eigen::MatrixXd> llt(kt);
      if (llt.info() != Eigen::Success) throw ConditioningError("reml: I + D^1/2 Z'A^-1 Z D^1/2 not positive definite");
      omega.noalias() -= bz.transpose() * llt.solve(bz);
      logdet_v += 2.0 * llt.matrixLLT().diagonal().array().log().sum();
    }
    Eigen::LLT<Eigen::MatrixXd> xx(omega.topLeftCorner(p_, p_));
    if (xx.info() != Eigen::Success) throw ConditioningError("reml: X'V^-1X not positive definite");
    out.fixed = xx.solve(omega.col(p_).head(p_));
    const double scale = std::max(omega(p_, p_), 1e-300);
    out.rss = std::max(omega(p_, p_) - omega.col(p_).head(p_).dot(out.fixed), 1e-300 * scale);
    const double logdet_x = 2.0 * xx.matrixLLT().diagonal().array().log().sum();
    const double dof = n_ - p_;
    out.neg2 = dof * std::log(out.rss / dof) + logdet_v + logdet_x;
    return out;
  }

 private:
  struct Group {
    int size;
    int count;
    Eigen::MatrixXd sums;
  };
  const LmmDesign& design_;
  int p_ = 0, k_ = 0, n_ = 0, m_ = 0;
  Eigen::MatrixXd total_;
  std::vector<Group> groups_;
  bool active_[3] = {false, false, false};
};

struct SimplexCtx {
  const RemlCore* core;
  std::vector<int> comps;
};

Eigen::Vector3d ratios_from(const SimplexCtx& c, const gsl_vector* s) {
  Eigen::Vector3d r = Eigen::Vector3d::Zero();
  for (std::size_t i = 0; i < c.comps.size(); ++i) {
    const double v = gsl_vector_get(s, i);
    r[c.comps[i]] = v * v;
  }
  return r;
}

double simplex_fn(const gsl_vector* s, void* params) {
  const auto& c = *static_cast<const SimplexCtx*>(params);
  const Eigen::Vector3d r = ratios_from(c, s);
  if (!r.allFinite() || r.maxCoeff() > 1e12) return std::numeric_limits<double>::infinity();
  try {
    return c.core->eval(r).neg2;
  } catch (const ConditioningError&) {
    return std::numeric_limits<double>::infinity();
  }
}

}  // namespace

double reml_criterion(const LmmDesign& design, const Eigen::VectorXd& y, const Eigen::Vector3d& ratios) {
  return RemlCore(design, y).eval(ratios).neg2;
}

RemlResult blups_at(const LmmDesign& d, const Eigen::VectorXd& y, const Eigen::Vector3d& ratios) {
  const RemlCore core(d, y);
  const auto ev = core.eval(ratios);
  RemlResult res;
  res.ratios = ratios;
  res.fixed = ev.fixed;
  res.neg2_reml = ev.neg2;
  const double s2 = ev.rss / (core.n() - core.p());
  res.var = {ratios[0] * s2, ratios[1] * s2, ratios[2] * s2, s2};

  const int k = d.num_knots;
  const Eigen::VectorXd resid = y - d.fixed_design() * ev.fixed;
  auto apply_ainv = [&](const Eigen::VectorXd& v) {
    Eigen::VectorXd out = v;
    int row = 0;
    for (int ni : d.sizes) {
      const double c = ratios[0] / (1.0 + ni * ratios[0]);
      out.segment(row, ni).array() -= c * v.segment(row, ni).sum();
      row += ni;
    }
    return out;
  };
  Eigen::VectorXd vr = apply_ainv(resid);
  if (k > 0) {
    Eigen::MatrixXd z(d.num_obs(), 2 * k);
    z << d.z0, d.z1;
    Eigen::VectorXd dh(2 * k);
    dh.head(k).setConstant(std::sqrt(ratios[1]));
    dh.tail(k).setConstant(std::sqrt(ratios[2]));
    const Eigen::MatrixXd az = dh.asDiagonal() * (z.transpose() * [&] {
      Eigen::MatrixXd m(z.rows(), z.cols());
      for (int j = 0; j < z.cols(); ++j) m.col(j) = apply_ainv(z.col(j));
      return m;
    }());
    Eigen::MatrixXd kt = az * dh.asDiagonal();
    kt = 0.5 * (kt + kt.transpose()).eval();
    kt.diagonal().array() += 1.0;
    const Eigen::VectorXd t = dh.asDiagonal() * (z.transpose() * vr);
    const Eigen::VectorXd s = kt.llt().solve(t);
    vr -= apply_ainv(z * (dh.asDiagonal() * s));
    res.b0 = ratios[1] * (d.z0.transpose() * vr);
    res.b1 = ratios[2] * (d.z1.transpose() * vr);
  } else {
    res.b0.resize(0);
    res.b1.resize(0);
  }
  res.a.resize(d.num_subjects());
  int row = 0;
  for (int i = 0; i < d.num_subjects(); ++i) {
    res.a[i] = ratios[0] * vr.segment(row, d.sizes[i]).sum();
    row += d.sizes[i];
  }
  return res;
}

RemlResult reml_fit(const LmmDesign& d, const Eigen::VectorXd& y, const RemlOptions& options) {
  const RemlCore core(d, y);
  SimplexCtx ctx{&core, {}};
  for (int c = 0; c < 3; ++c)
    if (core.active(c)) ctx.comps.push_back(c);
  const auto dim = ctx.comps.size();

  Eigen::Vector3d best = Eigen::Vector3d::Zero();
  double best_val = core.eval(best).neg2;
  int iterations = 0;
  if (dim > 0) {
    // Start from the best point of a coarse grid on the sqrt-ratio scale.
    const double levels[] = {0.0, 0.3, 1.0, 3.0};
    std::vector<int> idx(dim, 0);
    Eigen::Vector3d start = best;
    while (true) {
      Eigen::Vector3d r = Eigen::Vector3d::Zero();
      for (std::size_t i = 0; i < dim; ++i) r[ctx.comps[i]] = levels[idx[i]] * levels[idx[i]];
      const double v = core.eval(r).neg2;
      if (v < best_val) {
        best_val = v;
        start = r;
      }
      std::size_t pos = 0;
      while (pos < dim && ++idx[pos] == 4) idx[pos++] = 0;
      if (pos == dim) break;
    }

    gsl_multimin_function fn{&simplex_fn, dim, &ctx};
    gsl_vector* x = gsl_vector_alloc(dim);
    gsl_vector* step = gsl_vector_alloc(dim);
    gsl_multimin_fminimizer* mz = gsl_multimin_fminimizer_alloc(gsl_multimin_fminimizer_nmsimplex2, dim);
    bool converged = false;
    Eigen::Vector3d cur = start;
    for (int restart = 0; restart < 2; ++restart) {
      for (std::size_t i = 0; i < dim; ++i) {
        const double s = std::sqrt(cur[ctx.comps[i]]);
        gsl_vector_set(x, i, s);
        gsl_vector_set(step, i, restart == 0 ? std::max(0.25, 0.5 * s) : std::max(0.05, 0.1 * s));
      }
      gsl_multimin_fminimizer_set(mz, &fn, x, step);
      converged = false;
      double checkpoint = gsl_multimin_fminimizer_minimum(mz);
      for (int it = 1; it <= options.max_iters; ++it) {
        ++iterations;
        if (gsl_multimin_fminimizer_iterate(mz) != 0) break;
        if (gsl_multimin_test_size(gsl_multimin_fminimizer_size(mz), options.simplex_tol) == GSL_SUCCESS) {
          converged = true;
          break;
        }
        // Flat directions (a ratio pinned at zero) can keep the simplex from
        // shrinking; stop once the best value has stalled.
        if (it % 100 == 0) {
          const double now = gsl_multimin_fminimizer_minimum(mz);
          if (checkpoint - now <= 1e-10 * (1.0 + std::abs(now))) {
            converged = true;
            break;
          }
          checkpoint = now;
        }
      }
      cur = ratios_from(ctx, gsl_multimin_fminimizer_x(mz));
    }
    const double cur_val = gsl_multimin_fminimizer_minimum(mz);
    gsl_multimin_fminimizer_free(mz);
    gsl_vector_free(step);
    gsl_vector_free(x);
    if (!converged) throw ConvergenceError("reml: simplex did not converge after " + std::to_string(iterations) +
                                           " iterations; last ratios " + std::to_string(cur[0]) + ", " +
                                           std::to_string(cur[1]) + ", " + std::to_string(cur[2]));
    if (cur_val < best_val) {
      best = cur;
      best_val = cur_val;
    } else {
      best = start;
    }
    // Snap tiny components onto the boundary when that does not hurt.
    for (int c : ctx.comps) {
      if (best[c] == 0.0) continue;
      Eigen::Vector3d trial = best;
      trial[c] = 0.0;
      const double v = core.eval(trial).neg2;
      if (v <= best_val + 1e-9 * std::max(1.0, std::abs(best_val))) {
        best = trial;
        best_val = std::min(v, best_val);
      }
    }
  }
  RemlResult res = blups_at(d, y, best);
  res.iterations = iterations;
  return res;
}

Eigen::VectorXd pseudo_outcome(const LmmDesign& d, const Eigen::VectorXd& y, const RemlResult& reml,
                               bool subtract_intercept) {
  Eigen::VectorXd out = y;
  if (d.num_knots > 0) out -= d.z0 * reml.b0;
  if (!subtract_intercept) return out;
  int row = 0;
  for (int i = 0; i < d.num_subjects(); ++i) {
    out.segment(row, d.sizes[i]).array() -= reml.a[i];
    row += d.sizes[i];
  }
  return out;
}

ReducedDesign reduced_design(const LmmDesign& d) {
  ReducedDesign r;
  r.x = d.fixed_design();
  r.z = d.z1;
  r.p_null = static_cast<int>(d.w0.cols()) + 2;
  return r;
}

void whiten_intercept(const std::vector<int>& sizes, double ratio, Eigen::Ref<Eigen::MatrixXd> m) {
  if (!(ratio >= 0.0)) throw ConfigError("whiten_intercept: negative variance ratio");
  if (std::accumulate(sizes.begin(), sizes.end(), Eigen::Index{0}) != m.rows())
    throw ConfigError("whiten_intercept: block sizes do not cover the rows");
  int row = 0;
  for (int ni : sizes) {
    // (I + r 11')^{-1/2} = I + ((1 + n r)^{-1/2} - 1) 11'/n
    const double f = (1.0 / std::sqrt(1.0 + ni * ratio) - 1.0) / ni;
    const Eigen::RowVectorXd sums = m.middleRows(row, ni).colwise().sum();
    m.middleRows(row, ni).rowwise() += f * sums;
    row += ni;
  }
}

namespace {

// Maximizes f over {0} and a log grid, with one widening at the top and a
// golden refinement around the best grid point.
template <class F>
LrtProfile sup_profile(F&& f, const LrtOptions& o) {
  LrtProfile out;
  out.stat = f(0.0);
  out.ratio_hat = 0.0;
  const double llo = std::log(o.ratio_lo), lhi = std::log(o.ratio_hi);
  const int g = std::max(o.grid_points, 2);
  std::vector<double> grid(static_cast<std::size_t>(g));
  for (int j = 0; j < g; ++j) grid[j] = llo + (lhi - llo) * j / (g - 1);
  auto scan = [&](const std::vector<double>& pts) {
    int arg = -1;
    for (int j = 0; j < static_cast<int>(pts.size()); ++j) {
      const double v = f(std::exp(pts[j]));
      if (v > out.stat) {
        out.stat = v;
        out.ratio_hat = std::exp(pts[j]);
        arg = j;
      }
    }
    return arg;
  };
  int arg = scan(grid);
  if (arg == g - 1) {
    const double step = (lhi - llo) / (g - 1);
    std::vector<double> wide;
    for (int j = 1; j <= g / 2; ++j) wide.push_back(lhi + step * j);
    const int a2 = scan(wide);
    if (a2 >= 0) {
      grid.insert(grid.end(), wide.begin(), wide.end());
      arg = g - 1 + 1 + a2;
    }
    if (arg == static_cast<int>(grid.size()) - 1) out.at_upper = true;
  }
  if (arg >= 0) {
    double a = grid[std::max(arg - 1, 0)];
    double b = grid[std::min(arg + 1, static_cast<int>(grid.size()) - 1)];
    const double phi = (std::sqrt(5.0) - 1.0) / 2.0;
    double c = b - phi * (b - a), d = a + phi * (b - a);
    double fc = f(std::exp(c)), fd = f(std::exp(d));
    for (int it = 0; it < o.refine_iters && b - a > 1e-10; ++it) {
      if (fc >= fd) {
        b = d;
        d = c;
        fd = fc;
        c = b - phi * (b - a);
        fc = f(std::exp(c));
      } else {
        a = c;
        c = d;
        fc = fd;
        d = a + phi * (b - a);
        fd = f(std::exp(d));
      }
    }
    const double lx = fc >= fd ? c : d;
    const double v = std::max(fc, fd);
    if (v > out.stat) {
      out.stat = v;
      out.ratio_hat = std::exp(lx);
    }
  }
  out.stat = std::max(out.stat, 0.0);
  return out;
}

}  // namespace

LrtProfile lrt_statistic(const ReducedDesign& rd, const Eigen::VectorXd& y, const LrtOptions& o) {
  const int n = rd.num_obs(), p = rd.p(), k = rd.num_random(), m = p + k + 1;
  if (y.size() != n) throw ConfigError("lrt: response length differs from the design");
  if (rd.p_null < 0 || rd.p_null > p) throw ConfigError("lrt: invalid null column count");
  if (n <= m) throw InputError("lrt: need more observations than design columns");
  Eigen::MatrixXd mm(n, m);
  mm << rd.x, rd.z, y;
  const Eigen::MatrixXd r = Eigen::HouseholderQR<Eigen::MatrixXd>(mm).matrixQR().topRows(m).triangularView<Eigen::Upper>();
  const double dmax = r.diagonal().head(p).cwiseAbs().maxCoeff();
  if (!(r.diagonal().head(p).cwiseAbs().array() > 1e-10 * std::max(dmax, 1e-300)).all())
    throw ConditioningError("lrt: fixed-effect design is rank deficient");

  const double rss0 = r.col(m - 1).segment(rd.p_null, m - rd.p_null).squaredNorm();
  const double rss1 = r.col(m - 1).segment(p, m - p).squaredNorm();
  if (!(rss1 > 0.0)) throw ConditioningError("lrt: response lies in the fixed-effect span");
  const double base = n * std::log(rss0);
  if (k == 0) {
    LrtProfile out;
    out.stat = std::max(0.0, base - n * std::log(rss1));
    return out;
  }
  const Eigen::MatrixXd rz = r.middleCols(p, k);
  const Eigen::VectorXd xi = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(rz.transpose() * rz, Eigen::EigenvaluesOnly)
                                 .eigenvalues()
                                 .cwiseMax(0.0);
  Eigen::MatrixXd aug = Eigen::MatrixXd::Zero(m + k, m);
  auto profile = [&](double lam) {
    if (lam == 0.0) return base - n * std::log(rss1);
    aug.topRows(m) = r;
    aug.bottomRows(k).setZero();
    const double pen = 1.0 / std::sqrt(lam);
    for (int j = 0; j < k; ++j) aug(m + j, p + j) = pen;
    const Eigen::HouseholderQR<Eigen::MatrixXd> qr(aug);
    const double last = qr.matrixQR()(m - 1, m - 1);
    return base - n * std::log(last * last) - (lam * xi.array()).log1p().sum();
  };
  LrtProfile out = sup_profile(profile, o);
  if (out.at_upper) spdlog::warn("lrt: supremum at the upper end of the variance-ratio grid");
  return out;
}

NullSpectrum null_spectrum(const ReducedDesign& rd) {
  NullSpectrum s;
  s.n = rd.num_obs();
  s.p = rd.p();
  s.p_prime = rd.p_prime();
  const int k = rd.num_random();
  if (k == 0) return s;
  Eigen::MatrixXd mm(s.n, s.p + k);
  mm << rd.x, rd.z;
  const Eigen::MatrixXd r = Eigen::HouseholderQR<Eigen::MatrixXd>(mm).matrixQR().topRows(s.p + k).triangularView<Eigen::Upper>();
  const Eigen::MatrixXd rz = r.rightCols(k);
  const Eigen::MatrixXd rzz = rz.bottomRows(k);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> e_mu(rzz.transpose() * rzz, Eigen::EigenvaluesOnly);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> e_xi(rz.transpose() * rz, Eigen::EigenvaluesOnly);
  const double tol = 1e-10 * std::max(1.0, e_xi.eigenvalues().cwiseAbs().maxCoeff());
  if (e_mu.eigenvalues().minCoeff() < -tol) throw ConditioningError("null spectrum: negative eigenvalue of Z'P0Z");
  s.mu = e_mu.eigenvalues().cwiseMax(0.0);
  s.xi = e_xi.eigenvalues().cwiseMax(0.0);
  return s;
}

double null_draw(const NullSpectrum& s, std::uint64_t stream_seed, const LrtOptions& o) {
  std::mt19937_64 eng(stream_seed);
  std::normal_distribution<double> normal;
  const int k = static_cast<int>(s.mu.size());
  const int rest = s.n - s.p - k;
  if (rest < 0) throw ConfigError("null spectrum: n - p smaller than the number of random effects");
  double u2 = 0.0;
  for (int i = 0; i < s.p_prime; ++i) {
    const double u = normal(eng);
    u2 += u * u;
  }
  Eigen::VectorXd w2(k);
  for (int i = 0; i < k; ++i) {
    const double w = normal(eng);
    w2[i] = w * w;
  }
  double wrest = 0.0;
  if (rest > 0) wrest = std::chi_squared_distribution<double>(rest)(eng);
  const double wsum = w2.sum() + wrest;
  const double n = s.n;
  double lead = 0.0;
  if (o.log_leading_term) {
    if (s.p_prime > 0) lead = n * std::log1p(u2 / wsum);
  } else {
    lead = n * (1.0 + u2 / wsum);
  }
  if (k == 0) return lead;
  const Eigen::VectorXd& det_eigs = o.xi_in_logdet ? s.xi : s.mu;
  auto f = [&](double lam) {
    if (lam == 0.0) return 0.0;
    double num = 0.0, den = wrest;
    for (int i = 0; i < k; ++i) {
      const double t = 1.0 + lam * s.mu[i];
      num += (lam * s.mu[i] / t) * w2[i];
      den += w2[i] / t;
    }
    return n * std::log1p(num / den) - (lam * det_eigs.array()).log1p().sum();
  };
  return lead + sup_profile(f, o).stat;
}

std::vector<double> simulate_null_serial(const NullSpectrum& s, int count, std::uint64_t seed, const LrtOptions& o) {
  if (count < 0) throw ConfigError("null draw count must be >= 0");
  std::vector<double> out(static_cast<std::size_t>(count));
  for (int j = 0; j < count; ++j) out[j] = null_draw(s, derive_seed(seed, static_cast<std::uint64_t>(j)), o);
  return out;
}

std::vector<double> simulate_null_parallel(const NullSpectrum& s, int count, std::uint64_t seed, const LrtOptions& o) {
  if (count < 0) throw ConfigError("null draw count must be >= 0");
  std::vector<double> out(static_cast<std::size_t>(count));
#pragma omp parallel for schedule(static) if (count >= 256)
  for (int j = 0; j < count; ++j) out[j] = null_draw(s, derive_seed(seed, static_cast<std::uint64_t>(j)), o);
  return out;
}

std::vector<double> simulate_null(const NullSpectrum& s, int count, std::uint64_t seed, const LrtOptions& o) {
  return o.execution == Execution::serial ? simulate_null_serial(s, count, seed, o)
                                          : simulate_null_parallel(s, count, seed, o);
}

double lrt_p_value(double obs, const std::vector<double>& null_samples) {
  const auto exceed = std::count_if(null_samples.begin(), null_samples.end(), [&](double v) { return v >= obs; });
  return (1.0 + static_cast<double>(exceed)) / (1.0 + static_cast<double>(null_samples.size()));
}

LrtResult linearity_test(const FitResult& fit, const LongitudinalDataset& data, const LrtOptions& o) {
  if (fit.spec1.degree <= 1 && fit.spec1.num_knots() == 0)
    throw ConfigError("linearity test: nothing to test with a linear basis and no knots");
  const LmmDesign design = build_lmm(fit, data);
  const RemlResult reml = reml_fit(design, design.y);
  const bool whiten = o.intercept == InterceptHandling::whiten;
  Eigen::VectorXd yt = pseudo_outcome(design, design.y, reml, !whiten);
  ReducedDesign rd = reduced_design(design);
  if (whiten) {
    whiten_intercept(design.sizes, reml.ratios[0], yt);
    whiten_intercept(design.sizes, reml.ratios[0], rd.x);
    if (rd.num_random() > 0) whiten_intercept(design.sizes, reml.ratios[0], rd.z);
  }
  const LrtProfile prof = lrt_statistic(rd, yt, o);

  LrtResult res;
  res.lrt_obs = prof.stat;
  res.ratio_hat = prof.ratio_hat;
  res.spectrum = null_spectrum(rd);
  res.null_samples = simulate_null(res.spectrum, o.null_draws, o.seed, o);
  res.p_value = lrt_p_value(res.lrt_obs, res.null_samples);
  res.variances = reml.var;
  res.max_abs_b0 = reml.b0.size() ? reml.b0.cwiseAbs().maxCoeff() : 0.0;
  res.max_abs_a = reml.a.size() ? reml.a.cwiseAbs().maxCoeff() : 0.0;
  res.p_prime = rd.p_prime();
  res.num_random = rd.num_random();
  return res;
}

}  // namespace fvicm
