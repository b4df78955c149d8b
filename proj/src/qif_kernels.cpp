#include "fvicm/qif_kernels.hpp"

#include <cmath>
#include <set>

#include <omp.h>

#include "fvicm/errors.hpp"

namespace fvicm {

const char* to_string(BasisKind kind) {
  switch (kind) {
    case BasisKind::exchangeable: return "exchangeable";
    case BasisKind::ar1: return "ar1";
    case BasisKind::identity_only: return "identity";
  }
  return "unknown";
}

BasisKind parse_basis_kind(const std::string& name) {
  if (name == "exchangeable") return BasisKind::exchangeable;
  if (name == "ar1") return BasisKind::ar1;
  if (name == "identity" || name == "identity-only") return BasisKind::identity_only;
  throw ConfigError("unknown correlation basis '" + name + "'");
}

std::vector<Eigen::MatrixXd> BasisMatrixSet::build(BasisKind kind, int n) {
  std::vector<Eigen::MatrixXd> mats;
  mats.push_back(Eigen::MatrixXd::Identity(n, n));
  if (kind == BasisKind::exchangeable) {
    Eigen::MatrixXd m = Eigen::MatrixXd::Ones(n, n);
    m.diagonal().setZero();
    mats.push_back(std::move(m));
  } else if (kind == BasisKind::ar1) {
    Eigen::MatrixXd m = Eigen::MatrixXd::Zero(n, n);
    for (int j = 0; j + 1 < n; ++j) m(j, j + 1) = m(j + 1, j) = 1.0;
    mats.push_back(std::move(m));
  }
  return mats;
}

BasisMatrixSet::BasisMatrixSet(BasisKind kind, const LongitudinalDataset& data) : kind_(kind) {
  std::set<int> sizes;
  for (const auto& s : data.subjects) sizes.insert(s.num_obs());
  for (int n : sizes) cache_.emplace(n, build(kind, n));
}

const std::vector<Eigen::MatrixXd>& BasisMatrixSet::for_block(int n) const {
  auto it = cache_.find(n);
  if (it == cache_.end()) throw InputError("no basis matrices for block size " + std::to_string(n));
  return it->second;
}

KernelContext make_kernel_context(const LongitudinalDataset& data, const BasisSpec& spec0,
                                  const BasisSpec& spec1, const BasisMatrixSet& mats,
                                  const ThetaFree& theta, double scale) {
  KernelContext ctx;
  ctx.data = &data;
  ctx.spec0 = &spec0;
  ctx.spec1 = &spec1;
  ctx.mats = &mats;
  ctx.layout = theta.layout();
  if (ctx.layout.p != data.p) throw InputError("theta index dimension does not match the data");
  if (ctx.layout.d0 != spec0.dim() || ctx.layout.d1 != spec1.dim())
    throw InputError("gamma length does not match the basis dimension");
  const ThetaFull full = to_full(theta);
  ctx.beta0 = full.beta0;
  ctx.beta1 = full.beta1;
  ctx.tail0 = theta.beta0_tail;
  ctx.tail1 = theta.beta1_tail;
  ctx.gamma0 = theta.gamma0;
  ctx.gamma1 = theta.gamma1;
  ctx.jac0 = index_jacobian(theta.beta0_tail);
  ctx.jac1 = index_jacobian(theta.beta1_tail);
  ctx.scale = scale;
  return ctx;
}

namespace {

struct IndexBlock {
  Eigen::MatrixXd b, bd, bdd;  // n x d basis, first and second derivative
  Eigen::VectorXd s, sp;       // B_d^T gamma, B_dd^T gamma
  Eigen::MatrixXd xt;          // x J, n x (p-1)
};

void fill_index_block(const BasisSpec& spec, const Eigen::MatrixXd& x, const Eigen::VectorXd& beta,
                      const Eigen::MatrixXd& jac, const Eigen::VectorXd& gamma, bool second,
                      IndexBlock& out) {
  const int n = static_cast<int>(x.rows());
  const int d = spec.dim();
  const Eigen::VectorXd u = x * beta;
  // Row-major scratch so each basis row is contiguous for the fill kernels.
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> b(n, d), bd(n, d), bdd;
  if (second) bdd.resize(n, d);
  for (int j = 0; j < n; ++j) {
    fill_basis(spec, u[j], {b.row(j).data(), static_cast<std::size_t>(d)});
    if (spec.degree >= 1) {
      fill_basis_deriv(spec, u[j], {bd.row(j).data(), static_cast<std::size_t>(d)});
      if (second) fill_basis_deriv2(spec, u[j], {bdd.row(j).data(), static_cast<std::size_t>(d)});
    } else {
      bd.row(j).setZero();
      if (second) bdd.row(j).setZero();
    }
  }
  out.b = b;
  out.bd = bd;
  out.s = out.bd * gamma;
  if (second) {
    out.bdd = bdd;
    out.sp = out.bdd * gamma;
  }
  out.xt = x * jac;
}

// d^2 beta_1 / d tail d tail^T for beta_1 = sqrt(1 - |tail|^2).
Eigen::MatrixXd lead_hessian(const Eigen::VectorXd& tail, double lead) {
  const auto m = tail.size();
  Eigen::MatrixXd h = -Eigen::MatrixXd::Identity(m, m) / lead;
  h.noalias() -= tail * tail.transpose() / (lead * lead * lead);
  return h;
}

}  // namespace

void subject_moment(const KernelContext& ctx, int i, bool derivative, Eigen::Ref<Eigen::VectorXd> g,
                    Eigen::Ref<Eigen::MatrixXd> gdot) {
  const Subject& s = ctx.data->subjects[i];
  const ParamLayout& l = ctx.layout;
  const int n = s.num_obs();
  const int k = l.free_size();
  const int m = l.tail();
  const double gi = static_cast<double>(s.g);

  IndexBlock ib0, ib1;
  fill_index_block(*ctx.spec0, s.x, ctx.beta0, ctx.jac0, ctx.gamma0, derivative, ib0);
  fill_index_block(*ctx.spec1, s.x, ctx.beta1, ctx.jac1, ctx.gamma1, derivative, ib1);

  // Jacobian of the mean in free coordinates.
  Eigen::MatrixXd dmu(n, k);
  dmu.middleCols(l.free_beta0(), m) = ib0.s.asDiagonal() * ib0.xt;
  dmu.middleCols(l.free_beta1(), m) = (gi * ib1.s).asDiagonal() * ib1.xt;
  dmu.middleCols(l.free_gamma0(), l.d0) = ib0.b;
  dmu.middleCols(l.free_gamma1(), l.d1) = gi * ib1.b;

  const Eigen::VectorXd resid = s.y - ib0.b * ctx.gamma0 - gi * (ib1.b * ctx.gamma1);
  const auto& mats = ctx.mats->for_block(n);
  const double inv_scale = 1.0 / ctx.scale;

  Eigen::MatrixXd hess;
  Eigen::MatrixXd hb0, hb1;
  if (derivative) {
    hess.resize(k, k);
    hb0 = lead_hessian(ctx.tail0, ctx.beta0[0]);
    hb1 = lead_hessian(ctx.tail1, ctx.beta1[0]);
  }

  for (std::size_t mi = 0; mi < mats.size(); ++mi) {
    const Eigen::VectorXd v = inv_scale * (mats[mi] * resid);
    g.segment(static_cast<Eigen::Index>(mi) * k, k).noalias() = dmu.transpose() * v;
    if (!derivative) continue;

    // sum_j v_j d^2 mu_j / dtheta*^2, nonzero only in the index blocks and
    // their gamma cross terms.
    hess.setZero();
    const Eigen::VectorXd w0 = v.cwiseProduct(ib0.sp);
    hess.block(l.free_beta0(), l.free_beta0(), m, m).noalias() =
        ib0.xt.transpose() * w0.asDiagonal() * ib0.xt;
    hess.block(l.free_beta0(), l.free_beta0(), m, m) +=
        v.cwiseProduct(ib0.s).dot(s.x.col(0)) * hb0;
    hess.block(l.free_beta0(), l.free_gamma0(), m, l.d0).noalias() =
        ib0.xt.transpose() * v.asDiagonal() * ib0.bd;

    if (s.g != 0) {
      const Eigen::VectorXd w1 = v.cwiseProduct(ib1.sp);
      hess.block(l.free_beta1(), l.free_beta1(), m, m).noalias() =
          gi * (ib1.xt.transpose() * w1.asDiagonal() * ib1.xt);
      hess.block(l.free_beta1(), l.free_beta1(), m, m) +=
          (gi * v.cwiseProduct(ib1.s).dot(s.x.col(0))) * hb1;
      hess.block(l.free_beta1(), l.free_gamma1(), m, l.d1).noalias() =
          gi * (ib1.xt.transpose() * v.asDiagonal() * ib1.bd);
    }
    hess.block(l.free_gamma0(), l.free_beta0(), l.d0, m) =
        hess.block(l.free_beta0(), l.free_gamma0(), m, l.d0).transpose();
    hess.block(l.free_gamma1(), l.free_beta1(), l.d1, m) =
        hess.block(l.free_beta1(), l.free_gamma1(), m, l.d1).transpose();

    auto block = gdot.middleRows(static_cast<Eigen::Index>(mi) * k, k);
    block = hess;
    block.noalias() -= inv_scale * (dmu.transpose() * (mats[mi] * dmu));
  }
}

namespace {

MomentSums allocate(const KernelContext& ctx, bool derivative) {
  const int r = ctx.num_moments();
  const int k = ctx.layout.free_size();
  MomentSums out;
  out.g.resize(r, ctx.data->num_subjects());
  out.gbar = Eigen::VectorXd::Zero(r);
  out.cbar = Eigen::MatrixXd::Zero(r, r);
  if (derivative) out.gdot = Eigen::MatrixXd::Zero(r, k);
  return out;
}

void finish(MomentSums& sums, int num_subjects) {
  const double inv_n = 1.0 / num_subjects;
  sums.gbar *= inv_n;
  sums.cbar *= inv_n;
  if (sums.gdot.size() > 0) sums.gdot *= inv_n;
}

}  // namespace

MomentSums accumulate_moments_serial(const KernelContext& ctx, bool derivative) {
  const int num = ctx.data->num_subjects();
  MomentSums out = allocate(ctx, derivative);
  const int r = ctx.num_moments();
  const int k = ctx.layout.free_size();
  Eigen::VectorXd g(r);
  Eigen::MatrixXd gd(derivative ? r : 0, derivative ? k : 0);
  for (int i = 0; i < num; ++i) {
    subject_moment(ctx, i, derivative, g, gd);
    out.g.col(i) = g;
    out.gbar += g;
    out.cbar.noalias() += g * g.transpose();
    if (derivative) out.gdot += gd;
  }
  finish(out, num);
  return out;
}

MomentSums accumulate_moments_parallel(const KernelContext& ctx, bool derivative) {
  const int num = ctx.data->num_subjects();
  MomentSums out = allocate(ctx, derivative);
  const int r = ctx.num_moments();
  const int k = ctx.layout.free_size();
  std::vector<Eigen::MatrixXd> gd(derivative ? num : 0);

#pragma omp parallel for schedule(static) if (!omp_in_parallel() && num >= 64)
  for (int i = 0; i < num; ++i) {
    Eigen::VectorXd g(r);
    Eigen::MatrixXd local(derivative ? r : 0, derivative ? k : 0);
    subject_moment(ctx, i, derivative, g, local);
    out.g.col(i) = g;
    if (derivative) gd[i] = std::move(local);
  }

  // Fixed subject order keeps the sums reproducible for any thread count.
  for (int i = 0; i < num; ++i) {
    const auto g = out.g.col(i);
    out.gbar += g;
    out.cbar.noalias() += g * g.transpose();
    if (derivative) out.gdot += gd[i];
  }
  finish(out, num);
  return out;
}

}  // namespace fvicm
