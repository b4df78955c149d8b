#pragma once

// Per-subject extended-score kernels. Two drivers exist: a plain serial loop
// kept as the reference, and an OpenMP loop that stores per-subject terms and
// reduces them in subject order. Both produce bit-identical sums.

#include <map>
#include <vector>

#include <Eigen/Dense>

#include "fvicm/dataset.hpp"
#include "fvicm/spline_basis.hpp"
#include "fvicm/theta.hpp"

namespace fvicm {

enum class BasisKind { exchangeable, ar1, identity_only };

const char* to_string(BasisKind kind);
BasisKind parse_basis_kind(const std::string& name);

/// Working-correlation basis matrices M_1 (identity), ..., M_h built per
/// block size and cached.
class BasisMatrixSet {
 public:
  BasisMatrixSet() = default;
  BasisMatrixSet(BasisKind kind, const LongitudinalDataset& data);

  BasisKind kind() const { return kind_; }
  int count() const { return kind_ == BasisKind::identity_only ? 1 : 2; }
  const std::vector<Eigen::MatrixXd>& for_block(int n) const;

  static std::vector<Eigen::MatrixXd> build(BasisKind kind, int n);

 private:
  BasisKind kind_ = BasisKind::exchangeable;
  std::map<int, std::vector<Eigen::MatrixXd>> cache_;
};

/// Theta unpacked once per evaluation, plus everything the kernel reads.
struct KernelContext {
  const LongitudinalDataset* data = nullptr;
  const BasisSpec* spec0 = nullptr;
  const BasisSpec* spec1 = nullptr;
  const BasisMatrixSet* mats = nullptr;
  ParamLayout layout;
  Eigen::VectorXd beta0, beta1, tail0, tail1, gamma0, gamma1;
  Eigen::MatrixXd jac0, jac1;
  double scale = 1.0;  // A_i = scale * I

  int num_moments() const { return mats->count() * layout.free_size(); }
};

KernelContext make_kernel_context(const LongitudinalDataset& data, const BasisSpec& spec0,
                                  const BasisSpec& spec1, const BasisMatrixSet& mats,
                                  const ThetaFree& theta, double scale);

/// g_i (length h*k) and, when requested, dg_i/dtheta* (h*k x k) for subject i.
void subject_moment(const KernelContext& ctx, int i, bool derivative, Eigen::Ref<Eigen::VectorXd> g,
                    Eigen::Ref<Eigen::MatrixXd> gdot);

struct MomentSums {
  Eigen::MatrixXd g;     // h*k x N, column i = g_i
  Eigen::VectorXd gbar;  // (1/N) sum g_i
  Eigen::MatrixXd cbar;  // (1/N) sum g_i g_i^T
  Eigen::MatrixXd gdot;  // (1/N) sum dg_i/dtheta*, empty unless requested
};

MomentSums accumulate_moments_serial(const KernelContext& ctx, bool derivative);
MomentSums accumulate_moments_parallel(const KernelContext& ctx, bool derivative);

}  // namespace fvicm
