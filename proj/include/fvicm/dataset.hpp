#pragma once

#include <string>
#include <vector>

#include <Eigen/Dense>

namespace fvicm {

/// One subject's repeated measures. Genotype is time-invariant.
struct Subject {
  std::string id;
  Eigen::VectorXd y;  // n_i responses
  Eigen::MatrixXd x;  // n_i x p covariates
  int g = 0;          // genotype code in {0, 1, 2}

  int num_obs() const { return static_cast<int>(y.size()); }
};

struct LongitudinalDataset {
  std::vector<Subject> subjects;
  int p = 0;

  int num_subjects() const { return static_cast<int>(subjects.size()); }
  int num_obs() const;
  int max_block_size() const;

  /// Throws InputError on ragged rows, empty subjects, bad genotype codes or
  /// blocks larger than max_block_size.
  void validate(int max_block_size = 1000) const;
};

/// Default cap on n_i (repeated measures per subject).
inline constexpr int kDefaultMaxBlockSize = 1000;

}  // namespace fvicm
