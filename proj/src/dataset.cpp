#include "fvicm/dataset.hpp"

#include <algorithm>

#include "fvicm/errors.hpp"

namespace fvicm {

int LongitudinalDataset::num_obs() const {
  int n = 0;
  for (const auto& s : subjects) n += s.num_obs();
  return n;
}

int LongitudinalDataset::max_block_size() const {
  int n = 0;
  for (const auto& s : subjects) n = std::max(n, s.num_obs());
  return n;
}

void LongitudinalDataset::validate(int max_block) const {
  if (subjects.empty()) throw InputError("dataset has no subjects");
  if (p < 1) throw InputError("dataset covariate dimension must be >= 1");
  for (const auto& s : subjects) {
    if (s.num_obs() < 1) throw InputError("subject '" + s.id + "' has no observations");
    if (s.num_obs() > max_block)
      throw InputError("subject '" + s.id + "' has " + std::to_string(s.num_obs()) +
                       " observations, above the cap of " + std::to_string(max_block));
    if (s.x.rows() != s.y.size() || s.x.cols() != p)
      throw InputError("subject '" + s.id + "' covariate matrix has the wrong shape");
    if (s.g < 0 || s.g > 2) throw InputError("subject '" + s.id + "' genotype must be 0, 1 or 2");
    if (!s.y.allFinite() || !s.x.allFinite())
      throw InputError("subject '" + s.id + "' has non-finite values");
  }
}

}  // namespace fvicm
