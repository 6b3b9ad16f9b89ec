#pragma once

#include <cmath>
#include <vector>

#include "atmoe/numerics.hpp"
#include "atmoe/rng.hpp"

namespace testing_helpers {

using atmoe::Index;
using atmoe::Mat;
using atmoe::Vec;

inline Mat random_mat(atmoe::SeededRng& rng, Index rows, Index cols, double scale = 1.0) {
  Mat m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal(0.0, scale);
  return m;
}

inline Vec random_vec(atmoe::SeededRng& rng, Index n, double scale = 1.0) {
  Vec v(n);
  for (Index i = 0; i < n; ++i) v(i) = rng.normal(0.0, scale);
  return v;
}

/// Plain scalar softmax with -inf treated as excluded; independent of the library.
inline std::vector<double> scalar_softmax(const std::vector<double>& logits, double tau) {
  double mx = -INFINITY;
  for (double l : logits)
    if (std::isfinite(l) && l / tau > mx) mx = l / tau;
  std::vector<double> out(logits.size(), 0.0);
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i)
    if (std::isfinite(logits[i])) z += out[i] = std::exp(logits[i] / tau - mx);
  for (double& o : out) o /= z;
  return out;
}

inline double max_rel_diff(const Mat& a, const Mat& b) {
  const double scale = std::max({a.cwiseAbs().maxCoeff(), b.cwiseAbs().maxCoeff(), 1e-300});
  return (a - b).cwiseAbs().maxCoeff() / scale;
}

}  // namespace testing_helpers

#include <string>

#include "atmoe/router.hpp"

namespace testing_helpers {

/// Groups named g0, g1, ... with experts "g<g>_e<m>".
inline std::vector<atmoe::GroupSpec> make_groups(const std::vector<Index>& sizes) {
  std::vector<atmoe::GroupSpec> groups;
  for (std::size_t g = 0; g < sizes.size(); ++g) {
    atmoe::GroupSpec spec{static_cast<Index>(g), "g" + std::to_string(g), {}};
    for (Index m = 0; m < sizes[g]; ++m) spec.expert_ids.push_back(spec.name + "_e" + std::to_string(m));
    groups.push_back(spec);
  }
  return groups;
}

inline atmoe::RouterLayerParams random_router(atmoe::SeededRng& rng, Index dim,
                                              const std::vector<atmoe::GroupSpec>& groups,
                                              const atmoe::RouterOptions& options, double scale = 1.0) {
  atmoe::RouterLayerParams p = atmoe::make_router(dim, groups, options);
  p.group_projection = random_mat(rng, p.group_projection.rows(), p.group_projection.cols(), scale);
  for (auto& w : p.intra_projection) w = random_mat(rng, w.rows(), w.cols(), scale);
  return p;
}

}  // namespace testing_helpers
