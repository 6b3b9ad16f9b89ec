#pragma once

#include <string>
#include <vector>

#include "atmoe/numerics.hpp"

namespace atmoe {

/// A named category of experts (e.g. function, domain, style).
struct GroupSpec {
  Index group_id = 0;
  std::string name;
  std::vector<std::string> expert_ids;
};

/// Ids unique across groups, every group non-empty, group_id == position.
void validate_groups(const std::vector<GroupSpec>& groups);
Index max_group_size(const std::vector<GroupSpec>& groups);

enum class IntraGroupMode {
  Conditioned,  // logits = x^T W_D[g], one N_dim x N_M projection per group
  Static,       // logits = W_D[g], one 1 x N_M row per group, input independent
};

/// Routing parameters of one AT-MoE site in one transformer layer.
struct RouterLayerParams {
  Mat group_projection;               // N_dim x N_G
  std::vector<Mat> intra_projection;  // per group: N_dim x N_M (conditioned) or 1 x N_M (static)
  std::vector<Index> group_sizes;     // n_g; slot m of group g is real iff m < n_g
  double tau_group = 1.0;
  double tau_intra = 1.0;
  IntraGroupMode mode = IntraGroupMode::Conditioned;
  /// Route on the causal running mean of the site inputs instead of the
  /// current token's input alone.
  bool pooled = false;

  Index input_dim() const { return group_projection.rows(); }
  Index num_groups() const { return group_projection.cols(); }
  Index max_experts() const { return intra_projection.empty() ? 0 : intra_projection.front().cols(); }
  bool is_real(Index g, Index m) const { return m < group_sizes[static_cast<std::size_t>(g)]; }

  void validate() const;
};

struct RouterOptions {
  double tau_group = 1.0;
  double tau_intra = 1.0;
  IntraGroupMode mode = IntraGroupMode::Conditioned;
  bool pooled = false;
};

/// Zero-initialised router (uniform weights at start) shaped for the groups.
RouterLayerParams make_router(Index input_dim, const std::vector<GroupSpec>& groups, const RouterOptions& options);

/// softmax_temp(x^T W_G, tau_G).
Vec group_weights(const RouterLayerParams& params, const Vec& x);

/// Per-slot weights within group g; padded slots are exactly 0.
Vec intra_group_weights(const RouterLayerParams& params, const Vec& x, Index g);

/// w[g][m] = group_weights[g] * intra_group_weights[g][m].
Mat combined_expert_weights(const RouterLayerParams& params, const std::vector<GroupSpec>& groups, const Vec& x);

/// Routing for a block of tokens (one row per token).
struct RoutingRows {
  Mat group;               // T x N_G
  std::vector<Mat> intra;  // per group: T x N_M

  Mat combined(Index t) const;
};

RoutingRows route_rows(const RouterLayerParams& params, const Mat& x);

/// Back-propagates dL/d(group weights) and dL/d(intra weights). Each non-null
/// output is accumulated into: the group projection gradient, the intra
/// projection gradients and dL/dx.
void route_rows_backward(const RouterLayerParams& params, const Mat& x, const RoutingRows& routing,
                         const Mat& d_group, const std::vector<Mat>& d_intra, Mat* d_group_projection,
                         std::vector<Mat>* d_intra_projection, Mat* dx);

}  // namespace atmoe
