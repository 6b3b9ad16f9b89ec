#pragma once

#include <string>
#include <vector>

#include "atmoe/adapters.hpp"
#include "atmoe/router.hpp"

namespace atmoe {

/// Frozen projection W0 (d x k, optional bias) blended with routed task
/// experts and a pre-merged expert:
///   y = (balance * sum_{g,m} w[g][m] dW_{g,m} + (1 - balance) dW_p) x + W0 x + b0
/// A site without experts is a plain linear layer.
struct AtMoeLinear {
  Mat base_weight;  // W0, d x k
  Vec base_bias;    // empty or length d
  std::vector<GroupSpec> groups;
  AdapterSet experts;
  RouterLayerParams router;
  double balance = 0.5;  // lambda

  Index out_dim() const { return base_weight.rows(); }
  Index in_dim() const { return base_weight.cols(); }
  bool routed() const { return !experts.empty(); }

  /// Adapter index of every real (group, slot); throws on unresolved ids.
  std::vector<std::vector<std::size_t>> slot_adapters() const;
  std::size_t premerged_index() const;

  void validate() const;
};

enum class ExpertPath {
  Base,     // W0 x + b0 only
  Solo,     // W0 x + b0 + dW_e x for one adapter
  Mixture,  // full blend
};

/// Routing weights fixed independently of the input.
struct PinnedRouting {
  Vec group;  // N_G
  Mat intra;  // N_G x N_M, zeros on padded slots
};

struct SiteOptions {
  ExpertPath path = ExpertPath::Mixture;
  std::size_t solo_adapter = 0;
  double balance = 0.5;
  const PinnedRouting* pinned = nullptr;
  double entropy_bonus = 0.0;  // coefficient on sum p log p of group weights
};

/// Eq. 1 for a single token, routed on x itself.
Vec forward(const AtMoeLinear& layer, const Vec& x);

/// Eq. 1 with the combined routing weights (N_G x N_M) supplied by the caller.
Vec forward_with_weights(const AtMoeLinear& layer, const Vec& x, const Mat& combined);

/// Dense composed update balance * sum w dW + (1 - balance) dW_p for the
/// routing computed from x_routing. Inspection and test path.
Mat composed_delta(const AtMoeLinear& layer, const Vec& x_routing);

struct RoutingReport {
  Vec group;     // N_G
  Mat intra;     // N_G x N_M
  Mat combined;  // N_G x N_M
};

RoutingReport routing_report(const AtMoeLinear& layer, const Vec& x);

/// Intermediate values of a row-batched forward pass, kept for backward.
struct SiteCache {
  Mat input;          // T x k
  Mat routing_input;  // T x k
  RoutingRows routing;
  Mat group_weights;              // T x N_G (pinned or routed)
  std::vector<Mat> intra_weights;  // per group T x N_M
  std::vector<Mat> hidden;   // per adapter: T x r, x A^T
  std::vector<Mat> outputs;  // per adapter: T x d, s x A^T B^T
  double negentropy = 0.0;   // sum over rows of sum p log p of group weights
};

Mat forward_rows(const AtMoeLinear& layer, const Mat& x, const SiteOptions& options, SiteCache& cache);

/// Which gradients backward_rows must produce.
struct SiteGradMask {
  bool base = false;
  std::vector<bool> adapter_a;  // indexed like layer.experts
  std::vector<bool> adapter_b;
  bool router_group = false;
  bool router_intra = false;
  bool input = true;
};

void backward_rows(const AtMoeLinear& layer, const SiteCache& cache, const Mat& dy, const SiteOptions& options,
                   const SiteGradMask& mask, AtMoeLinear& grads, Mat* dx);

/// Routing report for every row of a site input, honouring pooled routing.
std::vector<RoutingReport> routing_reports_rows(const AtMoeLinear& layer, const Mat& x);

}  // namespace atmoe
