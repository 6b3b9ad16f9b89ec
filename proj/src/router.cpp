#include "atmoe/router.hpp"

#include <limits>
#include <set>

#include "atmoe/rows.hpp"

namespace atmoe {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

Mat intra_logits(const RouterLayerParams& params, const Mat& x, Index g) {
  const Mat& w = params.intra_projection[static_cast<std::size_t>(g)];
  Mat logits = params.mode == IntraGroupMode::Conditioned ? matmul(x, w) : Mat(w.replicate(x.rows(), 1));
  const Index real = params.group_sizes[static_cast<std::size_t>(g)];
  for (Index m = real; m < logits.cols(); ++m) logits.col(m).setConstant(kNegInf);
  return logits;
}

void check_input(const RouterLayerParams& params, Index cols) {
  if (cols != params.input_dim()) {
    fail(ErrorKind::DimensionMismatch, "router expects inputs of length " + std::to_string(params.input_dim()) +
                                           ", got " + std::to_string(cols));
  }
}

}  // namespace

void validate_groups(const std::vector<GroupSpec>& groups) {
  require(!groups.empty(), "at least one expert group is required");
  std::set<std::string> seen;
  for (std::size_t g = 0; g < groups.size(); ++g) {
    require(groups[g].group_id == static_cast<Index>(g), "group ids must equal their position");
    require(!groups[g].expert_ids.empty(), "group '" + groups[g].name + "' has no experts");
    for (const auto& id : groups[g].expert_ids)
      require(seen.insert(id).second, "expert id '" + id + "' appears in more than one slot");
  }
}

Index max_group_size(const std::vector<GroupSpec>& groups) {
  Index n = 0;
  for (const auto& g : groups) n = std::max<Index>(n, static_cast<Index>(g.expert_ids.size()));
  return n;
}

void RouterLayerParams::validate() const {
  require(tau_group > 0 && tau_intra > 0, "router temperatures must be positive");
  const Index groups = num_groups();
  require(groups >= 1, "router needs at least one group");
  require(static_cast<Index>(intra_projection.size()) == groups, "router intra projections do not match group count");
  require(static_cast<Index>(group_sizes.size()) == groups, "router group sizes do not match group count");
  const Index slots = max_experts();
  for (Index g = 0; g < groups; ++g) {
    const Mat& w = intra_projection[static_cast<std::size_t>(g)];
    const Index expected_rows = mode == IntraGroupMode::Conditioned ? input_dim() : 1;
    if (w.rows() != expected_rows || w.cols() != slots) {
      fail(ErrorKind::DimensionMismatch, "router intra projection " + std::to_string(g) + " has shape " + shape_of(w));
    }
    const Index n = group_sizes[static_cast<std::size_t>(g)];
    require(n >= 1 && n <= slots, "router group size out of range");
  }
}

RouterLayerParams make_router(Index input_dim, const std::vector<GroupSpec>& groups, const RouterOptions& options) {
  validate_groups(groups);
  RouterLayerParams params;
  const auto n_groups = static_cast<Index>(groups.size());
  const Index slots = max_group_size(groups);
  params.group_projection = Mat::Zero(input_dim, n_groups);
  for (const auto& g : groups) {
    params.intra_projection.push_back(
        Mat::Zero(options.mode == IntraGroupMode::Conditioned ? input_dim : 1, slots));
    params.group_sizes.push_back(static_cast<Index>(g.expert_ids.size()));
  }
  params.tau_group = options.tau_group;
  params.tau_intra = options.tau_intra;
  params.mode = options.mode;
  params.pooled = options.pooled;
  params.validate();
  return params;
}

Vec group_weights(const RouterLayerParams& params, const Vec& x) {
  check_input(params, x.size());
  const Mat row = x.transpose();
  return softmax_temp(matmul(row, params.group_projection).row(0).transpose(), params.tau_group);
}

Vec intra_group_weights(const RouterLayerParams& params, const Vec& x, Index g) {
  if (g < 0 || g >= params.num_groups()) fail(ErrorKind::InvalidArgument, "invalid group index " + std::to_string(g));
  check_input(params, x.size());
  const Mat row = x.transpose();
  return softmax_temp(intra_logits(params, row, g).row(0).transpose(), params.tau_intra);
}

Mat combined_expert_weights(const RouterLayerParams& params, const std::vector<GroupSpec>& groups, const Vec& x) {
  if (static_cast<Index>(groups.size()) != params.num_groups()) {
    fail(ErrorKind::DimensionMismatch, "group specs do not match router group count");
  }
  const Vec wg = group_weights(params, x);
  Mat w(params.num_groups(), params.max_experts());
  for (Index g = 0; g < params.num_groups(); ++g) w.row(g) = wg(g) * intra_group_weights(params, x, g).transpose();
  return w;
}

Mat RoutingRows::combined(Index t) const {
  Mat w(group.cols(), intra.empty() ? 0 : intra.front().cols());
  for (Index g = 0; g < group.cols(); ++g) w.row(g) = group(t, g) * intra[static_cast<std::size_t>(g)].row(t);
  return w;
}

RoutingRows route_rows(const RouterLayerParams& params, const Mat& x) {
  check_input(params, x.cols());
  RoutingRows out;
  out.group = softmax_rows(matmul(x, params.group_projection), params.tau_group);
  out.intra.reserve(static_cast<std::size_t>(params.num_groups()));
  for (Index g = 0; g < params.num_groups(); ++g)
    out.intra.push_back(softmax_rows(intra_logits(params, x, g), params.tau_intra));
  return out;
}

void route_rows_backward(const RouterLayerParams& params, const Mat& x, const RoutingRows& routing,
                         const Mat& d_group, const std::vector<Mat>& d_intra, Mat* d_group_projection,
                         std::vector<Mat>* d_intra_projection, Mat* dx) {
  const Mat d_group_logits = softmax_rows_backward(routing.group, d_group, params.tau_group);
  if (d_group_projection) *d_group_projection += matmul_tn(x, d_group_logits);
  if (dx) *dx += matmul_nt(d_group_logits, params.group_projection);
  for (Index g = 0; g < params.num_groups(); ++g) {
    const auto gi = static_cast<std::size_t>(g);
    const Mat d_logits = softmax_rows_backward(routing.intra[gi], d_intra[gi], params.tau_intra);
    if (params.mode == IntraGroupMode::Conditioned) {
      if (d_intra_projection) (*d_intra_projection)[gi] += matmul_tn(x, d_logits);
      if (dx) *dx += matmul_nt(d_logits, params.intra_projection[gi]);
    } else if (d_intra_projection) {
      (*d_intra_projection)[gi] += d_logits.colwise().sum();
    }
  }
}

}  // namespace atmoe
