#include "atmoe/composition.hpp"

#include <cmath>

#include "atmoe/rows.hpp"

namespace atmoe {

std::vector<std::vector<std::size_t>> AtMoeLinear::slot_adapters() const {
  std::vector<std::vector<std::size_t>> slots;
  slots.reserve(groups.size());
  for (const auto& g : groups) {
    auto& row = slots.emplace_back();
    for (const auto& id : g.expert_ids) {
      const auto idx = experts.find(id);
      if (!idx) fail(ErrorKind::InvalidArgument, "expert id '" + id + "' in group '" + g.name + "' has no adapter");
      row.push_back(*idx);
    }
  }
  return slots;
}

std::size_t AtMoeLinear::premerged_index() const {
  const auto idx = experts.find(experts.premerged_id());
  if (!idx) fail(ErrorKind::InvalidArgument, "layer has no premerged adapter");
  return *idx;
}

void AtMoeLinear::validate() const {
  require(base_bias.size() == 0 || base_bias.size() == out_dim(), "base bias length does not match output dimension");
  require(balance >= 0.0 && balance <= 1.0, "balance (lambda) must lie in [0, 1]");
  if (!routed()) return;
  experts.validate();
  validate_groups(groups);
  router.validate();
  require(router.num_groups() == static_cast<Index>(groups.size()), "router group count does not match groups");
  require(router.input_dim() == in_dim(), "router input dimension does not match layer input");
  require(router.max_experts() == max_group_size(groups), "router slot count does not match largest group");
  for (std::size_t g = 0; g < groups.size(); ++g)
    require(router.group_sizes[g] == static_cast<Index>(groups[g].expert_ids.size()), "router mask disagrees with groups");
  const auto slots = slot_adapters();
  const Index rank = experts.adapters()[slots.front().front()].rank();
  for (const auto& a : experts.adapters()) {
    if (a.out_dim() != out_dim() || a.in_dim() != in_dim()) {
      fail(ErrorKind::DimensionMismatch, "adapter '" + a.adapter_id + "' does not match layer shape " +
                                             shape_of(base_weight));
    }
    if (a.task_id != kPremergedTask && a.rank() != rank) {
      fail(ErrorKind::DimensionMismatch, "adapter '" + a.adapter_id + "' has a different rank from its peers");
    }
  }
  premerged_index();
}

namespace {

Vec base_forward(const AtMoeLinear& layer, const Vec& x) {
  if (x.size() != layer.in_dim()) {
    fail(ErrorKind::DimensionMismatch, "layer expects input length " + std::to_string(layer.in_dim()) + ", got " +
                                           std::to_string(x.size()));
  }
  Vec y = matvec(layer.base_weight, x);
  if (layer.base_bias.size() != 0) y += layer.base_bias;
  return y;
}

}  // namespace

Vec forward_with_weights(const AtMoeLinear& layer, const Vec& x, const Mat& combined) {
  Vec y = base_forward(layer, x);
  if (!layer.routed()) return y;
  const auto slots = layer.slot_adapters();
  Vec mix = Vec::Zero(layer.out_dim());
  for (std::size_t g = 0; g < slots.size(); ++g)
    for (std::size_t m = 0; m < slots[g].size(); ++m)
      mix += combined(static_cast<Index>(g), static_cast<Index>(m)) * apply(layer.experts.adapters()[slots[g][m]], x);
  y += layer.balance * mix;
  y += (1.0 - layer.balance) * apply(layer.experts.adapters()[layer.premerged_index()], x);
  return y;
}

Vec forward(const AtMoeLinear& layer, const Vec& x) {
  if (!layer.routed()) return base_forward(layer, x);
  return forward_with_weights(layer, x, combined_expert_weights(layer.router, layer.groups, x));
}

Mat composed_delta(const AtMoeLinear& layer, const Vec& x_routing) {
  Mat delta = Mat::Zero(layer.out_dim(), layer.in_dim());
  if (!layer.routed()) return delta;
  const Mat w = combined_expert_weights(layer.router, layer.groups, x_routing);
  const auto slots = layer.slot_adapters();
  for (std::size_t g = 0; g < slots.size(); ++g)
    for (std::size_t m = 0; m < slots[g].size(); ++m)
      delta += w(static_cast<Index>(g), static_cast<Index>(m)) * delta_weight(layer.experts.adapters()[slots[g][m]]);
  delta *= layer.balance;
  delta += (1.0 - layer.balance) * delta_weight(layer.experts.adapters()[layer.premerged_index()]);
  return delta;
}

RoutingReport routing_report(const AtMoeLinear& layer, const Vec& x) {
  RoutingReport report;
  report.group = group_weights(layer.router, x);
  report.intra.resize(layer.router.num_groups(), layer.router.max_experts());
  for (Index g = 0; g < layer.router.num_groups(); ++g)
    report.intra.row(g) = intra_group_weights(layer.router, x, g).transpose();
  report.combined = report.intra;
  for (Index g = 0; g < report.combined.rows(); ++g) report.combined.row(g) *= report.group(g);
  return report;
}

std::vector<RoutingReport> routing_reports_rows(const AtMoeLinear& layer, const Mat& x) {
  const Mat routing_input = layer.router.pooled ? prefix_mean_rows(x) : x;
  std::vector<RoutingReport> reports;
  reports.reserve(static_cast<std::size_t>(x.rows()));
  for (Index t = 0; t < x.rows(); ++t) reports.push_back(routing_report(layer, routing_input.row(t).transpose()));
  return reports;
}

Mat forward_rows(const AtMoeLinear& layer, const Mat& x, const SiteOptions& options, SiteCache& cache) {
  if (x.cols() != layer.in_dim()) {
    fail(ErrorKind::DimensionMismatch, "layer expects rows of length " + std::to_string(layer.in_dim()) + ", got " +
                                           std::to_string(x.cols()));
  }
  cache.input = x;
  Mat y = matmul_nt(x, layer.base_weight);
  if (layer.base_bias.size() != 0) y.rowwise() += layer.base_bias.transpose();
  if (!layer.routed() || options.path == ExpertPath::Base) return y;

  const auto& adapters = layer.experts.adapters();
  cache.hidden.assign(adapters.size(), Mat());
  cache.outputs.assign(adapters.size(), Mat());
  auto run_adapter = [&](std::size_t i) {
    const LoraAdapter& a = adapters[i];
    cache.hidden[i] = matmul_nt(x, a.A);
    cache.outputs[i] = matmul_nt(cache.hidden[i], a.B);
    if (a.scaling != 1.0) cache.outputs[i] *= a.scaling;
  };

  if (options.path == ExpertPath::Solo) {
    require(options.solo_adapter < adapters.size(), "solo adapter index out of range");
    run_adapter(options.solo_adapter);
    y += cache.outputs[options.solo_adapter];
    return y;
  }

  for (std::size_t i = 0; i < adapters.size(); ++i) run_adapter(i);
  const Index rows = x.rows();
  const Index n_groups = layer.router.num_groups();
  if (options.pinned) {
    const PinnedRouting& pin = *options.pinned;
    require(pin.group.size() == n_groups && pin.intra.rows() == n_groups &&
                pin.intra.cols() == layer.router.max_experts(),
            "pinned routing does not match router shape");
    cache.group_weights = pin.group.transpose().replicate(rows, 1);
    cache.intra_weights.clear();
    for (Index g = 0; g < n_groups; ++g) cache.intra_weights.push_back(pin.intra.row(g).replicate(rows, 1));
  } else {
    cache.routing_input = layer.router.pooled ? prefix_mean_rows(x) : x;
    cache.routing = route_rows(layer.router, cache.routing_input);
    cache.group_weights = cache.routing.group;
    cache.intra_weights = cache.routing.intra;
    if (options.entropy_bonus != 0.0) {
      double total = 0.0;
      for (Index t = 0; t < rows; ++t)
        for (Index g = 0; g < n_groups; ++g) {
          const double p = cache.group_weights(t, g);
          if (p > 0) total += p * std::log(p);
        }
      cache.negentropy = total;
    }
  }

  const auto slots = layer.slot_adapters();
  Mat mix = Mat::Zero(rows, layer.out_dim());
  for (std::size_t g = 0; g < slots.size(); ++g) {
    for (std::size_t m = 0; m < slots[g].size(); ++m) {
      const Vec coeff = cache.group_weights.col(static_cast<Index>(g)).cwiseProduct(
          cache.intra_weights[g].col(static_cast<Index>(m)));
      mix.array() += cache.outputs[slots[g][m]].array().colwise() * coeff.array();
    }
  }
  y += options.balance * mix;
  y += (1.0 - options.balance) * cache.outputs[layer.premerged_index()];
  return y;
}

void backward_rows(const AtMoeLinear& layer, const SiteCache& cache, const Mat& dy, const SiteOptions& options,
                   const SiteGradMask& mask, AtMoeLinear& grads, Mat* dx) {
  const Mat& x = cache.input;
  Mat din;
  if (mask.input) din = matmul(dy, layer.base_weight);
  if (mask.base) {
    grads.base_weight += matmul_tn(dy, x);
    if (layer.base_bias.size() != 0) grads.base_bias += dy.colwise().sum().transpose();
  }
  if (layer.routed() && options.path != ExpertPath::Base) {
    const auto& adapters = layer.experts.adapters();
    auto adapter_backward = [&](std::size_t i, const Mat& dout) {
      const LoraAdapter& a = adapters[i];
      const bool train_a = i < mask.adapter_a.size() && mask.adapter_a[i];
      const bool train_b = i < mask.adapter_b.size() && mask.adapter_b[i];
      if (!train_a && !train_b && !mask.input) return;
      if (train_b) grads.experts.adapters()[i].B += a.scaling * matmul_tn(dout, cache.hidden[i]);
      if (!train_a && !mask.input) return;
      Mat dz = matmul(dout, a.B);
      if (a.scaling != 1.0) dz *= a.scaling;
      if (train_a) grads.experts.adapters()[i].A += matmul_tn(dz, x);
      if (mask.input) din += matmul(dz, a.A);
    };

    if (options.path == ExpertPath::Solo) {
      adapter_backward(options.solo_adapter, dy);
    } else {
      const auto slots = layer.slot_adapters();
      const Index rows = dy.rows();
      const bool route_grads = !options.pinned && (mask.router_group || mask.router_intra || mask.input);
      Mat d_group;
      std::vector<Mat> d_intra;
      if (route_grads) {
        d_group = Mat::Zero(rows, layer.router.num_groups());
        for (Index g = 0; g < layer.router.num_groups(); ++g) d_intra.push_back(Mat::Zero(rows, layer.router.max_experts()));
      }
      for (std::size_t g = 0; g < slots.size(); ++g) {
        const auto gi = static_cast<Index>(g);
        for (std::size_t m = 0; m < slots[g].size(); ++m) {
          const auto mi = static_cast<Index>(m);
          const std::size_t idx = slots[g][m];
          const Vec coeff = options.balance * cache.group_weights.col(gi).cwiseProduct(cache.intra_weights[g].col(mi));
          const Mat dout = dy.array().colwise() * coeff.array();
          adapter_backward(idx, dout);
          if (route_grads) {
            const Vec dw = options.balance * (dy.array() * cache.outputs[idx].array()).rowwise().sum().matrix();
            d_group.col(gi) += dw.cwiseProduct(cache.intra_weights[g].col(mi));
            d_intra[g].col(mi) += dw.cwiseProduct(cache.group_weights.col(gi));
          }
        }
      }
      const Mat dout_premerged = (1.0 - options.balance) * dy;
      adapter_backward(layer.premerged_index(), dout_premerged);

      if (route_grads) {
        if (options.entropy_bonus != 0.0) {
          for (Index t = 0; t < rows; ++t)
            for (Index g = 0; g < d_group.cols(); ++g) {
              const double p = cache.group_weights(t, g);
              if (p > 0) d_group(t, g) += options.entropy_bonus * (std::log(p) + 1.0);
            }
        }
        Mat d_route;
        if (mask.input) d_route = Mat::Zero(rows, layer.in_dim());
        route_rows_backward(layer.router, cache.routing_input, cache.routing, d_group, d_intra,
                            mask.router_group ? &grads.router.group_projection : nullptr,
                            mask.router_intra ? &grads.router.intra_projection : nullptr,
                            mask.input ? &d_route : nullptr);
        if (mask.input) din += layer.router.pooled ? prefix_mean_rows_backward(d_route) : d_route;
      }
    }
  }
  if (dx) *dx = std::move(din);
}

}  // namespace atmoe
