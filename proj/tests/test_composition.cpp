#include <doctest.h>

#include "atmoe/composition.hpp"
#include "atmoe/rows.hpp"
#include "helpers.hpp"

using namespace atmoe;
using namespace testing_helpers;

namespace {

AtMoeLinear random_layer(SeededRng& rng, Index d, Index k, Index r, const std::vector<Index>& sizes,
                         double balance, bool pooled = false, IntraGroupMode mode = IntraGroupMode::Conditioned) {
  AtMoeLinear layer;
  layer.base_weight = random_mat(rng, d, k);
  layer.base_bias = random_vec(rng, d);
  layer.groups = make_groups(sizes);
  for (const auto& g : layer.groups)
    for (const auto& id : g.expert_ids) {
      LoraAdapter a = init_adapter(d, k, r, rng.next_u64(), id, id);
      a.B = random_mat(rng, d, r);
      a.A = random_mat(rng, r, k);
      layer.experts.add(a);
    }
  LoraAdapter p = init_adapter(d, k, r, rng.next_u64(), "premerged", kPremergedTask);
  p.B = random_mat(rng, d, r);
  p.scaling = 0.7;
  layer.experts.add(p);
  RouterOptions o;
  o.tau_group = 0.8;
  o.tau_intra = 1.3;
  o.mode = mode;
  o.pooled = pooled;
  layer.router = random_router(rng, k, layer.groups, o);
  layer.balance = balance;
  layer.validate();
  return layer;
}

/// Independent scalar evaluation of the blended output.
Vec dense_oracle(const AtMoeLinear& layer, const Vec& x) {
  const Index d = layer.out_dim(), k = layer.in_dim();
  const auto& groups = layer.groups;
  const auto& rp = layer.router;
  std::vector<double> glog(groups.size(), 0.0);
  for (std::size_t g = 0; g < groups.size(); ++g)
    for (Index i = 0; i < k; ++i) glog[g] += x(i) * rp.group_projection(i, static_cast<Index>(g));
  const auto gw = scalar_softmax(glog, rp.tau_group);

  Mat delta = Mat::Zero(d, k);
  auto add_adapter = [&](const LoraAdapter& a, double coeff) {
    for (Index i = 0; i < d; ++i)
      for (Index j = 0; j < k; ++j) {
        double s = 0.0;
        for (Index q = 0; q < a.rank(); ++q) s += a.B(i, q) * a.A(q, j);
        delta(i, j) += coeff * a.scaling * s;
      }
  };
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const std::size_t n = groups[g].expert_ids.size();
    std::vector<double> ilog(n, 0.0);
    for (std::size_t m = 0; m < n; ++m) {
      const Mat& w = rp.intra_projection[g];
      if (rp.mode == IntraGroupMode::Static)
        ilog[m] = w(0, static_cast<Index>(m));
      else
        for (Index i = 0; i < k; ++i) ilog[m] += x(i) * w(i, static_cast<Index>(m));
    }
    const auto iw = scalar_softmax(ilog, rp.tau_intra);
    for (std::size_t m = 0; m < n; ++m) add_adapter(layer.experts.at(groups[g].expert_ids[m]), layer.balance * gw[g] * iw[m]);
  }
  add_adapter(layer.experts.premerged(), 1.0 - layer.balance);
  Vec y(d);
  for (Index i = 0; i < d; ++i) {
    double s = layer.base_bias(i);
    for (Index j = 0; j < k; ++j) s += (layer.base_weight(i, j) + delta(i, j)) * x(j);
    y(i) = s;
  }
  return y;
}

AtMoeLinear zero_grads(const AtMoeLinear& layer) {
  AtMoeLinear g = layer;
  g.base_weight.setZero();
  g.base_bias.setZero();
  for (auto& a : g.experts.adapters()) {
    a.A.setZero();
    a.B.setZero();
  }
  g.router.group_projection.setZero();
  for (auto& w : g.router.intra_projection) w.setZero();
  return g;
}

}  // namespace

TEST_CASE("forward matches a dense scalar oracle on random layers") {
  SeededRng rng(31);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const Index d = 1 + static_cast<Index>(rng.index(8)), k = 1 + static_cast<Index>(rng.index(8));
    const Index r = 1 + static_cast<Index>(rng.index(static_cast<std::uint64_t>(std::min(d, k))));
    std::vector<Index> sizes;
    for (Index g = 0, n = 1 + static_cast<Index>(rng.index(3)); g < n; ++g) sizes.push_back(1 + static_cast<Index>(rng.index(3)));
    const auto mode = trial % 4 == 0 ? IntraGroupMode::Static : IntraGroupMode::Conditioned;
    const AtMoeLinear layer = random_layer(rng, d, k, r, sizes, rng.uniform(), false, mode);
    const Vec x = random_vec(rng, k);
    const Vec y = forward(layer, x);
    const Vec oracle = dense_oracle(layer, x);
    worst = std::max(worst, (y - oracle).cwiseAbs().maxCoeff() / std::max(1.0, oracle.cwiseAbs().maxCoeff()));
    const Vec via_delta = layer.base_weight * x + layer.base_bias + composed_delta(layer, x) * x;
    CHECK(max_rel_diff(via_delta, oracle) < 1e-9);
  }
  CHECK(worst < 1e-9);
}

TEST_CASE("lambda endpoints isolate one side exactly") {
  SeededRng rng(32);
  for (int trial = 0; trial < 20; ++trial) {
    AtMoeLinear layer = random_layer(rng, 5, 6, 2, {3, 2, 2}, 1.0);
    const Vec x = random_vec(rng, 6);
    const Vec y1 = forward(layer, x);
    AtMoeLinear other = layer;
    other.experts.at("premerged").B = random_mat(rng, 5, 2);
    CHECK(forward(other, x) == y1);

    layer.balance = 0.0;
    const Vec y0 = forward(layer, x);
    other = layer;
    other.router = random_router(rng, 6, layer.groups, {});
    for (auto& a : other.experts.adapters())
      if (a.task_id != kPremergedTask) a.B = random_mat(rng, 5, 2);
    CHECK(forward(other, x) == y0);
    const LoraAdapter& p = layer.experts.premerged();
    CHECK(max_rel_diff(y0, Vec(layer.base_weight * x + layer.base_bias + apply(p, x))) < 1e-12);
  }
}

TEST_CASE("zero-initialised adapters leave the base output unchanged") {
  SeededRng rng(33);
  AtMoeLinear layer = random_layer(rng, 4, 4, 2, {2, 2}, 0.5);
  for (auto& a : layer.experts.adapters()) a.B.setZero();
  const Vec x = random_vec(rng, 4);
  CHECK(max_rel_diff(forward(layer, x), Vec(layer.base_weight * x + layer.base_bias)) < 1e-14);
}

TEST_CASE("a layer without experts is a plain linear map") {
  SeededRng rng(34);
  AtMoeLinear layer;
  layer.base_weight = random_mat(rng, 3, 4);
  CHECK_NOTHROW(layer.validate());
  const Vec x = random_vec(rng, 4);
  CHECK(max_rel_diff(forward(layer, x), Vec(layer.base_weight * x)) < 1e-14);
  CHECK_THROWS_AS(forward(layer, random_vec(rng, 5)), Error);
}

TEST_CASE("validate rejects inconsistent layers") {
  SeededRng rng(35);
  AtMoeLinear layer = random_layer(rng, 4, 5, 2, {2, 1}, 0.5);
  AtMoeLinear bad = layer;
  bad.balance = 1.5;
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = layer;
  bad.groups[1].expert_ids[0] = "nobody";
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = layer;
  bad.router = make_router(4, layer.groups, {});
  CHECK_THROWS_AS(bad.validate(), Error);
}

TEST_CASE("forward_rows agrees with per-token forward") {
  SeededRng rng(36);
  const AtMoeLinear layer = random_layer(rng, 5, 6, 2, {3, 1, 2}, 0.4);
  const Mat x = random_mat(rng, 7, 6);
  SiteOptions options;
  options.balance = layer.balance;
  SiteCache cache;
  const Mat y = forward_rows(layer, x, options, cache);
  for (Index t = 0; t < 7; ++t) CHECK(max_rel_diff(Vec(y.row(t).transpose()), forward(layer, x.row(t).transpose())) < 1e-12);
}

TEST_CASE("pooled routing uses the running mean of earlier rows") {
  SeededRng rng(37);
  const AtMoeLinear layer = random_layer(rng, 4, 5, 2, {2, 2}, 0.6, true);
  const Mat x = random_mat(rng, 5, 5);
  SiteOptions options;
  options.balance = layer.balance;
  SiteCache cache;
  const Mat y = forward_rows(layer, x, options, cache);
  const auto reports = routing_reports_rows(layer, x);
  for (Index t = 0; t < 5; ++t) {
    const Vec mean = x.topRows(t + 1).colwise().mean().transpose();
    const Mat w = combined_expert_weights(layer.router, layer.groups, mean);
    CHECK(max_rel_diff(Vec(y.row(t).transpose()), forward_with_weights(layer, x.row(t).transpose(), w)) < 1e-12);
    CHECK(max_rel_diff(reports[static_cast<std::size_t>(t)].combined, w) < 1e-12);
  }
}

TEST_CASE("pinned routing replaces the router output") {
  SeededRng rng(38);
  const AtMoeLinear layer = random_layer(rng, 4, 5, 2, {2, 3}, 0.5);
  PinnedRouting pin;
  pin.group = Vec::Constant(2, 0.5);
  pin.intra = Mat::Zero(2, 3);
  pin.intra(0, 1) = 1.0;
  pin.intra(1, 0) = pin.intra(1, 2) = 0.5;
  SiteOptions options;
  options.pinned = &pin;
  SiteCache cache;
  const Mat x = random_mat(rng, 3, 5);
  const Mat y = forward_rows(layer, x, options, cache);
  Mat combined = pin.intra;
  combined.array().colwise() *= pin.group.array();
  for (Index t = 0; t < 3; ++t)
    CHECK(max_rel_diff(Vec(y.row(t).transpose()), forward_with_weights(layer, x.row(t).transpose(), combined)) < 1e-12);
  PinnedRouting wrong{Vec::Constant(3, 1.0 / 3.0), Mat::Zero(3, 3)};
  options.pinned = &wrong;
  CHECK_THROWS_AS(forward_rows(layer, x, options, cache), Error);
}

TEST_CASE("solo and base paths") {
  SeededRng rng(39);
  const AtMoeLinear layer = random_layer(rng, 4, 5, 2, {2, 2}, 0.5);
  const Mat x = random_mat(rng, 3, 5);
  SiteCache cache;
  SiteOptions options;
  options.path = ExpertPath::Base;
  const Mat base = forward_rows(layer, x, options, cache);
  CHECK(max_rel_diff(base, Mat((x * layer.base_weight.transpose()).rowwise() + layer.base_bias.transpose())) < 1e-12);
  options.path = ExpertPath::Solo;
  options.solo_adapter = 2;
  const Mat solo = forward_rows(layer, x, options, cache);
  CHECK(max_rel_diff(solo, Mat(base + x * delta_weight(layer.experts.adapters()[2]).transpose())) < 1e-12);
  options.solo_adapter = 99;
  CHECK_THROWS_AS(forward_rows(layer, x, options, cache), Error);
}

TEST_CASE("backward_rows matches finite differences for every parameter") {
  SeededRng rng(40);
  for (bool pooled : {false, true})
    for (double bonus : {0.0, 0.3}) {
      AtMoeLinear layer = random_layer(rng, 3, 4, 2, {2, 1, 3}, 0.35, pooled);
      Mat x = random_mat(rng, 4, 4);
      const Mat c = random_mat(rng, 4, 3);
      SiteOptions options;
      options.balance = layer.balance;
      options.entropy_bonus = bonus;
      auto objective = [&]() {
        SiteCache cache;
        const Mat y = forward_rows(layer, x, options, cache);
        return (y.array() * c.array()).sum() + bonus * cache.negentropy;
      };
      SiteCache cache;
      forward_rows(layer, x, options, cache);
      SiteGradMask mask;
      mask.base = true;
      mask.adapter_a.assign(layer.experts.size(), true);
      mask.adapter_b.assign(layer.experts.size(), true);
      mask.router_group = mask.router_intra = true;
      AtMoeLinear grads = zero_grads(layer);
      Mat dx;
      backward_rows(layer, cache, c, options, mask, grads, &dx);

      auto check = [&](auto& target, const auto& analytic) {
        Vec theta = Eigen::Map<const Vec>(target.data(), target.size());
        auto f = [&](const Vec& v) {
          Eigen::Map<Vec>(target.data(), target.size()) = v;
          return objective();
        };
        const Vec numeric = finite_diff_grad(f, theta, 1e-6);
        Eigen::Map<Vec>(target.data(), target.size()) = theta;
        const Vec a = Eigen::Map<const Vec>(analytic.data(), analytic.size());
        CHECK((a - numeric).cwiseAbs().maxCoeff() < 1e-6 * std::max(1.0, numeric.cwiseAbs().maxCoeff()));
      };
      check(layer.base_weight, grads.base_weight);
      check(layer.base_bias, grads.base_bias);
      for (std::size_t i = 0; i < layer.experts.size(); ++i) {
        check(layer.experts.adapters()[i].A, grads.experts.adapters()[i].A);
        check(layer.experts.adapters()[i].B, grads.experts.adapters()[i].B);
      }
      check(layer.router.group_projection, grads.router.group_projection);
      for (std::size_t g = 0; g < 3; ++g) check(layer.router.intra_projection[g], grads.router.intra_projection[g]);
      check(x, dx);
    }
}

TEST_CASE("backward_rows leaves masked-out parameters untouched") {
  SeededRng rng(41);
  const AtMoeLinear layer = random_layer(rng, 3, 4, 2, {2, 2}, 0.5);
  const Mat x = random_mat(rng, 3, 4);
  SiteOptions options;
  SiteCache cache;
  forward_rows(layer, x, options, cache);
  SiteGradMask mask;
  mask.router_group = true;
  mask.input = false;
  AtMoeLinear grads = zero_grads(layer);
  backward_rows(layer, cache, random_mat(rng, 3, 3), options, mask, grads, nullptr);
  CHECK(grads.base_weight.isZero(0));
  for (const auto& a : grads.experts.adapters()) {
    CHECK(a.A.isZero(0));
    CHECK(a.B.isZero(0));
  }
  for (const auto& w : grads.router.intra_projection) CHECK(w.isZero(0));
  CHECK_FALSE(grads.router.group_projection.isZero(0));
}
