#include <doctest.h>

#include <algorithm>
#include <functional>

#include "atmoe/router.hpp"
#include "atmoe/rows.hpp"
#include "helpers.hpp"

using namespace atmoe;
using namespace testing_helpers;

namespace {

RouterOptions conditioned(double tau = 1.0) {
  RouterOptions o;
  o.tau_group = o.tau_intra = tau;
  return o;
}

}  // namespace

TEST_CASE("group_weights: zero input is uniform, single group is one") {
  SeededRng rng(1);
  const auto groups = make_groups({3, 2, 2});
  const auto p = random_router(rng, 6, groups, conditioned());
  const Vec w = group_weights(p, Vec::Zero(6));
  for (Index g = 0; g < 3; ++g) CHECK(w(g) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  const auto single = random_router(rng, 6, make_groups({2}), conditioned());
  CHECK(group_weights(single, random_vec(rng, 6))(0) == 1.0);
}

TEST_CASE("group_weights matches a scalar-loop oracle") {
  SeededRng rng(2);
  const auto groups = make_groups({3, 1, 2, 4});
  for (int trial = 0; trial < 100; ++trial) {
    const double tau = 0.2 + rng.uniform();
    const auto p = random_router(rng, 5, groups, conditioned(tau));
    const Vec x = random_vec(rng, 5);
    std::vector<double> logits(4, 0.0);
    for (std::size_t g = 0; g < 4; ++g)
      for (Index i = 0; i < 5; ++i) logits[g] += x(i) * p.group_projection(i, static_cast<Index>(g));
    const auto oracle = scalar_softmax(logits, tau);
    const Vec w = group_weights(p, x);
    for (Index g = 0; g < 4; ++g) CHECK(std::abs(w(g) - oracle[static_cast<std::size_t>(g)]) < 1e-12);
  }
}

TEST_CASE("group_weights rejects a wrong input length") {
  SeededRng rng(3);
  const auto p = random_router(rng, 4, make_groups({2, 2}), conditioned());
  CHECK_THROWS_AS(group_weights(p, Vec::Zero(5)), Error);
  CHECK_THROWS_AS(intra_group_weights(p, Vec::Zero(4), 2), Error);
  CHECK_THROWS_AS(intra_group_weights(p, Vec::Zero(4), -1), Error);
}

TEST_CASE("intra_group_weights: padding and degenerate groups") {
  SeededRng rng(4);
  const auto groups = make_groups({1, 2, 3});
  const auto p = random_router(rng, 4, groups, conditioned());
  const Vec x = random_vec(rng, 4);
  const Vec w0 = intra_group_weights(p, x, 0);
  CHECK(w0(0) == 1.0);
  CHECK(w0(1) == 0.0);
  CHECK(w0(2) == 0.0);
  const Vec w1 = intra_group_weights(p, x, 1);
  CHECK(w1(2) == 0.0);
  CHECK(std::abs(w1(0) + w1(1) - 1.0) < 1e-12);
  const Vec w2 = intra_group_weights(p, Vec::Zero(4), 2);
  for (Index m = 0; m < 3; ++m) CHECK(w2(m) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("intra_group_weights matches a scalar-loop oracle in both modes") {
  SeededRng rng(5);
  const auto groups = make_groups({3, 2});
  for (auto mode : {IntraGroupMode::Conditioned, IntraGroupMode::Static}) {
    RouterOptions o = conditioned(0.6);
    o.mode = mode;
    const auto p = random_router(rng, 4, groups, o);
    const Vec x = random_vec(rng, 4);
    for (Index g = 0; g < 2; ++g) {
      const Mat& w = p.intra_projection[static_cast<std::size_t>(g)];
      std::vector<double> logits(3, -INFINITY);
      for (Index m = 0; m < static_cast<Index>(groups[static_cast<std::size_t>(g)].expert_ids.size()); ++m) {
        logits[static_cast<std::size_t>(m)] = 0.0;
        if (mode == IntraGroupMode::Conditioned)
          for (Index i = 0; i < 4; ++i) logits[static_cast<std::size_t>(m)] += x(i) * w(i, m);
        else
          logits[static_cast<std::size_t>(m)] = w(0, m);
      }
      const auto oracle = scalar_softmax(logits, 0.6);
      const Vec got = intra_group_weights(p, x, g);
      for (Index m = 0; m < 3; ++m) CHECK(std::abs(got(m) - oracle[static_cast<std::size_t>(m)]) < 1e-12);
    }
  }
}

TEST_CASE("combined_expert_weights: degenerate and symmetric cases") {
  SeededRng rng(6);
  const auto one = random_router(rng, 3, make_groups({1}), conditioned());
  const Mat w1 = combined_expert_weights(one, make_groups({1}), random_vec(rng, 3));
  CHECK(w1.rows() == 1);
  CHECK(w1.cols() == 1);
  CHECK(w1(0, 0) == 1.0);

  const auto groups = make_groups({3, 2, 2});
  const auto p = random_router(rng, 5, groups, conditioned());
  const Mat w = combined_expert_weights(p, groups, Vec::Zero(5));
  for (Index g = 0; g < 3; ++g)
    for (Index m = 0; m < 3; ++m) {
      const Index n = static_cast<Index>(groups[static_cast<std::size_t>(g)].expert_ids.size());
      if (m < n)
        CHECK(w(g, m) == doctest::Approx(1.0 / 3.0 / static_cast<double>(n)).epsilon(1e-14));
      else
        CHECK(w(g, m) == 0.0);
    }
}

TEST_CASE("routing normalisation over random draws") {
  SeededRng rng(7);
  for (int trial = 0; trial < 1000; ++trial) {
    const Index dim = 1 + static_cast<Index>(rng.index(32));
    const Index n_groups = 1 + static_cast<Index>(rng.index(4));
    std::vector<Index> sizes;
    for (Index g = 0; g < n_groups; ++g) sizes.push_back(1 + static_cast<Index>(rng.index(4)));
    const auto groups = make_groups(sizes);
    RouterOptions o = conditioned(0.05 + 3.0 * rng.uniform());
    o.tau_intra = 0.05 + 3.0 * rng.uniform();
    if (trial % 5 == 0) o.mode = IntraGroupMode::Static;
    const auto p = random_router(rng, dim, groups, o, 2.0);
    const Vec x = random_vec(rng, dim);
    const Vec wg = group_weights(p, x);
    CHECK(wg.minCoeff() >= 0.0);
    CHECK(std::abs(wg.sum() - 1.0) <= 1e-9);
    const Mat w = combined_expert_weights(p, groups, x);
    for (Index g = 0; g < n_groups; ++g) {
      const Vec wi = intra_group_weights(p, x, g);
      const Index n = sizes[static_cast<std::size_t>(g)];
      CHECK(std::abs(wi.head(n).sum() - 1.0) <= 1e-9);
      for (Index m = n; m < wi.size(); ++m) {
        CHECK(wi(m) == 0.0);
        CHECK(w(g, m) == 0.0);
      }
      for (Index m = 0; m < w.cols(); ++m) CHECK(w(g, m) <= wg(g));
    }
    CHECK(std::abs(w.sum() - 1.0) <= 1e-9);
  }
}

TEST_CASE("low temperature sharpens the combined weights") {
  SeededRng rng(8);
  const auto groups = make_groups({3, 2, 2});
  int tested = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const auto p = random_router(rng, 6, groups, conditioned(1e-3));
    const Vec x = random_vec(rng, 6);
    // Skip draws whose leading logits nearly tie.
    const Vec gl = p.group_projection.transpose() * x;
    Index top = 0;
    gl.maxCoeff(&top);
    const Vec il = p.intra_projection[static_cast<std::size_t>(top)].transpose() * x;
    auto margin = [](Vec v, Index n) {
      std::sort(v.data(), v.data() + n, std::greater<>());
      return n > 1 ? v(0) - v(1) : std::numeric_limits<double>::infinity();
    };
    if (margin(gl, 3) < 0.05 || margin(il, p.group_sizes[static_cast<std::size_t>(top)]) < 0.05) continue;
    ++tested;
    CHECK(combined_expert_weights(p, groups, x).maxCoeff() > 0.999);
  }
  CHECK(tested >= 150);
}

TEST_CASE("static mode is input invariant") {
  SeededRng rng(9);
  RouterOptions o = conditioned();
  o.mode = IntraGroupMode::Static;
  const auto groups = make_groups({3, 2});
  const auto p = random_router(rng, 4, groups, o);
  const Vec x1 = random_vec(rng, 4), x2 = random_vec(rng, 4);
  for (Index g = 0; g < 2; ++g) CHECK(intra_group_weights(p, x1, g) == intra_group_weights(p, x2, g));
}

TEST_CASE("doubling the input equals halving both temperatures") {
  SeededRng rng(10);
  const auto groups = make_groups({3, 2, 2});
  const auto p = random_router(rng, 5, groups, conditioned(0.8));
  auto halved = p;
  halved.tau_group = 0.4;
  halved.tau_intra = 0.4;
  for (int trial = 0; trial < 50; ++trial) {
    const Vec x = random_vec(rng, 5);
    const Mat a = combined_expert_weights(p, groups, Vec(2.0 * x));
    const Mat b = combined_expert_weights(halved, groups, x);
    CHECK((a - b).cwiseAbs().maxCoeff() <= 1e-12);
  }
}

TEST_CASE("route_rows agrees with per-token routing") {
  SeededRng rng(11);
  const auto groups = make_groups({3, 2, 2});
  const auto p = random_router(rng, 5, groups, conditioned(0.7));
  const Mat x = random_mat(rng, 6, 5);
  const RoutingRows rows = route_rows(p, x);
  for (Index t = 0; t < 6; ++t) {
    const Vec xt = x.row(t).transpose();
    CHECK((rows.combined(t) - combined_expert_weights(p, groups, xt)).cwiseAbs().maxCoeff() < 1e-15);
  }
}

TEST_CASE("route_rows_backward matches finite differences") {
  SeededRng rng(12);
  const auto groups = make_groups({3, 1, 2});
  for (auto mode : {IntraGroupMode::Conditioned, IntraGroupMode::Static}) {
    RouterOptions o = conditioned(0.9);
    o.mode = mode;
    auto p = random_router(rng, 4, groups, o, 0.7);
    const Mat x = random_mat(rng, 3, 4);
    const Mat cg = random_mat(rng, 3, 3);
    std::vector<Mat> ci;
    for (int g = 0; g < 3; ++g) ci.push_back(random_mat(rng, 3, 3));
    auto objective = [&](const RouterLayerParams& q, const Mat& input) {
      const RoutingRows r = route_rows(q, input);
      double v = (r.group.array() * cg.array()).sum();
      for (std::size_t g = 0; g < 3; ++g) v += (r.intra[g].array() * ci[g].array()).sum();
      return v;
    };
    const RoutingRows r = route_rows(p, x);
    Mat dgp = Mat::Zero(4, 3);
    std::vector<Mat> dip;
    for (const auto& w : p.intra_projection) dip.push_back(Mat::Zero(w.rows(), w.cols()));
    Mat dx = Mat::Zero(3, 4);
    route_rows_backward(p, x, r, cg, ci, &dgp, &dip, &dx);

    auto check = [&](Mat& target, const Mat& analytic, auto&& eval) {
      Vec theta = Eigen::Map<Vec>(target.data(), target.size());
      auto f = [&](const Vec& v) {
        Eigen::Map<Vec>(target.data(), target.size()) = v;
        return eval();
      };
      const Vec numeric = finite_diff_grad(f, theta, 1e-6);
      Eigen::Map<Vec>(target.data(), target.size()) = theta;
      const Vec a = Eigen::Map<const Vec>(analytic.data(), analytic.size());
      CHECK((a - numeric).cwiseAbs().maxCoeff() < 1e-8);
    };
    check(p.group_projection, dgp, [&] { return objective(p, x); });
    for (std::size_t g = 0; g < 3; ++g) check(p.intra_projection[g], dip[g], [&] { return objective(p, x); });
    Mat xin = x;
    check(xin, dx, [&] { return objective(p, xin); });
  }
}

TEST_CASE("make_router validates groups and starts uniform") {
  CHECK_THROWS_AS(make_router(4, {}, {}), Error);
  auto dup = make_groups({2, 2});
  dup[1].expert_ids[0] = dup[0].expert_ids[0];
  CHECK_THROWS_AS(make_router(4, dup, {}), Error);
  RouterOptions o;
  o.tau_group = 0.0;
  CHECK_THROWS_AS(make_router(4, make_groups({2}), o), Error);
  const auto p = make_router(4, make_groups({3, 2}), {});
  CHECK(p.group_projection == Mat::Zero(4, 2));
  CHECK(p.max_experts() == 3);
  CHECK(p.is_real(1, 1));
  CHECK_FALSE(p.is_real(1, 2));
}
