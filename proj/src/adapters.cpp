#include "atmoe/adapters.hpp"

#include <algorithm>

#include "atmoe/rng.hpp"

namespace atmoe {

void LoraAdapter::validate() const {
  const Index r = A.rows();
  if (r < 1 || B.cols() != r) {
    fail(ErrorKind::DimensionMismatch, "adapter '" + adapter_id + "': B is " + shape_of(B) + ", A is " + shape_of(A));
  }
  if (r > std::min(B.rows(), A.cols())) {
    fail(ErrorKind::InvalidArgument, "adapter '" + adapter_id + "': rank " + std::to_string(r) + " exceeds min(d, k)");
  }
  if (!(scaling > 0)) fail(ErrorKind::InvalidArgument, "adapter '" + adapter_id + "': scaling must be positive");
  if (!A.allFinite() || !B.allFinite()) fail(ErrorKind::InvalidArgument, "adapter '" + adapter_id + "': non-finite entry");
}

LoraAdapter init_adapter(Index d, Index k, Index r, std::uint64_t seed, std::string adapter_id, std::string task_id) {
  if (d < 1 || k < 1 || r < 1 || r > std::min(d, k)) {
    fail(ErrorKind::InvalidArgument, "init_adapter: rank " + std::to_string(r) + " invalid for " + std::to_string(d) +
                                         "x" + std::to_string(k) + " projection");
  }
  LoraAdapter adapter;
  adapter.adapter_id = std::move(adapter_id);
  adapter.task_id = std::move(task_id);
  adapter.B = Mat::Zero(d, r);
  adapter.A.resize(r, k);
  SeededRng rng(seed);
  for (Index i = 0; i < r; ++i)
    for (Index j = 0; j < k; ++j) adapter.A(i, j) = rng.normal(0.0, kAdapterInitStd);
  adapter.scaling = 1.0;
  return adapter;
}

Mat delta_weight(const LoraAdapter& adapter) {
  Mat delta = matmul(adapter.B, adapter.A);
  delta *= adapter.scaling;
  return delta;
}

Vec apply(const LoraAdapter& adapter, const Vec& x) {
  if (x.size() != adapter.in_dim()) {
    fail(ErrorKind::DimensionMismatch, "apply: adapter '" + adapter.adapter_id + "' expects input length " +
                                           std::to_string(adapter.in_dim()) + ", got " + std::to_string(x.size()));
  }
  Vec y = matvec(adapter.B, Vec(matvec(adapter.A, x)));
  y *= adapter.scaling;
  return y;
}

Mat apply_rows(const LoraAdapter& adapter, const Mat& x) {
  Mat y = matmul_nt(matmul_nt(x, adapter.A), adapter.B);
  if (adapter.scaling != 1.0) y *= adapter.scaling;
  return y;
}

void AdapterSet::add(LoraAdapter adapter) {
  if (find(adapter.adapter_id)) fail(ErrorKind::InvalidArgument, "duplicate adapter id '" + adapter.adapter_id + "'");
  if (adapter.task_id == kPremergedTask) {
    if (!premerged_id_.empty()) fail(ErrorKind::InvalidArgument, "adapter set already has a premerged adapter");
    premerged_id_ = adapter.adapter_id;
  }
  adapters_.push_back(std::move(adapter));
}

std::optional<std::size_t> AdapterSet::find(const std::string& adapter_id) const {
  for (std::size_t i = 0; i < adapters_.size(); ++i)
    if (adapters_[i].adapter_id == adapter_id) return i;
  return std::nullopt;
}

const LoraAdapter& AdapterSet::at(const std::string& adapter_id) const {
  const auto i = find(adapter_id);
  if (!i) fail(ErrorKind::InvalidArgument, "unknown adapter id '" + adapter_id + "'");
  return adapters_[*i];
}

LoraAdapter& AdapterSet::at(const std::string& adapter_id) {
  const auto i = find(adapter_id);
  if (!i) fail(ErrorKind::InvalidArgument, "unknown adapter id '" + adapter_id + "'");
  return adapters_[*i];
}

void AdapterSet::validate() const {
  std::size_t premerged = 0;
  for (std::size_t i = 0; i < adapters_.size(); ++i) {
    adapters_[i].validate();
    if (adapters_[i].task_id == kPremergedTask) ++premerged;
    for (std::size_t j = i + 1; j < adapters_.size(); ++j)
      if (adapters_[i].adapter_id == adapters_[j].adapter_id)
        fail(ErrorKind::InvalidArgument, "duplicate adapter id '" + adapters_[i].adapter_id + "'");
  }
  if (premerged != 1) fail(ErrorKind::InvalidArgument, "adapter set needs exactly one premerged adapter");
}

}  // namespace atmoe
