#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "atmoe/numerics.hpp"

namespace atmoe {

inline constexpr const char* kPremergedTask = "premerged";
inline constexpr double kAdapterInitStd = 0.02;

/// One low-rank expert: delta W = scaling * B * A against a frozen d x k projection.
struct LoraAdapter {
  std::string adapter_id;
  std::string task_id;
  Mat B;  // d x r
  Mat A;  // r x k
  double scaling = 1.0;

  Index rank() const { return A.rows(); }
  Index out_dim() const { return B.rows(); }
  Index in_dim() const { return A.cols(); }
  Index parameter_count() const { return B.size() + A.size(); }

  /// Throws if shapes, rank bounds, scaling or finiteness are violated.
  void validate() const;
};

/// A ~ N(0, 0.02^2) from SeededRng(seed), B = 0, scaling = 1.
LoraAdapter init_adapter(Index d, Index k, Index r, std::uint64_t seed, std::string adapter_id = "",
                         std::string task_id = "");

Mat delta_weight(const LoraAdapter& adapter);

/// Factored application s * B * (A * x).
Vec apply(const LoraAdapter& adapter, const Vec& x);

/// Row-batched application: each row of x is one input; returns rows of outputs.
Mat apply_rows(const LoraAdapter& adapter, const Mat& x);

class AdapterSet {
 public:
  AdapterSet() = default;

  void add(LoraAdapter adapter);

  const std::vector<LoraAdapter>& adapters() const { return adapters_; }
  std::vector<LoraAdapter>& adapters() { return adapters_; }
  std::size_t size() const { return adapters_.size(); }
  bool empty() const { return adapters_.empty(); }

  std::optional<std::size_t> find(const std::string& adapter_id) const;
  const LoraAdapter& at(const std::string& adapter_id) const;
  LoraAdapter& at(const std::string& adapter_id);

  const std::string& premerged_id() const { return premerged_id_; }
  const LoraAdapter& premerged() const { return at(premerged_id_); }

  /// Ids unique and exactly one adapter whose task is "premerged".
  void validate() const;

 private:
  std::vector<LoraAdapter> adapters_;
  std::string premerged_id_;
};

}  // namespace atmoe
