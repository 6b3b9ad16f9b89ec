#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "atmoe/composition.hpp"
#include "atmoe/taskgen.hpp"

namespace atmoe {

inline constexpr const char* kPremergedAdapterId = "premerged";

/// Linear sites of a transformer block that can host AT-MoE experts.
inline const std::vector<std::string>& site_names() {
  static const std::vector<std::string> names = {"attn_q", "attn_k", "attn_v", "attn_out", "ffn_up", "ffn_down"};
  return names;
}

struct ModelConfig {
  Index vocab_size = 64;
  Index d_model = 32;
  Index n_layers = 2;
  Index n_heads = 2;
  Index d_ff = 64;
  Index max_seq_len = 24;
  double init_std = 0.05;
  std::uint64_t seed = 42;

  Index lora_rank = 4;
  double lora_scaling = 1.0;
  std::vector<GroupSpec> groups = TaskCatalog::standard().groups();
  std::vector<std::string> targets = {"ffn_down"};
  double balance = 0.5;  // lambda

  double tau_group = 1.0;
  double tau_intra = 1.0;
  bool static_intra_group = false;
  bool pooled = true;

  void validate() const;
  std::vector<std::string> adapter_ids() const;  // task experts in group order, then premerged
  RouterOptions router_options() const;
};

enum class TrainingStage { None, Base, Experts, Premerged, Router };

std::string to_string(TrainingStage stage);
TrainingStage stage_from_string(const std::string& name);

struct LayerNormParams {
  Vec gain;
  Vec bias;
};

struct Block {
  LayerNormParams ln1;
  AtMoeLinear attn_q;
  AtMoeLinear attn_k;
  AtMoeLinear attn_v;
  AtMoeLinear attn_out;
  LayerNormParams ln2;
  AtMoeLinear ffn_up;
  AtMoeLinear ffn_down;

  AtMoeLinear& site(const std::string& name);
  const AtMoeLinear& site(const std::string& name) const;
};

struct ModelWeights {
  Mat token_embedding;     // V x N_dim
  Mat position_embedding;  // max_seq_len x N_dim
  std::vector<Block> blocks;
  LayerNormParams final_norm;
  Mat unembedding;  // N_dim x V
};

enum class ParamClass {
  TokenEmbedding,
  PositionEmbedding,
  LayerNorm,
  Attention,
  FeedForward,
  Unembedding,
  AdapterA,
  AdapterB,
  RouterGroup,
  RouterIntra,
};

std::string to_string(ParamClass cls);

/// A named view of one parameter tensor inside a ModelWeights instance.
struct TensorRef {
  std::string name;
  ParamClass cls;
  std::string adapter_id;  // set for AdapterA / AdapterB
  double* data;
  Index rows;
  Index cols;
  bool vector = false;  // stored as a length-rows vector

  Index size() const { return rows * cols; }
  Eigen::Map<Mat> map() const { return {data, rows, cols}; }
};

/// Every parameter tensor in a fixed, documented order.
std::vector<TensorRef> named_tensors(ModelWeights& weights);

/// Same-shaped weights filled with zeros (gradient accumulator).
ModelWeights zeros_like(const ModelWeights& weights);

/// Which tensors receive gradients and optimizer updates.
struct TrainableSet {
  std::set<ParamClass> classes;
  std::set<std::string> adapters;  // adapter ids whose AdapterA/B tensors are trainable

  bool contains(const TensorRef& ref) const;

  static TrainableSet base_model();
  static TrainableSet adapter(const std::string& adapter_id);
  static TrainableSet routers();
  static TrainableSet everything(const ModelConfig& config);
};

class ToyTransformer {
 public:
  /// Seeded initialisation; every adapter starts with B = 0, routers at zero.
  explicit ToyTransformer(ModelConfig config);
  ToyTransformer(ModelConfig config, ModelWeights weights, TrainingStage stage);

  const ModelConfig& config() const { return config_; }
  const ModelWeights& weights() const { return weights_; }
  ModelWeights& weights() { return weights_; }
  TrainingStage stage() const { return stage_; }
  void set_stage(TrainingStage stage) { stage_ = stage; }

  /// Sites carrying experts, in block order then site order.
  std::vector<std::pair<Index, std::string>> routed_sites() const;

 private:
  ModelConfig config_;
  ModelWeights weights_;
  TrainingStage stage_ = TrainingStage::None;
};

struct ForwardOptions {
  ExpertPath path = ExpertPath::Mixture;
  std::string solo_adapter;              // for ExpertPath::Solo
  std::optional<double> balance;         // overrides config lambda
  const PinnedRouting* pinned = nullptr;  // same pinned weights at every routed site
  double entropy_bonus = 0.0;            // coefficient on mean negative entropy of group weights
};

/// Causal next-token logits, one row per position (len x V).
Mat forward_logits(const ToyTransformer& model, std::span<const int> tokens, const ForwardOptions& options = {});

/// Mean cross-entropy of tokens[p + 1] over positions p with mask[p] set.
double loss(const ToyTransformer& model, std::span<const int> tokens, const Mask& mask,
            const ForwardOptions& options = {});

struct LossParts {
  double ce_sum = 0.0;
  Index scored = 0;
  double negentropy_sum = 0.0;  // summed over routed sites and positions
  Index routed_positions = 0;
};

/// Scales applied when back-propagating one sequence inside a batch:
/// total = ce_scale * ce_sum + entropy_scale * negentropy_sum.
struct GradScales {
  double ce = 1.0;
  double entropy = 0.0;
};

/// Forward + backward for one sequence. Gradients of trainable tensors are
/// accumulated into grads; frozen tensors are left untouched.
LossParts accumulate_gradient(const ToyTransformer& model, std::span<const int> tokens, const Mask& mask,
                              const ForwardOptions& options, const TrainableSet& trainable, ModelWeights& grads,
                              const GradScales& scales);

/// Loss parts without gradients.
LossParts loss_parts(const ToyTransformer& model, std::span<const int> tokens, const Mask& mask,
                     const ForwardOptions& options = {});

/// One routing report per (routed site, token); sites in routed_sites() order.
struct SiteTrace {
  Index layer;
  std::string site;
  std::vector<RoutingReport> tokens;
};
std::vector<SiteTrace> layer_routing_trace(const ToyTransformer& model, std::span<const int> tokens);

/// Logits together with the routing weights actually used at every routed
/// site (pinned weights when options.pinned is set).
struct TracedForward {
  Mat logits;
  std::vector<SiteTrace> sites;
};
TracedForward forward_traced(const ToyTransformer& model, std::span<const int> tokens,
                             const ForwardOptions& options = {});

/// Input rows entering a routed site, for recomputation checks.
Mat site_inputs(const ToyTransformer& model, std::span<const int> tokens, Index layer, const std::string& site);

/// Overwrites the selected tensors with N(0, stddev^2) draws, tensor by tensor
/// in named_tensors() order. Used to move adapters and routers away from their
/// zero initialisation in tests and gradient checks.
void fill_gaussian(ModelWeights& weights, const std::function<bool(const TensorRef&)>& select, std::uint64_t seed,
                   double stddev);

/// FNV-1a checksum over tensor bytes; selects tensors by predicate when given.
std::uint64_t weights_checksum(const ModelWeights& weights,
                               const std::function<bool(const TensorRef&)>& select = nullptr);

}  // namespace atmoe
