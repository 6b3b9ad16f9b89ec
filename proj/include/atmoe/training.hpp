#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "atmoe/model.hpp"
#include "atmoe/taskgen.hpp"

namespace atmoe {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Hyperparameters of one optimisation run. The trainable set is fixed by the
/// stage function that consumes it.
struct TrainConfig {
  Index epochs = 10;
  Index batch_size = 32;
  double learning_rate = 1e-3;
  AdamConfig adam;
  std::uint64_t seed = 42;
  double entropy_bonus = 0.0;
};

struct LossCurve {
  double initial_loss = 0.0;  // mean target-token loss over the data before the first step
  double final_loss = 0.0;    // same, after the last step
  std::vector<double> epoch_losses;  // mean of the per-batch losses of each epoch
  Index steps = 0;
};

/// Adam over the tensors selected by trainable. Batches are drawn in a fixed
/// order reshuffled every epoch from cfg.seed; each batch loss is the mean over
/// all of its scored target positions.
LossCurve optimize(ToyTransformer& model, const std::vector<TrainingExample>& data, const ForwardOptions& options,
                   const TrainableSet& trainable, const TrainConfig& cfg);

/// Pretrains the frozen base on a corpus; None -> Base.
LossCurve pretrain_base(ToyTransformer& model, const std::vector<TrainingExample>& corpus, const TrainConfig& cfg);

/// Trains one task adapter on its bucket, everything else frozen.
LossCurve train_expert(ToyTransformer& model, const std::string& task_id, const std::vector<Sample>& data,
                       const TrainConfig& cfg);

/// Every task adapter on its per_task_split bucket; Base -> Experts.
std::map<std::string, LossCurve> train_experts(ToyTransformer& model, const std::vector<Sample>& data,
                                               const TrainConfig& cfg);

/// Pre-merged adapter on the merged data; Experts -> Premerged.
LossCurve train_premerged(ToyTransformer& model, const std::vector<Sample>& merged_data, const TrainConfig& cfg);

/// Routers of every layer with all adapters and the base frozen; Premerged -> Router.
LossCurve train_router(ToyTransformer& model, const std::vector<Sample>& data, const TrainConfig& cfg);

std::vector<TrainingExample> examples_of(const std::vector<Sample>& samples);

struct EvalReport {
  double mean_loss = 0.0;       // mean cross-entropy over all scored target positions
  double token_accuracy = 0.0;  // argmax prediction == next token, same positions
  /// Per group: fraction of scored tokens whose within-group argmax lies in the
  /// sample's relevant experts, averaged over routed sites.
  std::map<std::string, double> routing_accuracy;
  double group_entropy = 0.0;   // mean entropy of the group weights
  double kl_to_uniform = 0.0;   // mean KL(group weights || uniform)
  Index samples = 0;
  Index scored_tokens = 0;
};

struct EvalOptions {
  ForwardOptions forward;
  /// Pin each sample's routing to its ground-truth experts: group weights
  /// uniform, intra-group mass split evenly over the relevant experts.
  bool pinned_oracle = false;
};

EvalReport evaluate(const ToyTransformer& model, const std::vector<Sample>& data, const EvalOptions& options = {});

/// Ground-truth routing for one sample; groups without labels stay uniform.
PinnedRouting oracle_routing(const std::vector<GroupSpec>& groups, const Sample& sample);

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::map<ParamClass, double> per_class;  // max relative error per checked class
  Index coordinates = 0;
  std::string worst_tensor;
  Index worst_index = -1;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  double max_frozen_gradient = 0.0;  // largest |analytic| over tensors outside the subset
};

struct GradCheckOptions {
  double h = 1e-4;
  int order = 2;  // finite-difference order, 2 or 4
  Index max_coordinates_per_tensor = 0;  // 0 checks every coordinate
  bool corrupt_analytic = false;         // negative control: perturb the analytic gradient
  /// Denominator floor. Central differences at h = 1e-4 carry roundoff of
  /// order 1e-11 on an O(1) loss, so smaller gradients cannot be resolved.
  double floor = 1e-6;
};

/// Compares accumulate_gradient against central differences of loss() for
/// every coordinate of the tensors in subset. Relative error is
/// |a - fd| / max(|a|, |fd|, check.floor).
GradCheckResult grad_check(const ToyTransformer& model, const TrainingExample& example,
                           const TrainableSet& subset, const ForwardOptions& options = {},
                           const GradCheckOptions& check = {});

}  // namespace atmoe
