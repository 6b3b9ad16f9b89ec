#pragma once

#include <map>
#include <string>
#include <vector>

#include "atmoe/config.hpp"

namespace atmoe {

struct Datasets {
  std::vector<Sample> train;
  std::vector<Sample> eval_single;  // multi_intent_fraction 0
  std::vector<Sample> eval_multi;   // multi_intent_fraction 1
};

/// Three independent streams derived from taskgen.seed.
Datasets generate_datasets(const TaskgenConfig& config);

std::vector<TrainingExample> pretraining_corpus(const Config& config);

/// Loss curves of one stage, keyed by adapter id ("base" / "router" for the
/// stages that train a single parameter family).
using StageCurves = std::map<std::string, LossCurve>;

/// Runs one stage of the pipeline; the model's stage must be the one before it.
StageCurves run_stage(ToyTransformer& model, TrainingStage stage, const Config& config, const Datasets& data);

/// base, experts, premerged, router in order.
const std::vector<TrainingStage>& pipeline_stages();

}  // namespace atmoe
