#include "atmoe/pipeline.hpp"

#include "atmoe/rng.hpp"

namespace atmoe {

Datasets generate_datasets(const TaskgenConfig& config) {
  const TaskCatalog catalog = TaskCatalog::standard();
  Datasets d;
  d.train = generate(catalog, config.train_size, derive_seed(config.seed, 1), config.multi_intent_fraction);
  d.eval_single = generate(catalog, config.eval_single_size, derive_seed(config.seed, 2), 0.0);
  d.eval_multi = generate(catalog, config.eval_multi_size, derive_seed(config.seed, 3), 1.0);
  return d;
}

std::vector<TrainingExample> pretraining_corpus(const Config& config) {
  return generate_pretraining_corpus(TaskCatalog::standard(), config.pretrain.corpus_size,
                                     derive_seed(config.taskgen.seed, 4), config.pretrain.multi_intent_fraction,
                                     config.pretrain.instruction_noise);
}

const std::vector<TrainingStage>& pipeline_stages() {
  static const std::vector<TrainingStage> stages = {TrainingStage::Base, TrainingStage::Experts,
                                                    TrainingStage::Premerged, TrainingStage::Router};
  return stages;
}

StageCurves run_stage(ToyTransformer& model, TrainingStage stage, const Config& config, const Datasets& data) {
  const TrainConfig cfg = config.stage_config(stage);
  switch (stage) {
    case TrainingStage::Base:
      return {{"base", pretrain_base(model, pretraining_corpus(config), cfg)}};
    case TrainingStage::Experts:
      return train_experts(model, data.train, cfg);
    case TrainingStage::Premerged:
      return {{kPremergedAdapterId, train_premerged(model, data.train, cfg)}};
    case TrainingStage::Router:
      return {{"router", train_router(model, data.train, cfg)}};
    default:
      fail(ErrorKind::InvalidArgument, "stage '" + to_string(stage) + "' is not trainable");
  }
}

}  // namespace atmoe
