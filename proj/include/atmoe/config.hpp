#pragma once

#include <cstdint>
#include <string>

#include <json.hpp>

#include "atmoe/model.hpp"
#include "atmoe/training.hpp"

namespace atmoe {

struct TaskgenConfig {
  std::size_t train_size = 2000;
  std::size_t eval_single_size = 500;
  std::size_t eval_multi_size = 500;
  double multi_intent_fraction = 0.3;
  std::uint64_t seed = 42;
};

struct StageSchedule {
  Index epochs = 10;
  double learning_rate = 1e-3;
};

struct TrainingConfig {
  Index batch_size = 32;
  AdamConfig adam;
  std::uint64_t seed = 42;
  double entropy_bonus = 0.0;
  StageSchedule experts{15, 1e-2};
  StageSchedule premerged{15, 1e-2};
  StageSchedule router{30, 1e-2};
};

/// The frozen base is itself trained before any expert, on a corpus whose
/// executed transforms ignore the instruction with probability instruction_noise.
struct PretrainConfig {
  Index epochs = 25;
  double learning_rate = 3e-3;
  std::size_t corpus_size = 4000;
  double multi_intent_fraction = 0.3;
  double instruction_noise = 0.5;
};

struct Config {
  ModelConfig model;
  TaskgenConfig taskgen;
  TrainingConfig training;
  PretrainConfig pretrain;

  void validate() const;
  /// Optimiser settings for a training stage (base, experts, premerged or router).
  TrainConfig stage_config(TrainingStage stage) const;
};

nlohmann::ordered_json to_json(const Config& config);
/// Missing keys keep their defaults; unknown keys and ill-typed values throw.
Config config_from_json(const nlohmann::json& j);

Config load_config(const std::string& path);
std::string dump_config(const Config& config);

/// Atomically replaces path with content (temporary file, then rename).
void write_file_atomic(const std::string& path, const std::string& content);
std::string read_file(const std::string& path);

}  // namespace atmoe
