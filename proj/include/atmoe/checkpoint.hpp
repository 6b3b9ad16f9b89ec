#pragma once

#include <string>

#include "atmoe/config.hpp"

namespace atmoe {

inline constexpr int kCheckpointFormatVersion = 1;

enum class TensorDtype { F64, F32 };

struct Checkpoint {
  Config config;
  ToyTransformer model;
};

/// Self-describing JSON: format_version, config, stage_completed, seeds, every
/// named tensor {dtype, shape, data} and an FNV-1a checksum of the rest.
std::string serialize_checkpoint(const ToyTransformer& model, const Config& config,
                                 TensorDtype dtype = TensorDtype::F64);

/// Throws CorruptCheckpoint on malformed JSON, checksum mismatch, missing,
/// duplicate or misshapen tensors.
Checkpoint parse_checkpoint(const std::string& text);

void save_checkpoint(const std::string& path, const ToyTransformer& model, const Config& config,
                     TensorDtype dtype = TensorDtype::F64);
Checkpoint load_checkpoint(const std::string& path);

/// Checksum string stored in a serialized checkpoint.
std::string checkpoint_checksum(const std::string& text);

}  // namespace atmoe
