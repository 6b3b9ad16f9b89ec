#include "atmoe/checkpoint.hpp"

#include <cstdio>
#include <set>

#include "atmoe/rng.hpp"

namespace atmoe {

using nlohmann::ordered_json;

namespace {

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string content_checksum(const ordered_json& body) {
  const std::string text = body.dump();
  return "fnv1a64:" + hex64(fnv1a(text.data(), text.size()));
}

[[noreturn]] void corrupt(const std::string& what) { fail(ErrorKind::CorruptCheckpoint, "corrupt checkpoint: " + what); }

}  // namespace

std::string serialize_checkpoint(const ToyTransformer& model, const Config& config, TensorDtype dtype) {
  ordered_json j;
  j["format_version"] = kCheckpointFormatVersion;
  j["config"] = to_json(config);
  j["stage_completed"] = to_string(model.stage());
  j["seeds"] = {{"model", config.model.seed}, {"taskgen", config.taskgen.seed}, {"training", config.training.seed}};
  ordered_json tensors = ordered_json::object();
  for (const auto& t : named_tensors(const_cast<ModelWeights&>(model.weights()))) {
    ordered_json entry;
    entry["dtype"] = dtype == TensorDtype::F64 ? "f64" : "f32";
    entry["shape"] = t.vector ? std::vector<Index>{t.rows} : std::vector<Index>{t.rows, t.cols};
    ordered_json data = ordered_json::array();
    for (Index i = 0; i < t.size(); ++i) {
      const double v = t.data[i];
      if (dtype == TensorDtype::F64)
        data.push_back(v);
      else
        data.push_back(static_cast<double>(static_cast<float>(v)));
    }
    entry["data"] = std::move(data);
    tensors[t.name] = std::move(entry);
  }
  j["tensors"] = std::move(tensors);
  j["checksum"] = content_checksum(j);
  return j.dump() + "\n";
}

std::string checkpoint_checksum(const std::string& text) {
  try {
    return ordered_json::parse(text).at("checksum").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    corrupt(e.what());
  }
}

Checkpoint parse_checkpoint(const std::string& text) {
  ordered_json j;
  try {
    j = ordered_json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    corrupt(std::string("not valid JSON: ") + e.what());
  }
  if (!j.is_object() || !j.contains("checksum") || !j["checksum"].is_string()) corrupt("missing checksum");
  const std::string stored = j["checksum"].get<std::string>();
  j.erase("checksum");
  if (content_checksum(j) != stored) corrupt("checksum mismatch");

  try {
    if (j.at("format_version").get<int>() != kCheckpointFormatVersion)
      corrupt("unsupported format_version " + j.at("format_version").dump());
    const Config config = config_from_json(nlohmann::json::parse(j.at("config").dump()));
    const TrainingStage stage = stage_from_string(j.at("stage_completed").get<std::string>());
    ToyTransformer model(config.model);
    model.set_stage(stage);
    const auto& tensors = j.at("tensors");
    if (!tensors.is_object()) corrupt("tensors must be an object");
    std::set<std::string> seen;
    for (const auto& t : named_tensors(model.weights())) {
      if (!tensors.contains(t.name)) corrupt("missing tensor '" + t.name + "'");
      seen.insert(t.name);
      const auto& entry = tensors.at(t.name);
      const std::string dtype = entry.at("dtype").get<std::string>();
      if (dtype != "f64" && dtype != "f32") corrupt("tensor '" + t.name + "' has unknown dtype '" + dtype + "'");
      const auto shape = entry.at("shape").get<std::vector<Index>>();
      Index count = 1;
      for (Index s : shape) count *= s;
      if (shape.size() != (t.vector ? 1u : 2u) || shape.front() != t.rows || count != t.size())
        corrupt("tensor '" + t.name + "' has the wrong shape");
      const auto& data = entry.at("data");
      if (!data.is_array() || static_cast<Index>(data.size()) != t.size())
        corrupt("tensor '" + t.name + "' has the wrong number of values");
      for (Index i = 0; i < t.size(); ++i) {
        const auto& v = data[static_cast<std::size_t>(i)];
        if (!v.is_number()) corrupt("tensor '" + t.name + "' holds a non-numeric value");
        t.data[i] = v.get<double>();
      }
    }
    for (const auto& [name, value] : tensors.items())
      if (!seen.count(name)) corrupt("unexpected tensor '" + name + "'");
    return {config, std::move(model)};
  } catch (const nlohmann::json::exception& e) {
    corrupt(e.what());
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::CorruptCheckpoint) throw;
    corrupt(e.what());
  }
}

void save_checkpoint(const std::string& path, const ToyTransformer& model, const Config& config, TensorDtype dtype) {
  write_file_atomic(path, serialize_checkpoint(model, config, dtype));
}

Checkpoint load_checkpoint(const std::string& path) { return parse_checkpoint(read_file(path)); }

}  // namespace atmoe
