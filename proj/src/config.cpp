#include "atmoe/config.hpp"

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "atmoe/rng.hpp"

namespace atmoe {

using nlohmann::json;
using nlohmann::ordered_json;

void Config::validate() const {
  model.validate();
  require(taskgen.train_size >= 1 && taskgen.eval_single_size >= 1 && taskgen.eval_multi_size >= 1,
          "dataset sizes must be at least 1");
  require(taskgen.multi_intent_fraction >= 0.0 && taskgen.multi_intent_fraction <= 1.0,
          "taskgen.multi_intent_fraction must lie in [0, 1]");
  require(training.batch_size >= 1, "training.batch_size must be at least 1");
  for (const StageSchedule* s : {&training.experts, &training.premerged, &training.router})
    require(s->epochs >= 0 && s->learning_rate >= 0, "stage epochs and learning rates must be non-negative");
  require(pretrain.epochs >= 0 && pretrain.learning_rate >= 0, "pretrain epochs and learning rate must be non-negative");
  require(pretrain.corpus_size >= 1, "pretrain.corpus_size must be at least 1");
  require(pretrain.instruction_noise >= 0.0 && pretrain.instruction_noise <= 1.0,
          "pretrain.instruction_noise must lie in [0, 1]");
}

TrainConfig Config::stage_config(TrainingStage stage) const {
  TrainConfig c;
  c.batch_size = training.batch_size;
  c.adam = training.adam;
  c.entropy_bonus = training.entropy_bonus;
  StageSchedule s;
  switch (stage) {
    case TrainingStage::Base:
      s = {pretrain.epochs, pretrain.learning_rate};
      c.entropy_bonus = 0.0;
      break;
    case TrainingStage::Experts:
      s = training.experts;
      break;
    case TrainingStage::Premerged:
      s = training.premerged;
      break;
    case TrainingStage::Router:
      s = training.router;
      break;
    default:
      fail(ErrorKind::InvalidArgument, "stage '" + to_string(stage) + "' is not trainable");
  }
  c.epochs = s.epochs;
  c.learning_rate = s.learning_rate;
  c.seed = derive_seed(training.seed, static_cast<int>(stage));
  return c;
}

namespace {

ordered_json schedule_json(const StageSchedule& s) {
  ordered_json j;
  j["epochs"] = s.epochs;
  j["learning_rate"] = s.learning_rate;
  return j;
}

/// Reads keys of one JSON object into typed fields, rejecting unknown keys.
class Section {
 public:
  Section(const json& parent, const std::string& key, std::string name = "") : name_(name.empty() ? key : name) {
    if (!parent.contains(key)) return;
    object_ = &parent.at(key);
    if (!object_->is_object()) fail(ErrorKind::InvalidArgument, "config section '" + name_ + "' must be an object");
  }

  template <typename T>
  void read(const std::string& key, T& out) {
    seen_.insert(key);
    if (!object_ || !object_->contains(key)) return;
    try {
      out = object_->at(key).get<T>();
    } catch (const json::exception& e) {
      fail(ErrorKind::InvalidArgument, "config key '" + name_ + "." + key + "' has the wrong type: " + e.what());
    }
  }

  void schedule(const std::string& key, StageSchedule& s) {
    seen_.insert(key);
    if (!object_) return;
    Section sub(*object_, key, name_ + "." + key);
    sub.read("epochs", s.epochs);
    sub.read("learning_rate", s.learning_rate);
    sub.finish();
  }

  void finish() const {
    if (!object_) return;
    for (const auto& [key, value] : object_->items())
      if (!seen_.count(key)) fail(ErrorKind::InvalidArgument, "unknown config key '" + name_ + "." + key + "'");
  }

 private:
  std::string name_;
  const json* object_ = nullptr;
  std::set<std::string> seen_;
};

}  // namespace

ordered_json to_json(const Config& c) {
  ordered_json j;
  auto& m = j["model"];
  m["vocab_size"] = c.model.vocab_size;
  m["d_model"] = c.model.d_model;
  m["n_layers"] = c.model.n_layers;
  m["n_heads"] = c.model.n_heads;
  m["d_ff"] = c.model.d_ff;
  m["max_seq_len"] = c.model.max_seq_len;
  m["init_std"] = c.model.init_std;
  m["seed"] = c.model.seed;
  m["lora_rank"] = c.model.lora_rank;
  m["lora_scaling"] = c.model.lora_scaling;

  auto& r = j["router"];
  r["tau_group"] = c.model.tau_group;
  r["tau_intra"] = c.model.tau_intra;
  r["static_intra_group"] = c.model.static_intra_group;
  r["pooled"] = c.model.pooled;
  r["groups"] = ordered_json::array();
  for (const auto& g : c.model.groups) {
    ordered_json gj;
    gj["name"] = g.name;
    gj["experts"] = g.expert_ids;
    r["groups"].push_back(gj);
  }

  auto& a = j["atmoe"];
  a["targets"] = c.model.targets;
  a["lambda"] = c.model.balance;

  auto& t = j["taskgen"];
  t["train_size"] = c.taskgen.train_size;
  t["eval_single_size"] = c.taskgen.eval_single_size;
  t["eval_multi_size"] = c.taskgen.eval_multi_size;
  t["multi_intent_fraction"] = c.taskgen.multi_intent_fraction;
  t["seed"] = c.taskgen.seed;

  auto& tr = j["training"];
  tr["batch_size"] = c.training.batch_size;
  tr["beta1"] = c.training.adam.beta1;
  tr["beta2"] = c.training.adam.beta2;
  tr["epsilon"] = c.training.adam.epsilon;
  tr["seed"] = c.training.seed;
  tr["entropy_bonus"] = c.training.entropy_bonus;
  tr["experts"] = schedule_json(c.training.experts);
  tr["premerged"] = schedule_json(c.training.premerged);
  tr["router"] = schedule_json(c.training.router);

  auto& p = j["pretrain"];
  p["epochs"] = c.pretrain.epochs;
  p["learning_rate"] = c.pretrain.learning_rate;
  p["corpus_size"] = c.pretrain.corpus_size;
  p["multi_intent_fraction"] = c.pretrain.multi_intent_fraction;
  p["instruction_noise"] = c.pretrain.instruction_noise;
  return j;
}

Config config_from_json(const json& j) {
  if (!j.is_object()) fail(ErrorKind::InvalidArgument, "config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    static const std::set<std::string> sections = {"model", "router", "atmoe", "taskgen", "training", "pretrain"};
    if (!sections.count(key)) fail(ErrorKind::InvalidArgument, "unknown config section '" + key + "'");
  }
  Config c;
  Section m(j, "model");
  m.read("vocab_size", c.model.vocab_size);
  m.read("d_model", c.model.d_model);
  m.read("n_layers", c.model.n_layers);
  m.read("n_heads", c.model.n_heads);
  m.read("d_ff", c.model.d_ff);
  m.read("max_seq_len", c.model.max_seq_len);
  m.read("init_std", c.model.init_std);
  m.read("seed", c.model.seed);
  m.read("lora_rank", c.model.lora_rank);
  m.read("lora_scaling", c.model.lora_scaling);
  m.finish();

  Section r(j, "router");
  r.read("tau_group", c.model.tau_group);
  r.read("tau_intra", c.model.tau_intra);
  r.read("static_intra_group", c.model.static_intra_group);
  r.read("pooled", c.model.pooled);
  json groups;
  r.read("groups", groups);
  if (!groups.is_null()) {
    if (!groups.is_array()) fail(ErrorKind::InvalidArgument, "router.groups must be an array");
    c.model.groups.clear();
    for (const auto& g : groups) {
      if (!g.is_object() || !g.contains("name") || !g.contains("experts") || g.size() != 2)
        fail(ErrorKind::InvalidArgument, "each router group needs exactly 'name' and 'experts'");
      try {
        c.model.groups.push_back({static_cast<Index>(c.model.groups.size()), g.at("name").get<std::string>(),
                                  g.at("experts").get<std::vector<std::string>>()});
      } catch (const json::exception& e) {
        fail(ErrorKind::InvalidArgument, std::string("malformed router group: ") + e.what());
      }
    }
  }
  r.finish();

  Section a(j, "atmoe");
  a.read("targets", c.model.targets);
  a.read("lambda", c.model.balance);
  a.finish();

  Section t(j, "taskgen");
  t.read("train_size", c.taskgen.train_size);
  t.read("eval_single_size", c.taskgen.eval_single_size);
  t.read("eval_multi_size", c.taskgen.eval_multi_size);
  t.read("multi_intent_fraction", c.taskgen.multi_intent_fraction);
  t.read("seed", c.taskgen.seed);
  t.finish();

  Section tr(j, "training");
  tr.read("batch_size", c.training.batch_size);
  tr.read("beta1", c.training.adam.beta1);
  tr.read("beta2", c.training.adam.beta2);
  tr.read("epsilon", c.training.adam.epsilon);
  tr.read("seed", c.training.seed);
  tr.read("entropy_bonus", c.training.entropy_bonus);
  tr.schedule("experts", c.training.experts);
  tr.schedule("premerged", c.training.premerged);
  tr.schedule("router", c.training.router);
  tr.finish();

  Section p(j, "pretrain");
  p.read("epochs", c.pretrain.epochs);
  p.read("learning_rate", c.pretrain.learning_rate);
  p.read("corpus_size", c.pretrain.corpus_size);
  p.read("multi_intent_fraction", c.pretrain.multi_intent_fraction);
  p.read("instruction_noise", c.pretrain.instruction_noise);
  p.finish();

  c.validate();
  return c;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Io, "cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Config load_config(const std::string& path) {
  const std::string text = read_file(path);
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    fail(ErrorKind::InvalidArgument, "config '" + path + "' is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

std::string dump_config(const Config& config) { return to_json(config).dump(2) + "\n"; }

void write_file_atomic(const std::string& path, const std::string& content) {
  namespace fs = std::filesystem;
  const fs::path target(path);
  const fs::path tmp = target.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorKind::Io, "cannot write '" + tmp.string() + "'");
    out << content;
    out.flush();
    if (!out) {
      out.close();
      std::error_code ec;
      fs::remove(tmp, ec);
      fail(ErrorKind::Io, "failed while writing '" + tmp.string() + "'");
    }
  }
  std::error_code ec;
  fs::rename(tmp, target, ec);
  if (ec) {
    fs::remove(tmp, ec);
    fail(ErrorKind::Io, "cannot move '" + tmp.string() + "' to '" + path + "'");
  }
}

}  // namespace atmoe
