// Command-line front end: dataset generation, staged training, evaluation,
// routing inspection and gradient verification.

#include <chrono>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "atmoe/checkpoint.hpp"
#include "atmoe/pipeline.hpp"
#include "atmoe/rng.hpp"
#include "atmoe/routing_dump.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;
using namespace atmoe;

namespace {

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
  return buf;
}

std::string hex_checksum(const std::string& text) {
  char buf[24];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a(text.data(), text.size())));
  return buf;
}

ordered_json curve_json(const LossCurve& c) {
  ordered_json j;
  j["initial_loss"] = c.initial_loss;
  j["final_loss"] = c.final_loss;
  j["epoch_losses"] = c.epoch_losses;
  j["steps"] = c.steps;
  return j;
}

ordered_json report_json(const EvalReport& r) {
  ordered_json j;
  j["mean_loss"] = r.mean_loss;
  j["token_accuracy"] = r.token_accuracy;
  j["routing_accuracy"] = ordered_json::object();
  for (const auto& [group, acc] : r.routing_accuracy) j["routing_accuracy"][group] = acc;
  j["group_entropy"] = r.group_entropy;
  j["kl_to_uniform"] = r.kl_to_uniform;
  j["samples"] = r.samples;
  j["scored_tokens"] = r.scored_tokens;
  return j;
}

// ---------------------------------------------------------------------------

struct GenDataArgs {
  std::string config;
  std::string out;
};

int cmd_gen_data(const GenDataArgs& a) {
  const Config config = load_config(a.config);
  const Datasets d = generate_datasets(config.taskgen);
  const std::vector<std::pair<std::string, const std::vector<Sample>*>> files = {
      {"train.jsonl", &d.train}, {"eval_single.jsonl", &d.eval_single}, {"eval_multi.jsonl", &d.eval_multi}};

  std::error_code ec;
  fs::create_directories(a.out, ec);
  if (ec || !fs::is_directory(a.out)) fail(ErrorKind::Io, "cannot create output directory '" + a.out + "'");

  ordered_json manifest;
  manifest["seed"] = config.taskgen.seed;
  manifest["multi_intent_fraction"] = config.taskgen.multi_intent_fraction;
  manifest["counts"] = ordered_json::object();
  manifest["checksums"] = ordered_json::object();
  std::vector<std::pair<std::string, std::string>> contents;
  for (const auto& [name, samples] : files) {
    contents.emplace_back(name, to_jsonl(*samples));
    manifest["counts"][name] = samples->size();
    manifest["checksums"][name] = hex_checksum(contents.back().second);
  }
  manifest["created_at"] = utc_timestamp();
  contents.emplace_back("manifest.json", manifest.dump(2) + "\n");

  // Stage every file first so a failure leaves no partial dataset behind.
  std::vector<fs::path> staged;
  try {
    for (const auto& [name, text] : contents) {
      const fs::path tmp = fs::path(a.out) / (name + ".staging");
      write_file_atomic(tmp.string(), text);
      staged.push_back(tmp);
    }
  } catch (...) {
    for (const auto& p : staged) fs::remove(p, ec);
    throw;
  }
  for (std::size_t i = 0; i < contents.size(); ++i) {
    fs::rename(staged[i], fs::path(a.out) / contents[i].first, ec);
    if (ec) fail(ErrorKind::Io, "cannot finalise '" + contents[i].first + "' in '" + a.out + "'");
  }
  std::cout << "wrote " << d.train.size() << " train, " << d.eval_single.size() << " single-intent and "
            << d.eval_multi.size() << " multi-intent samples to " << a.out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string stage;
  std::string config;
  std::string data;
  std::string ckpt_in;
  std::string ckpt_out;
  std::string report;
  bool f32 = false;
};

int cmd_train(const TrainArgs& a) {
  const TrainingStage stage = stage_from_string(a.stage);
  if (stage == TrainingStage::None) fail(ErrorKind::InvalidArgument, "stage 'none' cannot be trained");

  std::optional<Config> config;
  if (!a.config.empty()) config = load_config(a.config);
  std::optional<ToyTransformer> model;
  if (!a.ckpt_in.empty()) {
    Checkpoint ck = load_checkpoint(a.ckpt_in);
    if (config && to_json(*config)["model"] != to_json(ck.config)["model"])
      fail(ErrorKind::InvalidArgument, "--config model section differs from the input checkpoint");
    if (!config) config = ck.config;
    model.emplace(std::move(ck.model));
  } else {
    if (stage != TrainingStage::Base)
      fail(ErrorKind::StageOrder, "stage '" + a.stage + "' needs --ckpt-in from stage '" +
                                      to_string(static_cast<TrainingStage>(static_cast<int>(stage) - 1)) + "'");
    if (!config) fail(ErrorKind::InvalidArgument, "--config is required when starting from scratch");
    model.emplace(config->model);
  }

  Datasets data;
  if (stage != TrainingStage::Base) {
    if (a.data.empty()) fail(ErrorKind::InvalidArgument, "--data is required for stage '" + a.stage + "'");
    data.train = read_jsonl((fs::path(a.data) / "train.jsonl").string());
  }
  const StageCurves curves = run_stage(*model, stage, *config, data);

  const std::string text = serialize_checkpoint(*model, *config, a.f32 ? TensorDtype::F32 : TensorDtype::F64);
  write_file_atomic(a.ckpt_out, text);

  ordered_json report;
  report["stage"] = to_string(stage);
  report["stage_completed"] = to_string(model->stage());
  report["checkpoint"] = a.ckpt_out;
  report["checkpoint_checksum"] = checkpoint_checksum(text);
  report["curves"] = ordered_json::object();
  for (const auto& [id, curve] : curves) report["curves"][id] = curve_json(curve);
  const std::string report_path = a.report.empty() ? a.ckpt_out + ".report.json" : a.report;
  write_file_atomic(report_path, report.dump(2) + "\n");
  for (const auto& [id, curve] : curves)
    std::cout << to_string(stage) << " " << id << ": loss " << curve.initial_loss << " -> " << curve.final_loss << "\n";
  std::cout << "checkpoint " << a.ckpt_out << " (" << report["checkpoint_checksum"].get<std::string>() << ")\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string ckpt;
  std::string data;
  std::string out;
  bool pinned_oracle = false;
  std::optional<double> lambda;
  std::string path = "mixture";
  std::string adapter;
};

int cmd_eval(const EvalArgs& a) {
  const Checkpoint ck = load_checkpoint(a.ckpt);
  const auto samples = read_jsonl(a.data);
  EvalOptions options;
  options.pinned_oracle = a.pinned_oracle;
  options.forward.balance = a.lambda;
  if (a.path == "base") {
    options.forward.path = ExpertPath::Base;
  } else if (a.path == "solo") {
    if (a.adapter.empty()) fail(ErrorKind::InvalidArgument, "--path solo needs --adapter");
    options.forward.path = ExpertPath::Solo;
    options.forward.solo_adapter = a.adapter;
  } else if (a.path != "mixture") {
    fail(ErrorKind::InvalidArgument, "--path must be one of base, solo, mixture");
  }
  const std::string text = report_json(evaluate(ck.model, samples, options)).dump(2) + "\n";
  if (!a.out.empty()) write_file_atomic(a.out, text);
  std::cout << text;
  return 0;
}

// ---------------------------------------------------------------------------

struct InspectArgs {
  std::string ckpt;
  std::string tokens;
  std::string out;
  std::string site = "ffn_down";
};

int cmd_inspect(const InspectArgs& a) {
  const std::vector<int> tokens = parse_token_list(a.tokens);
  const Checkpoint ck = load_checkpoint(a.ckpt);
  const auto rows = routing_dump(ck.model, tokens, a.site);
  write_file_atomic(a.out, routing_csv(rows));
  std::cout << "wrote " << rows.size() << " rows to " << a.out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct GradcheckArgs {
  std::string config;
  std::uint64_t seed = 7;
  double h = 1e-4;
  int order = 2;
  double tolerance = 1e-4;
  Index max_coordinates = 0;
  bool inject_wrong_gradient = false;
};

ModelConfig small_check_config(std::uint64_t seed) {
  ModelConfig c;
  c.vocab_size = 8;
  c.d_model = 8;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_ff = 8;
  c.max_seq_len = 8;
  c.lora_rank = 2;
  c.init_std = 0.3;
  c.seed = seed;
  c.targets = {"attn_v", "ffn_down"};
  return c;
}

int cmd_gradcheck(const GradcheckArgs& a) {
  ModelConfig mc = a.config.empty() ? small_check_config(a.seed) : load_config(a.config).model;
  ToyTransformer model(mc);
  fill_gaussian(
      model.weights(),
      [](const TensorRef& t) {
        return t.cls == ParamClass::AdapterB || t.cls == ParamClass::RouterGroup || t.cls == ParamClass::RouterIntra;
      },
      derive_seed(a.seed, 1), 0.3);

  SeededRng rng(derive_seed(a.seed, 2));
  const auto length = static_cast<std::size_t>(std::min<Index>(mc.max_seq_len, 8));
  TrainingExample ex;
  for (std::size_t i = 0; i < length; ++i) ex.tokens.push_back(static_cast<int>(rng.index(mc.vocab_size)));
  ex.mask.assign(length, 1);
  ex.mask.back() = 0;

  GradCheckOptions check;
  check.h = a.h;
  check.order = a.order;
  check.max_coordinates_per_tensor = a.config.empty() ? a.max_coordinates : std::max<Index>(a.max_coordinates, 8);
  check.corrupt_analytic = a.inject_wrong_gradient;
  const GradCheckResult r = grad_check(model, ex, TrainableSet::everything(mc), {}, check);

  const bool pass = r.max_relative_error < a.tolerance && r.max_frozen_gradient == 0.0;
  ordered_json j;
  j["pass"] = pass;
  j["max_relative_error"] = r.max_relative_error;
  j["tolerance"] = a.tolerance;
  j["coordinates"] = r.coordinates;
  j["worst_tensor"] = r.worst_tensor;
  j["worst_index"] = r.worst_index;
  j["per_class"] = ordered_json::object();
  for (const auto& [cls, err] : r.per_class) j["per_class"][to_string(cls)] = err;
  std::cout << j.dump(2) << "\n";
  if (!pass) fail(ErrorKind::Verification, "gradient check failed: max relative error " + std::to_string(r.max_relative_error));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"AT-MoE desk-scale toolkit"};
  app.require_subcommand(1);

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate train / eval datasets and a manifest");
  gen_cmd->add_option("--config", gen.config, "Config JSON")->required();
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();

  TrainArgs train;
  auto* train_cmd = app.add_subcommand("train", "Run one training stage");
  train_cmd->add_option("--stage", train.stage, "base | experts | premerged | router")->required();
  train_cmd->add_option("--config", train.config, "Config JSON (defaults to the input checkpoint's)");
  train_cmd->add_option("--data", train.data, "Dataset directory from gen-data");
  train_cmd->add_option("--ckpt-in", train.ckpt_in, "Checkpoint from the previous stage");
  train_cmd->add_option("--ckpt-out", train.ckpt_out, "Output checkpoint")->required();
  train_cmd->add_option("--report", train.report, "Training report path (default: <ckpt-out>.report.json)");
  train_cmd->add_flag("--f32", train.f32, "Store tensors in single precision");

  EvalArgs eval;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a JSONL dataset");
  eval_cmd->add_option("--ckpt", eval.ckpt, "Checkpoint")->required();
  eval_cmd->add_option("--data", eval.data, "JSONL dataset")->required();
  eval_cmd->add_option("--out", eval.out, "Also write the report here");
  eval_cmd->add_flag("--pinned-oracle", eval.pinned_oracle, "Pin routing to each sample's ground-truth experts");
  eval_cmd->add_option("--lambda", eval.lambda, "Override the balance parameter");
  eval_cmd->add_option("--path", eval.path, "mixture | solo | base");
  eval_cmd->add_option("--adapter", eval.adapter, "Adapter for --path solo");

  InspectArgs inspect;
  auto* inspect_cmd = app.add_subcommand("inspect", "Dump per-token routing weights as CSV");
  inspect_cmd->add_option("--ckpt", inspect.ckpt, "Checkpoint")->required();
  inspect_cmd->add_option("--tokens", inspect.tokens, "Comma-separated token ids")->required();
  inspect_cmd->add_option("--out", inspect.out, "CSV output path")->required();
  inspect_cmd->add_option("--site", inspect.site, "Routed site to dump");

  GradcheckArgs grad;
  auto* grad_cmd = app.add_subcommand("gradcheck", "Compare analytic and finite-difference gradients");
  grad_cmd->add_option("--config", grad.config, "Use this config's model section instead of the small default");
  grad_cmd->add_option("--seed", grad.seed, "Seed for the random model and sequence");
  grad_cmd->add_option("--step", grad.h, "Finite-difference step h");
  grad_cmd->add_option("--order", grad.order, "Finite-difference order")->check(CLI::IsMember({2, 4}));
  grad_cmd->add_option("--tolerance", grad.tolerance, "Maximum allowed relative error");
  grad_cmd->add_option("--max-coordinates", grad.max_coordinates, "Coordinates checked per tensor (0 = all)");
  grad_cmd->add_flag("--inject-wrong-gradient", grad.inject_wrong_gradient, "Negative control: corrupt one gradient");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*gen_cmd) return cmd_gen_data(gen);
    if (*train_cmd) return cmd_train(train);
    if (*eval_cmd) return cmd_eval(eval);
    if (*inspect_cmd) return cmd_inspect(inspect);
    if (*grad_cmd) return cmd_gradcheck(grad);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 2;
}
