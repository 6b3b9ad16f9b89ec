#include "atmoe/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "atmoe/rng.hpp"

namespace atmoe {

namespace {

Index scored_positions(const Mask& mask) {
  return static_cast<Index>(std::count_if(mask.begin(), mask.end(), [](std::uint8_t v) { return v != 0; }));
}

double dataset_loss(const ToyTransformer& model, const std::vector<TrainingExample>& data,
                    const ForwardOptions& options) {
  double total = 0.0;
  Index scored = 0;
  for (const auto& ex : data) {
    const LossParts parts = loss_parts(model, ex.tokens, ex.mask, options);
    total += parts.ce_sum;
    scored += parts.scored;
  }
  return total / static_cast<double>(scored);
}

void require_stage(const ToyTransformer& model, TrainingStage expected, const std::string& what) {
  if (model.stage() != expected) {
    fail(ErrorKind::StageOrder, what + " requires a model at stage '" + to_string(expected) + "', got '" +
                                    to_string(model.stage()) + "'");
  }
}

}  // namespace

std::vector<TrainingExample> examples_of(const std::vector<Sample>& samples) {
  std::vector<TrainingExample> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(s.example());
  return out;
}

LossCurve optimize(ToyTransformer& model, const std::vector<TrainingExample>& data, const ForwardOptions& options,
                   const TrainableSet& trainable, const TrainConfig& cfg) {
  require(!data.empty(), "training data is empty");
  require(cfg.epochs >= 0, "epochs must be non-negative");
  require(cfg.batch_size >= 1, "batch_size must be at least 1");
  require(cfg.learning_rate >= 0 && std::isfinite(cfg.learning_rate), "learning_rate must be finite and >= 0");
  require(cfg.adam.beta1 >= 0 && cfg.adam.beta1 < 1 && cfg.adam.beta2 >= 0 && cfg.adam.beta2 < 1,
          "Adam decay rates must lie in [0, 1)");
  require(cfg.adam.epsilon > 0, "Adam epsilon must be positive");

  auto params = named_tensors(model.weights());
  ModelWeights grads = zeros_like(model.weights());
  auto grad_refs = named_tensors(grads);
  std::vector<std::size_t> active;
  for (std::size_t i = 0; i < params.size(); ++i)
    if (trainable.contains(params[i])) active.push_back(i);
  require(!active.empty(), "no tensor matches the trainable set");

  std::vector<Vec> first(active.size()), second(active.size());
  for (std::size_t a = 0; a < active.size(); ++a) {
    first[a] = Vec::Zero(params[active[a]].size());
    second[a] = Vec::Zero(params[active[a]].size());
  }

  ForwardOptions fo = options;
  fo.entropy_bonus = cfg.entropy_bonus;
  const auto routed_sites = static_cast<Index>(model.routed_sites().size());

  LossCurve curve;
  curve.initial_loss = dataset_loss(model, data, options);
  std::vector<std::size_t> order(data.size());
  const auto batch = static_cast<std::size_t>(cfg.batch_size);
  for (Index epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    SeededRng rng(derive_seed(cfg.seed, epoch));
    rng.shuffle(order);
    double epoch_total = 0.0;
    Index batches = 0;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t stop = std::min(order.size(), start + batch);
      for (auto a : active) grad_refs[a].map().setZero();
      Index scored = 0, routed = 0;
      for (std::size_t i = start; i < stop; ++i) {
        scored += scored_positions(data[order[i]].mask);
        routed += static_cast<Index>(data[order[i]].tokens.size()) * routed_sites;
      }
      GradScales scales;
      scales.ce = 1.0 / static_cast<double>(scored);
      scales.entropy = routed > 0 ? cfg.entropy_bonus / static_cast<double>(routed) : 0.0;
      double batch_loss = 0.0;
      for (std::size_t i = start; i < stop; ++i) {
        const auto& ex = data[order[i]];
        const LossParts parts = accumulate_gradient(model, ex.tokens, ex.mask, fo, trainable, grads, scales);
        batch_loss += parts.ce_sum * scales.ce + parts.negentropy_sum * scales.entropy;
      }
      if (!std::isfinite(batch_loss)) fail(ErrorKind::Verification, "training loss became non-finite");

      ++curve.steps;
      const double c1 = 1.0 - std::pow(cfg.adam.beta1, static_cast<double>(curve.steps));
      const double c2 = 1.0 - std::pow(cfg.adam.beta2, static_cast<double>(curve.steps));
      for (std::size_t a = 0; a < active.size(); ++a) {
        double* p = params[active[a]].data;
        const double* g = grad_refs[active[a]].data;
        for (Index j = 0; j < first[a].size(); ++j) {
          first[a](j) = cfg.adam.beta1 * first[a](j) + (1.0 - cfg.adam.beta1) * g[j];
          second[a](j) = cfg.adam.beta2 * second[a](j) + (1.0 - cfg.adam.beta2) * g[j] * g[j];
          const double m_hat = first[a](j) / c1;
          const double v_hat = second[a](j) / c2;
          p[j] -= cfg.learning_rate * m_hat / (std::sqrt(v_hat) + cfg.adam.epsilon);
        }
      }
      epoch_total += batch_loss;
      ++batches;
    }
    curve.epoch_losses.push_back(epoch_total / static_cast<double>(batches));
  }
  curve.final_loss = dataset_loss(model, data, options);
  return curve;
}

LossCurve pretrain_base(ToyTransformer& model, const std::vector<TrainingExample>& corpus, const TrainConfig& cfg) {
  require_stage(model, TrainingStage::None, "base pretraining");
  ForwardOptions options;
  options.path = ExpertPath::Base;
  LossCurve curve = optimize(model, corpus, options, TrainableSet::base_model(), cfg);
  model.set_stage(TrainingStage::Base);
  return curve;
}

LossCurve train_expert(ToyTransformer& model, const std::string& task_id, const std::vector<Sample>& data,
                       const TrainConfig& cfg) {
  const auto ids = model.config().adapter_ids();
  require(task_id != kPremergedAdapterId && std::find(ids.begin(), ids.end(), task_id) != ids.end(),
          "unknown task expert '" + task_id + "'");
  require(!data.empty(), "training bucket for '" + task_id + "' is empty");
  ForwardOptions options;
  options.path = ExpertPath::Solo;
  options.solo_adapter = task_id;
  return optimize(model, examples_of(data), options, TrainableSet::adapter(task_id), cfg);
}

std::map<std::string, LossCurve> train_experts(ToyTransformer& model, const std::vector<Sample>& data,
                                               const TrainConfig& cfg) {
  require_stage(model, TrainingStage::Base, "expert training");
  const auto buckets = per_task_split(data);
  std::map<std::string, LossCurve> curves;
  const auto ids = model.config().adapter_ids();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] == kPremergedAdapterId) continue;
    const auto it = buckets.find(ids[i]);
    if (it == buckets.end()) fail(ErrorKind::InvalidArgument, "training bucket for '" + ids[i] + "' is empty");
    TrainConfig task_cfg = cfg;
    task_cfg.seed = derive_seed(cfg.seed, i);
    curves[ids[i]] = train_expert(model, ids[i], it->second, task_cfg);
  }
  model.set_stage(TrainingStage::Experts);
  return curves;
}

LossCurve train_premerged(ToyTransformer& model, const std::vector<Sample>& merged_data, const TrainConfig& cfg) {
  require_stage(model, TrainingStage::Experts, "pre-merged training");
  ForwardOptions options;
  options.path = ExpertPath::Solo;
  options.solo_adapter = kPremergedAdapterId;
  LossCurve curve =
      optimize(model, examples_of(merged_data), options, TrainableSet::adapter(kPremergedAdapterId), cfg);
  model.set_stage(TrainingStage::Premerged);
  return curve;
}

LossCurve train_router(ToyTransformer& model, const std::vector<Sample>& data, const TrainConfig& cfg) {
  require_stage(model, TrainingStage::Premerged, "router training");
  ForwardOptions options;
  options.path = ExpertPath::Mixture;
  LossCurve curve = optimize(model, examples_of(data), options, TrainableSet::routers(), cfg);
  model.set_stage(TrainingStage::Router);
  return curve;
}

PinnedRouting oracle_routing(const std::vector<GroupSpec>& groups, const Sample& sample) {
  const auto n_groups = static_cast<Index>(groups.size());
  PinnedRouting pin;
  pin.group = Vec::Constant(n_groups, 1.0 / static_cast<double>(n_groups));
  pin.intra = Mat::Zero(n_groups, max_group_size(groups));
  for (Index g = 0; g < n_groups; ++g) {
    const GroupSpec& spec = groups[static_cast<std::size_t>(g)];
    const auto n = static_cast<Index>(spec.expert_ids.size());
    std::vector<Index> hits;
    const auto it = sample.relevant_experts.find(spec.name);
    if (it != sample.relevant_experts.end()) {
      for (Index m = 0; m < n; ++m)
        if (std::find(it->second.begin(), it->second.end(), spec.expert_ids[static_cast<std::size_t>(m)]) !=
            it->second.end())
          hits.push_back(m);
    }
    if (hits.empty()) {
      for (Index m = 0; m < n; ++m) pin.intra(g, m) = 1.0 / static_cast<double>(n);
    } else {
      for (Index m : hits) pin.intra(g, m) = 1.0 / static_cast<double>(hits.size());
    }
  }
  return pin;
}

EvalReport evaluate(const ToyTransformer& model, const std::vector<Sample>& data, const EvalOptions& options) {
  require(!data.empty(), "evaluation data is empty");
  const auto& groups = model.config().groups;
  EvalReport report;
  double ce = 0.0;
  Index correct = 0;
  std::map<std::string, Index> hits, counts;
  double entropy_sum = 0.0, kl_sum = 0.0;
  Index routed_tokens = 0;
  for (const auto& sample : data) {
    const TrainingExample ex = sample.example();
    ForwardOptions fo = options.forward;
    PinnedRouting pin;
    if (options.pinned_oracle) {
      pin = oracle_routing(groups, sample);
      fo.pinned = &pin;
    }
    const TracedForward traced = forward_traced(model, ex.tokens, fo);
    const Mat& logits = traced.logits;
    for (Index p = 0; p + 1 < logits.rows(); ++p) {
      if (!ex.mask[static_cast<std::size_t>(p)]) continue;
      const int target = ex.tokens[static_cast<std::size_t>(p + 1)];
      const double mx = logits.row(p).maxCoeff();
      const double z = (logits.row(p).array() - mx).exp().sum();
      ce += std::log(z) + mx - logits(p, target);
      Index best = 0;
      logits.row(p).maxCoeff(&best);
      if (best == target) ++correct;
      ++report.scored_tokens;

      for (const auto& site : traced.sites) {
        const RoutingReport& r = site.tokens[static_cast<std::size_t>(p)];
        double h = 0.0;
        for (Index g = 0; g < r.group.size(); ++g)
          if (r.group(g) > 0) h -= r.group(g) * std::log(r.group(g));
        entropy_sum += h;
        kl_sum += std::log(static_cast<double>(r.group.size())) - h;
        ++routed_tokens;
        for (std::size_t g = 0; g < groups.size(); ++g) {
          const auto label = sample.relevant_experts.find(groups[g].name);
          if (label == sample.relevant_experts.end() || label->second.empty()) continue;
          const auto n = static_cast<Index>(groups[g].expert_ids.size());
          Index arg = 0;
          for (Index m = 1; m < n; ++m)
            if (r.intra(static_cast<Index>(g), m) > r.intra(static_cast<Index>(g), arg)) arg = m;
          const auto& chosen = groups[g].expert_ids[static_cast<std::size_t>(arg)];
          if (std::find(label->second.begin(), label->second.end(), chosen) != label->second.end())
            ++hits[groups[g].name];
          ++counts[groups[g].name];
        }
      }
    }
  }
  report.samples = static_cast<Index>(data.size());
  report.mean_loss = ce / static_cast<double>(report.scored_tokens);
  report.token_accuracy = static_cast<double>(correct) / static_cast<double>(report.scored_tokens);
  for (const auto& [name, n] : counts)
    report.routing_accuracy[name] = static_cast<double>(hits[name]) / static_cast<double>(n);
  if (routed_tokens > 0) {
    report.group_entropy = entropy_sum / static_cast<double>(routed_tokens);
    report.kl_to_uniform = kl_sum / static_cast<double>(routed_tokens);
  }
  return report;
}

GradCheckResult grad_check(const ToyTransformer& model, const TrainingExample& example, const TrainableSet& subset,
                           const ForwardOptions& options, const GradCheckOptions& check) {
  ToyTransformer work = model;
  const LossParts parts = loss_parts(work, example.tokens, example.mask, options);
  GradScales scales;
  scales.ce = 1.0 / static_cast<double>(parts.scored);
  scales.entropy =
      parts.routed_positions > 0 ? options.entropy_bonus / static_cast<double>(parts.routed_positions) : 0.0;
  ModelWeights grads = zeros_like(work.weights());
  accumulate_gradient(work, example.tokens, example.mask, options, subset, grads, scales);

  auto params = named_tensors(work.weights());
  const auto grad_refs = named_tensors(grads);
  GradCheckResult result;
  bool corrupted = false;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const TensorRef& ref = params[i];
    const auto analytic_all = grad_refs[i].map();
    if (!subset.contains(ref)) {
      if (ref.size() > 0) result.max_frozen_gradient = std::max(result.max_frozen_gradient, analytic_all.cwiseAbs().maxCoeff());
      continue;
    }
    std::vector<Index> coords;
    const Index limit = check.max_coordinates_per_tensor;
    if (limit <= 0 || limit >= ref.size()) {
      coords.resize(static_cast<std::size_t>(ref.size()));
      std::iota(coords.begin(), coords.end(), Index{0});
    } else {
      for (Index k = 0; k < limit; ++k) coords.push_back(k * ref.size() / limit);
    }
    Vec theta(static_cast<Index>(coords.size()));
    Vec analytic(theta.size());
    for (Index k = 0; k < theta.size(); ++k) {
      theta(k) = ref.data[coords[static_cast<std::size_t>(k)]];
      analytic(k) = grad_refs[i].data[coords[static_cast<std::size_t>(k)]];
    }
    if (check.corrupt_analytic && !corrupted && analytic.size() > 0) {
      analytic(0) = 1.5 * analytic(0) + 1e-2;
      corrupted = true;
    }
    auto f = [&](const Vec& values) {
      for (Index k = 0; k < values.size(); ++k) ref.data[coords[static_cast<std::size_t>(k)]] = values(k);
      return loss(work, example.tokens, example.mask, options);
    };
    const Vec numeric = finite_diff_grad(f, theta, check.h, check.order);
    for (Index k = 0; k < theta.size(); ++k) ref.data[coords[static_cast<std::size_t>(k)]] = theta(k);

    double& class_max = result.per_class[ref.cls];
    for (Index k = 0; k < theta.size(); ++k) {
      const double a = analytic(k), fd = numeric(k);
      const double err = std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), check.floor});
      class_max = std::max(class_max, err);
      if (err > result.max_relative_error || result.worst_index < 0) {
        result.max_relative_error = err;
        result.worst_tensor = ref.name;
        result.worst_index = coords[static_cast<std::size_t>(k)];
        result.worst_analytic = a;
        result.worst_numeric = fd;
      }
      ++result.coordinates;
    }
  }
  return result;
}

}  // namespace atmoe
