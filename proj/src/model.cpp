#include "atmoe/model.hpp"

#include <algorithm>
#include <cmath>

#include "atmoe/rng.hpp"
#include "atmoe/rows.hpp"

namespace atmoe {

namespace {

constexpr double kLayerNormEps = 1e-5;

bool is_attention_site(const std::string& name) { return name.rfind("attn_", 0) == 0; }

std::pair<Index, Index> site_shape(const ModelConfig& c, const std::string& name) {
  if (name == "ffn_up") return {c.d_ff, c.d_model};
  if (name == "ffn_down") return {c.d_model, c.d_ff};
  return {c.d_model, c.d_model};
}

}  // namespace

void ModelConfig::validate() const {
  require(vocab_size >= 1, "vocab_size must be at least 1");
  require(d_model >= 1 && n_layers >= 1 && n_heads >= 1 && d_ff >= 1, "model dimensions must be positive");
  require(d_model % n_heads == 0, "d_model must be divisible by n_heads");
  require(max_seq_len >= 2, "max_seq_len must be at least 2");
  require(init_std > 0 && std::isfinite(init_std), "init_std must be positive");
  require(lora_scaling > 0 && std::isfinite(lora_scaling), "lora_scaling must be positive");
  require(balance >= 0.0 && balance <= 1.0, "balance (lambda) must lie in [0, 1]");
  require(tau_group > 0 && tau_intra > 0, "router temperatures must be positive");
  if (targets.empty()) return;
  validate_groups(groups);
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const auto& t = targets[i];
    require(std::find(site_names().begin(), site_names().end(), t) != site_names().end(),
            "unknown AT-MoE target site '" + t + "'");
    require(std::find(targets.begin(), targets.begin() + static_cast<std::ptrdiff_t>(i), t) ==
                targets.begin() + static_cast<std::ptrdiff_t>(i),
            "duplicate AT-MoE target site '" + t + "'");
    const auto [d, k] = site_shape(*this, t);
    require(lora_rank >= 1 && lora_rank <= std::min(d, k),
            "lora_rank " + std::to_string(lora_rank) + " invalid for site '" + t + "'");
  }
  for (const auto& g : groups)
    for (const auto& id : g.expert_ids)
      require(id != kPremergedAdapterId, "task expert may not be named 'premerged'");
}

std::vector<std::string> ModelConfig::adapter_ids() const {
  std::vector<std::string> ids;
  for (const auto& g : groups) ids.insert(ids.end(), g.expert_ids.begin(), g.expert_ids.end());
  ids.emplace_back(kPremergedAdapterId);
  return ids;
}

RouterOptions ModelConfig::router_options() const {
  RouterOptions o;
  o.tau_group = tau_group;
  o.tau_intra = tau_intra;
  o.mode = static_intra_group ? IntraGroupMode::Static : IntraGroupMode::Conditioned;
  o.pooled = pooled;
  return o;
}

std::string to_string(TrainingStage stage) {
  switch (stage) {
    case TrainingStage::None:
      return "none";
    case TrainingStage::Base:
      return "base";
    case TrainingStage::Experts:
      return "experts";
    case TrainingStage::Premerged:
      return "premerged";
    case TrainingStage::Router:
      return "router";
  }
  return "none";
}

TrainingStage stage_from_string(const std::string& name) {
  for (auto s : {TrainingStage::None, TrainingStage::Base, TrainingStage::Experts, TrainingStage::Premerged,
                 TrainingStage::Router})
    if (to_string(s) == name) return s;
  fail(ErrorKind::InvalidArgument, "unknown training stage '" + name + "'");
}

std::string to_string(ParamClass cls) {
  switch (cls) {
    case ParamClass::TokenEmbedding:
      return "token_embedding";
    case ParamClass::PositionEmbedding:
      return "position_embedding";
    case ParamClass::LayerNorm:
      return "layer_norm";
    case ParamClass::Attention:
      return "attention";
    case ParamClass::FeedForward:
      return "feed_forward";
    case ParamClass::Unembedding:
      return "unembedding";
    case ParamClass::AdapterA:
      return "adapter_a";
    case ParamClass::AdapterB:
      return "adapter_b";
    case ParamClass::RouterGroup:
      return "router_group";
    case ParamClass::RouterIntra:
      return "router_intra";
  }
  return "unknown";
}

AtMoeLinear& Block::site(const std::string& name) {
  return const_cast<AtMoeLinear&>(static_cast<const Block&>(*this).site(name));
}

const AtMoeLinear& Block::site(const std::string& name) const {
  if (name == "attn_q") return attn_q;
  if (name == "attn_k") return attn_k;
  if (name == "attn_v") return attn_v;
  if (name == "attn_out") return attn_out;
  if (name == "ffn_up") return ffn_up;
  if (name == "ffn_down") return ffn_down;
  fail(ErrorKind::InvalidArgument, "unknown site '" + name + "'");
}

// ---------------------------------------------------------------------------
// Tensor registry

namespace {

void push_matrix(std::vector<TensorRef>& out, std::string name, ParamClass cls, Mat& m, std::string adapter = "") {
  out.push_back({std::move(name), cls, std::move(adapter), m.data(), m.rows(), m.cols(), false});
}

void push_vector(std::vector<TensorRef>& out, std::string name, ParamClass cls, Vec& v) {
  out.push_back({std::move(name), cls, "", v.data(), v.size(), 1, true});
}

void push_norm(std::vector<TensorRef>& out, const std::string& prefix, LayerNormParams& ln) {
  push_vector(out, prefix + ".gain", ParamClass::LayerNorm, ln.gain);
  push_vector(out, prefix + ".bias", ParamClass::LayerNorm, ln.bias);
}

void push_site(std::vector<TensorRef>& out, const std::string& prefix, const std::string& name, AtMoeLinear& site) {
  const ParamClass cls = is_attention_site(name) ? ParamClass::Attention : ParamClass::FeedForward;
  push_matrix(out, prefix + ".base_weight", cls, site.base_weight);
  if (site.base_bias.size() != 0) push_vector(out, prefix + ".base_bias", cls, site.base_bias);
  if (!site.routed()) return;
  for (auto& a : site.experts.adapters()) {
    push_matrix(out, prefix + ".adapters." + a.adapter_id + ".A", ParamClass::AdapterA, a.A, a.adapter_id);
    push_matrix(out, prefix + ".adapters." + a.adapter_id + ".B", ParamClass::AdapterB, a.B, a.adapter_id);
  }
  push_matrix(out, prefix + ".router.group_projection", ParamClass::RouterGroup, site.router.group_projection);
  for (std::size_t g = 0; g < site.router.intra_projection.size(); ++g)
    push_matrix(out, prefix + ".router.intra_projection." + site.groups[g].name, ParamClass::RouterIntra,
                site.router.intra_projection[g]);
}

}  // namespace

std::vector<TensorRef> named_tensors(ModelWeights& w) {
  std::vector<TensorRef> out;
  push_matrix(out, "token_embedding", ParamClass::TokenEmbedding, w.token_embedding);
  push_matrix(out, "position_embedding", ParamClass::PositionEmbedding, w.position_embedding);
  for (std::size_t i = 0; i < w.blocks.size(); ++i) {
    Block& b = w.blocks[i];
    const std::string prefix = "blocks." + std::to_string(i);
    push_norm(out, prefix + ".ln1", b.ln1);
    for (const char* s : {"attn_q", "attn_k", "attn_v", "attn_out"}) push_site(out, prefix + "." + s, s, b.site(s));
    push_norm(out, prefix + ".ln2", b.ln2);
    for (const char* s : {"ffn_up", "ffn_down"}) push_site(out, prefix + "." + s, s, b.site(s));
  }
  push_norm(out, "final_norm", w.final_norm);
  push_matrix(out, "unembedding", ParamClass::Unembedding, w.unembedding);
  return out;
}

ModelWeights zeros_like(const ModelWeights& weights) {
  ModelWeights z = weights;
  for (auto& t : named_tensors(z)) t.map().setZero();
  return z;
}

bool TrainableSet::contains(const TensorRef& ref) const {
  if (!classes.count(ref.cls)) return false;
  if (ref.cls == ParamClass::AdapterA || ref.cls == ParamClass::AdapterB) return adapters.count(ref.adapter_id) > 0;
  return true;
}

TrainableSet TrainableSet::base_model() {
  return {{ParamClass::TokenEmbedding, ParamClass::PositionEmbedding, ParamClass::LayerNorm, ParamClass::Attention,
           ParamClass::FeedForward, ParamClass::Unembedding},
          {}};
}

TrainableSet TrainableSet::adapter(const std::string& adapter_id) {
  return {{ParamClass::AdapterA, ParamClass::AdapterB}, {adapter_id}};
}

TrainableSet TrainableSet::routers() { return {{ParamClass::RouterGroup, ParamClass::RouterIntra}, {}}; }

TrainableSet TrainableSet::everything(const ModelConfig& config) {
  TrainableSet s = base_model();
  s.classes.insert({ParamClass::AdapterA, ParamClass::AdapterB, ParamClass::RouterGroup, ParamClass::RouterIntra});
  for (const auto& id : config.adapter_ids()) s.adapters.insert(id);
  return s;
}

// ---------------------------------------------------------------------------
// Construction

namespace {

Mat gaussian(SeededRng& rng, Index rows, Index cols, double std) {
  Mat m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal(0.0, std);
  return m;
}

LayerNormParams unit_norm(Index d) { return {Vec::Ones(d), Vec::Zero(d)}; }

}  // namespace

ToyTransformer::ToyTransformer(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  const ModelConfig& c = config_;
  SeededRng rng(derive_seed(c.seed, 1));
  weights_.token_embedding = gaussian(rng, c.vocab_size, c.d_model, c.init_std);
  weights_.position_embedding = gaussian(rng, c.max_seq_len, c.d_model, c.init_std);
  const auto ids = c.adapter_ids();
  for (Index layer = 0; layer < c.n_layers; ++layer) {
    Block& b = weights_.blocks.emplace_back();
    b.ln1 = unit_norm(c.d_model);
    b.ln2 = unit_norm(c.d_model);
    for (std::size_t s = 0; s < site_names().size(); ++s) {
      const std::string& name = site_names()[s];
      AtMoeLinear& site = b.site(name);
      const auto [d, k] = site_shape(c, name);
      site.base_weight = gaussian(rng, d, k, c.init_std);
      if (!is_attention_site(name)) site.base_bias = Vec::Zero(d);
      site.balance = c.balance;
      if (std::find(c.targets.begin(), c.targets.end(), name) == c.targets.end()) continue;
      site.groups = c.groups;
      for (std::size_t a = 0; a < ids.size(); ++a) {
        const bool premerged = ids[a] == kPremergedAdapterId;
        LoraAdapter adapter = init_adapter(d, k, c.lora_rank, derive_seed(c.seed, 2, layer, s, a), ids[a],
                                           premerged ? kPremergedTask : ids[a]);
        adapter.scaling = c.lora_scaling;
        site.experts.add(std::move(adapter));
      }
      site.router = make_router(k, c.groups, c.router_options());
      site.validate();
    }
  }
  weights_.final_norm = unit_norm(c.d_model);
  weights_.unembedding = gaussian(rng, c.d_model, c.vocab_size, c.init_std);
}

ToyTransformer::ToyTransformer(ModelConfig config, ModelWeights weights, TrainingStage stage)
    : config_(std::move(config)), stage_(stage) {
  config_.validate();
  // Layout and per-site settings (lambda, temperatures, scaling) come from
  // the config; only tensor values are taken from the supplied weights.
  weights_ = ToyTransformer(config_).weights_;
  auto expected = named_tensors(weights_);
  auto actual = named_tensors(weights);
  if (expected.size() != actual.size())
    fail(ErrorKind::DimensionMismatch, "weights do not match the configured architecture");
  for (std::size_t i = 0; i < expected.size(); ++i) {
    if (expected[i].name != actual[i].name || expected[i].rows != actual[i].rows ||
        expected[i].cols != actual[i].cols)
      fail(ErrorKind::DimensionMismatch, "tensor '" + actual[i].name + "' does not match the configured architecture");
    expected[i].map() = actual[i].map();
  }
}

std::vector<std::pair<Index, std::string>> ToyTransformer::routed_sites() const {
  std::vector<std::pair<Index, std::string>> out;
  for (Index l = 0; l < static_cast<Index>(weights_.blocks.size()); ++l)
    for (const auto& s : site_names())
      if (weights_.blocks[static_cast<std::size_t>(l)].site(s).routed()) out.emplace_back(l, s);
  return out;
}

// ---------------------------------------------------------------------------
// Forward / backward

namespace {

struct NormCache {
  Mat xhat;
  Vec rstd;
};

Mat layer_norm_rows(const Mat& x, const LayerNormParams& p, NormCache& cache) {
  const Index n = x.cols();
  cache.xhat.resize(x.rows(), n);
  cache.rstd.resize(x.rows());
  Mat y(x.rows(), n);
  for (Index t = 0; t < x.rows(); ++t) {
    const double mean = x.row(t).sum() / static_cast<double>(n);
    const auto centered = (x.row(t).array() - mean).matrix();
    const double var = centered.squaredNorm() / static_cast<double>(n);
    cache.rstd(t) = 1.0 / std::sqrt(var + kLayerNormEps);
    cache.xhat.row(t) = centered * cache.rstd(t);
    y.row(t) = cache.xhat.row(t).cwiseProduct(p.gain.transpose()) + p.bias.transpose();
  }
  return y;
}

Mat layer_norm_rows_backward(const Mat& dy, const LayerNormParams& p, const NormCache& cache,
                             LayerNormParams* grads) {
  const Index n = dy.cols();
  Mat dx(dy.rows(), n);
  for (Index t = 0; t < dy.rows(); ++t) {
    const Vec dxhat = dy.row(t).transpose().cwiseProduct(p.gain);
    const Vec xhat = cache.xhat.row(t).transpose();
    const double mean_d = dxhat.sum() / static_cast<double>(n);
    const double mean_dx = dxhat.dot(xhat) / static_cast<double>(n);
    dx.row(t) = (cache.rstd(t) * (dxhat.array() - mean_d - xhat.array() * mean_dx)).matrix().transpose();
    if (grads) {
      grads->gain += dy.row(t).transpose().cwiseProduct(xhat);
      grads->bias += dy.row(t).transpose();
    }
  }
  return dx;
}

struct BlockCache {
  NormCache ln1;
  SiteCache q, k, v, out;
  Mat queries, keys, values;
  std::vector<Mat> probs;  // per head: T x T
  NormCache ln2;
  SiteCache up, down;
  Mat pre_activation;
};

struct ForwardCache {
  std::vector<BlockCache> blocks;
  NormCache final_norm;
  Mat final_hidden;
  double negentropy = 0.0;
};

const SiteCache& site_cache(const BlockCache& bc, const std::string& name) {
  if (name == "attn_q") return bc.q;
  if (name == "attn_k") return bc.k;
  if (name == "attn_v") return bc.v;
  if (name == "attn_out") return bc.out;
  if (name == "ffn_up") return bc.up;
  if (name == "ffn_down") return bc.down;
  fail(ErrorKind::InvalidArgument, "unknown site '" + name + "'");
}

void check_tokens(const ModelConfig& c, std::span<const int> tokens) {
  require(!tokens.empty(), "token sequence is empty");
  require(static_cast<Index>(tokens.size()) <= c.max_seq_len,
          "sequence of length " + std::to_string(tokens.size()) + " exceeds max_seq_len " +
              std::to_string(c.max_seq_len));
  for (std::size_t i = 0; i < tokens.size(); ++i)
    require(tokens[i] >= 0 && tokens[i] < c.vocab_size,
            "token " + std::to_string(tokens[i]) + " at position " + std::to_string(i) + " is outside the vocabulary");
}

SiteOptions site_options(const AtMoeLinear& site, const ForwardOptions& options) {
  SiteOptions o;
  o.path = options.path;
  o.balance = options.balance.value_or(site.balance);
  o.pinned = options.pinned;
  o.entropy_bonus = options.entropy_bonus;
  if (site.routed() && options.path == ExpertPath::Solo) {
    const auto idx = site.experts.find(options.solo_adapter);
    if (!idx) fail(ErrorKind::InvalidArgument, "unknown adapter '" + options.solo_adapter + "'");
    o.solo_adapter = *idx;
  }
  return o;
}

Mat run_site(const AtMoeLinear& site, const Mat& x, const ForwardOptions& options, SiteCache& cache,
             ForwardCache& fc) {
  Mat y = forward_rows(site, x, site_options(site, options), cache);
  fc.negentropy += cache.negentropy;
  return y;
}

Mat forward_impl(const ToyTransformer& model, std::span<const int> tokens, const ForwardOptions& options,
                 ForwardCache& fc) {
  const ModelConfig& c = model.config();
  const ModelWeights& w = model.weights();
  check_tokens(c, tokens);
  const Index T = static_cast<Index>(tokens.size());
  const Index dh = c.d_model / c.n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Mat h(T, c.d_model);
  for (Index t = 0; t < T; ++t)
    h.row(t) = w.token_embedding.row(tokens[static_cast<std::size_t>(t)]) + w.position_embedding.row(t);

  fc.blocks.assign(w.blocks.size(), BlockCache());
  for (std::size_t l = 0; l < w.blocks.size(); ++l) {
    const Block& b = w.blocks[l];
    BlockCache& bc = fc.blocks[l];
    const Mat a = layer_norm_rows(h, b.ln1, bc.ln1);
    bc.queries = run_site(b.attn_q, a, options, bc.q, fc);
    bc.keys = run_site(b.attn_k, a, options, bc.k, fc);
    bc.values = run_site(b.attn_v, a, options, bc.v, fc);
    Mat context(T, c.d_model);
    bc.probs.clear();
    for (Index head = 0; head < c.n_heads; ++head) {
      const Mat qh = bc.queries.middleCols(head * dh, dh);
      const Mat kh = bc.keys.middleCols(head * dh, dh);
      const Mat vh = bc.values.middleCols(head * dh, dh);
      Mat scores = matmul_nt(qh, kh) * scale;
      for (Index i = 0; i < T; ++i)
        for (Index j = i + 1; j < T; ++j) scores(i, j) = -std::numeric_limits<double>::infinity();
      bc.probs.push_back(softmax_rows(scores, 1.0));
      context.middleCols(head * dh, dh) = matmul(bc.probs.back(), vh);
    }
    h += run_site(b.attn_out, context, options, bc.out, fc);

    const Mat m = layer_norm_rows(h, b.ln2, bc.ln2);
    bc.pre_activation = run_site(b.ffn_up, m, options, bc.up, fc);
    const Mat act = bc.pre_activation.unaryExpr([](double v) { return gelu(v); });
    h += run_site(b.ffn_down, act, options, bc.down, fc);
  }
  fc.final_hidden = layer_norm_rows(h, w.final_norm, fc.final_norm);
  return matmul(fc.final_hidden, w.unembedding);
}

void check_mask(std::span<const int> tokens, const Mask& mask) {
  require(mask.size() == tokens.size(), "target mask length does not match the token sequence");
  require(mask.back() == 0, "last position has no next token to score");
  require(std::any_of(mask.begin(), mask.end(), [](std::uint8_t v) { return v != 0; }), "target mask is empty");
}

/// Cross-entropy terms and, when requested, dL/dlogits scaled by ce_scale.
double cross_entropy(const Mat& logits, std::span<const int> tokens, const Mask& mask, Index& scored, Mat* dlogits,
                     double ce_scale) {
  double total = 0.0;
  scored = 0;
  if (dlogits) *dlogits = Mat::Zero(logits.rows(), logits.cols());
  for (Index p = 0; p + 1 < logits.rows(); ++p) {
    if (!mask[static_cast<std::size_t>(p)]) continue;
    const int target = tokens[static_cast<std::size_t>(p + 1)];
    const double mx = logits.row(p).maxCoeff();
    double z = 0.0;
    for (Index v = 0; v < logits.cols(); ++v) z += std::exp(logits(p, v) - mx);
    total += std::log(z) + mx - logits(p, target);
    ++scored;
    if (dlogits) {
      for (Index v = 0; v < logits.cols(); ++v) (*dlogits)(p, v) = ce_scale * std::exp(logits(p, v) - mx) / z;
      (*dlogits)(p, target) -= ce_scale;
    }
  }
  return total;
}

SiteGradMask site_mask(const AtMoeLinear& site, const std::string& name, const TrainableSet& trainable) {
  SiteGradMask m;
  m.base = trainable.classes.count(is_attention_site(name) ? ParamClass::Attention : ParamClass::FeedForward) > 0;
  for (const auto& a : site.experts.adapters()) {
    const bool selected = trainable.adapters.count(a.adapter_id) > 0;
    m.adapter_a.push_back(selected && trainable.classes.count(ParamClass::AdapterA));
    m.adapter_b.push_back(selected && trainable.classes.count(ParamClass::AdapterB));
  }
  m.router_group = trainable.classes.count(ParamClass::RouterGroup) > 0;
  m.router_intra = trainable.classes.count(ParamClass::RouterIntra) > 0;
  m.input = true;
  return m;
}

Mat site_backward(const AtMoeLinear& site, const std::string& name, AtMoeLinear& grad, const SiteCache& cache,
                  const Mat& dy, const ForwardOptions& options, const TrainableSet& trainable, double entropy_scale) {
  SiteOptions o = site_options(site, options);
  o.entropy_bonus = entropy_scale;
  Mat dx;
  backward_rows(site, cache, dy, o, site_mask(site, name, trainable), grad, &dx);
  return dx;
}

}  // namespace

Mat forward_logits(const ToyTransformer& model, std::span<const int> tokens, const ForwardOptions& options) {
  ForwardCache fc;
  return forward_impl(model, tokens, options, fc);
}

LossParts loss_parts(const ToyTransformer& model, std::span<const int> tokens, const Mask& mask,
                     const ForwardOptions& options) {
  ForwardCache fc;
  const Mat logits = forward_impl(model, tokens, options, fc);
  check_mask(tokens, mask);
  LossParts parts;
  parts.ce_sum = cross_entropy(logits, tokens, mask, parts.scored, nullptr, 0.0);
  parts.negentropy_sum = fc.negentropy;
  parts.routed_positions = static_cast<Index>(tokens.size() * model.routed_sites().size());
  return parts;
}

double loss(const ToyTransformer& model, std::span<const int> tokens, const Mask& mask, const ForwardOptions& options) {
  const LossParts parts = loss_parts(model, tokens, mask, options);
  double value = parts.ce_sum / static_cast<double>(parts.scored);
  if (options.entropy_bonus != 0.0 && parts.routed_positions > 0)
    value += options.entropy_bonus * parts.negentropy_sum / static_cast<double>(parts.routed_positions);
  return value;
}

LossParts accumulate_gradient(const ToyTransformer& model, std::span<const int> tokens, const Mask& mask,
                              const ForwardOptions& options, const TrainableSet& trainable, ModelWeights& grads,
                              const GradScales& scales) {
  const ModelConfig& c = model.config();
  const ModelWeights& w = model.weights();
  ForwardCache fc;
  const Mat logits = forward_impl(model, tokens, options, fc);
  check_mask(tokens, mask);

  LossParts parts;
  Mat dlogits;
  parts.ce_sum = cross_entropy(logits, tokens, mask, parts.scored, &dlogits, scales.ce);
  parts.negentropy_sum = fc.negentropy;
  parts.routed_positions = static_cast<Index>(tokens.size() * model.routed_sites().size());

  auto wants = [&](ParamClass cls) { return trainable.classes.count(cls) > 0; };

  const Index T = logits.rows();
  const Index dh = c.d_model / c.n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  if (wants(ParamClass::Unembedding)) grads.unembedding += matmul_tn(fc.final_hidden, dlogits);
  Mat dh_final = matmul_nt(dlogits, w.unembedding);
  Mat dh_res = layer_norm_rows_backward(dh_final, w.final_norm, fc.final_norm,
                                        wants(ParamClass::LayerNorm) ? &grads.final_norm : nullptr);

  for (std::size_t li = w.blocks.size(); li-- > 0;) {
    const Block& b = w.blocks[li];
    Block& g = grads.blocks[li];
    const BlockCache& bc = fc.blocks[li];

    const Mat d_act = site_backward(b.ffn_down, "ffn_down", g.ffn_down, bc.down, dh_res, options, trainable,
                                    scales.entropy);
    Mat d_pre = d_act;
    for (Index i = 0; i < d_pre.size(); ++i) d_pre.data()[i] *= gelu_derivative(bc.pre_activation.data()[i]);
    const Mat d_norm2 =
        site_backward(b.ffn_up, "ffn_up", g.ffn_up, bc.up, d_pre, options, trainable, scales.entropy);
    dh_res += layer_norm_rows_backward(d_norm2, b.ln2, bc.ln2, wants(ParamClass::LayerNorm) ? &g.ln2 : nullptr);

    const Mat d_context =
        site_backward(b.attn_out, "attn_out", g.attn_out, bc.out, dh_res, options, trainable, scales.entropy);
    Mat dq(T, c.d_model), dk(T, c.d_model), dv(T, c.d_model);
    for (Index head = 0; head < c.n_heads; ++head) {
      const Mat qh = bc.queries.middleCols(head * dh, dh);
      const Mat kh = bc.keys.middleCols(head * dh, dh);
      const Mat vh = bc.values.middleCols(head * dh, dh);
      const Mat dc = d_context.middleCols(head * dh, dh);
      const Mat& probs = bc.probs[static_cast<std::size_t>(head)];
      const Mat dprobs = matmul_nt(dc, vh);
      dv.middleCols(head * dh, dh) = matmul_tn(probs, dc);
      const Mat dscores = softmax_rows_backward(probs, dprobs, 1.0) * scale;
      dq.middleCols(head * dh, dh) = matmul(dscores, kh);
      dk.middleCols(head * dh, dh) = matmul_tn(dscores, qh);
    }
    Mat d_norm1 = site_backward(b.attn_q, "attn_q", g.attn_q, bc.q, dq, options, trainable, scales.entropy);
    d_norm1 += site_backward(b.attn_k, "attn_k", g.attn_k, bc.k, dk, options, trainable, scales.entropy);
    d_norm1 += site_backward(b.attn_v, "attn_v", g.attn_v, bc.v, dv, options, trainable, scales.entropy);
    dh_res += layer_norm_rows_backward(d_norm1, b.ln1, bc.ln1, wants(ParamClass::LayerNorm) ? &g.ln1 : nullptr);
  }

  for (Index t = 0; t < T; ++t) {
    if (wants(ParamClass::TokenEmbedding)) grads.token_embedding.row(tokens[static_cast<std::size_t>(t)]) += dh_res.row(t);
    if (wants(ParamClass::PositionEmbedding)) grads.position_embedding.row(t) += dh_res.row(t);
  }
  return parts;
}

// ---------------------------------------------------------------------------
// Inspection

TracedForward forward_traced(const ToyTransformer& model, std::span<const int> tokens,
                             const ForwardOptions& options) {
  ForwardCache fc;
  TracedForward out;
  out.logits = forward_impl(model, tokens, options, fc);
  const bool mixture = options.path == ExpertPath::Mixture;
  for (const auto& [layer, name] : model.routed_sites()) {
    if (!mixture) break;
    const SiteCache& cache = site_cache(fc.blocks[static_cast<std::size_t>(layer)], name);
    SiteTrace trace{layer, name, {}};
    const Index n_groups = cache.group_weights.cols();
    for (Index t = 0; t < cache.group_weights.rows(); ++t) {
      RoutingReport r;
      r.group = cache.group_weights.row(t).transpose();
      r.intra.resize(n_groups, cache.intra_weights.front().cols());
      for (Index g = 0; g < n_groups; ++g) r.intra.row(g) = cache.intra_weights[static_cast<std::size_t>(g)].row(t);
      r.combined = r.intra;
      for (Index g = 0; g < n_groups; ++g) r.combined.row(g) *= r.group(g);
      trace.tokens.push_back(std::move(r));
    }
    out.sites.push_back(std::move(trace));
  }
  return out;
}

std::vector<SiteTrace> layer_routing_trace(const ToyTransformer& model, std::span<const int> tokens) {
  return forward_traced(model, tokens).sites;
}

Mat site_inputs(const ToyTransformer& model, std::span<const int> tokens, Index layer, const std::string& site) {
  require(layer >= 0 && layer < model.config().n_layers, "layer index out of range");
  ForwardCache fc;
  forward_impl(model, tokens, {}, fc);
  return site_cache(fc.blocks[static_cast<std::size_t>(layer)], site).input;
}

void fill_gaussian(ModelWeights& weights, const std::function<bool(const TensorRef&)>& select, std::uint64_t seed,
                   double stddev) {
  SeededRng rng(seed);
  for (auto& t : named_tensors(weights)) {
    if (!select(t)) continue;
    for (Index i = 0; i < t.size(); ++i) t.data[i] = rng.normal(0.0, stddev);
  }
}

std::uint64_t weights_checksum(const ModelWeights& weights, const std::function<bool(const TensorRef&)>& select) {
  std::uint64_t h = fnv1a(nullptr, 0);
  for (const auto& t : named_tensors(const_cast<ModelWeights&>(weights))) {
    if (select && !select(t)) continue;
    h = fnv1a(t.name.data(), t.name.size(), h);
    const std::int64_t shape[2] = {t.rows, t.cols};
    h = fnv1a(shape, sizeof(shape), h);
    h = fnv1a(t.data, static_cast<std::size_t>(t.size()) * sizeof(double), h);
  }
  return h;
}

}  // namespace atmoe
