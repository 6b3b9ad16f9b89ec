#include "atmoe/taskgen.hpp"

#include <algorithm>
#include <fstream>
#include <json.hpp>

#include "atmoe/rng.hpp"

namespace atmoe {

namespace {

const std::vector<std::string>& function_tasks() {
  static const std::vector<std::string> names = {"identity", "reverse", "increment"};
  return names;
}

const std::vector<std::string>& domain_tasks() {
  static const std::vector<std::string> names = {"low_range", "high_range"};
  return names;
}

const std::vector<std::string>& style_tasks() {
  static const std::vector<std::string> names = {"plain", "echo_first"};
  return names;
}

struct Draw {
  std::vector<std::size_t> functions;
  std::size_t domain = 0;
  std::size_t style = 0;
  std::vector<int> payload;
};

std::vector<std::size_t> draw_functions(SeededRng& rng, bool multi) {
  const auto first = static_cast<std::size_t>(rng.index(function_tasks().size()));
  if (!multi) return {first};
  auto second = static_cast<std::size_t>(rng.index(function_tasks().size() - 1));
  if (second >= first) ++second;
  return {first, second};
}

Draw draw_sample(SeededRng& rng, double multi_intent_fraction) {
  Draw d;
  const bool multi = rng.uniform() < multi_intent_fraction;
  d.functions = draw_functions(rng, multi);
  d.domain = static_cast<std::size_t>(rng.index(domain_tasks().size()));
  d.style = static_cast<std::size_t>(rng.index(style_tasks().size()));
  const auto length = 3 + static_cast<std::size_t>(rng.index(6));
  const int first = tokens::kPayloadFirst + static_cast<int>(d.domain) * tokens::kDomainWidth;
  for (std::size_t i = 0; i < length; ++i) d.payload.push_back(first + static_cast<int>(rng.index(tokens::kDomainWidth)));
  return d;
}

std::vector<int> transform(const TaskCatalog& catalog, const std::vector<std::size_t>& functions,
                           const std::vector<int>& payload) {
  std::vector<int> out = payload;
  for (auto f : functions) out = catalog.apply_function(function_tasks()[f], out);
  return out;
}

Sample build_sample(const TaskCatalog& catalog, const Draw& d, const std::vector<std::size_t>& executed) {
  Sample s;
  for (auto f : d.functions) s.instruction.push_back(catalog.instruction_token(function_tasks()[f]));
  s.instruction.push_back(catalog.instruction_token(style_tasks()[d.style]));
  s.input = d.payload;
  s.target = transform(catalog, executed, d.payload);
  if (style_tasks()[d.style] == "echo_first") s.target.push_back(d.payload.front());
  s.target.push_back(tokens::kEos);
  auto& fn = s.relevant_experts["function"];
  for (auto f : d.functions) fn.push_back(function_tasks()[f]);
  s.relevant_experts["domain"] = {domain_tasks()[d.domain]};
  s.relevant_experts["style"] = {style_tasks()[d.style]};
  s.intent_count = static_cast<int>(d.functions.size());
  return s;
}

}  // namespace

TaskCatalog TaskCatalog::standard() {
  TaskCatalog c;
  c.groups_ = {{0, "function", function_tasks()}, {1, "domain", domain_tasks()}, {2, "style", style_tasks()}};
  return c;
}

const GroupSpec& TaskCatalog::group(const std::string& name) const {
  for (const auto& g : groups_)
    if (g.name == name) return g;
  fail(ErrorKind::InvalidArgument, "unknown group '" + name + "'");
}

std::vector<std::string> TaskCatalog::task_ids() const {
  std::vector<std::string> ids;
  for (const auto& g : groups_) ids.insert(ids.end(), g.expert_ids.begin(), g.expert_ids.end());
  return ids;
}

const std::string& TaskCatalog::group_of(const std::string& task_id) const {
  for (const auto& g : groups_)
    if (std::find(g.expert_ids.begin(), g.expert_ids.end(), task_id) != g.expert_ids.end()) return g.name;
  fail(ErrorKind::InvalidArgument, "unknown task '" + task_id + "'");
}

int TaskCatalog::instruction_token(const std::string& task_id) const {
  for (std::size_t i = 0; i < function_tasks().size(); ++i)
    if (function_tasks()[i] == task_id) return 3 + static_cast<int>(i);
  for (std::size_t i = 0; i < style_tasks().size(); ++i)
    if (style_tasks()[i] == task_id) return 6 + static_cast<int>(i);
  fail(ErrorKind::InvalidArgument, "task '" + task_id + "' has no instruction token");
}

std::vector<int> TaskCatalog::apply_function(const std::string& task_id, std::span<const int> payload) const {
  std::vector<int> out(payload.begin(), payload.end());
  if (task_id == "identity") return out;
  if (task_id == "reverse") {
    std::reverse(out.begin(), out.end());
    return out;
  }
  if (task_id == "increment") {
    for (auto& t : out) {
      require(t >= tokens::kPayloadFirst && t < tokens::kMinVocab, "increment applied to a non-payload token");
      t = (t - tokens::kPayloadFirst + 1) % tokens::kPayloadCount + tokens::kPayloadFirst;
    }
    return out;
  }
  fail(ErrorKind::InvalidArgument, "'" + task_id + "' is not a function task");
}

int TaskCatalog::domain_first_token(const std::string& task_id) const {
  for (std::size_t i = 0; i < domain_tasks().size(); ++i)
    if (domain_tasks()[i] == task_id) return tokens::kPayloadFirst + static_cast<int>(i) * tokens::kDomainWidth;
  fail(ErrorKind::InvalidArgument, "'" + task_id + "' is not a domain task");
}

std::string TaskCatalog::domain_of(std::span<const int> payload) const {
  require(!payload.empty(), "empty payload has no domain");
  for (const auto& d : domain_tasks()) {
    const int first = domain_first_token(d);
    if (std::all_of(payload.begin(), payload.end(), [&](int t) { return t >= first && t < first + tokens::kDomainWidth; }))
      return d;
  }
  fail(ErrorKind::InvalidArgument, "payload spans more than one domain");
}

std::vector<int> Sample::sequence() const {
  std::vector<int> seq;
  seq.reserve(3 + instruction.size() + input.size() + target.size());
  seq.push_back(tokens::kBos);
  seq.insert(seq.end(), instruction.begin(), instruction.end());
  seq.push_back(tokens::kSep);
  seq.insert(seq.end(), input.begin(), input.end());
  seq.push_back(tokens::kSep);
  seq.insert(seq.end(), target.begin(), target.end());
  return seq;
}

Mask Sample::target_mask() const {
  const std::size_t n = 3 + instruction.size() + input.size() + target.size();
  Mask mask(n, 0);
  const std::size_t start = n - target.size();
  for (std::size_t p = start - 1; p + 1 < n; ++p) mask[p] = 1;
  return mask;
}

std::vector<Sample> generate(const TaskCatalog& catalog, std::size_t n, std::uint64_t seed, double multi_intent_fraction) {
  require(n >= 1, "generate: n must be at least 1");
  require(multi_intent_fraction >= 0.0 && multi_intent_fraction <= 1.0, "generate: multi_intent_fraction must lie in [0, 1]");
  SeededRng rng(seed);
  std::vector<Sample> samples;
  samples.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Draw d = draw_sample(rng, multi_intent_fraction);
    samples.push_back(build_sample(catalog, d, d.functions));
  }
  return samples;
}

std::vector<TrainingExample> generate_pretraining_corpus(const TaskCatalog& catalog, std::size_t n, std::uint64_t seed,
                                                         double multi_intent_fraction, double instruction_noise) {
  require(multi_intent_fraction >= 0.0 && multi_intent_fraction <= 1.0, "multi_intent_fraction must lie in [0, 1]");
  require(instruction_noise >= 0.0 && instruction_noise <= 1.0, "instruction_noise must lie in [0, 1]");
  SeededRng rng(seed);
  std::vector<TrainingExample> corpus;
  corpus.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Draw d = draw_sample(rng, multi_intent_fraction);
    std::vector<std::size_t> executed = d.functions;
    if (rng.uniform() < instruction_noise) executed = draw_functions(rng, d.functions.size() > 1);
    corpus.push_back(build_sample(catalog, d, executed).example());
  }
  return corpus;
}

bool verify_sample(const TaskCatalog& catalog, const Sample& s) {
  try {
    const auto fn = s.relevant_experts.at("function");
    const auto& style = s.relevant_experts.at("style");
    const auto& domain = s.relevant_experts.at("domain");
    if (fn.empty() || style.size() != 1 || domain.size() != 1) return false;
    if (static_cast<int>(fn.size()) != s.intent_count) return false;
    if (s.instruction.size() != fn.size() + 1) return false;
    for (std::size_t i = 0; i < fn.size(); ++i)
      if (s.instruction[i] != catalog.instruction_token(fn[i])) return false;
    if (s.instruction.back() != catalog.instruction_token(style.front())) return false;
    if (catalog.domain_of(s.input) != domain.front()) return false;
    std::vector<int> expected = s.input;
    for (const auto& f : fn) expected = catalog.apply_function(f, expected);
    if (style.front() == "echo_first") expected.push_back(s.input.front());
    expected.push_back(tokens::kEos);
    return expected == s.target;
  } catch (const std::exception&) {
    return false;
  }
}

std::map<std::string, std::vector<Sample>> per_task_split(const std::vector<Sample>& samples) {
  std::map<std::string, std::vector<Sample>> buckets;
  for (const auto& s : samples)
    for (const auto& [group, ids] : s.relevant_experts)
      for (const auto& id : ids) buckets[id].push_back(s);
  return buckets;
}

std::string to_jsonl_line(const Sample& s) {
  nlohmann::ordered_json j;
  j["instruction"] = s.instruction;
  j["input"] = s.input;
  j["target"] = s.target;
  nlohmann::ordered_json rel;
  for (const char* g : {"function", "domain", "style"}) {
    const auto it = s.relevant_experts.find(g);
    rel[g] = it == s.relevant_experts.end() ? std::vector<std::string>{} : it->second;
  }
  j["relevant_experts"] = rel;
  j["intent_count"] = s.intent_count;
  return j.dump();
}

Sample parse_jsonl_line(const std::string& line) {
  try {
    const auto j = nlohmann::json::parse(line);
    Sample s;
    s.instruction = j.at("instruction").get<std::vector<int>>();
    s.input = j.at("input").get<std::vector<int>>();
    s.target = j.at("target").get<std::vector<int>>();
    for (const auto& [group, ids] : j.at("relevant_experts").items())
      s.relevant_experts[group] = ids.get<std::vector<std::string>>();
    s.intent_count = j.at("intent_count").get<int>();
    return s;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::InvalidArgument, std::string("malformed dataset line: ") + e.what());
  }
}

std::string to_jsonl(const std::vector<Sample>& samples) {
  std::string out;
  for (const auto& s : samples) {
    out += to_jsonl_line(s);
    out += '\n';
  }
  return out;
}

std::vector<Sample> read_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::Io, "cannot open dataset '" + path + "'");
  std::vector<Sample> samples;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) samples.push_back(parse_jsonl_line(line));
  if (samples.empty()) fail(ErrorKind::InvalidArgument, "dataset '" + path + "' is empty");
  return samples;
}

}  // namespace atmoe
