#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "atmoe/taskgen.hpp"

using namespace atmoe;

namespace {

const TaskCatalog kCatalog = TaskCatalog::standard();

Sample hand_sample() {
  Sample s;
  s.instruction = {4, 5, 7};
  s.input = {9, 10, 23};
  s.target = {24, 11, 10, 9, 2};
  s.relevant_experts = {{"function", {"reverse", "increment"}}, {"domain", {"low_range"}}, {"style", {"echo_first"}}};
  s.intent_count = 2;
  return s;
}

}  // namespace

TEST_CASE("catalog layout") {
  CHECK(kCatalog.groups().size() == 3);
  CHECK(kCatalog.task_ids() ==
        std::vector<std::string>{"identity", "reverse", "increment", "low_range", "high_range", "plain", "echo_first"});
  CHECK(kCatalog.group_of("reverse") == "function");
  CHECK(kCatalog.group_of("high_range") == "domain");
  CHECK_THROWS_AS(kCatalog.group_of("sort"), Error);
  CHECK(kCatalog.instruction_token("identity") == 3);
  CHECK(kCatalog.instruction_token("increment") == 5);
  CHECK(kCatalog.instruction_token("echo_first") == 7);
  CHECK_THROWS_AS(kCatalog.instruction_token("low_range"), Error);
  CHECK(kCatalog.domain_first_token("high_range") == 24);
}

TEST_CASE("function transforms") {
  const std::vector<int> p = {8, 20, 39};
  CHECK(kCatalog.apply_function("identity", p) == p);
  CHECK(kCatalog.apply_function("reverse", p) == std::vector<int>{39, 20, 8});
  CHECK(kCatalog.apply_function("increment", p) == std::vector<int>{9, 21, 8});
  CHECK_THROWS_AS(kCatalog.apply_function("increment", std::vector<int>{3}), Error);
  CHECK_THROWS_AS(kCatalog.apply_function("plain", p), Error);
}

TEST_CASE("domain follows the payload range") {
  CHECK(kCatalog.domain_of(std::vector<int>{8, 23}) == "low_range");
  CHECK(kCatalog.domain_of(std::vector<int>{24, 39}) == "high_range");
  CHECK_THROWS_AS(kCatalog.domain_of(std::vector<int>{23, 24}), Error);
  CHECK_THROWS_AS(kCatalog.domain_of(std::vector<int>{}), Error);
}

TEST_CASE("sequence layout and target mask") {
  const Sample s = hand_sample();
  CHECK(verify_sample(kCatalog, s));
  const std::vector<int> seq = s.sequence();
  CHECK(seq == std::vector<int>{0, 4, 5, 7, 1, 9, 10, 23, 1, 24, 11, 10, 9, 2});
  const Mask m = s.target_mask();
  CHECK(m == Mask{0, 0, 0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 0});
}

TEST_CASE("verify_sample rejects inconsistent labels") {
  Sample s = hand_sample();
  s.target[0] = 9;
  CHECK_FALSE(verify_sample(kCatalog, s));
  s = hand_sample();
  s.relevant_experts["domain"] = {"high_range"};
  CHECK_FALSE(verify_sample(kCatalog, s));
  s = hand_sample();
  s.instruction[0] = 3;
  CHECK_FALSE(verify_sample(kCatalog, s));
  s = hand_sample();
  s.intent_count = 1;
  CHECK_FALSE(verify_sample(kCatalog, s));
}

TEST_CASE("generation is deterministic and well-formed") {
  const auto a = generate(kCatalog, 400, 42, 0.3);
  const auto b = generate(kCatalog, 400, 42, 0.3);
  const auto c = generate(kCatalog, 400, 43, 0.3);
  CHECK(to_jsonl(a) == to_jsonl(b));
  CHECK(to_jsonl(a) != to_jsonl(c));
  for (const auto& s : a) {
    CHECK(verify_sample(kCatalog, s));
    CHECK(s.sequence().size() <= 24);
    CHECK(s.input.size() >= 3);
    CHECK(s.input.size() <= 8);
  }
  CHECK_THROWS_AS(generate(kCatalog, 0, 1, 0.3), Error);
  CHECK_THROWS_AS(generate(kCatalog, 5, 1, 1.5), Error);
}

TEST_CASE("multi-intent fraction and coverage") {
  const auto samples = generate(kCatalog, 2000, 7, 0.3);
  int multi = 0;
  std::map<std::string, int> seen;
  for (const auto& s : samples) {
    multi += s.intent_count == 2;
    if (s.intent_count == 2) CHECK(s.relevant_experts.at("function")[0] != s.relevant_experts.at("function")[1]);
    for (const auto& [g, ids] : s.relevant_experts)
      for (const auto& id : ids) ++seen[id];
  }
  CHECK(multi / 2000.0 == doctest::Approx(0.3).epsilon(0.15));
  CHECK(seen.size() == 7);
  for (const auto& s : generate(kCatalog, 100, 8, 0.0)) CHECK(s.intent_count == 1);
  for (const auto& s : generate(kCatalog, 100, 9, 1.0)) CHECK(s.intent_count == 2);
}

TEST_CASE("per_task_split buckets by relevant expert") {
  const auto samples = generate(kCatalog, 300, 11, 0.5);
  const auto buckets = per_task_split(samples);
  std::size_t domain_total = 0;
  for (const auto& [id, bucket] : buckets) {
    for (const auto& s : bucket) {
      const auto& ids = s.relevant_experts.at(kCatalog.group_of(id));
      CHECK(std::find(ids.begin(), ids.end(), id) != ids.end());
    }
    if (kCatalog.group_of(id) == "domain") domain_total += bucket.size();
  }
  CHECK(domain_total == samples.size());
}

TEST_CASE("pretraining corpus mixes in unrelated transforms") {
  const auto clean = generate_pretraining_corpus(kCatalog, 500, 3, 0.3, 0.0);
  const auto noisy = generate_pretraining_corpus(kCatalog, 500, 3, 0.3, 1.0);
  CHECK(clean.size() == 500);
  int differs = 0;
  for (std::size_t i = 0; i < clean.size(); ++i) {
    CHECK(clean[i].tokens.size() == clean[i].mask.size());
    differs += clean[i].tokens != noisy[i].tokens;
  }
  CHECK(differs > 100);
  CHECK_THROWS_AS(generate_pretraining_corpus(kCatalog, 5, 3, 0.3, 2.0), Error);
}

TEST_CASE("jsonl round trip") {
  const auto samples = generate(kCatalog, 50, 13, 0.5);
  const std::string text = to_jsonl(samples);
  const auto path = std::filesystem::temp_directory_path() / "atmoe_taskgen_roundtrip.jsonl";
  std::ofstream(path) << text;
  const auto back = read_jsonl(path.string());
  CHECK(to_jsonl(back) == text);
  std::filesystem::remove(path);
  CHECK(to_jsonl_line(hand_sample()) ==
        R"({"instruction":[4,5,7],"input":[9,10,23],"target":[24,11,10,9,2],"relevant_experts":{"function":["reverse","increment"],"domain":["low_range"],"style":["echo_first"]},"intent_count":2})");
  CHECK_THROWS_AS(parse_jsonl_line("{\"instruction\": [1]}"), Error);
  CHECK_THROWS_AS(parse_jsonl_line("not json"), Error);
  CHECK_THROWS_AS(read_jsonl("/nonexistent/atmoe.jsonl"), Error);
}
