#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "atmoe/router.hpp"

namespace atmoe {

namespace tokens {
inline constexpr int kBos = 0;
inline constexpr int kSep = 1;
inline constexpr int kEos = 2;
inline constexpr int kPayloadFirst = 8;
inline constexpr int kPayloadCount = 32;
inline constexpr int kDomainWidth = 16;
inline constexpr int kMinVocab = kPayloadFirst + kPayloadCount;  // ids >= 40 are unused
}  // namespace tokens

using Mask = std::vector<std::uint8_t>;

/// Token sequence plus the positions whose next-token prediction is scored.
struct TrainingExample {
  std::vector<int> tokens;
  Mask mask;
};

/// Three expert groups over payload sequences:
///   function: identity, reverse, increment   (instruction tokens 3, 4, 5)
///   domain:   low_range (8..23), high_range (24..39)   (implied by the payload)
///   style:    plain, echo_first              (instruction tokens 6, 7)
class TaskCatalog {
 public:
  static TaskCatalog standard();

  const std::vector<GroupSpec>& groups() const { return groups_; }
  const GroupSpec& group(const std::string& name) const;
  std::vector<std::string> task_ids() const;

  /// Group name owning task_id; throws for unknown ids.
  const std::string& group_of(const std::string& task_id) const;

  /// Instruction token of a function or style task; throws for domain tasks.
  int instruction_token(const std::string& task_id) const;

  /// Applies a function task to a payload.
  std::vector<int> apply_function(const std::string& task_id, std::span<const int> payload) const;

  /// Domain task whose token range contains every payload token; throws otherwise.
  std::string domain_of(std::span<const int> payload) const;

  /// First payload token of a domain task's range.
  int domain_first_token(const std::string& task_id) const;

 private:
  std::vector<GroupSpec> groups_;
};

struct Sample {
  std::vector<int> instruction;
  std::vector<int> input;
  std::vector<int> target;
  std::map<std::string, std::vector<std::string>> relevant_experts;  // group name -> adapter ids
  int intent_count = 1;

  /// BOS instruction SEP input SEP target.
  std::vector<int> sequence() const;
  /// mask[p] set when tokens[p + 1] belongs to the target.
  Mask target_mask() const;
  TrainingExample example() const { return {sequence(), target_mask()}; }
};

/// Deterministic sample generator for (seed, n, multi_intent_fraction).
std::vector<Sample> generate(const TaskCatalog& catalog, std::size_t n, std::uint64_t seed, double multi_intent_fraction);

/// Pretraining corpus for the frozen base model: same layout as generate(), but
/// with probability instruction_noise the function transforms actually applied
/// are redrawn at random, independent of the instruction tokens.
std::vector<TrainingExample> generate_pretraining_corpus(const TaskCatalog& catalog, std::size_t n, std::uint64_t seed,
                                                         double multi_intent_fraction, double instruction_noise);

/// True when the sample's target is the labelled transforms applied to its input
/// and its labels agree with its instruction tokens and payload range.
bool verify_sample(const TaskCatalog& catalog, const Sample& sample);

/// task id -> samples for which that task is relevant.
std::map<std::string, std::vector<Sample>> per_task_split(const std::vector<Sample>& samples);

std::string to_jsonl_line(const Sample& sample);
Sample parse_jsonl_line(const std::string& line);
std::string to_jsonl(const std::vector<Sample>& samples);
std::vector<Sample> read_jsonl(const std::string& path);

}  // namespace atmoe
