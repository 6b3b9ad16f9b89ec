#pragma once

#include <span>
#include <string>
#include <vector>

#include "atmoe/model.hpp"

namespace atmoe {

struct RoutingDumpRow {
  Index layer;
  Index token_index;
  Index group_id;
  std::string group_name;
  Index expert_slot;
  std::string adapter_id;  // "PAD" for slots beyond the group's size
  double group_weight;
  double intra_weight;
  double combined_weight;
};

inline constexpr const char* kRoutingCsvHeader =
    "layer,token_index,group_id,group_name,expert_slot,adapter_id,group_weight,intra_weight,combined_weight";

/// One row per (layer, token, group, slot) for the routed site named site.
std::vector<RoutingDumpRow> routing_dump(const ToyTransformer& model, std::span<const int> tokens,
                                         const std::string& site = "ffn_down");

/// Header plus rows, weights with 9 decimals, newline-terminated.
std::string routing_csv(const std::vector<RoutingDumpRow>& rows);

/// Parses "3,7,12"; throws on empty items or non-integers.
std::vector<int> parse_token_list(const std::string& text);

}  // namespace atmoe
