#include "atmoe/routing_dump.hpp"

#include <charconv>
#include <cstdio>

namespace atmoe {

std::vector<RoutingDumpRow> routing_dump(const ToyTransformer& model, std::span<const int> tokens,
                                         const std::string& site) {
  std::vector<RoutingDumpRow> rows;
  bool found = false;
  for (const auto& trace : layer_routing_trace(model, tokens)) {
    if (trace.site != site) continue;
    found = true;
    const auto& groups = model.weights().blocks[static_cast<std::size_t>(trace.layer)].site(site).groups;
    for (std::size_t t = 0; t < trace.tokens.size(); ++t) {
      const RoutingReport& r = trace.tokens[t];
      for (std::size_t g = 0; g < groups.size(); ++g) {
        const auto gi = static_cast<Index>(g);
        for (Index m = 0; m < r.intra.cols(); ++m) {
          const bool real = m < static_cast<Index>(groups[g].expert_ids.size());
          rows.push_back({trace.layer, static_cast<Index>(t), groups[g].group_id, groups[g].name, m,
                          real ? groups[g].expert_ids[static_cast<std::size_t>(m)] : "PAD", r.group(gi),
                          real ? r.intra(gi, m) : 0.0, real ? r.combined(gi, m) : 0.0});
        }
      }
    }
  }
  if (!found) fail(ErrorKind::InvalidArgument, "site '" + site + "' carries no experts");
  return rows;
}

std::string routing_csv(const std::vector<RoutingDumpRow>& rows) {
  std::string out = kRoutingCsvHeader;
  out += '\n';
  char buf[64];
  for (const auto& r : rows) {
    out += std::to_string(r.layer) + ',' + std::to_string(r.token_index) + ',' + std::to_string(r.group_id) + ',' +
           r.group_name + ',' + std::to_string(r.expert_slot) + ',' + r.adapter_id;
    for (double w : {r.group_weight, r.intra_weight, r.combined_weight}) {
      std::snprintf(buf, sizeof(buf), ",%.9f", w);
      out += buf;
    }
    out += '\n';
  }
  return out;
}

std::vector<int> parse_token_list(const std::string& text) {
  std::vector<int> out;
  std::size_t pos = 0;
  while (true) {
    const std::size_t comma = text.find(',', pos);
    const std::string item = text.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
    int value = 0;
    const auto [end, ec] = std::from_chars(item.data(), item.data() + item.size(), value);
    if (item.empty() || ec != std::errc() || end != item.data() + item.size())
      fail(ErrorKind::InvalidArgument, "invalid token '" + item + "' in list '" + text + "'");
    out.push_back(value);
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  return out;
}

}  // namespace atmoe
