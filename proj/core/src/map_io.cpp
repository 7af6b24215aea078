#include "mmseq/map_io.hpp"

#include <string>
#include <vector>

#include "mmseq/error.hpp"
#include "mmseq/text.hpp"

namespace mmseq::geo {

std::string write_map(const RoadGraph& graph) {
  std::string out = "MAP v1\n";
  for (const Node& n : graph.nodes()) {
    out += "N " + std::to_string(n.id) + ' ' + format_double(n.x) + ' ' + format_double(n.y) + '\n';
  }
  for (const Segment& s : graph.segments()) {
    out += "S " + std::to_string(s.id) + ' ' + std::to_string(s.from) + ' ' + std::to_string(s.to) +
           ' ' + format_double(s.length) + '\n';
  }
  return out;
}

RoadGraph read_map(std::string_view text) {
  std::vector<Node> nodes;
  std::vector<Segment> segments;
  std::size_t pos = 0;
  std::size_t lineno = 0;
  bool header = false;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    const std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++lineno;
    const auto tok = split_ws(line);
    if (tok.empty()) continue;
    const std::string where = "map line " + std::to_string(lineno) + ": ";
    if (!header) {
      if (tok.size() != 2 || tok[0] != "MAP" || tok[1] != "v1") {
        throw ValidationError(where + "expected header 'MAP v1'");
      }
      header = true;
      continue;
    }
    try {
      if (tok[0] == "N" && tok.size() == 4) {
        nodes.push_back({static_cast<NodeId>(parse_int(tok[1])), parse_double(tok[2]), parse_double(tok[3])});
      } else if (tok[0] == "S" && tok.size() == 5) {
        segments.push_back({static_cast<SegmentId>(parse_int(tok[1])), static_cast<NodeId>(parse_int(tok[2])),
                            static_cast<NodeId>(parse_int(tok[3])), parse_double(tok[4])});
      } else {
        throw ValidationError("unrecognized record");
      }
    } catch (const ValidationError& e) {
      throw ValidationError(where + e.what());
    }
  }
  if (!header) throw ValidationError("empty map file");
  return RoadGraph::build(std::move(nodes), std::move(segments));
}

}  // namespace mmseq::geo
