#pragma once

// Line-oriented map text format:
//   MAP v1
//   N <id> <x> <y>
//   S <id> <from> <to> <length>

#include <string>
#include <string_view>

#include "mmseq/geo.hpp"

namespace mmseq::geo {

std::string write_map(const RoadGraph& graph);
/// Throws ValidationError on a bad header, malformed line or invalid graph.
RoadGraph read_map(std::string_view text);

}  // namespace mmseq::geo
