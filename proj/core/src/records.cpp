#include "mmseq/records.hpp"

#include "mmseq/error.hpp"

namespace mmseq::records {

using nlohmann::json;

namespace {

json header(std::string_view format) { return {{"format", format}, {"version", kFormatVersion}}; }

void check_header(const json& h, std::string_view format, const std::string& origin) {
  if (!h.is_object() || !h.contains("format") || !h.contains("version")) {
    throw ValidationError(origin + ": missing format header");
  }
  if (h["format"] != format) {
    throw ValidationError(origin + ": expected format " + std::string(format) + ", found " +
                          h["format"].dump());
  }
  if (h["version"] != kFormatVersion) {
    throw ValidationError(origin + ": unsupported " + std::string(format) + " version " + h["version"].dump());
  }
}

// Typed field access with file/line context in errors.
template <typename T>
T field(const json& row, const char* key, const std::string& where) {
  const auto it = row.find(key);
  if (it == row.end()) throw ValidationError(where + ": missing field '" + key + "'");
  try {
    return it->get<T>();
  } catch (const json::exception& e) {
    throw ValidationError(where + ": bad field '" + key + "': " + e.what());
  }
}

json points_json(const geo::Trajectory& points) {
  json out = json::array();
  for (const auto& p : points) out.push_back({p.x, p.y, p.t});
  return out;
}

geo::Trajectory points_from(const json& row, const std::string& where) {
  const auto raw = field<std::vector<std::vector<double>>>(row, "points", where);
  geo::Trajectory out;
  out.reserve(raw.size());
  for (const auto& p : raw) {
    if (p.size() != 3) throw ValidationError(where + ": each point must be [x, y, t]");
    out.push_back({p[0], p[1], p[2]});
  }
  return out;
}

json trajectory_json(const TrajectoryRecord& r) {
  return {{"traj_id", r.traj_id},
          {"points", points_json(r.points)},
          {"true_route", r.true_route},
          {"alignment", r.alignment}};
}

TrajectoryRecord trajectory_from(const json& row, const std::string& where) {
  TrajectoryRecord r;
  r.traj_id = field<std::int64_t>(row, "traj_id", where);
  r.points = points_from(row, where);
  r.true_route = field<geo::SegmentRoute>(row, "true_route", where);
  r.alignment = field<std::vector<int>>(row, "alignment", where);
  if (r.alignment.size() != r.points.size()) throw ValidationError(where + ": alignment/point count mismatch");
  return r;
}

template <typename T, typename Parse>
std::vector<T> parse_all(std::string_view text, std::string_view format, const std::string& origin, Parse parse) {
  const auto rows = read_jsonl(text, format, origin);
  std::vector<T> out;
  out.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.push_back(parse(rows[i], origin + " record " + std::to_string(i + 1)));
  }
  return out;
}

}  // namespace

std::string write_jsonl(std::string_view format, const std::vector<json>& rows) {
  std::string out = header(format).dump() + "\n";
  for (const json& r : rows) out += r.dump() + "\n";
  return out;
}

std::vector<json> read_jsonl(std::string_view text, std::string_view format, const std::string& origin) {
  std::vector<json> rows;
  bool have_header = false;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    const std::size_t nl = text.find('\n', pos);
    const std::string_view line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() : nl + 1;
    ++line_no;
    if (line.empty()) continue;
    json row;
    try {
      row = json::parse(line);
    } catch (const json::exception& e) {
      throw ValidationError(origin + ":" + std::to_string(line_no) + ": invalid JSON: " + e.what());
    }
    if (!have_header) {
      check_header(row, format, origin);
      have_header = true;
      continue;
    }
    rows.push_back(std::move(row));
  }
  if (!have_header) throw ValidationError(origin + ": empty file, missing format header");
  return rows;
}

TrajectoryRecord to_record(const sim::GroundTruthSample& s) { return {s.traj_id, s.points, s.route, s.alignment}; }

std::string write_dataset(const std::vector<TrajectoryRecord>& records) {
  std::vector<json> rows;
  rows.reserve(records.size());
  for (const auto& r : records) rows.push_back(trajectory_json(r));
  return write_jsonl(kDatasetFormat, rows);
}

std::vector<TrajectoryRecord> read_dataset(std::string_view text, const std::string& origin) {
  return parse_all<TrajectoryRecord>(text, kDatasetFormat, origin, trajectory_from);
}

std::string write_labels(const std::vector<LabelRecord>& records) {
  std::vector<json> rows;
  rows.reserve(records.size());
  for (const auto& r : records) {
    json row = trajectory_json(r.trajectory);
    row["hmm_route"] = r.hmm_route;
    row["hmm_alignment"] = r.hmm_alignment;
    row["hmm_points"] = r.hmm_points;
    row["dropped_points"] = r.dropped_points;
    rows.push_back(std::move(row));
  }
  return write_jsonl(kLabelsFormat, rows);
}

std::vector<LabelRecord> read_labels(std::string_view text, const std::string& origin) {
  return parse_all<LabelRecord>(text, kLabelsFormat, origin, [](const json& row, const std::string& where) {
    LabelRecord r;
    r.trajectory = trajectory_from(row, where);
    r.hmm_route = field<geo::SegmentRoute>(row, "hmm_route", where);
    r.hmm_alignment = field<std::vector<int>>(row, "hmm_alignment", where);
    r.hmm_points = field<std::vector<std::size_t>>(row, "hmm_points", where);
    r.dropped_points = field<std::vector<std::size_t>>(row, "dropped_points", where);
    if (r.hmm_alignment.size() != r.hmm_points.size()) {
      throw ValidationError(where + ": hmm_alignment/hmm_points size mismatch");
    }
    return r;
  });
}

std::string write_fragments(const std::vector<prep::Fragment>& fragments) {
  std::vector<json> rows;
  rows.reserve(fragments.size());
  for (const auto& f : fragments) {
    rows.push_back({{"traj_id", f.traj_id},
                    {"index", f.index},
                    {"inputs", f.inputs},
                    {"targets", f.targets},
                    {"point_begin", f.point_begin},
                    {"point_end", f.point_end},
                    {"seg_begin", f.seg_begin},
                    {"seg_end", f.seg_end},
                    {"ambiguous_cut", f.ambiguous_cut}});
  }
  return write_jsonl(kFragmentsFormat, rows);
}

std::vector<prep::Fragment> read_fragments(std::string_view text, const std::string& origin) {
  return parse_all<prep::Fragment>(text, kFragmentsFormat, origin, [](const json& row, const std::string& where) {
    prep::Fragment f;
    f.traj_id = field<std::int64_t>(row, "traj_id", where);
    f.index = field<int>(row, "index", where);
    f.inputs = field<std::vector<prep::TokenId>>(row, "inputs", where);
    f.targets = field<std::vector<prep::TokenId>>(row, "targets", where);
    f.point_begin = field<int>(row, "point_begin", where);
    f.point_end = field<int>(row, "point_end", where);
    f.seg_begin = field<int>(row, "seg_begin", where);
    f.seg_end = field<int>(row, "seg_end", where);
    f.ambiguous_cut = field<bool>(row, "ambiguous_cut", where);
    if (f.inputs.empty()) throw ValidationError(where + ": fragment without inputs");
    return f;
  });
}

std::string write_predictions(const std::vector<PredictionRecord>& records) {
  std::vector<json> rows;
  rows.reserve(records.size());
  for (const auto& r : records) {
    rows.push_back({{"traj_id", r.traj_id},
                    {"route", r.route},
                    {"fragments", r.fragments},
                    {"discontinuities", r.discontinuities},
                    {"truncated_fragments", r.truncated_fragments}});
  }
  return write_jsonl(kPredictionsFormat, rows);
}

std::vector<PredictionRecord> read_predictions(std::string_view text, const std::string& origin) {
  return parse_all<PredictionRecord>(text, kPredictionsFormat, origin,
                                     [](const json& row, const std::string& where) {
                                       PredictionRecord r;
                                       r.traj_id = field<std::int64_t>(row, "traj_id", where);
                                       r.route = field<geo::SegmentRoute>(row, "route", where);
                                       r.fragments = field<std::vector<geo::SegmentRoute>>(row, "fragments", where);
                                       r.discontinuities = field<int>(row, "discontinuities", where);
                                       r.truncated_fragments = field<int>(row, "truncated_fragments", where);
                                       return r;
                                     });
}

std::string write_split(const SplitRecord& split) {
  return write_jsonl(kSplitFormat, {json{{"train", split.train}, {"test", split.test}}});
}

SplitRecord read_split(std::string_view text, const std::string& origin) {
  const auto rows = read_jsonl(text, kSplitFormat, origin);
  if (rows.size() != 1) throw ValidationError(origin + ": expected exactly one split record");
  SplitRecord s;
  s.train = field<std::vector<std::int64_t>>(rows[0], "train", origin);
  s.test = field<std::vector<std::int64_t>>(rows[0], "test", origin);
  return s;
}

}  // namespace mmseq::records
