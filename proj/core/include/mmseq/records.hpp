#pragma once

// Line-delimited JSON artifacts exchanged between pipeline stages. Every
// file starts with {"format": <name>, "version": 1} on its own line.

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmseq/geo.hpp"
#include "mmseq/prep.hpp"
#include "mmseq/simulate.hpp"

namespace mmseq::records {

inline constexpr int kFormatVersion = 1;

inline constexpr std::string_view kDatasetFormat = "mmseq.dataset";
inline constexpr std::string_view kLabelsFormat = "mmseq.labels";
inline constexpr std::string_view kFragmentsFormat = "mmseq.fragments";
inline constexpr std::string_view kPredictionsFormat = "mmseq.predictions";
inline constexpr std::string_view kSplitFormat = "mmseq.split";

std::string write_jsonl(std::string_view format, const std::vector<nlohmann::json>& rows);
/// Parses the body of a JSONL artifact after checking its header. `origin`
/// names the file in error messages. Throws ValidationError.
std::vector<nlohmann::json> read_jsonl(std::string_view text, std::string_view format, const std::string& origin);

struct TrajectoryRecord {
  std::int64_t traj_id = 0;
  geo::Trajectory points;
  geo::SegmentRoute true_route;
  std::vector<int> alignment;
};

struct LabelRecord {
  TrajectoryRecord trajectory;
  geo::SegmentRoute hmm_route;
  std::vector<int> hmm_alignment;            // per matched point: index into hmm_route
  std::vector<std::size_t> hmm_points;       // trajectory index of each matched point
  std::vector<std::size_t> dropped_points;   // trajectory indices without a candidate
};

struct PredictionRecord {
  std::int64_t traj_id = 0;
  geo::SegmentRoute route;
  std::vector<geo::SegmentRoute> fragments;
  int discontinuities = 0;
  int truncated_fragments = 0;
};

struct SplitRecord {
  std::vector<std::int64_t> train;
  std::vector<std::int64_t> test;
};

std::string write_dataset(const std::vector<TrajectoryRecord>& records);
std::vector<TrajectoryRecord> read_dataset(std::string_view text, const std::string& origin);
TrajectoryRecord to_record(const sim::GroundTruthSample& sample);

std::string write_labels(const std::vector<LabelRecord>& records);
std::vector<LabelRecord> read_labels(std::string_view text, const std::string& origin);

std::string write_fragments(const std::vector<prep::Fragment>& fragments);
std::vector<prep::Fragment> read_fragments(std::string_view text, const std::string& origin);

std::string write_predictions(const std::vector<PredictionRecord>& records);
std::vector<PredictionRecord> read_predictions(std::string_view text, const std::string& origin);

std::string write_split(const SplitRecord& split);
SplitRecord read_split(std::string_view text, const std::string& origin);

}  // namespace mmseq::records
