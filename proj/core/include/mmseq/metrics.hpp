#pragma once

// Route-level evaluation measures: segment accuracy, length accuracy,
// Jaccard similarity and BLEU.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mmseq/geo.hpp"

namespace mmseq::metrics {

/// |pred ∩ truth| / |truth| over unique segment ids. Throws on empty truth.
double acc1(std::span<const geo::SegmentId> pred, std::span<const geo::SegmentId> truth);

/// Length of the unique shared segments over the length of the unique truth
/// segments. Throws on empty truth.
double acc2(std::span<const geo::SegmentId> pred, std::span<const geo::SegmentId> truth, const geo::RoadGraph& graph);

/// |pred ∩ truth| / |pred ∪ truth| over unique ids; 1.0 when both are empty.
double jaccard(std::span<const geo::SegmentId> pred, std::span<const geo::SegmentId> truth);

/// Sentence BLEU with clipped n-gram precisions, uniform weights and brevity
/// penalty exp(1 - |truth|/|pred|) when |pred| <= |truth|. The highest order
/// is capped at the shorter sequence length. No smoothing: any zero precision
/// gives 0. Empty prediction gives 0.
double bleu(std::span<const geo::SegmentId> pred, std::span<const geo::SegmentId> truth, int n_max = 4);

struct TrajectoryScore {
  std::int64_t traj_id = 0;
  double acc1 = 0.0;
  double acc2 = 0.0;
  double jaccard = 0.0;
  double bleu = 0.0;
  std::size_t pred_len = 0;
  std::size_t true_len = 0;
};

struct EvalReport {
  double acc1 = 0.0;
  double acc2 = 0.0;
  double jaccard = 0.0;
  double bleu = 0.0;
  std::size_t trajectories = 0;
  std::size_t discontinuities = 0;
  std::size_t truncated = 0;
  std::vector<TrajectoryScore> per_trajectory;  // ascending traj_id
};

struct RoutePair {
  std::int64_t traj_id = 0;
  geo::SegmentRoute pred;
  geo::SegmentRoute truth;
};

TrajectoryScore score(const RoutePair& pair, const geo::RoadGraph& graph);

/// Unweighted means of per-trajectory scores, sorted by traj_id.
EvalReport evaluate(std::span<const RoutePair> pairs, const geo::RoadGraph& graph);

/// Fixed-width table for humans.
std::string format_table(const EvalReport& report, const std::string& title);
/// "EVAL v1" then key=value lines.
std::string format_key_values(const EvalReport& report);
/// traj_id,acc1,acc2,jaccard,bleu,pred_len,true_len
std::string format_csv(const EvalReport& report);

}  // namespace mmseq::metrics
