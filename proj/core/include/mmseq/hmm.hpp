#pragma once

// Classical HMM map-matcher: Gaussian emission on the point-to-segment
// distance, exponential transition on |route distance - straight distance|,
// trellis Viterbi decoding.

#include <cstddef>
#include <limits>
#include <unordered_map>
#include <vector>

#include "mmseq/geo.hpp"

namespace mmseq::hmm {

inline constexpr double kImpossible = -std::numeric_limits<double>::infinity();

struct HmmParams {
  double sigma_z = 15.0;           // emission scale, meters
  double beta = 50.0;              // transition scale, meters
  double candidate_radius = 60.0;  // meters
  int max_candidates = 8;

  void validate() const;
};

/// log N(dist; 0, sigma_z). Throws ValidationError if sigma_z <= 0.
double emission_logp(double dist_m, double sigma_z);

/// -|route_gap - euclid_gap| / beta - log(beta); kImpossible if route_gap is
/// infinite (unreachable).
double transition_logp(double euclid_gap_m, double route_gap_m, double beta);

struct TrellisCandidate {
  geo::SegmentId segment = 0;
  geo::Point foot;
  double offset = 0.0;
  double distance = 0.0;
};

/// Layered state space. Layer t holds the candidates of the t-th kept
/// observation; transition[t][i][j] scores candidate i of layer t-1 to
/// candidate j of layer t (transition[0] is empty).
struct Trellis {
  std::vector<std::size_t> observations;  // trajectory index per layer
  std::vector<std::size_t> dropped;       // trajectory indices with no candidate
  std::vector<std::vector<TrellisCandidate>> candidates;
  std::vector<std::vector<double>> emission;
  std::vector<std::vector<std::vector<double>>> transition;

  std::size_t layers() const noexcept { return candidates.size(); }
};

struct TrellisPath {
  std::vector<std::size_t> states;  // candidate index per layer
  double log_prob = kImpossible;
  /// Layers where no candidate was reachable from the previous layer; the
  /// chain restarts there from emission scores alone.
  std::vector<std::size_t> breaks;
};

/// Max-sum dynamic program over a trellis. Ties go to the smaller segment id,
/// both for the final state and for each backpointer.
TrellisPath viterbi_decode(const Trellis& trellis);

struct MatchedPoint {
  std::size_t observation = 0;  // index into the trajectory
  geo::SegmentId segment = 0;
  geo::Point foot;
  double offset = 0.0;
};

struct ViterbiResult {
  std::vector<MatchedPoint> matched;
  std::vector<std::size_t> dropped;
  std::vector<std::size_t> breaks;  // layer indices, see TrellisPath
  double log_prob = kImpossible;
};

struct MatchedRoute {
  geo::SegmentRoute route;
  /// Per matched point: index into `route`. Non-decreasing.
  std::vector<int> alignment;
  std::vector<std::size_t> observations;  // trajectory index per alignment entry
  std::vector<std::size_t> dropped;
  /// Route positions p where route[p-1] -> route[p] is not connected.
  std::vector<std::size_t> splits;
};

/// Map-matcher bound to one graph. Caches single-source distances, so one
/// instance must not be shared between threads; make one per worker.
class Matcher {
 public:
  Matcher(const geo::RoadGraph& graph, const geo::SpatialIndex& index, HmmParams params);

  Trellis build_trellis(const geo::Trajectory& trajectory);
  ViterbiResult viterbi(const geo::Trajectory& trajectory);
  MatchedRoute match_route(const geo::Trajectory& trajectory);

  /// Driving distance from one on-road position to another; +inf if unreachable.
  double route_distance(const TrellisCandidate& a, const TrellisCandidate& b);

  const HmmParams& params() const noexcept { return params_; }

 private:
  const std::vector<double>& distances_from(geo::NodeId node);

  const geo::RoadGraph* graph_;
  const geo::SpatialIndex* index_;
  HmmParams params_;
  std::unordered_map<geo::NodeId, std::vector<double>> distance_cache_;
};

/// Stitches consecutive matched points together with shortest paths.
MatchedRoute route_from_matches(const ViterbiResult& result, const geo::RoadGraph& graph);

ViterbiResult viterbi(const geo::Trajectory& trajectory, const geo::RoadGraph& graph, const HmmParams& params);
MatchedRoute match_route(const geo::Trajectory& trajectory, const geo::RoadGraph& graph, const HmmParams& params);

}  // namespace mmseq::hmm
