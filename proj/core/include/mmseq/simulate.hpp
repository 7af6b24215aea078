#pragma once

// Synthetic lattice maps, routes and noisy low-rate GPS traces.

#include <cstdint>
#include <vector>

#include "mmseq/geo.hpp"
#include "mmseq/rng.hpp"

namespace mmseq::sim {

struct MapSpec {
  int cols = 8;
  int rows = 8;
  double block_m = 80.0;
  double removal_prob = 0.0;  // fraction of streets deleted
  double oneway_prob = 0.0;   // fraction of surviving streets made one-way
  std::uint64_t seed = 1;
};

/// Lattice map. Node (c, r) has id r*cols + c and sits at (c*block, r*block).
/// Regenerates up to 100 times until strongly connected, then throws
/// ValidationError.
geo::RoadGraph gen_map(const MapSpec& spec);

struct Hotspot {
  geo::GridCellId cell;
  double multiplier = 1.0;
};

struct NoiseModel {
  double base_sigma_m = 15.0;  // per-axis standard deviation
  std::vector<Hotspot> hotspots;
  geo::GridSpec grid;  // grid the hotspot cells refer to

  void validate() const;
  /// Per-axis sigma at a (true) position.
  double sigma_at(geo::Point p) const;
};

struct SimConfig {
  double sample_interval_s = 30.0;
  double speed_mps = 8.0;
  int trajectories = 100;
  int min_route_segments = 8;
  int max_route_segments = 30;
  std::uint64_t seed = 1;

  void validate() const;
};

/// A trip: route plus where on the first and last segment it starts and ends.
struct Trip {
  geo::SegmentRoute route;
  double start_offset = 0.0;  // meters into route.front()
  double end_offset = 0.0;    // meters into route.back()
};

/// Random trip whose route has between min_seg and max_seg segments.
///
/// The route is the shortest path (smallest segment ids on ties) from a
/// random start position to a random end position, both kept at least 20% of
/// a segment away from intersections. It is strictly shorter than starting or
/// ending on the reverse-direction twin, never revisits a segment and never
/// turns straight back. Routes of one segment are drawn only when
/// max_seg = 1. Throws ValidationError if the bounds cannot be met.
Trip gen_trip(const geo::RoadGraph& graph, int min_seg, int max_seg, Rng& rng);

/// gen_trip(...).route
geo::SegmentRoute gen_route(const geo::RoadGraph& graph, int min_seg, int max_seg, Rng& rng);

struct SampledPoints {
  geo::Trajectory points;
  std::vector<int> alignment;  // per point: index into the route
};

/// Noiseless fixes every sample_interval_s of travel at speed_mps.
///
/// The trip runs from `start_offset` meters into the first segment to
/// `end_offset` meters into the last one (negative = segment end). The first
/// fix is at the trip start and the trip end is always appended as the final
/// fix, so every trip yields at least two points.
SampledPoints sample_gps(const geo::SegmentRoute& route, const geo::RoadGraph& graph, const SimConfig& config,
                         double start_offset = 0.0, double end_offset = -1.0);

/// Independent isotropic Gaussian perturbation per point. Timestamps kept.
geo::Trajectory apply_noise(const geo::Trajectory& points, const NoiseModel& noise, Rng& rng);

struct GroundTruthSample {
  std::int64_t traj_id = 0;
  geo::SegmentRoute route;
  geo::Trajectory points;      // noisy
  geo::Trajectory clean;       // noiseless positions, same timestamps
  std::vector<int> alignment;  // per point: index into route
};

/// One trajectory, fully determined by (graph, config, noise, traj_id).
GroundTruthSample simulate_one(const geo::RoadGraph& graph, const SimConfig& config, const NoiseModel& noise,
                               std::int64_t traj_id);

std::vector<GroundTruthSample> simulate(const geo::RoadGraph& graph, const SimConfig& config,
                                        const NoiseModel& noise);

}  // namespace mmseq::sim
