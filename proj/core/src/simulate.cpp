#include "mmseq/simulate.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>

#include "mmseq/error.hpp"

namespace mmseq::sim {

using geo::NodeId;
using geo::RoadGraph;
using geo::SegmentId;
using geo::SegmentRoute;

namespace {

constexpr int kMapAttempts = 100;
constexpr int kRouteAttempts = 2000;

RoadGraph lattice_attempt(const MapSpec& spec, Rng& rng) {
  std::vector<geo::Node> nodes;
  nodes.reserve(static_cast<std::size_t>(spec.cols) * spec.rows);
  for (int r = 0; r < spec.rows; ++r) {
    for (int c = 0; c < spec.cols; ++c) {
      nodes.push_back({r * spec.cols + c, c * spec.block_m, r * spec.block_m});
    }
  }
  std::vector<geo::Segment> segments;
  auto add_street = [&](NodeId a, NodeId b) {
    if (rng.bernoulli(spec.removal_prob)) return;
    const double len = geo::distance({nodes[a].x, nodes[a].y}, {nodes[b].x, nodes[b].y});
    auto add = [&](NodeId from, NodeId to) {
      segments.push_back({static_cast<SegmentId>(segments.size()), from, to, len});
    };
    if (rng.bernoulli(spec.oneway_prob)) {
      if (rng.bernoulli(0.5)) add(a, b);
      else add(b, a);
    } else {
      add(a, b);
      add(b, a);
    }
  };
  for (int r = 0; r < spec.rows; ++r) {
    for (int c = 0; c < spec.cols; ++c) {
      const NodeId id = r * spec.cols + c;
      if (c + 1 < spec.cols) add_street(id, id + 1);
      if (r + 1 < spec.rows) add_street(id, id + spec.cols);
    }
  }
  return RoadGraph::build(std::move(nodes), std::move(segments));
}

}  // namespace

RoadGraph gen_map(const MapSpec& spec) {
  if (spec.cols < 2 || spec.rows < 2) throw ValidationError("map lattice needs cols, rows >= 2");
  if (!(spec.block_m > 0.0)) throw ValidationError("map block length must be positive");
  if (spec.removal_prob < 0.0 || spec.removal_prob > 1.0 || spec.oneway_prob < 0.0 || spec.oneway_prob > 1.0) {
    throw ValidationError("map probabilities must lie in [0, 1]");
  }
  Rng rng(spec.seed);
  for (int attempt = 0; attempt < kMapAttempts; ++attempt) {
    RoadGraph g = lattice_attempt(spec, rng);
    if (g.segment_count() > 0 && g.is_strongly_connected()) return g;
  }
  throw ValidationError("could not generate a strongly connected map in " + std::to_string(kMapAttempts) +
                        " attempts (removal_prob/oneway_prob too high)");
}

void NoiseModel::validate() const {
  if (!(base_sigma_m >= 0.0) || !std::isfinite(base_sigma_m)) {
    throw ValidationError("noise base sigma must be finite and >= 0");
  }
  if (!(grid.cell_size > 0.0)) throw ValidationError("noise grid cell size must be positive");
  for (const Hotspot& h : hotspots) {
    if (!(h.multiplier >= 1.0)) throw ValidationError("hotspot multipliers must be >= 1");
  }
}

double NoiseModel::sigma_at(geo::Point p) const {
  if (hotspots.empty()) return base_sigma_m;
  const geo::GridCellId cell = geo::grid_cell_of(p, grid);
  for (const Hotspot& h : hotspots) {
    if (h.cell == cell) return base_sigma_m * h.multiplier;
  }
  return base_sigma_m;
}

void SimConfig::validate() const {
  if (!(sample_interval_s > 0.0)) throw ValidationError("sample interval must be positive");
  if (!(speed_mps > 0.0)) throw ValidationError("speed must be positive");
  if (trajectories <= 0) throw ValidationError("trajectory count must be positive");
  if (min_route_segments < 1 || max_route_segments < min_route_segments) {
    throw ValidationError("route segment bounds must satisfy 1 <= min <= max");
  }
}

namespace {

// Trip endpoints stay this fraction of a segment away from either end.
constexpr double kEndpointMargin = 0.2;
// Alternative start/end directions must be at least this much longer.
constexpr double kDirectionSlack = 1.0;

double trip_length(const RoadGraph& graph, SegmentId origin, double start, SegmentId dest, double end) {
  const auto path = geo::shortest_path(graph, graph.segment(origin).to, graph.segment(dest).from);
  if (!path) return std::numeric_limits<double>::infinity();
  return (graph.segment(origin).length - start) + path->length + end;
}

bool reverses(const RoadGraph& graph, const SegmentRoute& route) {
  for (std::size_t i = 0; i + 1 < route.size(); ++i) {
    if (graph.reverse_twin(route[i]) == route[i + 1]) return true;
  }
  return false;
}

}  // namespace

Trip gen_trip(const RoadGraph& graph, int min_seg, int max_seg, Rng& rng) {
  if (min_seg < 1 || max_seg < min_seg) {
    throw ValidationError("route segment bounds must satisfy 1 <= min <= max");
  }
  const std::size_t n = graph.segment_count();
  if (n == 0) throw ValidationError("graph has no segments");
  auto offset = [&](SegmentId s, double lo, double hi) { return graph.segment(s).length * rng.uniform(lo, hi); };

  if (min_seg == 1) {
    // Single-segment trips are only drawn when nothing longer is allowed.
    if (max_seg == 1) {
      const auto s = static_cast<SegmentId>(rng.below(n));
      return {{s}, offset(s, kEndpointMargin, 0.45), offset(s, 0.55, 1.0 - kEndpointMargin)};
    }
    min_seg = 2;
  }

  for (int attempt = 0; attempt < kRouteAttempts; ++attempt) {
    const auto origin = static_cast<SegmentId>(rng.below(n));
    const auto dest = static_cast<SegmentId>(rng.below(n));
    const double start = offset(origin, kEndpointMargin, 1.0 - kEndpointMargin);
    const double end = offset(dest, kEndpointMargin, 1.0 - kEndpointMargin);
    const auto twin_o = graph.reverse_twin(origin);
    const auto twin_d = graph.reverse_twin(dest);
    if (origin == dest || twin_o == dest) continue;
    const auto path = geo::shortest_path(graph, graph.segment(origin).to, graph.segment(dest).from);
    if (!path) continue;
    const auto count = static_cast<int>(path->segments.size()) + 2;
    if (count < min_seg || count > max_seg) continue;

    // The route must be the unique shortest way from the start position to
    // the end position; otherwise the trip's direction of travel could not
    // be told apart from its reverse-direction alternative.
    const double own = (graph.segment(origin).length - start) + path->length + end;
    bool shortest = true;
    for (int alt = 1; alt < 4 && shortest; ++alt) {
      const auto o = (alt & 1) ? twin_o : std::optional<SegmentId>(origin);
      const auto d = (alt & 2) ? twin_d : std::optional<SegmentId>(dest);
      if (!o || !d) continue;
      const double s = (alt & 1) ? graph.segment(origin).length - start : start;
      const double e = (alt & 2) ? graph.segment(dest).length - end : end;
      shortest = trip_length(graph, *o, s, *d, e) > own + kDirectionSlack;
    }
    if (!shortest) continue;

    Trip trip{{origin}, start, end};
    trip.route.insert(trip.route.end(), path->segments.begin(), path->segments.end());
    trip.route.push_back(dest);
    if (!reverses(graph, trip.route)) return trip;
  }
  throw ValidationError("graph too small to draw a route with " + std::to_string(min_seg) + ".." +
                        std::to_string(max_seg) + " segments");
}

SegmentRoute gen_route(const RoadGraph& graph, int min_seg, int max_seg, Rng& rng) {
  return gen_trip(graph, min_seg, max_seg, rng).route;
}

SampledPoints sample_gps(const SegmentRoute& route, const RoadGraph& graph, const SimConfig& config,
                         double start_offset, double end_offset) {
  if (route.empty()) throw ValidationError("sample_gps: empty route");
  config.validate();
  std::vector<double> cum(route.size() + 1, 0.0);
  for (std::size_t i = 0; i < route.size(); ++i) cum[i + 1] = cum[i] + graph.segment(route[i]).length;
  const double last_len = graph.segment(route.back()).length;
  if (end_offset < 0.0) end_offset = last_len;
  const double start = std::clamp(start_offset, 0.0, graph.segment(route.front()).length);
  const double end = cum[route.size() - 1] + std::clamp(end_offset, 0.0, last_len);
  if (end < start) throw ValidationError("sample_gps: trip ends before it starts");

  const double step = config.sample_interval_s * config.speed_mps;
  SampledPoints out;
  std::size_t seg = 0;
  auto emit = [&](double arc) {
    while (seg + 1 < route.size() && arc >= cum[seg + 1]) ++seg;
    const geo::Point p = graph.point_along(route[seg], arc - cum[seg]);
    out.points.push_back({p.x, p.y, (arc - start) / config.speed_mps});
    out.alignment.push_back(static_cast<int>(seg));
  };
  // Fixes strictly before the trip end, then the end itself.
  emit(start);
  for (long k = 1;; ++k) {
    const double arc = start + static_cast<double>(k) * step;
    if (arc >= end - 1e-9) break;
    emit(arc);
  }
  emit(end);
  return out;
}

geo::Trajectory apply_noise(const geo::Trajectory& points, const NoiseModel& noise, Rng& rng) {
  noise.validate();
  geo::Trajectory out;
  out.reserve(points.size());
  for (const geo::TimedPoint& p : points) {
    const double sigma = noise.sigma_at(p.point());
    const double dx = rng.normal();
    const double dy = rng.normal();
    out.push_back({p.x + sigma * dx, p.y + sigma * dy, p.t});
  }
  return out;
}

GroundTruthSample simulate_one(const RoadGraph& graph, const SimConfig& config, const NoiseModel& noise,
                               std::int64_t traj_id) {
  Rng rng(derive_seed(config.seed, "simulate", static_cast<std::uint64_t>(traj_id)));
  GroundTruthSample s;
  s.traj_id = traj_id;
  const Trip trip = gen_trip(graph, config.min_route_segments, config.max_route_segments, rng);
  s.route = trip.route;
  SampledPoints sampled = sample_gps(s.route, graph, config, trip.start_offset, trip.end_offset);
  s.clean = std::move(sampled.points);
  s.alignment = std::move(sampled.alignment);
  s.points = apply_noise(s.clean, noise, rng);
  return s;
}

std::vector<GroundTruthSample> simulate(const RoadGraph& graph, const SimConfig& config, const NoiseModel& noise) {
  config.validate();
  noise.validate();
  std::vector<GroundTruthSample> out;
  out.reserve(static_cast<std::size_t>(config.trajectories));
  for (int i = 0; i < config.trajectories; ++i) out.push_back(simulate_one(graph, config, noise, i));
  return out;
}

}  // namespace mmseq::sim
