#pragma once

// Road network geometry in a local planar frame (meters, x east, y north).

#include <compare>
#include <cstdint>
#include <optional>
#include <span>
#include <unordered_map>
#include <vector>

namespace mmseq::geo {

using NodeId = std::int32_t;
using SegmentId = std::int32_t;
/// Ordered connected segment ids.
using SegmentRoute = std::vector<SegmentId>;

struct Point {
  double x = 0.0;
  double y = 0.0;
  friend bool operator==(const Point&, const Point&) = default;
};

double distance(Point a, Point b) noexcept;

/// GPS fix: planar position plus seconds since trip start.
struct TimedPoint {
  double x = 0.0;
  double y = 0.0;
  double t = 0.0;
  Point point() const noexcept { return {x, y}; }
  friend bool operator==(const TimedPoint&, const TimedPoint&) = default;
};

using Trajectory = std::vector<TimedPoint>;

/// Intersection or segment endpoint.
struct Node {
  NodeId id = 0;
  double x = 0.0;
  double y = 0.0;
};

/// Directed road segment, a straight chord from `from` to `to`.
struct Segment {
  SegmentId id = 0;
  NodeId from = 0;
  NodeId to = 0;
  double length = 0.0;
};

/// Directed road graph. Immutable after construction.
class RoadGraph {
 public:
  RoadGraph() = default;

  /// Validates ids (dense from 0), endpoints and lengths, then builds adjacency.
  /// Throws ValidationError naming the offending segment.
  static RoadGraph build(std::vector<Node> nodes, std::vector<Segment> segments);

  std::span<const Node> nodes() const noexcept { return nodes_; }
  std::span<const Segment> segments() const noexcept { return segments_; }
  std::size_t node_count() const noexcept { return nodes_.size(); }
  std::size_t segment_count() const noexcept { return segments_.size(); }

  const Node& node(NodeId id) const;
  const Segment& segment(SegmentId id) const;
  Point position(NodeId id) const;
  /// Outgoing segment ids of a node, ascending.
  std::span<const SegmentId> out_segments(NodeId id) const;
  /// Incoming segment ids of a node, ascending.
  std::span<const SegmentId> in_segments(NodeId id) const;
  /// The segment running to->from, if the street is two-way.
  std::optional<SegmentId> reverse_twin(SegmentId id) const;

  /// Point at `offset` meters along the segment (clamped to [0, length]).
  Point point_along(SegmentId id, double offset) const;

  /// Bounding box of all nodes: {min, max}.
  std::pair<Point, Point> bounds() const;

  bool is_strongly_connected() const;

 private:
  std::vector<Node> nodes_;
  std::vector<Segment> segments_;
  std::vector<std::vector<SegmentId>> out_;
  std::vector<std::vector<SegmentId>> in_;
  std::vector<SegmentId> twin_;  // -1 when absent
};

struct GridSpec {
  double origin_x = 0.0;
  double origin_y = 0.0;
  double cell_size = 45.72;  // 150 ft
};

struct GridCellId {
  std::int64_t col = 0;
  std::int64_t row = 0;
  friend bool operator==(const GridCellId&, const GridCellId&) = default;
  /// Row-major order.
  friend std::strong_ordering operator<=>(const GridCellId& a, const GridCellId& b) {
    if (auto c = a.row <=> b.row; c != 0) return c;
    return a.col <=> b.col;
  }
};

struct GridCellHash {
  std::size_t operator()(const GridCellId& c) const noexcept;
};

/// Floor-division cell lookup. Throws ValidationError on non-finite input or a
/// non-positive cell size.
GridCellId grid_cell_of(Point p, const GridSpec& grid);

struct Projection {
  Point foot;
  double offset = 0.0;    // along the segment from its start, in [0, length]
  double distance = 0.0;  // |p - foot|
};

/// Clamped orthogonal projection onto the segment chord.
Projection project_to_segment(Point p, SegmentId segment, const RoadGraph& graph);

struct Candidate {
  SegmentId segment = 0;
  double distance = 0.0;
};

/// Uniform bucket grid over segment bounding boxes.
class SpatialIndex {
 public:
  explicit SpatialIndex(const RoadGraph& graph, double bucket_size = 45.72);

  /// Segments whose projection distance is <= radius, ascending by distance
  /// then id. Throws ValidationError if radius <= 0.
  std::vector<Candidate> query(Point p, double radius) const;

  const RoadGraph& graph() const noexcept { return *graph_; }

 private:
  const RoadGraph* graph_;
  GridSpec grid_;
  std::unordered_map<GridCellId, std::vector<SegmentId>, GridCellHash> buckets_;
};

std::vector<Candidate> candidate_segments(Point p, double radius, const RoadGraph& graph,
                                          const SpatialIndex& index);

struct Path {
  std::vector<SegmentId> segments;
  double length = 0.0;
};

/// Dijkstra shortest path respecting direction. Among equal-cost paths the
/// lexicographically smallest segment-id sequence wins. Returns nullopt when
/// `to` is unreachable.
std::optional<Path> shortest_path(const RoadGraph& graph, NodeId from, NodeId to);

/// Single-source shortest distances (meters); +inf when unreachable.
std::vector<double> distances_from(const RoadGraph& graph, NodeId source);

/// Single-target shortest distances to `target` over reversed edges.
std::vector<double> distances_to(const RoadGraph& graph, NodeId target);

}  // namespace mmseq::geo
