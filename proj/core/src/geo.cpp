#include "mmseq/geo.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <queue>
#include <string>

#include "mmseq/error.hpp"

namespace mmseq::geo {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

template <typename Neighbors>
std::vector<double> dijkstra(std::size_t n, std::size_t source, Neighbors&& neighbors) {
  std::vector<double> dist(n, kInf);
  using Entry = std::pair<double, std::size_t>;
  std::priority_queue<Entry, std::vector<Entry>, std::greater<>> heap;
  dist[source] = 0.0;
  heap.emplace(0.0, source);
  while (!heap.empty()) {
    auto [d, u] = heap.top();
    heap.pop();
    if (d > dist[u]) continue;
    neighbors(u, [&](std::size_t v, double w) {
      const double nd = d + w;
      if (nd < dist[v]) {
        dist[v] = nd;
        heap.emplace(nd, v);
      }
    });
  }
  return dist;
}

}  // namespace

double distance(Point a, Point b) noexcept { return std::hypot(a.x - b.x, a.y - b.y); }

RoadGraph RoadGraph::build(std::vector<Node> nodes, std::vector<Segment> segments) {
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    if (nodes[i].id != static_cast<NodeId>(i)) {
      throw ValidationError("node ids must be dense from 0; found id " +
                            std::to_string(nodes[i].id) + " at position " + std::to_string(i));
    }
    if (!std::isfinite(nodes[i].x) || !std::isfinite(nodes[i].y)) {
      throw ValidationError("node " + std::to_string(i) + " has non-finite coordinates");
    }
  }
  const auto n = static_cast<NodeId>(nodes.size());
  for (std::size_t i = 0; i < segments.size(); ++i) {
    const Segment& s = segments[i];
    const std::string name = "segment " + std::to_string(s.id);
    if (s.id != static_cast<SegmentId>(i)) {
      throw ValidationError("segment ids must be dense from 0; found id " + std::to_string(s.id) +
                            " at position " + std::to_string(i));
    }
    if (s.from < 0 || s.from >= n) {
      throw ValidationError(name + " references missing from-node " + std::to_string(s.from));
    }
    if (s.to < 0 || s.to >= n) {
      throw ValidationError(name + " references missing to-node " + std::to_string(s.to));
    }
    if (s.from == s.to) throw ValidationError(name + " is a self loop");
    if (!(s.length > 0.0) || !std::isfinite(s.length)) {
      throw ValidationError(name + " has non-positive length");
    }
  }

  RoadGraph g;
  g.nodes_ = std::move(nodes);
  g.segments_ = std::move(segments);
  g.out_.assign(g.nodes_.size(), {});
  g.in_.assign(g.nodes_.size(), {});
  for (const Segment& s : g.segments_) {
    g.out_[s.from].push_back(s.id);
    g.in_[s.to].push_back(s.id);
  }
  g.twin_.assign(g.segments_.size(), -1);
  for (const Segment& s : g.segments_) {
    for (SegmentId cand : g.out_[s.to]) {
      if (g.segments_[cand].to == s.from) {
        g.twin_[s.id] = cand;
        break;
      }
    }
  }
  return g;
}

const Node& RoadGraph::node(NodeId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size()) {
    throw ValidationError("unknown node id " + std::to_string(id));
  }
  return nodes_[id];
}

const Segment& RoadGraph::segment(SegmentId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= segments_.size()) {
    throw ValidationError("unknown segment id " + std::to_string(id));
  }
  return segments_[id];
}

Point RoadGraph::position(NodeId id) const {
  const Node& n = node(id);
  return {n.x, n.y};
}

std::span<const SegmentId> RoadGraph::out_segments(NodeId id) const {
  node(id);
  return out_[id];
}

std::span<const SegmentId> RoadGraph::in_segments(NodeId id) const {
  node(id);
  return in_[id];
}

std::optional<SegmentId> RoadGraph::reverse_twin(SegmentId id) const {
  segment(id);
  if (twin_[id] < 0) return std::nullopt;
  return twin_[id];
}

Point RoadGraph::point_along(SegmentId id, double offset) const {
  const Segment& s = segment(id);
  const Point a = position(s.from);
  const Point b = position(s.to);
  const double t = std::clamp(offset / s.length, 0.0, 1.0);
  return {a.x + t * (b.x - a.x), a.y + t * (b.y - a.y)};
}

std::pair<Point, Point> RoadGraph::bounds() const {
  Point lo{kInf, kInf};
  Point hi{-kInf, -kInf};
  for (const Node& n : nodes_) {
    lo.x = std::min(lo.x, n.x);
    lo.y = std::min(lo.y, n.y);
    hi.x = std::max(hi.x, n.x);
    hi.y = std::max(hi.y, n.y);
  }
  return {lo, hi};
}

bool RoadGraph::is_strongly_connected() const {
  if (nodes_.empty()) return true;
  auto reach_all = [&](const std::vector<std::vector<SegmentId>>& adj, bool forward) {
    std::vector<char> seen(nodes_.size(), 0);
    std::vector<NodeId> stack{0};
    seen[0] = 1;
    std::size_t count = 1;
    while (!stack.empty()) {
      const NodeId u = stack.back();
      stack.pop_back();
      for (SegmentId sid : adj[u]) {
        const NodeId v = forward ? segments_[sid].to : segments_[sid].from;
        if (!seen[v]) {
          seen[v] = 1;
          ++count;
          stack.push_back(v);
        }
      }
    }
    return count == nodes_.size();
  };
  return reach_all(out_, true) && reach_all(in_, false);
}

std::size_t GridCellHash::operator()(const GridCellId& c) const noexcept {
  const auto a = static_cast<std::uint64_t>(c.col);
  const auto b = static_cast<std::uint64_t>(c.row);
  return static_cast<std::size_t>(a * 0x9e3779b97f4a7c15ULL ^ (b + 0x632be59bd9b4e019ULL + (a << 6)));
}

GridCellId grid_cell_of(Point p, const GridSpec& grid) {
  if (!std::isfinite(p.x) || !std::isfinite(p.y)) {
    throw ValidationError("grid_cell_of: non-finite coordinate");
  }
  if (!(grid.cell_size > 0.0)) throw ValidationError("grid cell size must be positive");
  return {static_cast<std::int64_t>(std::floor((p.x - grid.origin_x) / grid.cell_size)),
          static_cast<std::int64_t>(std::floor((p.y - grid.origin_y) / grid.cell_size))};
}

Projection project_to_segment(Point p, SegmentId segment, const RoadGraph& graph) {
  const Segment& s = graph.segment(segment);
  const Point a = graph.position(s.from);
  const Point b = graph.position(s.to);
  const double dx = b.x - a.x;
  const double dy = b.y - a.y;
  const double chord2 = dx * dx + dy * dy;
  double t = chord2 > 0.0 ? ((p.x - a.x) * dx + (p.y - a.y) * dy) / chord2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  Projection out;
  out.foot = {a.x + t * dx, a.y + t * dy};
  out.offset = std::clamp(t * s.length, 0.0, s.length);
  out.distance = distance(p, out.foot);
  return out;
}

SpatialIndex::SpatialIndex(const RoadGraph& graph, double bucket_size) : graph_(&graph) {
  if (!(bucket_size > 0.0)) throw ValidationError("spatial index bucket size must be positive");
  grid_.cell_size = bucket_size;
  for (const Segment& s : graph.segments()) {
    const Point a = graph.position(s.from);
    const Point b = graph.position(s.to);
    const GridCellId lo = grid_cell_of({std::min(a.x, b.x), std::min(a.y, b.y)}, grid_);
    const GridCellId hi = grid_cell_of({std::max(a.x, b.x), std::max(a.y, b.y)}, grid_);
    for (std::int64_t r = lo.row; r <= hi.row; ++r) {
      for (std::int64_t c = lo.col; c <= hi.col; ++c) buckets_[{c, r}].push_back(s.id);
    }
  }
}

std::vector<Candidate> SpatialIndex::query(Point p, double radius) const {
  if (!(radius > 0.0)) throw ValidationError("candidate radius must be positive");
  const GridCellId lo = grid_cell_of({p.x - radius, p.y - radius}, grid_);
  const GridCellId hi = grid_cell_of({p.x + radius, p.y + radius}, grid_);
  std::vector<SegmentId> seen;
  for (std::int64_t r = lo.row; r <= hi.row; ++r) {
    for (std::int64_t c = lo.col; c <= hi.col; ++c) {
      auto it = buckets_.find({c, r});
      if (it != buckets_.end()) seen.insert(seen.end(), it->second.begin(), it->second.end());
    }
  }
  std::sort(seen.begin(), seen.end());
  seen.erase(std::unique(seen.begin(), seen.end()), seen.end());

  std::vector<Candidate> out;
  for (SegmentId sid : seen) {
    const double d = project_to_segment(p, sid, *graph_).distance;
    if (d <= radius) out.push_back({sid, d});
  }
  std::sort(out.begin(), out.end(), [](const Candidate& a, const Candidate& b) {
    return a.distance != b.distance ? a.distance < b.distance : a.segment < b.segment;
  });
  return out;
}

std::vector<Candidate> candidate_segments(Point p, double radius, const RoadGraph& graph,
                                          const SpatialIndex& index) {
  if (&index.graph() != &graph) throw ValidationError("spatial index built for a different graph");
  return index.query(p, radius);
}

std::vector<double> distances_from(const RoadGraph& graph, NodeId source) {
  graph.node(source);
  const auto segs = graph.segments();
  return dijkstra(graph.node_count(), static_cast<std::size_t>(source), [&](std::size_t u, auto&& relax) {
    for (SegmentId sid : graph.out_segments(static_cast<NodeId>(u))) {
      relax(static_cast<std::size_t>(segs[sid].to), segs[sid].length);
    }
  });
}

std::vector<double> distances_to(const RoadGraph& graph, NodeId target) {
  graph.node(target);
  const auto segs = graph.segments();
  return dijkstra(graph.node_count(), static_cast<std::size_t>(target), [&](std::size_t u, auto&& relax) {
    for (SegmentId sid : graph.in_segments(static_cast<NodeId>(u))) {
      relax(static_cast<std::size_t>(segs[sid].from), segs[sid].length);
    }
  });
}

std::optional<Path> shortest_path(const RoadGraph& graph, NodeId from, NodeId to) {
  graph.node(from);
  graph.node(to);
  Path path;
  if (from == to) return path;
  const std::vector<double> to_target = distances_to(graph, to);
  if (!std::isfinite(to_target[from])) return std::nullopt;

  // Greedy walk along tight edges, smallest id first: yields the
  // lexicographically smallest optimal segment sequence.
  NodeId u = from;
  while (u != to) {
    const double du = to_target[u];
    const double tol = 1e-9 * std::max(1.0, du);
    bool advanced = false;
    for (SegmentId sid : graph.out_segments(u)) {
      const Segment& s = graph.segment(sid);
      if (std::abs(s.length + to_target[s.to] - du) <= tol && to_target[s.to] < du) {
        path.segments.push_back(sid);
        path.length += s.length;
        u = s.to;
        advanced = true;
        break;
      }
    }
    if (!advanced) throw NumericError("shortest_path: inconsistent distance labels");
  }
  return path;
}

}  // namespace mmseq::geo
