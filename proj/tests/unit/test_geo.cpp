#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>

#include "../support/fixtures.hpp"
#include "doctest.h"
#include "mmseq/error.hpp"
#include "mmseq/geo.hpp"
#include "mmseq/map_io.hpp"
#include "mmseq/rng.hpp"

using namespace mmseq;
using namespace mmseq::geo;

namespace {

// Smallest total length over all simple directed paths, found by DFS.
double enumerate_best(const RoadGraph& g, NodeId from, NodeId to, std::vector<SegmentId>* best_path) {
  double best = std::numeric_limits<double>::infinity();
  std::vector<char> visited(g.node_count(), 0);
  std::vector<SegmentId> path;
  std::function<void(NodeId, double)> dfs = [&](NodeId n, double len) {
    if (n == to) {
      if (len < best - 1e-12 || (std::abs(len - best) <= 1e-12 && best_path && path < *best_path)) {
        best = std::min(best, len);
        if (best_path) *best_path = path;
      }
      return;
    }
    visited[n] = 1;
    for (SegmentId s : g.out_segments(n)) {
      const Segment& seg = g.segment(s);
      if (visited[seg.to]) continue;
      path.push_back(s);
      dfs(seg.to, len + seg.length);
      path.pop_back();
    }
    visited[n] = 0;
  };
  dfs(from, 0.0);
  return best;
}

}  // namespace

TEST_CASE("build_graph validates and indexes adjacency") {
  const RoadGraph g = RoadGraph::build({{0, 0, 0}, {1, 10, 0}}, {{0, 0, 1, 10}});
  CHECK(g.out_segments(0).size() == 1);
  CHECK(g.out_segments(1).empty());
  CHECK(g.in_segments(1).size() == 1);

  CHECK_THROWS_AS(RoadGraph::build({{0, 0, 0}, {1, 10, 0}}, {{0, 0, 99, 10}}), ValidationError);
  CHECK_THROWS_AS(RoadGraph::build({{0, 0, 0}, {1, 10, 0}}, {{0, 0, 1, 0.0}}), ValidationError);
  CHECK_THROWS_AS(RoadGraph::build({{0, 0, 0}, {1, 10, 0}}, {{0, 1, 1, 5.0}}), ValidationError);

  const RoadGraph sq = testing::lattice(2, 2);
  CHECK(sq.segment_count() == 8);
  for (NodeId n = 0; n < 4; ++n) CHECK(sq.out_segments(n).size() == 2);
  CHECK(sq.is_strongly_connected());
  CHECK(sq.reverse_twin(0).value() == 1);
}

TEST_CASE("validation error names the offending segment") {
  try {
    RoadGraph::build({{0, 0, 0}, {1, 10, 0}}, {{0, 0, 1, 10}, {1, 0, 99, 10}});
    FAIL("expected an error");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("segment 1") != std::string::npos);
  }
}

TEST_CASE("grid_cell_of uses floor division") {
  const GridSpec grid;
  CHECK(grid_cell_of({0, 0}, grid) == GridCellId{0, 0});
  CHECK(grid_cell_of({100, 60}, grid) == GridCellId{2, 1});
  CHECK(grid_cell_of({-1, 0}, grid) == GridCellId{-1, 0});
  CHECK(grid_cell_of({45.72, 0}, grid) == GridCellId{1, 0});
  CHECK_THROWS_AS(grid_cell_of({std::nan(""), 0}, grid), ValidationError);
}

TEST_CASE("grid_cell_of is translation consistent") {
  Rng rng(11);
  for (int i = 0; i < 1000; ++i) {
    const Point p{rng.uniform(-500, 500), rng.uniform(-500, 500)};
    const double dx = std::round(rng.uniform(-20, 20)) * 0.25;
    const double dy = std::round(rng.uniform(-20, 20)) * 0.25;
    GridSpec moved;
    moved.origin_x = dx;
    moved.origin_y = dy;
    CHECK(grid_cell_of({p.x + dx, p.y + dy}, moved) == grid_cell_of(p, GridSpec{}));
  }
}

TEST_CASE("project_to_segment clamps onto the chord") {
  const RoadGraph g = RoadGraph::build({{0, 0, 0}, {1, 10, 0}, {2, 0, 10}}, {{0, 0, 1, 10}, {1, 0, 2, 10}});
  Projection p = project_to_segment({5, 3}, 0, g);
  CHECK(p.foot == Point{5, 0});
  CHECK(p.offset == doctest::Approx(5));
  CHECK(p.distance == doctest::Approx(3));
  p = project_to_segment({-2, 0}, 0, g);
  CHECK(p.foot == Point{0, 0});
  CHECK(p.offset == 0.0);
  CHECK(p.distance == doctest::Approx(2));
  p = project_to_segment({5, 3}, 1, g);
  CHECK(p.foot == Point{0, 3});
  CHECK(p.offset == doctest::Approx(3));
  CHECK(p.distance == doctest::Approx(5));
}

TEST_CASE("candidate lookup equals a brute-force scan") {
  Rng rng(21);
  for (int trial = 0; trial < 1000; ++trial) {
    const int cols = 2 + static_cast<int>(rng.below(4));
    const int rows = 2 + static_cast<int>(rng.below(4));
    const RoadGraph g = testing::lattice(cols, rows, rng.uniform(30, 120));
    const SpatialIndex index(g, rng.uniform(20, 80));
    const auto [lo, hi] = g.bounds();
    const Point p{rng.uniform(lo.x - 50, hi.x + 50), rng.uniform(lo.y - 50, hi.y + 50)};
    const double radius = rng.uniform(1, 90);

    std::vector<Candidate> expect;
    for (const Segment& s : g.segments()) {
      const double d = project_to_segment(p, s.id, g).distance;
      if (d <= radius) expect.push_back({s.id, d});
    }
    std::sort(expect.begin(), expect.end(), [](const Candidate& a, const Candidate& b) {
      return a.distance != b.distance ? a.distance < b.distance : a.segment < b.segment;
    });
    const auto got = candidate_segments(p, radius, g, index);
    REQUIRE(got.size() == expect.size());
    for (std::size_t i = 0; i < got.size(); ++i) {
      CHECK(got[i].segment == expect[i].segment);
      CHECK(got[i].distance == expect[i].distance);
    }
  }
}

TEST_CASE("candidate lookup contract") {
  const RoadGraph g = testing::lattice(3, 3);
  const SpatialIndex index(g);
  const auto on = candidate_segments({50, 0}, 1.0, g, index);
  REQUIRE(!on.empty());
  CHECK(on.front().distance == 0.0);
  CHECK(g.segment(on.front().segment).from <= 1);
  CHECK_THROWS_AS(candidate_segments({50, 0}, 0.0, g, index), ValidationError);
  CHECK(candidate_segments({5000, 5000}, 10.0, g, index).empty());
}

TEST_CASE("shortest path examples") {
  const RoadGraph g = testing::lattice(3, 3);
  const auto self = shortest_path(g, 4, 4);
  REQUIRE(self);
  CHECK(self->segments.empty());
  CHECK(self->length == 0.0);

  // 0->1 (1), 1->2 (1), 0->2 (3)
  const RoadGraph tri =
      RoadGraph::build({{0, 0, 0}, {1, 1, 0}, {2, 2, 0}}, {{0, 0, 2, 3.0}, {1, 0, 1, 1.0}, {2, 1, 2, 1.0}});
  const auto p = shortest_path(tri, 0, 2);
  REQUIRE(p);
  CHECK(p->segments == std::vector<SegmentId>{1, 2});
  CHECK(p->length == doctest::Approx(2.0));

  const RoadGraph oneway = RoadGraph::build({{0, 0, 0}, {1, 10, 0}}, {{0, 0, 1, 10}});
  CHECK_FALSE(shortest_path(oneway, 1, 0).has_value());
}

TEST_CASE("shortest path equals exhaustive enumeration including the tie-break") {
  Rng rng(8);
  for (int trial = 0; trial < 60; ++trial) {
    // Lattice with integer lengths, some streets one-way: many equal-cost ties.
    std::vector<Node> nodes;
    std::vector<Segment> segs;
    const int cols = 3, rows = 3;
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) nodes.push_back({r * cols + c, c * 10.0, r * 10.0});
    auto add = [&](int a, int b) {
      segs.push_back({static_cast<SegmentId>(segs.size()), a, b, static_cast<double>(1 + rng.below(3))});
    };
    for (int r = 0; r < rows; ++r) {
      for (int c = 0; c < cols; ++c) {
        const int n = r * cols + c;
        for (int nb : {c + 1 < cols ? n + 1 : -1, r + 1 < rows ? n + cols : -1}) {
          if (nb < 0) continue;
          const auto mode = rng.below(3);
          if (mode != 1) add(n, nb);
          if (mode != 2) add(nb, n);
        }
      }
    }
    const RoadGraph g = RoadGraph::build(nodes, segs);
    for (int q = 0; q < 10; ++q) {
      const auto a = static_cast<NodeId>(rng.below(9));
      const auto b = static_cast<NodeId>(rng.below(9));
      std::vector<SegmentId> best_path;
      const double best = enumerate_best(g, a, b, &best_path);
      const auto got = shortest_path(g, a, b);
      if (!std::isfinite(best)) {
        CHECK_FALSE(got.has_value());
        continue;
      }
      REQUIRE(got.has_value());
      CHECK(got->length == doctest::Approx(best));
      if (a != b) CHECK(got->segments == best_path);
      CHECK(distances_from(g, a)[b] == doctest::Approx(best));
      CHECK(distances_to(g, b)[a] == doctest::Approx(best));
    }
  }
}

TEST_CASE("shortest path never beats a random walk") {
  const RoadGraph g = testing::lattice(5, 5, 50);
  Rng rng(4);
  for (int i = 0; i < 200; ++i) {
    NodeId n = static_cast<NodeId>(rng.below(25));
    const NodeId start = n;
    double walked = 0.0;
    const int steps = 1 + static_cast<int>(rng.below(15));
    for (int s = 0; s < steps; ++s) {
      const auto outs = g.out_segments(n);
      const SegmentId seg = outs[rng.below(outs.size())];
      walked += g.segment(seg).length;
      n = g.segment(seg).to;
    }
    const auto p = shortest_path(g, start, n);
    REQUIRE(p);
    CHECK(p->length <= walked + 1e-9);
  }
}

TEST_CASE("map text round trip") {
  const RoadGraph g = testing::lattice(3, 2, 80.5);
  const std::string text = write_map(g);
  CHECK(text.rfind("MAP v1\n", 0) == 0);
  const RoadGraph back = read_map(text);
  CHECK(write_map(back) == text);
  CHECK_THROWS_AS(read_map("MAP v2\n"), ValidationError);
  CHECK_THROWS_AS(read_map("MAP v1\nN 0 0 0\nS 0 0 5 1\n"), ValidationError);
  CHECK_THROWS_AS(read_map("MAP v1\nN 0 0\n"), ValidationError);
}
