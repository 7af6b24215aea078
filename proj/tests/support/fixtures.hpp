#pragma once

// Small graphs and helpers shared by the unit tests.

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include <unistd.h>

#include "mmseq/geo.hpp"

namespace mmseq::testing {

/// Bidirectional square lattice, node (c, r) at (c*block, r*block).
inline geo::RoadGraph lattice(int cols, int rows, double block = 100.0) {
  std::vector<geo::Node> nodes;
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) nodes.push_back({r * cols + c, c * block, r * block});
  }
  std::vector<geo::Segment> segs;
  auto street = [&](int a, int b) {
    const auto id = static_cast<geo::SegmentId>(segs.size());
    segs.push_back({id, a, b, block});
    segs.push_back({id + 1, b, a, block});
  };
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      const int n = r * cols + c;
      if (c + 1 < cols) street(n, n + 1);
      if (r + 1 < rows) street(n, n + cols);
    }
  }
  return geo::RoadGraph::build(std::move(nodes), std::move(segs));
}

/// Straight directed chain 0 -> 1 -> ... -> n along the x axis.
inline geo::RoadGraph chain(int n, double block = 100.0) {
  std::vector<geo::Node> nodes;
  std::vector<geo::Segment> segs;
  for (int i = 0; i <= n; ++i) nodes.push_back({i, i * block, 0.0});
  for (int i = 0; i < n; ++i) segs.push_back({i, i, i + 1, block});
  return geo::RoadGraph::build(std::move(nodes), std::move(segs));
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag)
      : path_(std::filesystem::temp_directory_path() / ("mmseq-" + tag + "-" + std::to_string(::getpid()))) {
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace mmseq::testing
