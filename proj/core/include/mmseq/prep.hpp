#pragma once

// Tokenization, fragment splitting, batching and prediction merging.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "mmseq/geo.hpp"

namespace mmseq::prep {

using TokenId = std::int32_t;

inline constexpr TokenId kPad = 0;
inline constexpr TokenId kBos = 1;
inline constexpr TokenId kEos = 2;
inline constexpr TokenId kUnk = 3;
inline constexpr TokenId kNumSpecials = 4;

enum class VocabKind { kGrid, kSegment };

const char* to_string(VocabKind kind) noexcept;

/// Dense token space with the four fixed specials at ids 0..3.
class Vocab {
 public:
  /// Grid vocabulary over the given cells, ordered row-major.
  static Vocab grid(std::vector<geo::GridCellId> cells);
  /// Segment vocabulary over ids 0..count-1; token = segment id + 4.
  static Vocab segments(std::size_t count);

  VocabKind kind() const noexcept { return kind_; }
  std::size_t size() const noexcept { return keys_.size(); }
  const std::string& key(TokenId id) const;
  /// Token for a key, kUnk when unknown.
  TokenId id_of(std::string_view key) const;

  TokenId id_of_cell(geo::GridCellId cell) const;
  TokenId id_of_segment(geo::SegmentId segment) const;
  geo::GridCellId cell_of(TokenId id) const;
  geo::SegmentId segment_of(TokenId id) const;

  /// "VOCAB v1 <kind> <size>" followed by "<id> <key>" lines.
  std::string serialize() const;
  static Vocab parse(std::string_view text);

  friend bool operator==(const Vocab& a, const Vocab& b) { return a.kind_ == b.kind_ && a.keys_ == b.keys_; }

 private:
  Vocab(VocabKind kind, std::vector<std::string> keys);

  VocabKind kind_ = VocabKind::kSegment;
  std::vector<std::string> keys_;
  std::unordered_map<std::string, TokenId> index_;
};

std::string cell_key(geo::GridCellId cell);

struct TokenSequence {
  std::vector<TokenId> ids;
  VocabKind kind = VocabKind::kGrid;
};

/// Grid vocabulary over every cell touched by the given trajectories, and a
/// segment vocabulary over every segment of the map. Throws ValidationError
/// when no trajectory is given.
std::pair<Vocab, Vocab> build_vocabs(std::span<const geo::Trajectory> inputs, const geo::GridSpec& grid,
                                     const geo::RoadGraph& graph);

/// One token per GPS point, duplicates kept, unseen cells -> kUnk.
TokenSequence encode_input(const geo::Trajectory& trajectory, const geo::GridSpec& grid, const Vocab& vocab);
TokenSequence encode_route(const geo::SegmentRoute& route, const Vocab& vocab);
geo::SegmentRoute decode_route(std::span<const TokenId> ids, const Vocab& vocab);

struct SplitSpec {
  int max_in = 20;
  int max_out = 100;
  int overlap_points = 2;

  void validate() const;
};

/// What split() needs from a labelled trajectory: aligned token sequences.
struct SplitSource {
  std::int64_t traj_id = 0;
  std::vector<TokenId> inputs;  // one per point
  std::vector<TokenId> route;   // one per route segment
  std::vector<int> alignment;   // per point: index into route, non-decreasing
};

struct Fragment {
  std::int64_t traj_id = 0;
  int index = 0;
  std::vector<TokenId> inputs;
  std::vector<TokenId> targets;
  int point_begin = 0;  // inclusive range into the parent's points
  int point_end = 0;
  int seg_begin = 0;  // inclusive range into the parent's route
  int seg_end = 0;
  /// The overlap with the previous fragment is a single segment, so merging
  /// has only one token to anchor on.
  bool ambiguous_cut = false;
};

/// Cuts a trajectory into fragments of at most max_in points and max_out
/// target segments; consecutive fragments share overlap_points points.
/// Throws ValidationError if a fragment cannot be formed within max_out.
std::vector<Fragment> split(const SplitSource& source, const SplitSpec& spec);

struct MergeResult {
  std::vector<TokenId> route;
  int discontinuities = 0;
  std::vector<std::size_t> discontinuity_positions;  // route positions
};

/// Stitches ordered fragment predictions: the longest suffix of the route so
/// far (at most max_overlap tokens) matching a prefix of the next fragment is
/// dropped from that fragment; without any match the fragment is appended
/// whole and a discontinuity is recorded.
MergeResult merge(std::span<const std::vector<TokenId>> fragments, int max_overlap);

struct BatchLimits {
  int max_in = 20;
  int max_out = 100;  // target tokens before framing
};

/// Right-padded batch. Targets are framed BOS ... EOS before padding.
struct Batch {
  std::size_t size = 0;
  std::size_t in_len = 0;
  std::size_t tgt_len = 0;           // framed width
  std::vector<TokenId> inputs;       // size * in_len
  std::vector<TokenId> targets;      // size * tgt_len
  std::vector<std::uint8_t> in_pad;  // 1 at PAD
  std::vector<std::uint8_t> tgt_pad;
  std::vector<std::size_t> in_lengths;
  std::vector<std::size_t> tgt_lengths;  // framed lengths

  TokenId input(std::size_t b, std::size_t t) const { return inputs[b * in_len + t]; }
  TokenId target(std::size_t b, std::size_t t) const { return targets[b * tgt_len + t]; }
};

struct Example {
  std::vector<TokenId> input;
  std::vector<TokenId> target;  // unframed
};

/// Throws ValidationError on an empty batch or an over-long sequence.
Batch pad_batch(std::span<const Example> examples, const BatchLimits& limits);

/// Encoder-only batch (targets empty).
Batch pad_inputs(std::span<const std::vector<TokenId>> inputs, int max_in);

}  // namespace mmseq::prep
