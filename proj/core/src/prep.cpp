#include "mmseq/prep.hpp"

#include <algorithm>
#include <set>

#include "mmseq/error.hpp"
#include "mmseq/text.hpp"

namespace mmseq::prep {

namespace {

const char* const kSpecialKeys[kNumSpecials] = {"<pad>", "<bos>", "<eos>", "<unk>"};

}  // namespace

const char* to_string(VocabKind kind) noexcept { return kind == VocabKind::kGrid ? "grid" : "segment"; }

std::string cell_key(geo::GridCellId cell) { return std::to_string(cell.col) + "," + std::to_string(cell.row); }

Vocab::Vocab(VocabKind kind, std::vector<std::string> keys) : kind_(kind), keys_(std::move(keys)) {
  for (std::size_t i = 0; i < keys_.size(); ++i) {
    if (!index_.emplace(keys_[i], static_cast<TokenId>(i)).second) {
      throw ValidationError("duplicate vocabulary key '" + keys_[i] + "'");
    }
  }
}

Vocab Vocab::grid(std::vector<geo::GridCellId> cells) {
  std::sort(cells.begin(), cells.end());
  cells.erase(std::unique(cells.begin(), cells.end()), cells.end());
  std::vector<std::string> keys(kSpecialKeys, kSpecialKeys + kNumSpecials);
  for (const auto& c : cells) keys.push_back(cell_key(c));
  return Vocab(VocabKind::kGrid, std::move(keys));
}

Vocab Vocab::segments(std::size_t count) {
  std::vector<std::string> keys(kSpecialKeys, kSpecialKeys + kNumSpecials);
  for (std::size_t i = 0; i < count; ++i) keys.push_back(std::to_string(i));
  return Vocab(VocabKind::kSegment, std::move(keys));
}

const std::string& Vocab::key(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= keys_.size()) {
    throw ValidationError("token id " + std::to_string(id) + " outside vocabulary of size " +
                          std::to_string(keys_.size()));
  }
  return keys_[id];
}

TokenId Vocab::id_of(std::string_view key) const {
  auto it = index_.find(std::string(key));
  return it == index_.end() ? kUnk : it->second;
}

TokenId Vocab::id_of_cell(geo::GridCellId cell) const { return id_of(cell_key(cell)); }

TokenId Vocab::id_of_segment(geo::SegmentId segment) const { return id_of(std::to_string(segment)); }

geo::GridCellId Vocab::cell_of(TokenId id) const {
  if (kind_ != VocabKind::kGrid || id < kNumSpecials) throw ValidationError("token is not a grid cell");
  const std::string& k = key(id);
  const auto comma = k.find(',');
  return {parse_int(std::string_view(k).substr(0, comma)), parse_int(std::string_view(k).substr(comma + 1))};
}

geo::SegmentId Vocab::segment_of(TokenId id) const {
  if (kind_ != VocabKind::kSegment || id < kNumSpecials) {
    throw ValidationError("token " + std::to_string(id) + " is not a segment");
  }
  return static_cast<geo::SegmentId>(parse_int(key(id)));
}

std::string Vocab::serialize() const {
  std::string out = "VOCAB v1 " + std::string(to_string(kind_)) + " " + std::to_string(keys_.size()) + "\n";
  for (std::size_t i = 0; i < keys_.size(); ++i) out += std::to_string(i) + " " + keys_[i] + "\n";
  return out;
}

Vocab Vocab::parse(std::string_view text) {
  std::size_t pos = 0;
  auto next_line = [&]() -> std::optional<std::string_view> {
    while (pos < text.size()) {
      std::size_t end = text.find('\n', pos);
      if (end == std::string_view::npos) end = text.size();
      std::string_view line = text.substr(pos, end - pos);
      pos = end + 1;
      if (!split_ws(line).empty()) return line;
    }
    return std::nullopt;
  };
  const auto header = next_line();
  const auto h = header ? split_ws(*header) : std::vector<std::string_view>{};
  if (h.size() != 4 || h[0] != "VOCAB" || h[1] != "v1" || (h[2] != "grid" && h[2] != "segment")) {
    throw ValidationError("expected header 'VOCAB v1 <grid|segment> <size>'");
  }
  const VocabKind kind = h[2] == "grid" ? VocabKind::kGrid : VocabKind::kSegment;
  const auto size = static_cast<std::size_t>(parse_int(h[3]));
  std::vector<std::string> keys;
  while (auto line = next_line()) {
    const auto tok = split_ws(*line);
    if (tok.size() != 2 || parse_int(tok[0]) != static_cast<long long>(keys.size())) {
      throw ValidationError("vocabulary entries must be '<id> <key>' with dense ids");
    }
    keys.emplace_back(tok[1]);
  }
  if (keys.size() != size) throw ValidationError("vocabulary size does not match header");
  for (TokenId i = 0; i < kNumSpecials; ++i) {
    if (keys.size() <= static_cast<std::size_t>(i) || keys[i] != kSpecialKeys[i]) {
      throw ValidationError("vocabulary specials must occupy ids 0..3");
    }
  }
  return Vocab(kind, std::move(keys));
}

std::pair<Vocab, Vocab> build_vocabs(std::span<const geo::Trajectory> inputs, const geo::GridSpec& grid,
                                     const geo::RoadGraph& graph) {
  if (inputs.empty()) throw ValidationError("cannot build vocabularies from an empty dataset");
  std::set<geo::GridCellId> cells;
  for (const auto& traj : inputs) {
    for (const auto& p : traj) cells.insert(geo::grid_cell_of(p.point(), grid));
  }
  return {Vocab::grid({cells.begin(), cells.end()}), Vocab::segments(graph.segment_count())};
}

TokenSequence encode_input(const geo::Trajectory& trajectory, const geo::GridSpec& grid, const Vocab& vocab) {
  if (vocab.kind() != VocabKind::kGrid) throw ValidationError("encode_input needs a grid vocabulary");
  TokenSequence out{{}, VocabKind::kGrid};
  out.ids.reserve(trajectory.size());
  for (const auto& p : trajectory) out.ids.push_back(vocab.id_of_cell(geo::grid_cell_of(p.point(), grid)));
  return out;
}

TokenSequence encode_route(const geo::SegmentRoute& route, const Vocab& vocab) {
  if (vocab.kind() != VocabKind::kSegment) throw ValidationError("encode_route needs a segment vocabulary");
  TokenSequence out{{}, VocabKind::kSegment};
  out.ids.reserve(route.size());
  for (geo::SegmentId s : route) out.ids.push_back(vocab.id_of_segment(s));
  return out;
}

geo::SegmentRoute decode_route(std::span<const TokenId> ids, const Vocab& vocab) {
  geo::SegmentRoute out;
  for (TokenId id : ids) {
    if (id >= kNumSpecials) out.push_back(vocab.segment_of(id));
  }
  return out;
}

void SplitSpec::validate() const {
  if (max_in < 2 || max_out < 1 || overlap_points < 1 || overlap_points >= max_in) {
    throw ValidationError("split spec needs max_in >= 2, max_out >= 1 and 1 <= overlap < max_in");
  }
}

std::vector<Fragment> split(const SplitSource& source, const SplitSpec& spec) {
  spec.validate();
  const int n = static_cast<int>(source.inputs.size());
  const std::string who = "trajectory " + std::to_string(source.traj_id) + ": ";
  if (n == 0) throw ValidationError(who + "no points to split");
  if (source.alignment.size() != source.inputs.size()) throw ValidationError(who + "alignment/point count mismatch");
  const int m = static_cast<int>(source.route.size());
  for (int i = 0; i < n; ++i) {
    const int a = source.alignment[i];
    if (a < 0 || a >= m || (i > 0 && a < source.alignment[i - 1])) {
      throw ValidationError(who + "alignment must be non-decreasing indices into the route");
    }
  }

  std::vector<Fragment> out;
  int begin = 0;
  while (true) {
    int end = std::min(begin + spec.max_in - 1, n - 1);
    while (end > begin && source.alignment[end] - source.alignment[begin] + 1 > spec.max_out) --end;
    const bool last = end == n - 1;
    if (source.alignment[end] - source.alignment[begin] + 1 > spec.max_out ||
        (!last && end - begin + 1 <= spec.overlap_points)) {
      throw ValidationError(who + "gap after point " + std::to_string(end) + " spans more than " +
                            std::to_string(spec.max_out) + " segments");
    }
    Fragment f;
    f.traj_id = source.traj_id;
    f.index = static_cast<int>(out.size());
    f.point_begin = begin;
    f.point_end = end;
    // The first fragment owns the route start and the last one its end, so
    // the union of target ranges always covers the whole route.
    f.seg_begin = out.empty() ? 0 : source.alignment[begin];
    f.seg_end = last ? m - 1 : source.alignment[end];
    if (f.seg_end - f.seg_begin + 1 > spec.max_out) {
      throw ValidationError(who + "route ends span more than " + std::to_string(spec.max_out) + " segments");
    }
    f.inputs.assign(source.inputs.begin() + begin, source.inputs.begin() + end + 1);
    f.targets.assign(source.route.begin() + f.seg_begin, source.route.begin() + f.seg_end + 1);
    if (!out.empty()) f.ambiguous_cut = out.back().seg_end == f.seg_begin;
    out.push_back(std::move(f));
    if (last) break;
    begin = end - spec.overlap_points + 1;
  }
  return out;
}

MergeResult merge(std::span<const std::vector<TokenId>> fragments, int max_overlap) {
  MergeResult out;
  for (const auto& frag : fragments) {
    if (out.route.empty()) {
      out.route = frag;
      continue;
    }
    const std::size_t limit =
        std::min({static_cast<std::size_t>(std::max(max_overlap, 0)), out.route.size(), frag.size()});
    std::size_t overlap = 0;
    for (std::size_t k = limit; k >= 1; --k) {
      if (std::equal(frag.begin(), frag.begin() + static_cast<std::ptrdiff_t>(k), out.route.end() - static_cast<std::ptrdiff_t>(k))) {
        overlap = k;
        break;
      }
    }
    if (overlap == 0 && !frag.empty()) {
      ++out.discontinuities;
      out.discontinuity_positions.push_back(out.route.size());
    }
    out.route.insert(out.route.end(), frag.begin() + static_cast<std::ptrdiff_t>(overlap), frag.end());
  }
  return out;
}

Batch pad_batch(std::span<const Example> examples, const BatchLimits& limits) {
  if (examples.empty()) throw ValidationError("pad_batch: empty batch");
  Batch b;
  b.size = examples.size();
  for (const Example& e : examples) {
    if (e.input.empty()) throw ValidationError("pad_batch: empty input sequence");
    if (e.input.size() > static_cast<std::size_t>(limits.max_in)) {
      throw ValidationError("input of length " + std::to_string(e.input.size()) + " exceeds max " +
                            std::to_string(limits.max_in));
    }
    if (e.target.size() > static_cast<std::size_t>(limits.max_out)) {
      throw ValidationError("target of length " + std::to_string(e.target.size()) + " exceeds max " +
                            std::to_string(limits.max_out));
    }
    b.in_len = std::max(b.in_len, e.input.size());
    b.tgt_len = std::max(b.tgt_len, e.target.size() + 2);
  }
  b.inputs.assign(b.size * b.in_len, kPad);
  b.in_pad.assign(b.size * b.in_len, 1);
  b.targets.assign(b.size * b.tgt_len, kPad);
  b.tgt_pad.assign(b.size * b.tgt_len, 1);
  for (std::size_t i = 0; i < b.size; ++i) {
    const Example& e = examples[i];
    for (std::size_t t = 0; t < e.input.size(); ++t) {
      b.inputs[i * b.in_len + t] = e.input[t];
      b.in_pad[i * b.in_len + t] = 0;
    }
    std::size_t t = 0;
    auto put = [&](TokenId id) {
      b.targets[i * b.tgt_len + t] = id;
      b.tgt_pad[i * b.tgt_len + t] = 0;
      ++t;
    };
    put(kBos);
    for (TokenId id : e.target) put(id);
    put(kEos);
    b.in_lengths.push_back(e.input.size());
    b.tgt_lengths.push_back(t);
  }
  return b;
}

Batch pad_inputs(std::span<const std::vector<TokenId>> inputs, int max_in) {
  std::vector<Example> ex;
  ex.reserve(inputs.size());
  for (const auto& in : inputs) ex.push_back({in, {}});
  Batch b = pad_batch(ex, {max_in, 0});
  b.tgt_len = 0;
  b.targets.clear();
  b.tgt_pad.clear();
  b.tgt_lengths.clear();
  return b;
}

}  // namespace mmseq::prep
