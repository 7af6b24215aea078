#include "mmseq/hmm.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "mmseq/error.hpp"

namespace mmseq::hmm {

using geo::SegmentId;

namespace {

constexpr std::size_t kDistanceCacheLimit = 4096;
constexpr std::size_t kNone = static_cast<std::size_t>(-1);

}  // namespace

void HmmParams::validate() const {
  if (!(sigma_z > 0.0) || !(beta > 0.0) || !(candidate_radius > 0.0) || max_candidates < 1) {
    throw ValidationError("hmm parameters must all be positive");
  }
}

double emission_logp(double dist_m, double sigma_z) {
  if (!(sigma_z > 0.0)) throw ValidationError("emission sigma must be positive");
  const double z = dist_m / sigma_z;
  return -0.5 * z * z - std::log(sigma_z * std::sqrt(2.0 * std::numbers::pi));
}

double transition_logp(double euclid_gap_m, double route_gap_m, double beta) {
  if (!(beta > 0.0)) throw ValidationError("transition beta must be positive");
  if (!std::isfinite(route_gap_m)) return kImpossible;
  return -std::abs(route_gap_m - euclid_gap_m) / beta - std::log(beta);
}

TrellisPath viterbi_decode(const Trellis& trellis) {
  const std::size_t layers = trellis.layers();
  TrellisPath out;
  if (layers == 0) return out;

  std::vector<std::vector<double>> score(layers);
  std::vector<std::vector<std::size_t>> parent(layers);
  auto seg = [&](std::size_t t, std::size_t i) { return trellis.candidates[t][i].segment; };

  score[0] = trellis.emission[0];
  parent[0].assign(score[0].size(), kNone);
  std::vector<char> is_break(layers, 0);

  for (std::size_t t = 1; t < layers; ++t) {
    const std::size_t n = trellis.candidates[t].size();
    const std::size_t m = trellis.candidates[t - 1].size();
    score[t].assign(n, kImpossible);
    parent[t].assign(n, kNone);
    bool any = false;
    for (std::size_t j = 0; j < n; ++j) {
      double best = kImpossible;
      std::size_t arg = kNone;
      for (std::size_t i = 0; i < m; ++i) {
        const double prev = score[t - 1][i];
        const double tr = trellis.transition[t][i][j];
        if (prev == kImpossible || tr == kImpossible) continue;
        const double cand = prev + tr;
        if (arg == kNone || cand > best || (cand == best && seg(t - 1, i) < seg(t - 1, arg))) {
          best = cand;
          arg = i;
        }
      }
      if (arg != kNone) {
        score[t][j] = best + trellis.emission[t][j];
        parent[t][j] = arg;
        any = true;
      }
    }
    if (!any) {
      is_break[t] = 1;
      out.breaks.push_back(t);
      score[t] = trellis.emission[t];
    }
  }

  auto argmax = [&](std::size_t t) {
    std::size_t arg = 0;
    for (std::size_t i = 1; i < score[t].size(); ++i) {
      const double a = score[t][i];
      const double b = score[t][arg];
      if (a > b || (a == b && seg(t, i) < seg(t, arg))) arg = i;
    }
    return arg;
  };

  out.states.assign(layers, 0);
  out.log_prob = 0.0;
  std::size_t t = layers - 1;
  std::size_t state = argmax(t);
  out.log_prob += score[t][state];
  while (true) {
    out.states[t] = state;
    if (t == 0) break;
    if (is_break[t]) {
      --t;
      state = argmax(t);
      out.log_prob += score[t][state];
    } else {
      state = parent[t][state];
      --t;
    }
  }
  return out;
}

Matcher::Matcher(const geo::RoadGraph& graph, const geo::SpatialIndex& index, HmmParams params)
    : graph_(&graph), index_(&index), params_(params) {
  params_.validate();
  if (&index.graph() != &graph) throw ValidationError("spatial index built for a different graph");
}

const std::vector<double>& Matcher::distances_from(geo::NodeId node) {
  auto it = distance_cache_.find(node);
  if (it != distance_cache_.end()) return it->second;
  if (distance_cache_.size() >= kDistanceCacheLimit) distance_cache_.clear();
  return distance_cache_.emplace(node, geo::distances_from(*graph_, node)).first->second;
}

double Matcher::route_distance(const TrellisCandidate& a, const TrellisCandidate& b) {
  if (a.segment == b.segment && b.offset >= a.offset) return b.offset - a.offset;
  const geo::Segment& sa = graph_->segment(a.segment);
  const geo::Segment& sb = graph_->segment(b.segment);
  const double between = distances_from(sa.to)[sb.from];
  return (sa.length - a.offset) + between + b.offset;
}

Trellis Matcher::build_trellis(const geo::Trajectory& trajectory) {
  Trellis tr;
  for (std::size_t k = 0; k < trajectory.size(); ++k) {
    const geo::Point p = trajectory[k].point();
    auto cands = index_->query(p, params_.candidate_radius);
    if (cands.empty()) {
      tr.dropped.push_back(k);
      continue;
    }
    if (cands.size() > static_cast<std::size_t>(params_.max_candidates)) cands.resize(params_.max_candidates);
    std::vector<TrellisCandidate> layer;
    std::vector<double> emis;
    for (const geo::Candidate& c : cands) {
      const geo::Projection proj = geo::project_to_segment(p, c.segment, *graph_);
      layer.push_back({c.segment, proj.foot, proj.offset, proj.distance});
      emis.push_back(emission_logp(proj.distance, params_.sigma_z));
    }
    tr.observations.push_back(k);
    tr.candidates.push_back(std::move(layer));
    tr.emission.push_back(std::move(emis));
  }

  tr.transition.resize(tr.layers());
  for (std::size_t t = 1; t < tr.layers(); ++t) {
    const geo::Point prev = trajectory[tr.observations[t - 1]].point();
    const geo::Point cur = trajectory[tr.observations[t]].point();
    const double euclid = geo::distance(prev, cur);
    const auto& from = tr.candidates[t - 1];
    const auto& to = tr.candidates[t];
    tr.transition[t].assign(from.size(), std::vector<double>(to.size(), kImpossible));
    for (std::size_t i = 0; i < from.size(); ++i) {
      for (std::size_t j = 0; j < to.size(); ++j) {
        tr.transition[t][i][j] = transition_logp(euclid, route_distance(from[i], to[j]), params_.beta);
      }
    }
  }
  return tr;
}

ViterbiResult Matcher::viterbi(const geo::Trajectory& trajectory) {
  if (trajectory.empty()) throw ValidationError("viterbi: empty trajectory");
  const Trellis tr = build_trellis(trajectory);
  ViterbiResult out;
  out.dropped = tr.dropped;
  if (tr.layers() == 0) return out;
  const TrellisPath path = viterbi_decode(tr);
  out.log_prob = path.log_prob;
  out.breaks = path.breaks;
  for (std::size_t t = 0; t < tr.layers(); ++t) {
    const TrellisCandidate& c = tr.candidates[t][path.states[t]];
    out.matched.push_back({tr.observations[t], c.segment, c.foot, c.offset});
  }
  return out;
}

MatchedRoute route_from_matches(const ViterbiResult& result, const geo::RoadGraph& graph) {
  MatchedRoute out;
  out.dropped = result.dropped;
  const MatchedPoint* prev = nullptr;
  for (const MatchedPoint& m : result.matched) {
    if (prev == nullptr) {
      out.route.push_back(m.segment);
    } else if (m.segment == prev->segment && m.offset >= prev->offset) {
      // still on the same segment
    } else {
      const auto path = geo::shortest_path(graph, graph.segment(prev->segment).to, graph.segment(m.segment).from);
      if (path) {
        out.route.insert(out.route.end(), path->segments.begin(), path->segments.end());
        if (out.route.back() != m.segment) out.route.push_back(m.segment);
      } else if (out.route.back() != m.segment) {
        out.splits.push_back(out.route.size());
        out.route.push_back(m.segment);
      }
    }
    out.alignment.push_back(static_cast<int>(out.route.size()) - 1);
    out.observations.push_back(m.observation);
    prev = &m;
  }
  return out;
}

MatchedRoute Matcher::match_route(const geo::Trajectory& trajectory) {
  return route_from_matches(viterbi(trajectory), *graph_);
}

ViterbiResult viterbi(const geo::Trajectory& trajectory, const geo::RoadGraph& graph, const HmmParams& params) {
  const geo::SpatialIndex index(graph);
  Matcher matcher(graph, index, params);
  return matcher.viterbi(trajectory);
}

MatchedRoute match_route(const geo::Trajectory& trajectory, const geo::RoadGraph& graph, const HmmParams& params) {
  const geo::SpatialIndex index(graph);
  Matcher matcher(graph, index, params);
  return matcher.match_route(trajectory);
}

}  // namespace mmseq::hmm
