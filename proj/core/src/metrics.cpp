#include "mmseq/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>

#include "mmseq/error.hpp"
#include "mmseq/text.hpp"

namespace mmseq::metrics {

using geo::SegmentId;

namespace {

std::set<SegmentId> as_set(std::span<const SegmentId> s) { return {s.begin(), s.end()}; }

std::size_t intersection_size(const std::set<SegmentId>& a, const std::set<SegmentId>& b) {
  std::size_t n = 0;
  for (SegmentId s : a) n += b.count(s);
  return n;
}

std::map<std::vector<SegmentId>, int> ngram_counts(std::span<const SegmentId> seq, std::size_t n) {
  std::map<std::vector<SegmentId>, int> counts;
  for (std::size_t i = 0; i + n <= seq.size(); ++i) ++counts[{seq.begin() + i, seq.begin() + i + n}];
  return counts;
}

}  // namespace

double acc1(std::span<const SegmentId> pred, std::span<const SegmentId> truth) {
  if (truth.empty()) throw ValidationError("acc1: empty ground-truth route");
  const auto t = as_set(truth);
  return static_cast<double>(intersection_size(as_set(pred), t)) / static_cast<double>(t.size());
}

double acc2(std::span<const SegmentId> pred, std::span<const SegmentId> truth, const geo::RoadGraph& graph) {
  if (truth.empty()) throw ValidationError("acc2: empty ground-truth route");
  const auto t = as_set(truth);
  const auto p = as_set(pred);
  double shared = 0.0;
  double total = 0.0;
  for (SegmentId s : t) {
    const double len = graph.segment(s).length;
    total += len;
    if (p.count(s)) shared += len;
  }
  return shared / total;
}

double jaccard(std::span<const SegmentId> pred, std::span<const SegmentId> truth) {
  const auto t = as_set(truth);
  const auto p = as_set(pred);
  if (t.empty() && p.empty()) return 1.0;
  const std::size_t inter = intersection_size(p, t);
  return static_cast<double>(inter) / static_cast<double>(p.size() + t.size() - inter);
}

double bleu(std::span<const SegmentId> pred, std::span<const SegmentId> truth, int n_max) {
  if (pred.empty() || truth.empty()) return 0.0;
  const std::size_t order = std::min({static_cast<std::size_t>(std::max(n_max, 1)), pred.size(), truth.size()});
  double log_sum = 0.0;
  for (std::size_t n = 1; n <= order; ++n) {
    const auto pc = ngram_counts(pred, n);
    const auto tc = ngram_counts(truth, n);
    int matched = 0;
    for (const auto& [gram, count] : pc) {
      auto it = tc.find(gram);
      if (it != tc.end()) matched += std::min(count, it->second);
    }
    if (matched == 0) return 0.0;
    log_sum += std::log(static_cast<double>(matched) / static_cast<double>(pred.size() - n + 1));
  }
  const double bp = pred.size() > truth.size()
                        ? 1.0
                        : std::exp(1.0 - static_cast<double>(truth.size()) / static_cast<double>(pred.size()));
  return bp * std::exp(log_sum / static_cast<double>(order));
}

TrajectoryScore score(const RoutePair& pair, const geo::RoadGraph& graph) {
  TrajectoryScore s;
  s.traj_id = pair.traj_id;
  s.acc1 = acc1(pair.pred, pair.truth);
  s.acc2 = acc2(pair.pred, pair.truth, graph);
  s.jaccard = jaccard(pair.pred, pair.truth);
  s.bleu = bleu(pair.pred, pair.truth);
  s.pred_len = pair.pred.size();
  s.true_len = pair.truth.size();
  return s;
}

EvalReport evaluate(std::span<const RoutePair> pairs, const geo::RoadGraph& graph) {
  EvalReport r;
  for (const RoutePair& p : pairs) r.per_trajectory.push_back(score(p, graph));
  std::sort(r.per_trajectory.begin(), r.per_trajectory.end(),
            [](const TrajectoryScore& a, const TrajectoryScore& b) { return a.traj_id < b.traj_id; });
  r.trajectories = r.per_trajectory.size();
  if (r.trajectories == 0) return r;
  for (const TrajectoryScore& s : r.per_trajectory) {
    r.acc1 += s.acc1;
    r.acc2 += s.acc2;
    r.jaccard += s.jaccard;
    r.bleu += s.bleu;
  }
  const auto n = static_cast<double>(r.trajectories);
  r.acc1 /= n;
  r.acc2 /= n;
  r.jaccard /= n;
  r.bleu /= n;
  return r;
}

std::string format_table(const EvalReport& report, const std::string& title) {
  char buf[256];
  std::string out = title + "\n";
  std::snprintf(buf, sizeof(buf), "%-12s %8s %8s %8s %8s\n", "trajectories", "Acc1", "Acc2", "J", "BLEU");
  out += buf;
  std::snprintf(buf, sizeof(buf), "%-12zu %8.4f %8.4f %8.4f %8.4f\n", report.trajectories, report.acc1, report.acc2,
                report.jaccard, report.bleu);
  out += buf;
  return out;
}

std::string format_key_values(const EvalReport& report) {
  std::string out = "EVAL v1\n";
  out += "trajectories=" + std::to_string(report.trajectories) + "\n";
  out += "acc1=" + format_double(report.acc1) + "\n";
  out += "acc2=" + format_double(report.acc2) + "\n";
  out += "jaccard=" + format_double(report.jaccard) + "\n";
  out += "bleu=" + format_double(report.bleu) + "\n";
  out += "discontinuities=" + std::to_string(report.discontinuities) + "\n";
  out += "truncated=" + std::to_string(report.truncated) + "\n";
  return out;
}

std::string format_csv(const EvalReport& report) {
  std::string out = "traj_id,acc1,acc2,jaccard,bleu,pred_len,true_len\n";
  for (const TrajectoryScore& s : report.per_trajectory) {
    out += std::to_string(s.traj_id) + "," + format_double(s.acc1) + "," + format_double(s.acc2) + "," +
           format_double(s.jaccard) + "," + format_double(s.bleu) + "," + std::to_string(s.pred_len) + "," +
           std::to_string(s.true_len) + "\n";
  }
  return out;
}

}  // namespace mmseq::metrics
