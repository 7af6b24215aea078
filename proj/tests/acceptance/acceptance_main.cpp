// Acceptance run: one PASS/FAIL line per criterion.
//
//   acceptance [--work-dir DIR] [N ...]
//
// With no numbers every criterion runs. Criterion 7 trains both models on the
// frozen benchmark and takes the better part of an hour on one core.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <numbers>
#include <set>
#include <string>
#include <vector>

#include "../support/gradcheck.hpp"
#include "../support/trellis_oracle.hpp"
#include "mmseq/error.hpp"
#include "mmseq/hmm.hpp"
#include "mmseq/metrics.hpp"
#include "mmseq/pipeline.hpp"
#include "mmseq/prep.hpp"
#include "mmseq/rnn.hpp"
#include "mmseq/simulate.hpp"
#include "mmseq/text.hpp"
#include "mmseq/transformer.hpp"

namespace {

using namespace mmseq;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

fs::path g_work;

// --- 1 ------------------------------------------------------------------------

std::vector<prep::Example> random_examples(std::size_t n, int max_in, int max_out, int src, int tgt, Rng& rng) {
  std::vector<prep::Example> out(n);
  for (auto& e : out) {
    const int li = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(max_in)));
    const int lo = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(max_out)));
    for (int i = 0; i < li; ++i) e.input.push_back(static_cast<prep::TokenId>(4 + rng.below(src - 4)));
    for (int i = 0; i < lo; ++i) e.target.push_back(static_cast<prep::TokenId>(4 + rng.below(tgt - 4)));
  }
  return out;
}

Outcome gradient_fidelity() {
  const auto t0 = Clock::now();
  model::TransformerConfig tc;
  tc.d_emb = 8;
  tc.d_ff = 16;
  tc.blocks = 1;
  tc.heads = 2;
  tc.max_in_len = 5;
  tc.max_out_len = 5;
  tc.src_vocab = 12;
  tc.tgt_vocab = 11;
  tc.seed = 101;
  model::Transformer tfm(tc);
  model::GruConfig gc;
  gc.d_emb = 8;
  gc.hidden = 8;
  gc.max_in_len = 5;
  gc.max_out_len = 5;
  gc.src_vocab = 12;
  gc.tgt_vocab = 11;
  gc.seed = 102;
  model::GruSeq2Seq gru(gc);

  double worst = 0.0;
  std::size_t checked = 0, expected = 0;
  for (model::Seq2SeqModel* m : {static_cast<model::Seq2SeqModel*>(&tfm), static_cast<model::Seq2SeqModel*>(&gru)}) {
    Rng rng(7);
    const auto ex = random_examples(3, 5, 5, 12, 11, rng);
    const prep::Batch b = prep::pad_batch(ex, m->limits());
    const auto r = testing::grad_check(m->params(), [&](nn::Tape& t) { return m->loss(t, b); }, 1e-5);
    worst = std::max(worst, r.max_rel_error);
    checked += r.checked;
    expected += m->params().scalar_count();
  }
  const double secs = seconds_since(t0);
  return {worst < 1e-4 && checked == expected && secs < 60.0,
          "max rel err " + fmt("%.2e", worst) + " over " + std::to_string(checked) + " scalars, " +
              fmt("%.1f", secs) + " s"};
}

// --- 2 ------------------------------------------------------------------------

Outcome viterbi_optimality() {
  const auto t0 = Clock::now();
  Rng rng(2);
  int checked = 0, wrong = 0;
  while (checked < 200) {
    const std::size_t layers = 1 + rng.below(6);
    const hmm::Trellis tr = testing::random_trellis(rng, layers, 4, 0.1);
    const auto [best, path] = testing::brute_force(tr);
    if (path.empty()) continue;
    const hmm::TrellisPath got = hmm::viterbi_decode(tr);
    wrong += got.states != path || got.log_prob != best;
    ++checked;
  }
  const double secs = seconds_since(t0);
  return {wrong == 0 && secs < 30.0,
          std::to_string(wrong) + "/200 differ from exhaustive search, " + fmt("%.2f", secs) + " s"};
}

// --- 3 ------------------------------------------------------------------------

Outcome hmm_zero_noise() {
  sim::MapSpec spec;
  spec.cols = 12;
  spec.rows = 12;
  spec.seed = 303;
  const geo::RoadGraph g = sim::gen_map(spec);
  sim::SimConfig cfg;
  cfg.trajectories = 200;
  cfg.seed = 304;
  sim::NoiseModel noise;
  noise.base_sigma_m = 0.0;
  const geo::SpatialIndex index(g);
  hmm::Matcher matcher(g, index, hmm::HmmParams{});
  std::vector<metrics::RoutePair> pairs;
  for (const auto& s : sim::simulate(g, cfg, noise)) {
    pairs.push_back({s.traj_id, matcher.match_route(s.points).route, s.route});
  }
  const metrics::EvalReport r = metrics::evaluate(pairs, g);
  return {r.acc1 >= 0.99 && r.jaccard >= 0.99,
          "acc1 " + fmt("%.4f", r.acc1) + ", jaccard " + fmt("%.4f", r.jaccard) + " over 200"};
}

// --- 4 ------------------------------------------------------------------------

Outcome split_merge_round_trip() {
  sim::MapSpec spec;
  spec.cols = 16;
  spec.rows = 16;
  spec.oneway_prob = 0.2;
  spec.seed = 404;
  const geo::RoadGraph g = sim::gen_map(spec);
  sim::SimConfig cfg;
  cfg.trajectories = 1000;
  cfg.min_route_segments = 8;
  cfg.max_route_segments = 120;
  cfg.sample_interval_s = 10;
  cfg.seed = 405;
  const auto samples = sim::simulate(g, cfg, sim::NoiseModel{});
  const prep::Vocab sv = prep::Vocab::segments(g.segment_count());
  int mismatches = 0, discontinuities = 0;
  std::size_t fragments = 0;
  for (const prep::SplitSpec sspec : {prep::SplitSpec{20, 100, 2}, prep::SplitSpec{8, 50, 2}}) {
    for (const auto& s : samples) {
      prep::SplitSource src;
      src.traj_id = s.traj_id;
      src.inputs.assign(s.points.size(), prep::kUnk);
      src.route = prep::encode_route(s.route, sv).ids;
      src.alignment = s.alignment;
      std::vector<std::vector<prep::TokenId>> targets;
      for (const auto& f : prep::split(src, sspec)) targets.push_back(f.targets);
      fragments += targets.size();
      const prep::MergeResult m = prep::merge(targets, sspec.max_out);
      discontinuities += m.discontinuities;
      mismatches += prep::decode_route(m.route, sv) != s.route;
    }
  }
  return {mismatches == 0 && discontinuities == 0,
          std::to_string(mismatches) + " mismatches, " + std::to_string(discontinuities) + " discontinuities over " +
              "2x1000 records (" + std::to_string(fragments) + " fragments)"};
}

// --- 5 ------------------------------------------------------------------------

Outcome metric_oracles() {
  using geo::SegmentRoute;
  std::vector<std::string> failed;
  auto near = [&](const std::string& name, double got, double want) {
    if (!(std::abs(got - want) <= 1e-9)) failed.push_back(name + "=" + fmt("%.12g", got));
  };
  // Chain with lengths 100, 100, 200, 100 m.
  std::vector<geo::Node> nodes;
  std::vector<geo::Segment> segs;
  double x = 0.0;
  for (int i = 0; i <= 5; ++i) {
    nodes.push_back({i, x, 0.0});
    const double len = i == 2 ? 200.0 : 100.0;
    if (i < 5) segs.push_back({i, i, i + 1, len});
    x += len;
  }
  const geo::RoadGraph g = geo::RoadGraph::build(nodes, segs);

  near("acc1 equal", metrics::acc1(SegmentRoute{1, 2, 3}, SegmentRoute{1, 2, 3}), 1.0);
  near("acc1 disjoint", metrics::acc1(SegmentRoute{4}, SegmentRoute{1, 2, 3}), 0.0);
  near("acc1 half", metrics::acc1(SegmentRoute{0, 1, 2}, SegmentRoute{1, 2, 3, 4}), 2.0 / 4.0);
  near("acc2 quarter", metrics::acc2(SegmentRoute{1, 4}, SegmentRoute{1, 2, 3}, g), 100.0 / 400.0);
  near("acc2 equal", metrics::acc2(SegmentRoute{0, 2}, SegmentRoute{0, 2}, g), 1.0);
  near("jaccard half", metrics::jaccard(SegmentRoute{0, 1, 2}, SegmentRoute{1, 2, 3}), 2.0 / 4.0);
  near("jaccard disjoint", metrics::jaccard(SegmentRoute{0}, SegmentRoute{1}), 0.0);
  near("jaccard equal", metrics::jaccard(SegmentRoute{3, 1}, SegmentRoute{1, 3}), 1.0);
  // Clipped n-gram precisions 4/5, 3/4, 2/3, 1/2; equal lengths, no penalty.
  const double bleu_ref = std::pow(0.8 * 0.75 * (2.0 / 3.0) * 0.5, 0.25);
  near("bleu one-off", metrics::bleu(SegmentRoute{0, 1, 2, 3, 4}, SegmentRoute{0, 1, 2, 3, 5}), bleu_ref);
  if (std::abs(bleu_ref - 0.6687) > 5e-5) failed.push_back("bleu reference " + fmt("%.6f", bleu_ref));
  near("bleu brevity", metrics::bleu(SegmentRoute{0, 1, 2, 3, 4}, SegmentRoute{0, 1, 2, 3, 4, 5, 6, 7, 8, 9}),
       std::exp(-1.0));
  near("bleu equal", metrics::bleu(SegmentRoute{0, 1, 2, 3}, SegmentRoute{0, 1, 2, 3}), 1.0);
  const SegmentRoute same{0, 1, 2, 3, 4};
  const std::vector<metrics::RoutePair> identity{{1, same, same}};
  const metrics::EvalReport r = metrics::evaluate(identity, g);
  if (r.acc1 != 1.0 || r.acc2 != 1.0 || r.jaccard != 1.0 || r.bleu != 1.0) failed.push_back("identity report");
  std::string detail = failed.empty() ? "13 fixtures, bleu " + fmt("%.6f", bleu_ref) : "failed:";
  for (const auto& f : failed) detail += " " + f;
  return {failed.empty(), detail};
}

// --- 6 ------------------------------------------------------------------------

std::vector<prep::Example> overfit_fragments(int& src_vocab, int& tgt_vocab) {
  sim::MapSpec spec;
  spec.cols = 12;
  spec.rows = 12;
  spec.seed = 606;
  const geo::RoadGraph g = sim::gen_map(spec);
  sim::SimConfig cfg;
  cfg.trajectories = 64;
  cfg.seed = 607;
  const auto samples = sim::simulate(g, cfg, sim::NoiseModel{});
  std::vector<geo::Trajectory> pts;
  for (const auto& s : samples) pts.push_back(s.points);
  const geo::GridSpec grid;
  const auto [gv, sv] = prep::build_vocabs(pts, grid, g);
  src_vocab = static_cast<int>(gv.size());
  tgt_vocab = static_cast<int>(sv.size());
  std::vector<prep::Example> out;
  for (const auto& s : samples) {
    prep::SplitSource src;
    src.traj_id = s.traj_id;
    src.inputs = prep::encode_input(s.points, grid, gv).ids;
    src.route = prep::encode_route(s.route, sv).ids;
    src.alignment = s.alignment;
    for (const auto& f : prep::split(src, prep::SplitSpec{8, 50, 2})) {
      if (out.size() < 64) out.push_back({f.inputs, f.targets});
    }
  }
  return out;
}

struct OverfitRun {
  long steps = 0;
  double accuracy = 0.0;
  double seconds = 0.0;
};

OverfitRun overfit(model::Seq2SeqModel& m, const std::vector<prep::Example>& ex) {
  const auto t0 = Clock::now();
  nn::AdamConfig adam;
  adam.lr = 1e-3;
  const prep::Batch batch = prep::pad_batch(ex, m.limits());
  OverfitRun r;
  while (r.steps < 2000) {
    nn::Tape tape;
    tape.set_training(true);
    m.params().zero_grad();
    tape.backward(m.loss(tape, batch));
    nn::adam_step(m.params(), adam);
    ++r.steps;
    if (r.steps % 25 == 0) {
      const auto [loss, acc] = model::evaluate_teacher_forced(m, ex);
      r.accuracy = acc.rate();
      if (r.accuracy >= 0.99) break;
    }
  }
  r.seconds = seconds_since(t0);
  return r;
}

Outcome overfit_capability() {
  int src = 0, tgt = 0;
  const auto ex = overfit_fragments(src, tgt);
  model::TransformerConfig tc;
  tc.max_in_len = 8;
  tc.max_out_len = 50;
  tc.src_vocab = src;
  tc.tgt_vocab = tgt;
  tc.seed = 61;
  model::Transformer tfm(tc);
  model::GruConfig gc;
  gc.max_in_len = 8;
  gc.max_out_len = 50;
  gc.src_vocab = src;
  gc.tgt_vocab = tgt;
  gc.seed = 62;
  model::GruSeq2Seq gru(gc);
  const OverfitRun a = overfit(tfm, ex);
  const OverfitRun b = overfit(gru, ex);
  auto ok = [](const OverfitRun& r) { return r.accuracy >= 0.99 && r.steps <= 2000 && r.seconds < 600.0; };
  auto describe = [](const char* name, const OverfitRun& r) {
    return std::string(name) + " " + fmt("%.4f", r.accuracy) + " at step " + std::to_string(r.steps) + " (" +
           fmt("%.0f", r.seconds) + " s)";
  };
  return {ex.size() == 64 && ok(a) && ok(b),
          std::to_string(ex.size()) + " fragments; " + describe("tfm", a) + ", " + describe("gru", b)};
}

// --- 7 ------------------------------------------------------------------------

pipeline::Context context_for(const std::string& config_text, const fs::path& dir) {
  pipeline::Context ctx;
  ctx.config.load(config_text, "config");
  ctx.dir = dir;
  ctx.log = [](const std::string& msg) { std::fprintf(stderr, "  | %s\n", msg.c_str()); };
  return ctx;
}

void full_pipeline(const pipeline::Context& ctx) {
  using pipeline::ModelKind;
  pipeline::run_gen_map(ctx);
  pipeline::run_simulate(ctx);
  pipeline::run_match_hmm(ctx);
  pipeline::run_prepare(ctx);
  for (const ModelKind k : {ModelKind::kTransformer, ModelKind::kGru}) {
    pipeline::run_train(ctx, k);
    pipeline::run_infer(ctx, k, pipeline::decode_options(ctx.config));
  }
  pipeline::run_infer(ctx, ModelKind::kNaive, {});
}

Outcome benchmark_ordering() {
  using pipeline::ModelKind;
  const auto t0 = Clock::now();
  const std::string config = read_file(fs::path(MMSEQ_SOURCE_DIR) / "configs" / "benchmark.conf");
  const fs::path dir = g_work / "benchmark";
  fs::remove_all(dir);
  const pipeline::Context ctx = context_for(config, dir);
  full_pipeline(ctx);
  const double tfm = pipeline::run_evaluate(ctx, ModelKind::kTransformer).acc1;
  const double gru = pipeline::run_evaluate(ctx, ModelKind::kGru).acc1;
  const double naive = pipeline::run_evaluate(ctx, ModelKind::kNaive).acc1;
  const double secs = seconds_since(t0);
  const bool pass = tfm - gru >= 0.03 && gru - naive >= 0.03 && secs <= 4 * 3600.0;
  return {pass, "acc1 tfm " + fmt("%.4f", tfm) + ", gru " + fmt("%.4f", gru) + ", naive " + fmt("%.4f", naive) +
                    " (margins " + fmt("%+.1f", 100 * (tfm - gru)) + " / " + fmt("%+.1f", 100 * (gru - naive)) +
                    " pp), " + fmt("%.0f", secs) + " s"};
}

// --- 8 ------------------------------------------------------------------------

Outcome noise_calibration() {
  const auto t0 = Clock::now();
  const sim::NoiseModel noise;
  Rng rng(808);
  const geo::Point at{10.0, 10.0};
  const geo::Trajectory pts(1, {at.x, at.y, 0.0});
  double total = 0.0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) total += geo::distance(sim::apply_noise(pts, noise, rng)[0].point(), at);
  const double mean = total / n;
  const double rayleigh = noise.base_sigma_m * std::sqrt(std::numbers::pi / 2.0);
  const double rel = std::abs(mean - rayleigh) / rayleigh;
  const double secs = seconds_since(t0);
  return {rel < 0.05 && secs < 10.0, "mean radial error " + fmt("%.3f", mean) + " m vs " + fmt("%.3f", rayleigh) +
                                         " m (" + fmt("%.2f", 100 * rel) + "%), " + fmt("%.2f", secs) + " s"};
}

// --- 9 ------------------------------------------------------------------------

Outcome determinism() {
  const std::string config = R"(
seed = 909
map.cols = 6
map.rows = 6
sim.trajectories = 80
data.test_fraction = 0.2
tfm.d_emb = 32
tfm.d_ff = 64
tfm.dropout = 0.1
tfm.epochs = 3
gru.d_emb = 32
gru.hidden = 32
gru.epochs = 3
)";
  std::vector<std::map<std::string, std::string>> runs;
  for (const char* name : {"determinism-a", "determinism-b"}) {
    const fs::path dir = g_work / name;
    fs::remove_all(dir);
    const pipeline::Context ctx = context_for(config, dir);
    full_pipeline(ctx);
    for (const auto k : {pipeline::ModelKind::kTransformer, pipeline::ModelKind::kGru, pipeline::ModelKind::kNaive}) {
      pipeline::run_evaluate(ctx, k);
    }
    std::map<std::string, std::string> files;
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
      const std::string rel = fs::relative(e.path(), dir).string();
      if (e.is_regular_file() && rel.rfind("timing.", 0) != 0) files[rel] = sha256_hex(read_file(e.path()));
    }
    runs.push_back(std::move(files));
  }
  std::vector<std::string> differ;
  for (const auto& [name, digest] : runs[0]) {
    const auto it = runs[1].find(name);
    if (it == runs[1].end() || it->second != digest) differ.push_back(name);
  }
  if (runs[0].size() != runs[1].size()) differ.push_back("<file sets>");
  std::size_t epochs = 0;
  for (const auto& [name, d] : runs[0]) epochs += name.rfind("checkpoints/", 0) == 0;
  const bool covered = runs[0].count("dataset.jsonl") && runs[0].count("predictions.tfm.jsonl") &&
                       runs[0].count("eval.gru.kv") && epochs == 6;
  std::string detail = std::to_string(runs[0].size()) + " files (" + std::to_string(epochs) +
                       " epoch checkpoints) compared, " + std::to_string(differ.size()) + " differ";
  for (const auto& d : differ) detail += " " + d;
  return {covered && differ.empty(), detail};
}

// --- 10 -----------------------------------------------------------------------

Outcome timing_shape() {
  model::TransformerConfig tc;
  tc.max_in_len = 20;
  tc.max_out_len = 60;
  tc.src_vocab = 800;
  tc.tgt_vocab = 1000;
  model::Transformer tfm(tc);
  model::GruConfig gc;
  gc.max_in_len = 20;
  gc.max_out_len = 60;
  gc.src_vocab = 800;
  gc.tgt_vocab = 1000;
  model::GruSeq2Seq gru(gc);
  pipeline::BenchOptions opt;
  const auto rows = pipeline::bench_models(tfm, gru, opt);
  const double rt = pipeline::growth_ratio(rows, "tfm");
  const double rg = pipeline::growth_ratio(rows, "gru");
  std::string detail = "t(20)/t(5): tfm " + fmt("%.2f", rt) + ", gru " + fmt("%.2f", rg) + "; ms/step";
  for (const auto& r : rows) detail += " " + r.model + "@" + std::to_string(r.input_len) + "=" + fmt("%.1f", r.train_step_ms);
  return {rt < rg, detail};
}

struct Criterion {
  int id;
  const char* name;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  g_work = fs::temp_directory_path() / "mmseq-acceptance";
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--work-dir" && i + 1 < argc) {
      g_work = argv[++i];
    } else {
      try {
        only.insert(static_cast<int>(parse_int(a)));
      } catch (const Error&) {
        std::fprintf(stderr, "usage: acceptance [--work-dir DIR] [criterion ...]\n");
        return 2;
      }
    }
  }
  fs::create_directories(g_work);

  const std::vector<Criterion> criteria{
      {1, "gradient fidelity", gradient_fidelity},
      {2, "viterbi optimality", viterbi_optimality},
      {3, "hmm zero-noise recovery", hmm_zero_noise},
      {4, "split/merge round trip", split_merge_round_trip},
      {5, "metric oracles", metric_oracles},
      {6, "overfit capability", overfit_capability},
      {7, "benchmark ordering", benchmark_ordering},
      {8, "noise calibration", noise_calibration},
      {9, "determinism", determinism},
      {10, "timing shape", timing_shape},
  };
  int failures = 0;
  for (const Criterion& c : criteria) {
    if (!only.empty() && !only.count(c.id)) continue;
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::printf("criterion %2d %-24s %s  %s\n", c.id, c.name, o.pass ? "PASS" : "FAIL", o.detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
