#include <algorithm>
#include <filesystem>
#include <map>
#include <set>

#include "../support/fixtures.hpp"
#include "doctest.h"
#include "mmseq/error.hpp"
#include "mmseq/pipeline.hpp"
#include "mmseq/records.hpp"
#include "mmseq/text.hpp"

using namespace mmseq;
using namespace mmseq::pipeline;
namespace fs = std::filesystem;

namespace {

const char* kTinyConfig = R"(
seed = 11
map.cols = 5
map.rows = 5
sim.trajectories = 60
data.test_fraction = 0.2
tfm.d_emb = 16
tfm.d_ff = 32
tfm.blocks = 1
tfm.heads = 2
tfm.epochs = 2
tfm.batch_size = 16
gru.d_emb = 16
gru.hidden = 16
gru.epochs = 2
gru.batch_size = 16
)";

Context tiny_context(const fs::path& dir) {
  Context ctx;
  ctx.config.load(kTinyConfig, "tiny");
  ctx.dir = dir;
  return ctx;
}

void run_all(const Context& ctx) {
  run_gen_map(ctx);
  run_simulate(ctx);
  run_match_hmm(ctx);
  run_prepare(ctx);
  for (const ModelKind k : {ModelKind::kTransformer, ModelKind::kGru}) {
    run_train(ctx, k);
    run_infer(ctx, k, decode_options(ctx.config));
    run_evaluate(ctx, k);
  }
  run_infer(ctx, ModelKind::kNaive, {});
  run_evaluate(ctx, ModelKind::kNaive);
  run_export_geo(ctx);
}

std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const std::string rel = fs::relative(e.path(), dir).string();
    if (rel.rfind("timing.", 0) == 0) continue;
    out[rel] = read_file(e.path());
  }
  return out;
}

}  // namespace

TEST_CASE("run config: defaults, overrides and rejection") {
  RunConfig c;
  CHECK(c.get_int("seed") == 1);
  CHECK(c.get_double("noise.sigma_m") == 15.0);
  c.load("# comment\nseed = 42   # trailing\n\nmap.cols=3\n", "t");
  CHECK(c.seed() == 42);
  CHECK(c.map_spec().cols == 3);
  CHECK_THROWS_AS(c.load("bogus.key = 1\n", "t"), ConfigError);
  CHECK_THROWS_AS(c.load("seed = abc\n", "t"), ConfigError);
  CHECK_THROWS_AS(c.load("seed\n", "t"), ConfigError);
  try {
    c.load("seed = 1\nnope = 2\n", "file.conf");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("file.conf:2") != std::string::npos);
  }
  CHECK_THROWS_AS(c.set("train.resume", "maybe"), ConfigError);
  c.set("train.resume", "true");
  CHECK(c.get_bool("train.resume"));
}

TEST_CASE("run config: resolved text reloads to the same values") {
  RunConfig a;
  a.load("seed = 5\nnoise.hotspots = 1,2,3;4,5,1.5\n");
  RunConfig b;
  b.load(a.resolved());
  CHECK(a.resolved() == b.resolved());
  const auto keys = RunConfig::keys();
  CHECK(std::is_sorted(keys.begin(), keys.end()));
  const sim::NoiseModel n = a.noise();
  REQUIRE(n.hotspots.size() == 2);
  CHECK(n.hotspots[1].multiplier == doctest::Approx(1.5));
  RunConfig bad;
  bad.set("noise.hotspots", "1,2");
  CHECK_THROWS_AS(bad.noise(), ConfigError);
}

TEST_CASE("run config: sub-seeds differ per stage and follow the root") {
  RunConfig a, b;
  b.set("seed", "2");
  CHECK(a.map_spec().seed != a.sim_config().seed);
  CHECK(a.map_spec().seed != b.map_spec().seed);
  CHECK(a.train(ModelKind::kTransformer).seed != a.train(ModelKind::kGru).seed);
  CHECK_THROWS_AS(a.train(ModelKind::kNaive), ConfigError);
}

TEST_CASE("model kind names") {
  for (const ModelKind k : {ModelKind::kTransformer, ModelKind::kGru, ModelKind::kNaive}) {
    CHECK(parse_model_kind(to_string(k)) == k);
  }
  CHECK_THROWS_AS(parse_model_kind("lstm"), ConfigError);
}

TEST_CASE("records: round trips and header checks") {
  records::TrajectoryRecord t{3, {{1.5, 2.5, 0.0}, {3.0, 4.0, 30.0}}, {4, 5}, {0, 1}};
  const auto back = records::read_dataset(records::write_dataset({t}), "d");
  REQUIRE(back.size() == 1);
  CHECK(back[0].traj_id == 3);
  CHECK(back[0].points[1].y == 4.0);
  CHECK(back[0].true_route == t.true_route);

  records::PredictionRecord p{9, {1, 2, 3}, {{1, 2}, {2, 3}}, 1, 2};
  const auto pb = records::read_predictions(records::write_predictions({p}), "p");
  REQUIRE(pb.size() == 1);
  CHECK(pb[0].route == p.route);
  CHECK(pb[0].fragments == p.fragments);
  CHECK(pb[0].discontinuities == 1);

  records::SplitRecord s{{1, 2}, {3}};
  const auto sb = records::read_split(records::write_split(s), "s");
  CHECK(sb.train == s.train);
  CHECK(sb.test == s.test);

  std::string text = records::write_split(s);
  CHECK_THROWS_AS(records::read_predictions(text, "s"), ValidationError);
  text.replace(text.find("\"version\":1"), 11, "\"version\":2");
  CHECK_THROWS_AS(records::read_split(text, "s"), ValidationError);
  CHECK_THROWS_AS(records::read_split("", "s"), ValidationError);
}

TEST_CASE("split_for_inference covers every point with bounded windows") {
  std::vector<prep::TokenId> in;
  for (int i = 0; i < 23; ++i) in.push_back(4 + i);
  prep::SplitSpec spec;
  spec.max_in = 8;
  spec.overlap_points = 2;
  const auto frags = split_for_inference(5, in, spec);
  REQUIRE(frags.size() >= 3);
  CHECK(frags.front().point_begin == 0);
  CHECK(frags.back().point_end == static_cast<int>(in.size()) - 1);
  for (std::size_t i = 0; i < frags.size(); ++i) {
    CHECK(frags[i].traj_id == 5);
    CHECK(frags[i].targets.empty());
    CHECK(frags[i].inputs.size() <= 8);
    if (i > 0) CHECK(frags[i - 1].point_end - frags[i].point_begin + 1 == 2);
  }
}

TEST_CASE("naive route follows points placed on segment midpoints") {
  const geo::RoadGraph g = testing::lattice(4, 4, 100.0);
  const geo::SpatialIndex index(g);
  // East along row 0, then north along column 3.
  const geo::Trajectory pts{{50, 0, 0}, {150, 0, 30}, {250, 0, 60}, {300, 50, 90}, {300, 150, 120}};
  const geo::SegmentRoute r = naive_route(pts, index, 30.0);
  REQUIRE(r.size() == 5);
  for (std::size_t i = 0; i < r.size(); ++i) {
    const geo::Segment& s = g.segment(r[i]);
    const geo::Point a = g.position(s.from), b = g.position(s.to);
    CHECK(((a.x + b.x) / 2.0) == doctest::Approx(pts[i].x));
    CHECK(((a.y + b.y) / 2.0) == doctest::Approx(pts[i].y));
    if (i < 3) CHECK(b.x > a.x);
    else CHECK(b.y > a.y);
  }
  CHECK(naive_route({{50, 500, 0}}, index, 30.0).empty());
}

TEST_CASE("bench helpers") {
  std::vector<BenchRow> rows{{"tfm", 5, 2.0, 1.0}, {"tfm", 20, 3.0, 1.0}, {"gru", 5, 1.0, 1.0}, {"gru", 20, 4.0, 1.0}};
  CHECK(growth_ratio(rows, "tfm") == doctest::Approx(1.5));
  CHECK(growth_ratio(rows, "gru") == doctest::Approx(4.0));
  CHECK_THROWS_AS(growth_ratio(rows, "none"), ValidationError);
  const std::string csv = format_bench_csv(rows);
  CHECK(csv.rfind("# mmseq.bench v1\nmodel,input_len,", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 6);
}

TEST_CASE("end to end on a tiny config, deterministic across runs") {
  testing::TempDir a("e2e-a"), b("e2e-b");
  const Context ca = tiny_context(a.path());
  run_all(ca);
  for (const char* f : {"map.txt", "dataset.jsonl", "labels.jsonl", "split.jsonl", "vocab.grid.txt",
                        "vocab.segment.txt", "routes.geojson", "model.tfm.best.ckpt", "model.gru.best.ckpt",
                        "predictions.tfm.jsonl", "predictions.naive.jsonl", "eval.tfm.kv", "eval.gru.csv",
                        "manifest.prepare.json", "config.train.tfm.resolved", "train.gru.csv",
                        "checkpoints/tfm/epoch-001.ckpt"}) {
    CHECK_MESSAGE(fs::exists(a.path() / f), f);
  }
  const std::string kv = read_file(a.path() / "eval.tfm.kv");
  for (const char* key : {"acc1", "acc2", "jaccard", "bleu"}) CHECK(kv.find(key) != std::string::npos);

  run_all(tiny_context(b.path()));
  const auto sa = snapshot(a.path());
  const auto sb = snapshot(b.path());
  REQUIRE(sa.size() == sb.size());
  for (const auto& [name, content] : sa) {
    REQUIRE(sb.count(name));
    CHECK_MESSAGE(sb.at(name) == content, name);
  }

  SUBCASE("re-running a stage in place reproduces its outputs") {
    run_infer(ca, ModelKind::kTransformer, decode_options(ca.config));
    CHECK(read_file(a.path() / "predictions.tfm.jsonl") == sa.at("predictions.tfm.jsonl"));
    CHECK(read_file(a.path() / "manifest.infer.tfm.json") == sa.at("manifest.infer.tfm.json"));
  }

  SUBCASE("beam decoding runs and writes predictions for every test trajectory") {
    run_infer(ca, ModelKind::kGru, {true, 3});
    const auto preds = records::read_predictions(read_file(a.path() / "predictions.gru.jsonl"), "p");
    const auto split = records::read_split(read_file(a.path() / "split.jsonl"), "s");
    CHECK(preds.size() == split.test.size());
  }

  SUBCASE("predictions equal to the labels score 1 on every metric") {
    const auto labels = records::read_labels(read_file(a.path() / "labels.jsonl"), "l");
    const auto split = records::read_split(read_file(a.path() / "split.jsonl"), "s");
    const std::set<std::int64_t> test(split.test.begin(), split.test.end());
    std::vector<records::PredictionRecord> preds;
    for (const auto& l : labels) {
      if (test.count(l.trajectory.traj_id)) preds.push_back({l.trajectory.traj_id, l.hmm_route, {l.hmm_route}, 0, 0});
    }
    write_file_atomic(a.path() / "predictions.naive.jsonl", records::write_predictions(preds));
    const metrics::EvalReport r = run_evaluate(ca, ModelKind::kNaive);
    CHECK(r.acc1 == 1.0);
    CHECK(r.acc2 == 1.0);
    CHECK(r.jaccard == 1.0);
    CHECK(r.bleu == 1.0);
  }

  SUBCASE("a failing stage leaves no partial outputs") {
    auto preds = records::read_predictions(read_file(a.path() / "predictions.naive.jsonl"), "p");
    preds.pop_back();
    preds.push_back({999999, {1}, {{1}}, 0, 0});
    write_file_atomic(a.path() / "predictions.naive.jsonl", records::write_predictions(preds));
    fs::remove(a.path() / "eval.naive.txt");
    fs::remove(a.path() / "eval.naive.kv");
    try {
      run_evaluate(ca, ModelKind::kNaive);
      FAIL("expected ValidationError");
    } catch (const ValidationError& e) {
      CHECK(std::string(e.what()).find("999999") != std::string::npos);
    }
    CHECK_FALSE(fs::exists(a.path() / "eval.naive.txt"));
    CHECK_FALSE(fs::exists(a.path() / "eval.naive.kv"));
  }

  SUBCASE("bench on the trained checkpoints reports both models per bucket") {
    Context cb = ca;
    cb.config.set("bench.repeats", "1");
    cb.config.set("bench.steps", "1");
    cb.config.set("bench.batch_size", "2");
    const auto rows = run_bench(cb);
    CHECK(rows.size() == 6);
    CHECK(fs::exists(a.path() / "bench.csv"));
  }
}

TEST_CASE("stages report missing inputs and resume picks up the last epoch") {
  testing::TempDir d("stages");
  Context ctx = tiny_context(d.path());
  CHECK_THROWS_AS(run_simulate(ctx), IoError);
  CHECK_FALSE(fs::exists(d.path() / "dataset.jsonl"));
  run_gen_map(ctx);
  run_simulate(ctx);
  run_match_hmm(ctx);
  run_prepare(ctx);
  CHECK_THROWS_AS(run_bench(ctx), IoError);

  ctx.config.set("gru.epochs", "3");
  run_train(ctx, ModelKind::kGru);
  const std::string full_best = read_file(d.path() / "model.gru.best.ckpt");
  const std::string full_log = read_file(d.path() / "train.gru.csv");
  const std::string epoch2 = read_file(d.path() / "checkpoints/gru/epoch-002.ckpt");

  fs::remove(d.path() / "checkpoints/gru/epoch-002.ckpt");
  ctx.config.set("train.resume", "true");
  run_train(ctx, ModelKind::kGru);
  CHECK(read_file(d.path() / "checkpoints/gru/epoch-002.ckpt") == epoch2);
  CHECK(read_file(d.path() / "model.gru.best.ckpt") == full_best);
  CHECK(read_file(d.path() / "train.gru.csv") == full_log);
}

TEST_CASE("suffix fragments restart the route at each interior point") {
  prep::SplitSource src;
  src.traj_id = 4;
  src.inputs = {10, 11, 12, 13};
  src.route = {20, 21, 22, 23, 24};
  src.alignment = {0, 1, 3, 4};
  const auto frags = suffix_fragments(src, prep::SplitSpec{20, 100, 2});
  REQUIRE(frags.size() == 2);
  CHECK(frags[0].inputs == std::vector<prep::TokenId>{11, 12, 13});
  CHECK(frags[0].targets == std::vector<prep::TokenId>{21, 22, 23, 24});
  CHECK(frags[0].point_begin == 1);
  CHECK(frags[0].seg_begin == 1);
  CHECK(frags[1].inputs == std::vector<prep::TokenId>{12, 13});
  CHECK(frags[1].targets == std::vector<prep::TokenId>{23, 24});
  CHECK(frags[1].point_end == 3);
  CHECK(frags[1].seg_end == 4);
  src.inputs.resize(2);
  src.alignment.resize(2);
  CHECK(suffix_fragments(src, prep::SplitSpec{}).empty());
}
