#pragma once

// Experiment stages behind the command-line tool. Each stage reads its
// inputs from and writes its outputs to one run directory, together with the
// resolved configuration and a manifest of input/output digests.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "mmseq/geo.hpp"
#include "mmseq/hmm.hpp"
#include "mmseq/metrics.hpp"
#include "mmseq/prep.hpp"
#include "mmseq/rnn.hpp"
#include "mmseq/simulate.hpp"
#include "mmseq/transformer.hpp"

namespace mmseq::pipeline {

enum class ModelKind { kTransformer, kGru, kNaive };

/// "tfm", "gru" or "naive"; throws ConfigError otherwise.
ModelKind parse_model_kind(std::string_view text);
std::string to_string(ModelKind kind);

/// Flat key=value configuration over a fixed key set with defaults.
class RunConfig {
 public:
  RunConfig();

  /// Applies `key = value` lines; '#' starts a comment. Unknown keys and
  /// malformed values throw ConfigError naming `origin` and the line.
  void load(std::string_view text, const std::string& origin = "config");
  void load_file(const std::filesystem::path& path);
  void set(const std::string& key, const std::string& value);

  const std::string& get(const std::string& key) const;
  long long get_int(const std::string& key) const;
  double get_double(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  /// All keys, sorted, one `key=value` per line.
  std::string resolved() const;
  static std::vector<std::string> keys();

  std::uint64_t seed() const { return static_cast<std::uint64_t>(get_int("seed")); }
  sim::MapSpec map_spec() const;
  sim::NoiseModel noise() const;
  sim::SimConfig sim_config() const;
  hmm::HmmParams hmm_params() const;
  geo::GridSpec grid() const;
  prep::SplitSpec split_spec(ModelKind kind) const;
  model::TransformerConfig transformer(int src_vocab, int tgt_vocab) const;
  model::GruConfig gru(int src_vocab, int tgt_vocab) const;
  model::TrainConfig train(ModelKind kind) const;

 private:
  std::map<std::string, std::string> values_;
};

struct Context {
  RunConfig config;
  std::filesystem::path dir;
  /// Progress messages; may be empty.
  std::function<void(const std::string&)> log;
};

/// Artifact names inside a run directory.
namespace files {
inline constexpr const char* kMap = "map.txt";
inline constexpr const char* kDataset = "dataset.jsonl";
inline constexpr const char* kLabels = "labels.jsonl";
inline constexpr const char* kSplit = "split.jsonl";
inline constexpr const char* kGridVocab = "vocab.grid.txt";
inline constexpr const char* kSegmentVocab = "vocab.segment.txt";
inline constexpr const char* kGeo = "routes.geojson";
inline constexpr const char* kBench = "bench.csv";
std::string train_fragments(ModelKind kind);
std::string test_fragments(ModelKind kind);
std::string best_checkpoint(ModelKind kind);
std::string epoch_checkpoint(ModelKind kind, int epoch);
std::string train_log(ModelKind kind);
std::string predictions(ModelKind kind);
std::string eval_prefix(ModelKind kind);
}  // namespace files

struct DecodeOptions {
  bool beam = false;
  int beam_width = 4;
};
DecodeOptions decode_options(const RunConfig& config);

void run_gen_map(const Context& ctx);
void run_simulate(const Context& ctx);
void run_match_hmm(const Context& ctx);
void run_prepare(const Context& ctx);
model::TrainResult run_train(const Context& ctx, ModelKind kind);
void run_infer(const Context& ctx, ModelKind kind, const DecodeOptions& decode);
metrics::EvalReport run_evaluate(const Context& ctx, ModelKind kind);
void run_export_geo(const Context& ctx);

/// Nearest segment per GPS point (ties broken by direction of travel),
/// consecutive repeats collapsed; points
/// with no segment within `radius` are skipped.
geo::SegmentRoute naive_route(const geo::Trajectory& points, const geo::SpatialIndex& index, double radius);

/// Extra training fragments: the trajectory restarted at each interior
/// point s (points [s, n), route from the segment under point s), split as
/// usual. Point and segment ranges refer to the full trajectory.
std::vector<prep::Fragment> suffix_fragments(const prep::SplitSource& source, const prep::SplitSpec& spec);

/// Point windows for inference: max_in points with `overlap_points` shared,
/// independent of any route. Targets are empty.
std::vector<prep::Fragment> split_for_inference(std::int64_t traj_id, const std::vector<prep::TokenId>& inputs,
                                                const prep::SplitSpec& spec);

// --- timing ------------------------------------------------------------------

struct BenchRow {
  std::string model;
  int input_len = 0;
  double train_step_ms = 0.0;  // median over repeats
  double infer_ms = 0.0;       // per trajectory, median over repeats
};

struct BenchOptions {
  std::vector<int> buckets{5, 10, 20};
  int repeats = 3;
  int steps = 3;  // optimizer steps timed per repeat
  int batch_size = 16;
  /// Decoder targets per input point.
  int targets_per_point = 3;
  std::uint64_t seed = 1;
};

/// Times training steps and greedy inference for each model and input
/// length. Models are trained in place on synthetic batches.
std::vector<BenchRow> bench_models(model::Seq2SeqModel& tfm, model::Seq2SeqModel& gru, const BenchOptions& options);
/// t(longest bucket) / t(shortest bucket) of train_step_ms for one model.
double growth_ratio(const std::vector<BenchRow>& rows, const std::string& model);
std::string format_bench_csv(const std::vector<BenchRow>& rows);
/// Loads both best checkpoints from the run directory and writes bench.csv.
std::vector<BenchRow> run_bench(const Context& ctx);

}  // namespace mmseq::pipeline
