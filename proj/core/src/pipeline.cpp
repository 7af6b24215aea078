#include "mmseq/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <limits>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "mmseq/checkpoint.hpp"
#include "mmseq/error.hpp"
#include "mmseq/map_io.hpp"
#include "mmseq/records.hpp"
#include "mmseq/text.hpp"

#ifndef MMSEQ_VERSION
#define MMSEQ_VERSION "0.0.0"
#endif

namespace mmseq::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;
using prep::TokenId;

ModelKind parse_model_kind(std::string_view text) {
  if (text == "tfm") return ModelKind::kTransformer;
  if (text == "gru") return ModelKind::kGru;
  if (text == "naive") return ModelKind::kNaive;
  throw ConfigError("unknown model '" + std::string(text) + "' (expected tfm, gru or naive)");
}

std::string to_string(ModelKind kind) {
  switch (kind) {
    case ModelKind::kTransformer: return "tfm";
    case ModelKind::kGru: return "gru";
    case ModelKind::kNaive: return "naive";
  }
  return "?";
}

// --- configuration -----------------------------------------------------------

namespace {

enum class KeyType { kInt, kDouble, kBool, kText };

struct KeySpec {
  const char* key;
  KeyType type;
  const char* fallback;
};

constexpr KeySpec kKeys[] = {
    {"seed", KeyType::kInt, "1"},
    {"map.cols", KeyType::kInt, "8"},
    {"map.rows", KeyType::kInt, "8"},
    {"map.block_m", KeyType::kDouble, "80"},
    {"map.removal_prob", KeyType::kDouble, "0"},
    {"map.oneway_prob", KeyType::kDouble, "0"},
    {"noise.sigma_m", KeyType::kDouble, "15"},
    {"noise.hotspots", KeyType::kText, ""},
    {"sim.trajectories", KeyType::kInt, "200"},
    {"sim.interval_s", KeyType::kDouble, "30"},
    {"sim.speed_mps", KeyType::kDouble, "8"},
    {"sim.min_segments", KeyType::kInt, "8"},
    {"sim.max_segments", KeyType::kInt, "30"},
    {"hmm.sigma_z", KeyType::kDouble, "15"},
    {"hmm.beta", KeyType::kDouble, "50"},
    {"hmm.radius_m", KeyType::kDouble, "60"},
    {"hmm.max_candidates", KeyType::kInt, "8"},
    {"grid.cell_m", KeyType::kDouble, "45.72"},
    {"data.test_fraction", KeyType::kDouble, "0.1"},
    {"data.truth", KeyType::kText, "hmm"},
    {"prep.overlap", KeyType::kInt, "2"},
    {"prep.suffix_windows", KeyType::kBool, "false"},
    {"prep.tfm.max_in", KeyType::kInt, "20"},
    {"prep.tfm.max_out", KeyType::kInt, "100"},
    {"prep.gru.max_in", KeyType::kInt, "8"},
    {"prep.gru.max_out", KeyType::kInt, "50"},
    {"tfm.d_emb", KeyType::kInt, "64"},
    {"tfm.d_ff", KeyType::kInt, "256"},
    {"tfm.blocks", KeyType::kInt, "2"},
    {"tfm.heads", KeyType::kInt, "4"},
    {"tfm.dropout", KeyType::kDouble, "0"},
    {"tfm.lr", KeyType::kDouble, "0.0005"},
    {"tfm.epochs", KeyType::kInt, "20"},
    {"tfm.batch_size", KeyType::kInt, "32"},
    {"gru.d_emb", KeyType::kInt, "64"},
    {"gru.hidden", KeyType::kInt, "64"},
    {"gru.lr", KeyType::kDouble, "0.0005"},
    {"gru.epochs", KeyType::kInt, "20"},
    {"gru.batch_size", KeyType::kInt, "32"},
    {"train.val_fraction", KeyType::kDouble, "0.05"},
    {"train.patience", KeyType::kInt, "3"},
    {"train.max_steps", KeyType::kInt, "0"},
    {"train.resume", KeyType::kBool, "false"},
    {"decode.mode", KeyType::kText, "greedy"},
    {"decode.beam_width", KeyType::kInt, "4"},
    {"decode.chunk", KeyType::kInt, "64"},
    {"export.max_trajectories", KeyType::kInt, "20"},
    {"bench.buckets", KeyType::kText, "5,10,20"},
    {"bench.repeats", KeyType::kInt, "3"},
    {"bench.steps", KeyType::kInt, "3"},
    {"bench.batch_size", KeyType::kInt, "16"},
};

const KeySpec* find_key(const std::string& key) {
  for (const KeySpec& k : kKeys) {
    if (key == k.key) return &k;
  }
  return nullptr;
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

bool parse_bool(const std::string& v, bool& out) {
  if (v == "true" || v == "1" || v == "yes") return out = true, true;
  if (v == "false" || v == "0" || v == "no") return out = false, true;
  return false;
}

std::vector<int> parse_int_list(const std::string& text, const std::string& key) {
  std::vector<int> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(static_cast<int>(parse_int(trim(item))));
    } catch (const Error&) {
      throw ConfigError(key + ": expected comma-separated integers, got '" + text + "'");
    }
  }
  if (out.empty()) throw ConfigError(key + ": empty list");
  return out;
}

}  // namespace

RunConfig::RunConfig() {
  for (const KeySpec& k : kKeys) values_[k.key] = k.fallback;
}

std::vector<std::string> RunConfig::keys() {
  std::vector<std::string> out;
  for (const KeySpec& k : kKeys) out.emplace_back(k.key);
  std::sort(out.begin(), out.end());
  return out;
}

void RunConfig::set(const std::string& key, const std::string& value) {
  const KeySpec* spec = find_key(key);
  if (!spec) throw ConfigError("unknown config key '" + key + "'");
  try {
    switch (spec->type) {
      case KeyType::kInt: parse_int(value); break;
      case KeyType::kDouble: parse_double(value); break;
      case KeyType::kBool: {
        bool b = false;
        if (!parse_bool(value, b)) throw ConfigError("");
        break;
      }
      case KeyType::kText: break;
    }
  } catch (const Error&) {
    throw ConfigError("config key '" + key + "': invalid value '" + value + "'");
  }
  values_[key] = value;
}

void RunConfig::load(std::string_view text, const std::string& origin) {
  std::size_t line_no = 0, pos = 0;
  while (pos <= text.size()) {
    const std::size_t nl = text.find('\n', pos);
    std::string line(text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos));
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(origin + ":" + std::to_string(line_no) + ": expected key = value");
    }
    try {
      set(trim(std::string_view(line).substr(0, eq)), trim(std::string_view(line).substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
}

void RunConfig::load_file(const fs::path& path) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const IoError& e) {
    throw ConfigError(std::string("cannot read config: ") + e.what());
  }
  load(text, path.string());
}

const std::string& RunConfig::get(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
  return it->second;
}

long long RunConfig::get_int(const std::string& key) const { return parse_int(get(key)); }
double RunConfig::get_double(const std::string& key) const { return parse_double(get(key)); }
bool RunConfig::get_bool(const std::string& key) const {
  bool b = false;
  parse_bool(get(key), b);
  return b;
}

std::string RunConfig::resolved() const {
  std::string out;
  for (const auto& [k, v] : values_) out += k + "=" + v + "\n";
  return out;
}

sim::MapSpec RunConfig::map_spec() const {
  sim::MapSpec m;
  m.cols = static_cast<int>(get_int("map.cols"));
  m.rows = static_cast<int>(get_int("map.rows"));
  m.block_m = get_double("map.block_m");
  m.removal_prob = get_double("map.removal_prob");
  m.oneway_prob = get_double("map.oneway_prob");
  m.seed = derive_seed(seed(), "map");
  return m;
}

sim::NoiseModel RunConfig::noise() const {
  sim::NoiseModel n;
  n.base_sigma_m = get_double("noise.sigma_m");
  n.grid = grid();
  std::stringstream ss(get("noise.hotspots"));
  std::string item;
  while (std::getline(ss, item, ';')) {
    if (trim(item).empty()) continue;
    std::stringstream parts(item);
    std::string c, r, m;
    if (!std::getline(parts, c, ',') || !std::getline(parts, r, ',') || !std::getline(parts, m, ',')) {
      throw ConfigError("noise.hotspots: expected 'col,row,multiplier;...', got '" + item + "'");
    }
    try {
      n.hotspots.push_back({{parse_int(trim(c)), parse_int(trim(r))}, parse_double(trim(m))});
    } catch (const ValidationError&) {
      throw ConfigError("noise.hotspots: bad number in '" + item + "'");
    }
  }
  n.validate();
  return n;
}

sim::SimConfig RunConfig::sim_config() const {
  sim::SimConfig s;
  s.sample_interval_s = get_double("sim.interval_s");
  s.speed_mps = get_double("sim.speed_mps");
  s.trajectories = static_cast<int>(get_int("sim.trajectories"));
  s.min_route_segments = static_cast<int>(get_int("sim.min_segments"));
  s.max_route_segments = static_cast<int>(get_int("sim.max_segments"));
  s.seed = derive_seed(seed(), "simulate");
  s.validate();
  return s;
}

hmm::HmmParams RunConfig::hmm_params() const {
  hmm::HmmParams h;
  h.sigma_z = get_double("hmm.sigma_z");
  h.beta = get_double("hmm.beta");
  h.candidate_radius = get_double("hmm.radius_m");
  h.max_candidates = static_cast<int>(get_int("hmm.max_candidates"));
  h.validate();
  return h;
}

geo::GridSpec RunConfig::grid() const {
  geo::GridSpec g;
  g.cell_size = get_double("grid.cell_m");
  if (!(g.cell_size > 0.0)) throw ConfigError("grid.cell_m must be positive");
  return g;
}

prep::SplitSpec RunConfig::split_spec(ModelKind kind) const {
  const std::string m = kind == ModelKind::kGru ? "gru" : "tfm";
  prep::SplitSpec s;
  s.max_in = static_cast<int>(get_int("prep." + m + ".max_in"));
  s.max_out = static_cast<int>(get_int("prep." + m + ".max_out"));
  s.overlap_points = static_cast<int>(get_int("prep.overlap"));
  s.validate();
  return s;
}

model::TransformerConfig RunConfig::transformer(int src_vocab, int tgt_vocab) const {
  model::TransformerConfig c;
  c.d_emb = static_cast<int>(get_int("tfm.d_emb"));
  c.d_ff = static_cast<int>(get_int("tfm.d_ff"));
  c.blocks = static_cast<int>(get_int("tfm.blocks"));
  c.heads = static_cast<int>(get_int("tfm.heads"));
  c.dropout = get_double("tfm.dropout");
  const prep::SplitSpec s = split_spec(ModelKind::kTransformer);
  c.max_in_len = s.max_in;
  c.max_out_len = s.max_out;
  c.src_vocab = src_vocab;
  c.tgt_vocab = tgt_vocab;
  c.seed = derive_seed(seed(), "tfm.init");
  c.validate();
  return c;
}

model::GruConfig RunConfig::gru(int src_vocab, int tgt_vocab) const {
  model::GruConfig c;
  c.d_emb = static_cast<int>(get_int("gru.d_emb"));
  c.hidden = static_cast<int>(get_int("gru.hidden"));
  const prep::SplitSpec s = split_spec(ModelKind::kGru);
  c.max_in_len = s.max_in;
  c.max_out_len = s.max_out;
  c.src_vocab = src_vocab;
  c.tgt_vocab = tgt_vocab;
  c.seed = derive_seed(seed(), "gru.init");
  c.validate();
  return c;
}

model::TrainConfig RunConfig::train(ModelKind kind) const {
  if (kind == ModelKind::kNaive) throw ConfigError("the naive baseline has nothing to train");
  const std::string m = to_string(kind);
  model::TrainConfig t;
  t.epochs = static_cast<int>(get_int(m + ".epochs"));
  t.batch_size = static_cast<int>(get_int(m + ".batch_size"));
  t.adam.lr = get_double(m + ".lr");
  t.seed = derive_seed(seed(), "train." + m);
  t.val_fraction = get_double("train.val_fraction");
  t.patience = static_cast<int>(get_int("train.patience"));
  t.max_steps = static_cast<long>(get_int("train.max_steps"));
  if (t.epochs <= 0 || t.batch_size <= 0 || !(t.adam.lr > 0.0)) {
    throw ConfigError(m + ": epochs, batch_size and lr must be positive");
  }
  return t;
}

DecodeOptions decode_options(const RunConfig& config) {
  DecodeOptions d;
  const std::string& mode = config.get("decode.mode");
  if (mode != "greedy" && mode != "beam") throw ConfigError("decode.mode must be greedy or beam");
  d.beam = mode == "beam";
  d.beam_width = static_cast<int>(config.get_int("decode.beam_width"));
  if (d.beam_width < 1) throw ConfigError("decode.beam_width must be at least 1");
  return d;
}

// --- file names ------------------------------------------------------------------

namespace files {
std::string train_fragments(ModelKind k) { return "fragments." + to_string(k) + ".train.jsonl"; }
std::string test_fragments(ModelKind k) { return "fragments." + to_string(k) + ".test.jsonl"; }
std::string best_checkpoint(ModelKind k) { return "model." + to_string(k) + ".best.ckpt"; }
std::string epoch_checkpoint(ModelKind k, int epoch) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "epoch-%03d.ckpt", epoch);
  return "checkpoints/" + to_string(k) + "/" + buf;
}
std::string train_log(ModelKind k) { return "train." + to_string(k) + ".csv"; }
std::string predictions(ModelKind k) { return "predictions." + to_string(k) + ".jsonl"; }
std::string eval_prefix(ModelKind k) { return "eval." + to_string(k); }
}  // namespace files

// --- stage bookkeeping ---------------------------------------------------------------

namespace {

// Tracks one stage's inputs and outputs. Outputs are written atomically; if
// the stage does not reach finish(), everything it wrote is removed.
class Stage {
 public:
  Stage(const Context& ctx, std::string name)
      : ctx_(ctx), name_(std::move(name)), start_(std::chrono::steady_clock::now()) {
    std::error_code ec;
    fs::create_directories(ctx_.dir, ec);
    if (ec) throw IoError("cannot create " + ctx_.dir.string() + ": " + ec.message());
    log("start " + name_);
  }
  Stage(const Stage&) = delete;
  Stage& operator=(const Stage&) = delete;

  ~Stage() {
    if (finished_) return;
    for (const auto& [file, digest] : outputs_) {
      std::error_code ec;
      fs::remove(ctx_.dir / file, ec);
    }
  }

  std::string read(const std::string& file) {
    const fs::path p = ctx_.dir / file;
    if (!fs::exists(p)) throw IoError("missing input " + p.string() + " (run the producing stage first)");
    std::string text = read_file(p);
    inputs_[file] = sha256_hex(text);
    return text;
  }

  bool exists(const std::string& file) const { return fs::exists(ctx_.dir / file); }

  void write(const std::string& file, const std::string& content) {
    const fs::path p = ctx_.dir / file;
    std::error_code ec;
    fs::create_directories(p.parent_path(), ec);
    write_file_atomic(p, content);
    outputs_[file] = sha256_hex(content);
  }

  void log(const std::string& msg) const {
    if (ctx_.log) ctx_.log(msg);
  }

  void finish() {
    const std::string resolved = ctx_.config.resolved();
    write("config." + name_ + ".resolved", "# mmseq.config v1\n" + resolved);
    std::string id_source = name_ + "\n" + resolved;
    for (const auto& [f, d] : inputs_) id_source += f + "=" + d + "\n";
    json manifest{{"format", "mmseq.manifest"},
                  {"version", records::kFormatVersion},
                  {"command", name_},
                  {"tool_version", MMSEQ_VERSION},
                  {"run_id", sha256_hex(id_source).substr(0, 16)},
                  {"inputs", inputs_},
                  {"outputs", outputs_}};
    const double seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    write_file_atomic(ctx_.dir / ("manifest." + name_ + ".json"), manifest.dump(2) + "\n");
    // Wall-clock time lives beside the manifest so the manifest stays reproducible.
    write_file_atomic(ctx_.dir / ("timing." + name_ + ".json"),
                      json{{"format", "mmseq.timing"}, {"version", records::kFormatVersion}, {"command", name_}, {"seconds", seconds}}.dump() + "\n");
    finished_ = true;
    log("done " + name_ + " in " + format_double(std::round(seconds * 100.0) / 100.0) + " s");
  }

 private:
  const Context& ctx_;
  std::string name_;
  std::chrono::steady_clock::time_point start_;
  std::map<std::string, std::string> inputs_, outputs_;
  bool finished_ = false;
};

geo::RoadGraph load_map(Stage& stage) { return geo::read_map(stage.read(files::kMap)); }

std::vector<records::LabelRecord> load_labels(Stage& stage) {
  return records::read_labels(stage.read(files::kLabels), files::kLabels);
}

bool use_hmm_truth(const RunConfig& config) {
  const std::string& t = config.get("data.truth");
  if (t != "hmm" && t != "true") throw ConfigError("data.truth must be hmm or true");
  return t == "hmm";
}

const geo::SegmentRoute& truth_route(const records::LabelRecord& r, bool hmm) {
  return hmm ? r.hmm_route : r.trajectory.true_route;
}

prep::Vocab load_vocab(Stage& stage, const char* file) { return prep::Vocab::parse(stage.read(file)); }

std::vector<TokenId> encode_points(const geo::Trajectory& points, const geo::GridSpec& grid,
                                   const prep::Vocab& vocab) {
  return prep::encode_input(points, grid, vocab).ids;
}

}  // namespace

// --- stages ------------------------------------------------------------------

void run_gen_map(const Context& ctx) {
  Stage stage(ctx, "gen-map");
  const geo::RoadGraph g = sim::gen_map(ctx.config.map_spec());
  stage.write(files::kMap, geo::write_map(g));
  stage.log("map: " + std::to_string(g.node_count()) + " nodes, " + std::to_string(g.segment_count()) + " segments");
  stage.finish();
}

void run_simulate(const Context& ctx) {
  Stage stage(ctx, "simulate");
  const geo::RoadGraph g = load_map(stage);
  const auto samples = sim::simulate(g, ctx.config.sim_config(), ctx.config.noise());
  std::vector<records::TrajectoryRecord> recs;
  recs.reserve(samples.size());
  for (const auto& s : samples) recs.push_back(records::to_record(s));
  stage.write(files::kDataset, records::write_dataset(recs));
  stage.log("simulated " + std::to_string(recs.size()) + " trajectories");
  stage.finish();
}

void run_match_hmm(const Context& ctx) {
  Stage stage(ctx, "match-hmm");
  const geo::RoadGraph g = load_map(stage);
  const auto data = records::read_dataset(stage.read(files::kDataset), files::kDataset);
  const geo::SpatialIndex index(g);
  hmm::Matcher matcher(g, index, ctx.config.hmm_params());
  std::vector<records::LabelRecord> labels;
  labels.reserve(data.size());
  std::size_t dropped = 0;
  for (const auto& t : data) {
    const hmm::MatchedRoute m = matcher.match_route(t.points);
    records::LabelRecord r;
    r.trajectory = t;
    r.hmm_route = m.route;
    r.hmm_alignment = m.alignment;
    r.hmm_points = m.observations;
    r.dropped_points = m.dropped;
    dropped += m.dropped.size();
    labels.push_back(std::move(r));
  }
  stage.write(files::kLabels, records::write_labels(labels));
  stage.log("labelled " + std::to_string(labels.size()) + " trajectories, " + std::to_string(dropped) +
            " points without candidates");
  stage.finish();
}

std::vector<prep::Fragment> split_for_inference(std::int64_t traj_id, const std::vector<TokenId>& inputs,
                                                const prep::SplitSpec& spec) {
  prep::SplitSource src;
  src.traj_id = traj_id;
  src.inputs = inputs;
  src.route = {prep::kUnk};
  src.alignment.assign(inputs.size(), 0);
  auto out = prep::split(src, spec);
  for (auto& f : out) {
    f.targets.clear();
    f.seg_begin = f.seg_end = 0;
    f.ambiguous_cut = false;
  }
  return out;
}

std::vector<prep::Fragment> suffix_fragments(const prep::SplitSource& source, const prep::SplitSpec& spec) {
  std::vector<prep::Fragment> out;
  for (std::size_t s = 1; s + 1 < source.inputs.size(); ++s) {
    const auto first = static_cast<std::size_t>(source.alignment[s]);
    prep::SplitSource sub;
    sub.traj_id = source.traj_id;
    sub.inputs.assign(source.inputs.begin() + static_cast<std::ptrdiff_t>(s), source.inputs.end());
    sub.route.assign(source.route.begin() + static_cast<std::ptrdiff_t>(first), source.route.end());
    for (std::size_t i = s; i < source.alignment.size(); ++i) {
      sub.alignment.push_back(source.alignment[i] - static_cast<int>(first));
    }
    for (auto& f : prep::split(sub, spec)) {
      f.point_begin += static_cast<int>(s);
      f.point_end += static_cast<int>(s);
      f.seg_begin += static_cast<int>(first);
      f.seg_end += static_cast<int>(first);
      out.push_back(std::move(f));
    }
  }
  return out;
}

void run_prepare(const Context& ctx) {
  Stage stage(ctx, "prepare");
  const RunConfig& cfg = ctx.config;
  const geo::RoadGraph g = load_map(stage);
  const auto labels = load_labels(stage);
  const bool hmm_truth = use_hmm_truth(cfg);
  const geo::GridSpec grid = cfg.grid();
  const bool suffix_windows = cfg.get_bool("prep.suffix_windows");

  // Trajectories whose label is empty (every point dropped) are unusable.
  std::vector<std::int64_t> ids;
  std::map<std::int64_t, const records::LabelRecord*> by_id;
  for (const auto& r : labels) {
    if (truth_route(r, hmm_truth).empty() || r.trajectory.points.empty()) continue;
    if (!by_id.emplace(r.trajectory.traj_id, &r).second) {
      throw ValidationError("duplicate traj_id " + std::to_string(r.trajectory.traj_id) + " in labels");
    }
    ids.push_back(r.trajectory.traj_id);
  }
  const double test_fraction = cfg.get_double("data.test_fraction");
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw ConfigError("data.test_fraction must be in (0, 1)");
  Rng rng(derive_seed(cfg.seed(), "split"));
  for (std::size_t i = ids.size(); i > 1; --i) std::swap(ids[i - 1], ids[rng.below(i)]);
  const auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(ids.size())));
  if (n_test == 0 || n_test >= ids.size()) throw ValidationError("too few trajectories for a train/test split");
  records::SplitRecord split;
  split.test.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_test));
  split.train.assign(ids.begin() + static_cast<std::ptrdiff_t>(n_test), ids.end());
  std::sort(split.test.begin(), split.test.end());
  std::sort(split.train.begin(), split.train.end());

  std::vector<geo::Trajectory> train_points;
  for (const auto id : split.train) train_points.push_back(by_id.at(id)->trajectory.points);
  const auto [grid_vocab, seg_vocab] = prep::build_vocabs(train_points, grid, g);

  for (const ModelKind kind : {ModelKind::kTransformer, ModelKind::kGru}) {
    const prep::SplitSpec spec = cfg.split_spec(kind);
    std::vector<prep::Fragment> train, test;
    std::size_t skipped = 0;
    for (const auto id : split.train) {
      const records::LabelRecord& r = *by_id.at(id);
      prep::SplitSource src;
      src.traj_id = id;
      if (hmm_truth) {
        geo::Trajectory matched;
        for (const std::size_t i : r.hmm_points) matched.push_back(r.trajectory.points.at(i));
        src.inputs = encode_points(matched, grid, grid_vocab);
        src.alignment = r.hmm_alignment;
      } else {
        src.inputs = encode_points(r.trajectory.points, grid, grid_vocab);
        src.alignment = r.trajectory.alignment;
      }
      src.route = prep::encode_route(truth_route(r, hmm_truth), seg_vocab).ids;
      try {
        for (auto& f : prep::split(src, spec)) train.push_back(std::move(f));
        if (suffix_windows) {
          for (auto& f : suffix_fragments(src, spec)) train.push_back(std::move(f));
        }
      } catch (const ValidationError& e) {
        ++skipped;
        stage.log(std::string("skip: ") + e.what());
      }
    }
    for (const auto id : split.test) {
      const records::LabelRecord& r = *by_id.at(id);
      for (auto& f : split_for_inference(id, encode_points(r.trajectory.points, grid, grid_vocab), spec)) {
        test.push_back(std::move(f));
      }
    }
    stage.write(files::train_fragments(kind), records::write_fragments(train));
    stage.write(files::test_fragments(kind), records::write_fragments(test));
    stage.log(to_string(kind) + ": " + std::to_string(train.size()) + " train fragments (" +
              std::to_string(skipped) + " trajectories skipped), " + std::to_string(test.size()) +
              " test fragments");
  }
  stage.write(files::kSplit, records::write_split(split));
  stage.write(files::kGridVocab, grid_vocab.serialize());
  stage.write(files::kSegmentVocab, seg_vocab.serialize());
  stage.finish();
}

namespace {

void require_learned(ModelKind kind) {
  if (kind == ModelKind::kNaive) throw ConfigError("the naive baseline has no trainable model");
}

std::unique_ptr<model::Seq2SeqModel> fresh_model(const RunConfig& cfg, ModelKind kind, int src, int tgt) {
  if (kind == ModelKind::kTransformer) return std::make_unique<model::Transformer>(cfg.transformer(src, tgt));
  return std::make_unique<model::GruSeq2Seq>(cfg.gru(src, tgt));
}

std::optional<int> latest_epoch(const fs::path& dir, ModelKind kind) {
  std::optional<int> best;
  for (int e = 0;; ++e) {
    if (!fs::exists(dir / files::epoch_checkpoint(kind, e))) break;
    best = e;
  }
  return best;
}

}  // namespace

model::TrainResult run_train(const Context& ctx, ModelKind kind) {
  require_learned(kind);
  Stage stage(ctx, "train." + to_string(kind));
  const RunConfig& cfg = ctx.config;
  const prep::Vocab grid_vocab = load_vocab(stage, files::kGridVocab);
  const prep::Vocab seg_vocab = load_vocab(stage, files::kSegmentVocab);
  const auto frags =
      records::read_fragments(stage.read(files::train_fragments(kind)), files::train_fragments(kind));
  std::vector<prep::Example> examples;
  examples.reserve(frags.size());
  for (const auto& f : frags) examples.push_back({f.inputs, f.targets});

  std::unique_ptr<model::Seq2SeqModel> model;
  model::TrainState state;
  const std::string log_header = "# mmseq.trainlog v1\nepoch,steps,train_loss,train_accuracy,val_loss,val_accuracy\n";
  std::string log_text = log_header;
  const std::optional<int> resume_from = cfg.get_bool("train.resume") ? latest_epoch(ctx.dir, kind) : std::nullopt;
  if (resume_from) {
    const std::string file = files::epoch_checkpoint(kind, *resume_from);
    const nn::Checkpoint ck = nn::parse_checkpoint(stage.read(file));
    model = model::model_from_checkpoint(ck);
    state = model::read_train_state(ck.hyper);
    if (stage.exists(files::train_log(kind))) {
      // Keep the header and the rows of epochs that already happened.
      const std::string old_log = stage.read(files::train_log(kind));
      if (old_log.rfind(log_header, 0) != 0) throw ValidationError(files::train_log(kind) + ": unexpected header");
      std::istringstream old(old_log.substr(log_header.size()));
      std::string line;
      for (int row = 0; row < state.next_epoch && std::getline(old, line); ++row) log_text += line + "\n";
    }
    stage.log("resuming " + to_string(kind) + " from " + file);
  } else {
    model = fresh_model(cfg, kind, static_cast<int>(grid_vocab.size()), static_cast<int>(seg_vocab.size()));
  }
  stage.log(to_string(kind) + ": " + std::to_string(model->params().scalar_count()) + " parameters, " +
            std::to_string(examples.size()) + " fragments");

  model::TrainHooks hooks;
  hooks.on_epoch = [&](const model::EpochStats& s, const model::TrainState& st, bool best) {
    nn::Checkpoint ck = model::model_to_checkpoint(*model, true);
    model::write_train_state(ck.hyper, st);
    const std::string bytes = nn::serialize_checkpoint(ck);
    stage.write(files::epoch_checkpoint(kind, s.epoch), bytes);
    if (best) stage.write(files::best_checkpoint(kind), bytes);
    log_text += std::to_string(s.epoch) + "," + std::to_string(s.steps) + "," + format_double(s.train_loss) + "," +
                format_double(s.train_accuracy) + "," + format_double(s.val_loss) + "," +
                format_double(s.val_accuracy) + "\n";
    stage.write(files::train_log(kind), log_text);
    char buf[160];
    std::snprintf(buf, sizeof buf, "%s epoch %d: loss %.4f acc %.4f | val loss %.4f acc %.4f%s",
                  to_string(kind).c_str(), s.epoch, s.train_loss, s.train_accuracy, s.val_loss, s.val_accuracy,
                  best ? " *" : "");
    stage.log(buf);
  };
  model::TrainResult result = model::train(*model, examples, cfg.train(kind), state, hooks);
  if (!stage.exists(files::best_checkpoint(kind))) throw ValidationError("training produced no checkpoint");
  stage.finish();
  return result;
}

geo::SegmentRoute naive_route(const geo::Trajectory& points, const geo::SpatialIndex& index, double radius) {
  const geo::RoadGraph& g = index.graph();
  geo::SegmentRoute out;
  for (std::size_t i = 0; i < points.size(); ++i) {
    const auto c = index.query(points[i].point(), radius);
    if (c.empty()) continue;
    // Equidistant candidates (a two-way street's twins) are ordered by how
    // well they point along the local direction of travel.
    const geo::Point from = points[i == 0 ? 0 : i - 1].point();
    const geo::Point to = points[i + 1 < points.size() ? i + 1 : i].point();
    geo::SegmentId pick = c.front().segment;
    double best_dot = -std::numeric_limits<double>::infinity();
    for (const auto& cand : c) {
      if (cand.distance > c.front().distance + 1e-9) break;
      const geo::Segment& s = g.segment(cand.segment);
      const geo::Point a = g.position(s.from), b = g.position(s.to);
      const double dot = (b.x - a.x) * (to.x - from.x) + (b.y - a.y) * (to.y - from.y);
      if (dot > best_dot) best_dot = dot, pick = cand.segment;
    }
    if (out.empty() || out.back() != pick) out.push_back(pick);
  }
  return out;
}

void run_infer(const Context& ctx, ModelKind kind, const DecodeOptions& decode) {
  Stage stage(ctx, "infer." + to_string(kind));
  const RunConfig& cfg = ctx.config;
  std::vector<records::PredictionRecord> preds;
  if (kind == ModelKind::kNaive) {
    const geo::RoadGraph g = load_map(stage);
    const geo::SpatialIndex index(g);
    const auto labels = load_labels(stage);
    const auto split = records::read_split(stage.read(files::kSplit), files::kSplit);
    const std::set<std::int64_t> test(split.test.begin(), split.test.end());
    const double radius = cfg.hmm_params().candidate_radius;
    for (const auto& r : labels) {
      if (!test.contains(r.trajectory.traj_id)) continue;
      records::PredictionRecord p;
      p.traj_id = r.trajectory.traj_id;
      p.route = naive_route(r.trajectory.points, index, radius);
      p.fragments = {p.route};
      preds.push_back(std::move(p));
    }
  } else {
    const prep::Vocab seg_vocab = load_vocab(stage, files::kSegmentVocab);
    const auto frags =
        records::read_fragments(stage.read(files::test_fragments(kind)), files::test_fragments(kind));
    const nn::Checkpoint ck = nn::parse_checkpoint(stage.read(files::best_checkpoint(kind)));
    auto model = model::model_from_checkpoint(ck);
    if (model->tag() != (kind == ModelKind::kTransformer ? "TFM" : "GRU")) {
      throw ValidationError(files::best_checkpoint(kind) + " holds a " + model->tag() + " model");
    }
    std::vector<std::vector<TokenId>> inputs;
    inputs.reserve(frags.size());
    for (const auto& f : frags) inputs.push_back(f.inputs);
    const auto chunk = static_cast<std::size_t>(std::max<long long>(1, cfg.get_int("decode.chunk")));
    const auto decoded = model::decode_all(*model, inputs, decode.beam, decode.beam_width, chunk);
    const int max_overlap = model->limits().max_out;
    for (std::size_t i = 0; i < frags.size();) {
      std::size_t j = i;
      std::vector<std::vector<TokenId>> tokens;
      records::PredictionRecord p;
      p.traj_id = frags[i].traj_id;
      for (; j < frags.size() && frags[j].traj_id == p.traj_id; ++j) {
        tokens.push_back(decoded[j].tokens);
        p.fragments.push_back(prep::decode_route(decoded[j].tokens, seg_vocab));
        p.truncated_fragments += decoded[j].truncated;
      }
      const prep::MergeResult merged = prep::merge(tokens, max_overlap);
      p.route = prep::decode_route(merged.route, seg_vocab);
      p.discontinuities = merged.discontinuities;
      preds.push_back(std::move(p));
      i = j;
    }
  }
  stage.write(files::predictions(kind), records::write_predictions(preds));
  stage.log(to_string(kind) + ": predicted " + std::to_string(preds.size()) + " trajectories");
  stage.finish();
}

metrics::EvalReport run_evaluate(const Context& ctx, ModelKind kind) {
  Stage stage(ctx, "evaluate." + to_string(kind));
  const bool hmm_truth = use_hmm_truth(ctx.config);
  const geo::RoadGraph g = load_map(stage);
  const auto labels = load_labels(stage);
  const auto split = records::read_split(stage.read(files::kSplit), files::kSplit);
  const auto preds = records::read_predictions(stage.read(files::predictions(kind)), files::predictions(kind));

  std::map<std::int64_t, const records::PredictionRecord*> by_id;
  for (const auto& p : preds) by_id[p.traj_id] = &p;
  std::map<std::int64_t, const records::LabelRecord*> label_by_id;
  for (const auto& l : labels) label_by_id[l.trajectory.traj_id] = &l;

  std::vector<std::string> problems;
  std::vector<metrics::RoutePair> pairs;
  std::size_t discontinuities = 0, truncated = 0;
  for (const auto id : split.test) {
    const auto p = by_id.find(id);
    const auto l = label_by_id.find(id);
    if (p == by_id.end() || l == label_by_id.end()) {
      problems.push_back(std::to_string(id) + (p == by_id.end() ? " (no prediction)" : " (no label)"));
      continue;
    }
    pairs.push_back({id, p->second->route, truth_route(*l->second, hmm_truth)});
    discontinuities += static_cast<std::size_t>(p->second->discontinuities);
    truncated += static_cast<std::size_t>(p->second->truncated_fragments);
  }
  const std::set<std::int64_t> test(split.test.begin(), split.test.end());
  for (const auto& p : preds) {
    if (!test.contains(p.traj_id)) problems.push_back(std::to_string(p.traj_id) + " (not a test trajectory)");
  }
  if (!problems.empty()) {
    std::string msg = "prediction/label id mismatch for " + std::to_string(problems.size()) + " trajectories:";
    for (std::size_t i = 0; i < std::min<std::size_t>(problems.size(), 10); ++i) msg += " " + problems[i];
    if (problems.size() > 10) msg += " ...";
    throw ValidationError(msg);
  }
  metrics::EvalReport report = metrics::evaluate(pairs, g);
  report.discontinuities = discontinuities;
  report.truncated = truncated;
  const std::string prefix = files::eval_prefix(kind);
  stage.write(prefix + ".txt", metrics::format_table(report, "model " + to_string(kind)));
  stage.write(prefix + ".kv", metrics::format_key_values(report));
  stage.write(prefix + ".csv", metrics::format_csv(report));
  char buf[160];
  std::snprintf(buf, sizeof buf, "%s: acc1 %.4f acc2 %.4f jaccard %.4f bleu %.4f over %zu trajectories",
                to_string(kind).c_str(), report.acc1, report.acc2, report.jaccard, report.bleu,
                report.trajectories);
  stage.log(buf);
  stage.finish();
  return report;
}

namespace {

json route_coordinates(const geo::SegmentRoute& route, const geo::RoadGraph& g) {
  json coords = json::array();
  for (std::size_t i = 0; i < route.size(); ++i) {
    const geo::Segment& s = g.segment(route[i]);
    if (i == 0 || g.segment(route[i - 1]).to != s.from) {
      const geo::Point a = g.position(s.from);
      coords.push_back({a.x, a.y});
    }
    const geo::Point b = g.position(s.to);
    coords.push_back({b.x, b.y});
  }
  return coords;
}

json feature(json geometry, std::int64_t traj_id, const std::string& layer) {
  return {{"type", "Feature"}, {"geometry", std::move(geometry)}, {"properties", {{"traj_id", traj_id}, {"layer", layer}}}};
}

}  // namespace

void run_export_geo(const Context& ctx) {
  Stage stage(ctx, "export-geo");
  const geo::RoadGraph g = load_map(stage);
  const auto labels = load_labels(stage);
  const auto split = records::read_split(stage.read(files::kSplit), files::kSplit);
  std::map<std::string, std::map<std::int64_t, geo::SegmentRoute>> models;
  for (const ModelKind k : {ModelKind::kTransformer, ModelKind::kGru, ModelKind::kNaive}) {
    if (!stage.exists(files::predictions(k))) continue;
    for (const auto& p : records::read_predictions(stage.read(files::predictions(k)), files::predictions(k))) {
      models[to_string(k)][p.traj_id] = p.route;
    }
  }
  std::map<std::int64_t, const records::LabelRecord*> label_by_id;
  for (const auto& l : labels) label_by_id[l.trajectory.traj_id] = &l;

  const auto limit = static_cast<std::size_t>(std::max<long long>(0, ctx.config.get_int("export.max_trajectories")));
  json features = json::array();
  std::size_t n = 0;
  for (const auto id : split.test) {
    if (n++ >= limit) break;
    const auto it = label_by_id.find(id);
    if (it == label_by_id.end()) continue;
    const records::LabelRecord& l = *it->second;
    json pts = json::array();
    for (const auto& p : l.trajectory.points) pts.push_back({p.x, p.y});
    features.push_back(feature({{"type", "MultiPoint"}, {"coordinates", pts}}, id, "gps"));
    features.push_back(feature({{"type", "LineString"}, {"coordinates", route_coordinates(l.trajectory.true_route, g)}},
                               id, "truth"));
    features.push_back(
        feature({{"type", "LineString"}, {"coordinates", route_coordinates(l.hmm_route, g)}}, id, "hmm"));
    for (const auto& [name, routes] : models) {
      const auto r = routes.find(id);
      if (r == routes.end()) continue;
      features.push_back(
          feature({{"type", "LineString"}, {"coordinates", route_coordinates(r->second, g)}}, id, name));
    }
  }
  // Coordinates are planar meters in the map frame, not longitude/latitude.
  const json doc{{"type", "FeatureCollection"},
                 {"properties", {{"format", "mmseq.routes"}, {"version", records::kFormatVersion}, {"crs", "planar-m"}}},
                 {"features", features}};
  stage.write(files::kGeo, doc.dump() + "\n");
  stage.finish();
}

std::vector<BenchRow> run_bench(const Context& ctx) {
  Stage stage(ctx, "bench");
  const RunConfig& cfg = ctx.config;
  BenchOptions opt;
  opt.buckets = parse_int_list(cfg.get("bench.buckets"), "bench.buckets");
  std::sort(opt.buckets.begin(), opt.buckets.end());
  if (opt.buckets.front() < 1) throw ConfigError("bench.buckets must be positive");
  opt.repeats = static_cast<int>(cfg.get_int("bench.repeats"));
  opt.steps = static_cast<int>(cfg.get_int("bench.steps"));
  opt.batch_size = static_cast<int>(cfg.get_int("bench.batch_size"));
  opt.seed = derive_seed(cfg.seed(), "bench");
  if (opt.repeats < 1 || opt.steps < 1 || opt.batch_size < 1) {
    throw ConfigError("bench.repeats, bench.steps and bench.batch_size must be positive");
  }
  // Lift the length limits so every bucket fits; weights are unaffected.
  auto load = [&](ModelKind k) {
    nn::Checkpoint ck = nn::parse_checkpoint(stage.read(files::best_checkpoint(k)));
    ck.hyper["max_in"] = std::to_string(opt.buckets.back());
    ck.hyper["max_out"] = std::to_string(opt.buckets.back() * opt.targets_per_point);
    return model::model_from_checkpoint(ck);
  };
  auto tfm = load(ModelKind::kTransformer);
  auto gru = load(ModelKind::kGru);
  const auto rows = bench_models(*tfm, *gru, opt);
  stage.write(files::kBench, format_bench_csv(rows));
  for (const auto& r : rows) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "%s len %d: train step %.2f ms, inference %.3f ms/trajectory", r.model.c_str(),
                  r.input_len, r.train_step_ms, r.infer_ms);
    stage.log(buf);
  }
  stage.finish();
  return rows;
}

}  // namespace mmseq::pipeline
