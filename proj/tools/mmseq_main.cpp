// mmseq: simulate, label, train, decode and score map-matching runs.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "mmseq/error.hpp"
#include "mmseq/pipeline.hpp"

namespace {

using namespace mmseq;
using pipeline::ModelKind;

struct Options {
  std::string config_path;
  std::string out_dir = "run";
  std::optional<long long> seed;
  std::vector<std::string> overrides;
  std::string model = "tfm";
  std::optional<std::string> decode;
  std::optional<int> beam_width;
};

void init_logging() {
  spdlog::set_pattern("[%H:%M:%S] [%^%l%$] %v");
  spdlog::set_level(spdlog::level::info);
  if (const char* level = std::getenv("MMSEQ_LOG_LEVEL")) {
    const auto parsed = spdlog::level::from_str(level);
    // from_str maps unknown names to "off"; only accept it when asked for.
    if (parsed != spdlog::level::off || std::string(level) == "off") {
      spdlog::set_level(parsed);
    } else {
      spdlog::warn("ignoring MMSEQ_LOG_LEVEL='{}'", level);
    }
  }
}

pipeline::Context make_context(const Options& o) {
  pipeline::Context ctx;
  if (!o.config_path.empty()) ctx.config.load_file(o.config_path);
  for (const auto& kv : o.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    ctx.config.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (o.seed) ctx.config.set("seed", std::to_string(*o.seed));
  if (o.decode) ctx.config.set("decode.mode", *o.decode);
  if (o.beam_width) ctx.config.set("decode.beam_width", std::to_string(*o.beam_width));
  ctx.dir = o.out_dir;
  ctx.log = [](const std::string& msg) { spdlog::info("{}", msg); };
  return ctx;
}

}  // namespace

int main(int argc, char** argv) {
  init_logging();
  CLI::App app{"Map matching as sequence translation: data, models and evaluation"};
  app.require_subcommand(1, 1);
  app.set_version_flag("--version", std::string(MMSEQ_VERSION_STRING));

  Options o;
  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config_path, "key = value configuration file")->check(CLI::ExistingFile);
    sub->add_option("--out-dir", o.out_dir, "run directory for inputs and outputs")->capture_default_str();
    sub->add_option("--seed", o.seed, "root seed (overrides the config)");
    sub->add_option("--set", o.overrides, "extra key=value overrides, applied after --config");
  };
  auto with_model = [&](CLI::App* sub, const std::vector<std::string>& allowed) {
    sub->add_option("--model", o.model, "model kind")->check(CLI::IsMember(allowed))->capture_default_str();
  };

  auto* gen_map = app.add_subcommand("gen-map", "generate the road lattice");
  auto* simulate = app.add_subcommand("simulate", "simulate trips and noisy GPS traces");
  auto* match = app.add_subcommand("match-hmm", "label traces with the HMM matcher");
  auto* prepare = app.add_subcommand("prepare", "split data, build vocabularies and fragments");
  auto* train = app.add_subcommand("train", "train a sequence model");
  auto* infer = app.add_subcommand("infer", "decode test trajectories");
  auto* evaluate = app.add_subcommand("evaluate", "score predictions against labels");
  auto* export_geo = app.add_subcommand("export-geo", "write routes as GeoJSON line features");
  auto* bench = app.add_subcommand("bench", "time training and inference by input length");
  for (auto* sub : {gen_map, simulate, match, prepare, train, infer, evaluate, export_geo, bench}) common(sub);
  with_model(train, {"tfm", "gru"});
  with_model(infer, {"tfm", "gru", "naive"});
  with_model(evaluate, {"tfm", "gru", "naive"});
  infer->add_option("--decode", o.decode, "greedy or beam")->check(CLI::IsMember({"greedy", "beam"}));
  infer->add_option("--beam-width", o.beam_width, "beam width")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : static_cast<int>(ErrorKind::kConfig);
  }

  try {
    const pipeline::Context ctx = make_context(o);
    const ModelKind kind = pipeline::parse_model_kind(o.model);
    if (gen_map->parsed()) pipeline::run_gen_map(ctx);
    else if (simulate->parsed()) pipeline::run_simulate(ctx);
    else if (match->parsed()) pipeline::run_match_hmm(ctx);
    else if (prepare->parsed()) pipeline::run_prepare(ctx);
    else if (train->parsed()) pipeline::run_train(ctx, kind);
    else if (infer->parsed()) pipeline::run_infer(ctx, kind, pipeline::decode_options(ctx.config));
    else if (evaluate->parsed()) pipeline::run_evaluate(ctx, kind);
    else if (export_geo->parsed()) pipeline::run_export_geo(ctx);
    else if (bench->parsed()) pipeline::run_bench(ctx);
  } catch (const Error& e) {
    spdlog::error("{} error: {}", to_string(e.kind()), e.what());
    return static_cast<int>(e.kind());
  } catch (const std::filesystem::filesystem_error& e) {
    spdlog::error("io error: {}", e.what());
    return static_cast<int>(ErrorKind::kIo);
  } catch (const std::exception& e) {
    spdlog::error("internal error: {}", e.what());
    return 1;
  }
  return 0;
}
