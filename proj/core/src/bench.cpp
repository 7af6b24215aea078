#include <algorithm>
#include <chrono>

#include "mmseq/autodiff.hpp"
#include "mmseq/error.hpp"
#include "mmseq/optim.hpp"
#include "mmseq/pipeline.hpp"
#include "mmseq/rng.hpp"
#include "mmseq/text.hpp"

namespace mmseq::pipeline {

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::vector<prep::Example> synthetic_batch(model::Seq2SeqModel& m, int input_len, int target_len, int batch,
                                           Rng& rng) {
  const model::Hyper h = m.hyperparameters();
  const auto src = static_cast<std::uint64_t>(model::hyper_int(h, "src_vocab"));
  const auto tgt = static_cast<std::uint64_t>(m.target_vocab());
  if (src <= prep::kNumSpecials || tgt <= prep::kNumSpecials) throw ValidationError("bench: vocabulary too small");
  std::vector<prep::Example> out(static_cast<std::size_t>(batch));
  for (auto& ex : out) {
    for (int i = 0; i < input_len; ++i) {
      ex.input.push_back(static_cast<prep::TokenId>(prep::kNumSpecials + rng.below(src - prep::kNumSpecials)));
    }
    for (int i = 0; i < target_len; ++i) {
      ex.target.push_back(static_cast<prep::TokenId>(prep::kNumSpecials + rng.below(tgt - prep::kNumSpecials)));
    }
  }
  return out;
}

BenchRow bench_one(model::Seq2SeqModel& m, int input_len, const BenchOptions& opt) {
  const prep::BatchLimits limits = m.limits();
  const int target_len = input_len * opt.targets_per_point;
  if (input_len > limits.max_in || target_len > limits.max_out) {
    throw ConfigError("bench: length " + std::to_string(input_len) + " exceeds the " + m.tag() + " model limits");
  }
  Rng rng(derive_seed(opt.seed, "bench." + m.tag(), static_cast<std::uint64_t>(input_len)));
  const auto examples = synthetic_batch(m, input_len, target_len, opt.batch_size, rng);
  const prep::Batch batch = prep::pad_batch(examples, limits);
  std::vector<std::vector<prep::TokenId>> inputs;
  for (const auto& ex : examples) inputs.push_back(ex.input);

  nn::AdamConfig adam;
  adam.lr = 1e-5;
  std::vector<double> train_ms, infer_ms;
  for (int r = 0; r < opt.repeats; ++r) {
    const auto t0 = Clock::now();
    for (int s = 0; s < opt.steps; ++s) {
      nn::Tape tape;
      tape.set_training(true);
      m.set_dropout_seed(derive_seed(opt.seed, "bench.dropout", static_cast<std::uint64_t>(s)));
      m.params().zero_grad();
      const nn::Var loss = m.loss(tape, batch);
      tape.backward(loss);
      nn::adam_step(m.params(), adam);
    }
    train_ms.push_back(ms_since(t0) / opt.steps);

    const auto t1 = Clock::now();
    model::decode_all(m, inputs, false, 1, inputs.size());
    infer_ms.push_back(ms_since(t1) / static_cast<double>(inputs.size()));
  }
  return {m.tag() == "TFM" ? "tfm" : "gru", input_len, median(train_ms), median(infer_ms)};
}

}  // namespace

std::vector<BenchRow> bench_models(model::Seq2SeqModel& tfm, model::Seq2SeqModel& gru, const BenchOptions& options) {
  if (options.buckets.empty() || options.repeats < 1 || options.steps < 1 || options.batch_size < 1) {
    throw ConfigError("bench: buckets, repeats, steps and batch_size must be non-empty/positive");
  }
  std::vector<BenchRow> rows;
  for (model::Seq2SeqModel* m : {&tfm, &gru}) {
    for (const int len : options.buckets) rows.push_back(bench_one(*m, len, options));
  }
  return rows;
}

double growth_ratio(const std::vector<BenchRow>& rows, const std::string& model) {
  const BenchRow* lo = nullptr;
  const BenchRow* hi = nullptr;
  for (const auto& r : rows) {
    if (r.model != model) continue;
    if (!lo || r.input_len < lo->input_len) lo = &r;
    if (!hi || r.input_len > hi->input_len) hi = &r;
  }
  if (!lo || lo == hi || !(lo->train_step_ms > 0.0)) {
    throw ValidationError("growth_ratio: need two buckets with positive times for " + model);
  }
  return hi->train_step_ms / lo->train_step_ms;
}

std::string format_bench_csv(const std::vector<BenchRow>& rows) {
  std::string out = "# mmseq.bench v1\nmodel,input_len,train_step_ms,infer_ms_per_trajectory\n";
  for (const auto& r : rows) {
    out += r.model + "," + std::to_string(r.input_len) + "," + format_double(r.train_step_ms) + "," +
           format_double(r.infer_ms) + "\n";
  }
  return out;
}

}  // namespace mmseq::pipeline
