// Microbenchmarks for the hot paths: dense kernels, a training step per
// model, HMM matching and metric evaluation.

#include <benchmark/benchmark.h>

#include <vector>

#include "mmseq/hmm.hpp"
#include "mmseq/metrics.hpp"
#include "mmseq/optim.hpp"
#include "mmseq/prep.hpp"
#include "mmseq/rnn.hpp"
#include "mmseq/simulate.hpp"
#include "mmseq/tensor.hpp"
#include "mmseq/transformer.hpp"

namespace {

using namespace mmseq;

void BM_GemmNN(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(1);
  std::vector<double> a(n * n), b(n * n), c(n * n);
  for (auto& v : a) v = rng.uniform();
  for (auto& v : b) v = rng.uniform();
  for (auto _ : state) {
    nn::kernels::gemm_nn(n, n, n, a.data(), b.data(), c.data(), false);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<int64_t>(2 * n * n * n));
}
BENCHMARK(BM_GemmNN)->Arg(32)->Arg(64)->Arg(128);

std::vector<prep::Example> batch_of(int n, int len, Rng& rng) {
  std::vector<prep::Example> out(static_cast<std::size_t>(n));
  for (auto& e : out) {
    for (int i = 0; i < len; ++i) e.input.push_back(static_cast<prep::TokenId>(4 + rng.below(500)));
    for (int i = 0; i < 3 * len; ++i) e.target.push_back(static_cast<prep::TokenId>(4 + rng.below(700)));
  }
  return out;
}

template <class Model, class Config>
void train_step(benchmark::State& state, Config cfg) {
  const int len = static_cast<int>(state.range(0));
  cfg.max_in_len = 20;
  cfg.max_out_len = 60;
  cfg.src_vocab = 504;
  cfg.tgt_vocab = 704;
  Model m(cfg);
  Rng rng(2);
  const auto ex = batch_of(16, len, rng);
  const prep::Batch batch = prep::pad_batch(ex, m.limits());
  nn::AdamConfig adam;
  adam.lr = 1e-5;
  for (auto _ : state) {
    nn::Tape tape;
    tape.set_training(true);
    m.params().zero_grad();
    tape.backward(m.loss(tape, batch));
    nn::adam_step(m.params(), adam);
  }
}

void BM_TransformerTrainStep(benchmark::State& state) {
  train_step<model::Transformer>(state, model::TransformerConfig{});
}
BENCHMARK(BM_TransformerTrainStep)->Arg(5)->Arg(10)->Arg(20)->Unit(benchmark::kMillisecond);

void BM_GruTrainStep(benchmark::State& state) { train_step<model::GruSeq2Seq>(state, model::GruConfig{}); }
BENCHMARK(BM_GruTrainStep)->Arg(5)->Arg(10)->Arg(20)->Unit(benchmark::kMillisecond);

void BM_HmmMatch(benchmark::State& state) {
  sim::MapSpec spec;
  spec.cols = 16;
  spec.rows = 16;
  const geo::RoadGraph g = sim::gen_map(spec);
  sim::SimConfig cfg;
  cfg.trajectories = 50;
  const auto samples = sim::simulate(g, cfg, sim::NoiseModel{});
  const geo::SpatialIndex index(g);
  hmm::Matcher matcher(g, index, hmm::HmmParams{});
  std::size_t points = 0;
  for (auto _ : state) {
    for (const auto& s : samples) {
      benchmark::DoNotOptimize(matcher.match_route(s.points));
      points += s.points.size();
    }
  }
  state.SetItemsProcessed(static_cast<int64_t>(points));
}
BENCHMARK(BM_HmmMatch)->Unit(benchmark::kMillisecond);

void BM_Bleu(benchmark::State& state) {
  Rng rng(3);
  geo::SegmentRoute a, b;
  for (int i = 0; i < state.range(0); ++i) {
    a.push_back(static_cast<geo::SegmentId>(rng.below(50)));
    b.push_back(static_cast<geo::SegmentId>(rng.below(50)));
  }
  for (auto _ : state) benchmark::DoNotOptimize(metrics::bleu(a, b));
}
BENCHMARK(BM_Bleu)->Arg(30)->Arg(300);

}  // namespace

BENCHMARK_MAIN();
