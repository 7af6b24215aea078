#include "mmseq/seq2seq.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mmseq/error.hpp"
#include "mmseq/rnn.hpp"
#include "mmseq/text.hpp"
#include "mmseq/transformer.hpp"

namespace mmseq::model {

using nn::Tape;
using nn::Tensor;

nn::Tensor log_softmax_rows(const Tensor& logits) {
  Tensor out = logits;
  const std::size_t v = logits.dim(1);
  for (std::size_t r = 0; r < logits.dim(0); ++r) {
    double* row = out.ptr() + r * v;
    const double mx = *std::max_element(row, row + v);
    double z = 0.0;
    for (std::size_t j = 0; j < v; ++j) z += std::exp(row[j] - mx);
    const double lz = mx + std::log(z);
    for (std::size_t j = 0; j < v; ++j) row[j] -= lz;
  }
  return out;
}

void count_correct(const Tensor& logits, std::span<const TokenId> labels, TokenAccuracy& accuracy) {
  const std::size_t v = logits.dim(1);
  for (std::size_t r = 0; r < labels.size(); ++r) {
    if (labels[r] == prep::kPad) continue;
    const double* row = logits.ptr() + r * v;
    const auto best = static_cast<TokenId>(std::max_element(row, row + v) - row);
    ++accuracy.total;
    accuracy.correct += best == labels[r];
  }
}

std::unique_ptr<Seq2SeqModel> model_from_checkpoint(const nn::Checkpoint& ckpt) {
  std::unique_ptr<Seq2SeqModel> model;
  if (ckpt.model_tag == "TFM") {
    model = std::make_unique<Transformer>(TransformerConfig::from_hyper(ckpt.hyper));
  } else if (ckpt.model_tag == "GRU") {
    model = std::make_unique<GruSeq2Seq>(GruConfig::from_hyper(ckpt.hyper));
  } else {
    throw ValidationError("unknown checkpoint model tag '" + ckpt.model_tag + "'");
  }
  nn::store_from_checkpoint(model->params(), ckpt);
  return model;
}

nn::Checkpoint model_to_checkpoint(Seq2SeqModel& model, bool with_optimizer) {
  nn::Checkpoint ckpt;
  ckpt.model_tag = model.tag();
  ckpt.hyper = model.hyperparameters();
  nn::store_to_checkpoint(model.params(), ckpt, with_optimizer);
  return ckpt;
}

// --- decoding ----------------------------------------------------------------

namespace {

bool emittable(std::size_t token) {
  return token != static_cast<std::size_t>(prep::kPad) && token != static_cast<std::size_t>(prep::kBos) &&
         token != static_cast<std::size_t>(prep::kUnk);
}

}  // namespace

std::vector<DecodeResult> greedy_decode(DecoderSession& session, std::size_t sources, int max_len) {
  std::vector<DecodeResult> results(sources);
  std::vector<std::vector<TokenId>> prefixes(sources, std::vector<TokenId>{prep::kBos});
  std::vector<std::size_t> active(sources);
  std::iota(active.begin(), active.end(), std::size_t{0});
  while (!active.empty()) {
    std::vector<std::vector<TokenId>> query;
    query.reserve(active.size());
    for (const std::size_t s : active) query.push_back(prefixes[s]);
    const auto lp = session.next_log_probs(active, query);
    std::vector<std::size_t> still;
    for (std::size_t i = 0; i < active.size(); ++i) {
      const std::size_t s = active[i];
      std::size_t best = lp[i].size();
      for (std::size_t j = 0; j < lp[i].size(); ++j) {
        if (emittable(j) && (best == lp[i].size() || lp[i][j] > lp[i][best])) best = j;
      }
      results[s].log_prob += lp[i][best];
      if (best == static_cast<std::size_t>(prep::kEos)) continue;
      prefixes[s].push_back(static_cast<TokenId>(best));
      results[s].tokens.push_back(static_cast<TokenId>(best));
      if (static_cast<int>(results[s].tokens.size()) >= max_len) {
        results[s].truncated = true;
      } else {
        still.push_back(s);
      }
    }
    active = std::move(still);
  }
  return results;
}

DecodeResult beam_decode(DecoderSession& session, std::size_t source, int width, int max_len) {
  if (width < 1) throw ValidationError("beam width must be at least 1");
  struct Hyp {
    std::vector<TokenId> prefix;  // BOS first
    double log_prob = 0.0;
  };
  struct Candidate {
    double log_prob;
    std::size_t parent;
    std::size_t token;
  };
  struct Finished {
    DecodeResult result;
    double score;
  };
  std::vector<Hyp> alive{{{prep::kBos}, 0.0}};
  std::vector<Finished> finished;
  const auto w = static_cast<std::size_t>(width);
  auto best_finished = [&] {
    double s = -INFINITY;
    for (const Finished& f : finished) s = std::max(s, f.score);
    return s;
  };
  auto best_alive = [&] {
    double s = -INFINITY;
    for (const Hyp& h : alive) s = std::max(s, h.log_prob / static_cast<double>(h.prefix.size() - 1));
    return s;
  };
  // Keep searching past `width` finished hypotheses while an unfinished one
  // still scores better under length normalization.
  while (!alive.empty() && (finished.size() < w || best_alive() > best_finished())) {
    std::vector<std::vector<TokenId>> query;
    for (const Hyp& h : alive) query.push_back(h.prefix);
    const std::vector<std::size_t> sources(alive.size(), source);
    const auto lp = session.next_log_probs(sources, query);
    std::vector<Candidate> cands;
    for (std::size_t r = 0; r < alive.size(); ++r) {
      for (std::size_t j = 0; j < lp[r].size(); ++j) {
        if (emittable(j)) cands.push_back({alive[r].log_prob + lp[r][j], r, j});
      }
    }
    const std::size_t keep = std::min(w, cands.size());
    std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep), cands.end(),
                      [](const Candidate& a, const Candidate& b) {
                        if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
                        if (a.parent != b.parent) return a.parent < b.parent;
                        return a.token < b.token;
                      });
    std::vector<Hyp> next;
    for (std::size_t i = 0; i < keep; ++i) {
      const Candidate& c = cands[i];
      const Hyp& parent = alive[c.parent];
      DecodeResult done;
      if (c.token == static_cast<std::size_t>(prep::kEos)) {
        done.tokens.assign(parent.prefix.begin() + 1, parent.prefix.end());
        done.log_prob = c.log_prob;
        finished.push_back({done, c.log_prob / static_cast<double>(done.tokens.size() + 1)});
        continue;
      }
      Hyp h{parent.prefix, c.log_prob};
      h.prefix.push_back(static_cast<TokenId>(c.token));
      if (static_cast<int>(h.prefix.size()) - 1 >= max_len) {
        done.tokens.assign(h.prefix.begin() + 1, h.prefix.end());
        done.log_prob = h.log_prob;
        done.truncated = true;
        finished.push_back({done, h.log_prob / static_cast<double>(done.tokens.size())});
        continue;
      }
      next.push_back(std::move(h));
    }
    alive = std::move(next);
  }
  // Stable pick: the earliest finished hypothesis wins exact ties.
  const auto best = std::max_element(finished.begin(), finished.end(),
                                     [](const Finished& a, const Finished& b) { return a.score < b.score; });
  return best->result;
}

std::vector<DecodeResult> decode_all(Seq2SeqModel& model, std::span<const std::vector<TokenId>> inputs, bool beam,
                                     int beam_width, std::size_t chunk) {
  if (chunk == 0) throw ValidationError("decode chunk must be positive");
  const int max_len = model.limits().max_out;
  std::vector<DecodeResult> out;
  out.reserve(inputs.size());
  for (std::size_t begin = 0; begin < inputs.size(); begin += chunk) {
    const auto part = inputs.subspan(begin, std::min(chunk, inputs.size() - begin));
    auto session = model.start_decoding(part);
    if (beam) {
      for (std::size_t i = 0; i < part.size(); ++i) out.push_back(beam_decode(*session, i, beam_width, max_len));
    } else {
      for (auto& r : greedy_decode(*session, part.size(), max_len)) out.push_back(std::move(r));
    }
  }
  return out;
}

// --- training ------------------------------------------------------------------

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> train_val_split(std::size_t n, double val_fraction,
                                                                               std::uint64_t seed) {
  if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw ValidationError("val_fraction must be in [0, 1)");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(derive_seed(seed, "train.val_split"));
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  auto n_val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(n)));
  if (n_val >= n) n_val = n ? n - 1 : 0;
  std::vector<std::size_t> val(order.end() - static_cast<std::ptrdiff_t>(n_val), order.end());
  order.resize(n - n_val);
  return {order, val};
}

std::pair<double, TokenAccuracy> evaluate_teacher_forced(Seq2SeqModel& model,
                                                         std::span<const prep::Example> examples,
                                                         std::size_t batch_size) {
  TokenAccuracy acc;
  double weighted = 0.0;
  for (std::size_t begin = 0; begin < examples.size(); begin += batch_size) {
    const auto part = examples.subspan(begin, std::min(batch_size, examples.size() - begin));
    const prep::Batch batch = prep::pad_batch(part, model.limits());
    Tape tape;
    tape.set_recording(false);
    const std::size_t before = acc.total;
    const double loss = model.loss(tape, batch, &acc).value().item();
    weighted += loss * static_cast<double>(acc.total - before);
  }
  return {acc.total ? weighted / static_cast<double>(acc.total) : 0.0, acc};
}

TrainResult train(Seq2SeqModel& model, std::span<const prep::Example> examples, const TrainConfig& config,
                  TrainState state, const TrainHooks& hooks) {
  if (config.batch_size <= 0) throw ValidationError("batch_size must be positive");
  const auto [train_idx, val_idx] = train_val_split(examples.size(), config.val_fraction, config.seed);
  if (train_idx.empty()) throw ValidationError("no training examples");
  std::vector<prep::Example> val;
  for (const std::size_t i : val_idx) val.push_back(examples[i]);

  nn::ParameterStore& store = model.params();
  const prep::BatchLimits limits = model.limits();
  const auto bs = static_cast<std::size_t>(config.batch_size);
  TrainResult result;
  for (int epoch = state.next_epoch; epoch < config.epochs; ++epoch) {
    std::vector<std::size_t> order = train_idx;
    Rng rng(derive_seed(config.seed, "train.epoch", static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

    TokenAccuracy acc;
    double loss_sum = 0.0;
    std::size_t batches = 0;
    bool capped = false;
    for (std::size_t begin = 0; begin < order.size(); begin += bs) {
      if (config.max_steps > 0 && store.step >= config.max_steps) {
        capped = true;
        break;
      }
      std::vector<prep::Example> part;
      for (std::size_t i = begin; i < std::min(order.size(), begin + bs); ++i) part.push_back(examples[order[i]]);
      const prep::Batch batch = prep::pad_batch(part, limits);
      Tape tape;
      tape.set_training(true);
      model.set_dropout_seed(derive_seed(config.seed, "train.dropout", static_cast<std::uint64_t>(store.step)));
      store.zero_grad();
      const nn::Var loss = model.loss(tape, batch, &acc);
      const double value = loss.value().item();
      if (!std::isfinite(value)) {
        throw NumericError("non-finite training loss at step " + std::to_string(store.step + 1));
      }
      tape.backward(loss);
      nn::adam_step(store, config.adam);
      loss_sum += value;
      ++batches;
      result.step_losses.push_back(value);
      if (hooks.on_step) hooks.on_step(static_cast<long>(store.step), value);
    }
    nn::snap_to_float(store);

    EpochStats stats;
    stats.epoch = epoch;
    stats.steps = static_cast<long>(store.step);
    stats.train_loss = batches ? loss_sum / static_cast<double>(batches) : 0.0;
    stats.train_accuracy = acc.rate();
    if (!val.empty()) {
      const auto [vl, va] = evaluate_teacher_forced(model, val);
      stats.val_loss = vl;
      stats.val_accuracy = va.rate();
    } else {
      stats.val_loss = stats.train_loss;
      stats.val_accuracy = stats.train_accuracy;
    }
    const bool best = !state.has_best || stats.val_loss < state.best_val;
    if (best) {
      state.best_val = stats.val_loss;
      state.has_best = true;
      state.stale_epochs = 0;
    } else {
      ++state.stale_epochs;
    }
    state.next_epoch = epoch + 1;
    result.epochs.push_back(stats);
    if (hooks.on_epoch) hooks.on_epoch(stats, state, best);
    if (capped || (config.max_steps > 0 && store.step >= config.max_steps)) break;
    if (config.patience > 0 && state.stale_epochs >= config.patience) {
      result.early_stopped = true;
      break;
    }
  }
  return result;
}

void write_train_state(Hyper& hyper, const TrainState& state) {
  hyper["train.next_epoch"] = std::to_string(state.next_epoch);
  hyper["train.best_val"] = format_double(state.best_val);
  hyper["train.stale_epochs"] = std::to_string(state.stale_epochs);
  hyper["train.has_best"] = state.has_best ? "1" : "0";
}

TrainState read_train_state(const Hyper& hyper) {
  TrainState s;
  if (!hyper.contains("train.next_epoch")) return s;
  s.next_epoch = static_cast<int>(hyper_int(hyper, "train.next_epoch"));
  s.best_val = hyper_double(hyper, "train.best_val");
  s.stale_epochs = static_cast<int>(hyper_int(hyper, "train.stale_epochs"));
  s.has_best = hyper_int(hyper, "train.has_best") != 0;
  return s;
}

long long hyper_int(const Hyper& hyper, const std::string& key) {
  const auto it = hyper.find(key);
  if (it == hyper.end()) throw ValidationError("checkpoint is missing hyperparameter '" + key + "'");
  return parse_int(it->second);
}

std::uint64_t hyper_uint(const Hyper& hyper, const std::string& key) {
  const auto it = hyper.find(key);
  if (it == hyper.end()) throw ValidationError("checkpoint is missing hyperparameter '" + key + "'");
  return parse_uint(it->second);
}

double hyper_double(const Hyper& hyper, const std::string& key) {
  const auto it = hyper.find(key);
  if (it == hyper.end()) throw ValidationError("checkpoint is missing hyperparameter '" + key + "'");
  return parse_double(it->second);
}

}  // namespace mmseq::model
