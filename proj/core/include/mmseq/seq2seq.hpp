#pragma once

// Model-independent pieces of sequence-to-sequence learning: the model
// interface, autoregressive search, and the training loop.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mmseq/autodiff.hpp"
#include "mmseq/checkpoint.hpp"
#include "mmseq/optim.hpp"
#include "mmseq/prep.hpp"

namespace mmseq::model {

using prep::TokenId;
using Hyper = std::map<std::string, std::string>;

struct TokenAccuracy {
  std::size_t correct = 0;
  std::size_t total = 0;
  double rate() const { return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0; }
};

/// Incremental decoding state over a fixed set of encoded source rows.
class DecoderSession {
 public:
  virtual ~DecoderSession() = default;
  /// Log-probabilities of the next token for each (source row, prefix) pair.
  /// Prefixes start with BOS.
  virtual std::vector<std::vector<double>> next_log_probs(std::span<const std::size_t> sources,
                                                          std::span<const std::vector<TokenId>> prefixes) = 0;
};

class Seq2SeqModel {
 public:
  virtual ~Seq2SeqModel() = default;

  /// Checkpoint model tag, "TFM" or "GRU".
  virtual std::string tag() const = 0;
  virtual nn::ParameterStore& params() = 0;
  virtual Hyper hyperparameters() const = 0;
  virtual prep::BatchLimits limits() const = 0;
  virtual std::size_t target_vocab() const = 0;

  /// Teacher-forced mean cross-entropy over non-PAD target positions.
  virtual nn::Var loss(nn::Tape& tape, const prep::Batch& batch, TokenAccuracy* accuracy = nullptr) = 0;

  /// Encodes the inputs once for repeated next-token queries.
  virtual std::unique_ptr<DecoderSession> start_decoding(std::span<const std::vector<TokenId>> inputs) = 0;

  /// Seeds dropout masks for the next training step.
  virtual void set_dropout_seed(std::uint64_t seed) = 0;
};

/// Rebuilds a model of the right kind from a checkpoint (parameters and,
/// when present, optimizer state).
std::unique_ptr<Seq2SeqModel> model_from_checkpoint(const nn::Checkpoint& ckpt);
nn::Checkpoint model_to_checkpoint(Seq2SeqModel& model, bool with_optimizer);

/// Row-wise log-softmax of a [rows, V] tensor.
nn::Tensor log_softmax_rows(const nn::Tensor& logits);
/// Adds argmax hits of `logits` [rows, V] against non-PAD `labels`.
void count_correct(const nn::Tensor& logits, std::span<const TokenId> labels, TokenAccuracy& accuracy);

// --- decoding ----------------------------------------------------------------

struct DecodeResult {
  std::vector<TokenId> tokens;  // without BOS/EOS
  double log_prob = 0.0;
  bool truncated = false;  // stopped at max_len without emitting EOS
};

/// Argmax decoding for every source row at once; PAD, BOS and UNK are never
/// emitted and ties go to the smaller token id.
std::vector<DecodeResult> greedy_decode(DecoderSession& session, std::size_t sources, int max_len);

/// Beam search on one source row. Hypotheses compete on summed log-prob
/// with ties broken by (parent rank, token id); finished hypotheses are
/// ranked by log-prob divided by their length including EOS.
DecodeResult beam_decode(DecoderSession& session, std::size_t source, int width, int max_len);

/// Convenience: decode many inputs in chunks with either strategy.
std::vector<DecodeResult> decode_all(Seq2SeqModel& model, std::span<const std::vector<TokenId>> inputs, bool beam,
                                     int beam_width, std::size_t chunk = 64);

// --- training ------------------------------------------------------------------

struct TrainConfig {
  int epochs = 10;
  int batch_size = 32;
  nn::AdamConfig adam;
  std::uint64_t seed = 1;
  double val_fraction = 0.05;
  /// Stop after this many epochs without validation improvement; 0 = off.
  int patience = 3;
  /// Hard cap on optimizer steps across all epochs; 0 = off.
  long max_steps = 0;
};

struct EpochStats {
  int epoch = 0;
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  double val_loss = 0.0;
  double val_accuracy = 0.0;
  long steps = 0;  // cumulative
};

struct TrainState {
  int next_epoch = 0;
  double best_val = 0.0;
  int stale_epochs = 0;
  bool has_best = false;
};

struct TrainHooks {
  /// Called after every epoch with the snapped model; typically writes a
  /// checkpoint. `best` is true when validation loss improved.
  std::function<void(const EpochStats&, const TrainState&, bool best)> on_epoch;
  /// Per-step loss, for logging.
  std::function<void(long step, double loss)> on_step;
};

struct TrainResult {
  std::vector<EpochStats> epochs;
  std::vector<double> step_losses;
  bool early_stopped = false;
};

/// Deterministic mini-batch Adam training. Epoch e shuffles with a seed
/// derived from (seed, e), so a run resumed from an epoch checkpoint replays
/// the uninterrupted run exactly. Throws NumericError on a non-finite loss.
TrainResult train(Seq2SeqModel& model, std::span<const prep::Example> examples, const TrainConfig& config,
                  TrainState state = {}, const TrainHooks& hooks = {});

/// Teacher-forced loss and token accuracy over a dataset, no gradients.
std::pair<double, TokenAccuracy> evaluate_teacher_forced(Seq2SeqModel& model,
                                                         std::span<const prep::Example> examples,
                                                         std::size_t batch_size = 64);

/// Training/validation partition used by train(): validation examples are
/// the tail of a (seed)-shuffled index order.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> train_val_split(std::size_t n, double val_fraction,
                                                                               std::uint64_t seed);

void write_train_state(Hyper& hyper, const TrainState& state);

/// Typed lookups into a hyperparameter map; throw ValidationError when the
/// key is missing or malformed.
long long hyper_int(const Hyper& hyper, const std::string& key);
std::uint64_t hyper_uint(const Hyper& hyper, const std::string& key);
double hyper_double(const Hyper& hyper, const std::string& key);
TrainState read_train_state(const Hyper& hyper);

}  // namespace mmseq::model
