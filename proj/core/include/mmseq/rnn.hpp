#pragma once

// Bi-GRU encoder and GRU decoder with Luong (general) attention.

#include <cstdint>
#include <string>
#include <vector>

#include "mmseq/seq2seq.hpp"

namespace mmseq::model {

struct GruConfig {
  int d_emb = 64;
  int hidden = 64;  // per encoder direction; the decoder state is 2 * hidden
  int max_in_len = 8;
  int max_out_len = 50;
  int src_vocab = 0;
  int tgt_vocab = 0;
  std::uint64_t seed = 1;

  int decoder_width() const { return 2 * hidden; }
  void validate() const;
  Hyper to_hyper() const;
  static GruConfig from_hyper(const Hyper& hyper);
};

/// Weights act on the concatenation [h_prev, x]; w_* are [hidden + in, hidden].
struct GruParams {
  nn::Var w_r, b_r, w_u, b_u, w_h, b_h;
};

/// r = sigmoid(W_r[h,x] + b_r), u = sigmoid(W_u[h,x] + b_u),
/// h~ = tanh(W_h[r*h, x] + b_h), h' = (1 - u)*h + u*h~. Rows are batch items.
nn::Var gru_cell(nn::Var x, nn::Var h_prev, const GruParams& p);

/// Per-direction states of a padded batch.
struct BiGruOutput {
  nn::Var states;    // [batch * len, 2 * hidden], row b*len + t = [h^f_t, h^b_t]
  nn::Var last_fwd;  // [batch, hidden], h^f at each row's final real step
  nn::Var first_bwd; // [batch, hidden], h^b at step 0
};

/// Runs both directions over `embedded` ([batch * len, d_emb]) honoring
/// per-row lengths: padded steps carry the forward state unchanged and the
/// backward pass starts at each row's last real step.
BiGruOutput bigru_encode(nn::Var embedded, std::span<const std::size_t> lengths, std::size_t len,
                         const GruParams& fwd, const GruParams& bwd);

/// W_a [D, 2*hidden] (score s^T W_a h), W_c [2*hidden + D, D], W_s [D, V].
struct LuongParams {
  nn::Var w_a, w_c, w_s;
};

struct LuongStep {
  nn::Var logits;   // [batch, V]
  nn::Var state;    // [batch, D]
  nn::Var weights;  // [batch, len]
};

/// One decoder step. `states` is the encoder output viewed as [batch, len,
/// 2*hidden], `keys` = (W_a h) per step as [batch, len, D], `mask` [batch, len]
/// holds 0 or kMaskValue.
LuongStep luong_step(nn::Var y_prev_embedded, nn::Var s_prev, nn::Var states, nn::Var keys, const nn::Tensor& mask,
                     const GruParams& cell, const LuongParams& attn);

class GruSeq2Seq final : public Seq2SeqModel {
 public:
  explicit GruSeq2Seq(const GruConfig& config);

  std::string tag() const override { return "GRU"; }
  nn::ParameterStore& params() override { return params_; }
  Hyper hyperparameters() const override { return config_.to_hyper(); }
  prep::BatchLimits limits() const override { return {config_.max_in_len, config_.max_out_len}; }
  std::size_t target_vocab() const override { return static_cast<std::size_t>(config_.tgt_vocab); }
  const GruConfig& config() const { return config_; }

  nn::Var loss(nn::Tape& tape, const prep::Batch& batch, TokenAccuracy* accuracy = nullptr) override;
  std::unique_ptr<DecoderSession> start_decoding(std::span<const std::vector<TokenId>> inputs) override;
  /// No stochastic layers; kept for the common interface.
  void set_dropout_seed(std::uint64_t) override {}

  struct Encoded {
    nn::Var states;  // [batch, len, 2*hidden]
    nn::Var keys;    // [batch, len, D]
    nn::Var init;    // [batch, D]
    nn::Tensor mask; // [batch, len]
  };
  Encoded encode(nn::Tape& tape, const prep::Batch& batch);
  LuongStep step(nn::Tape& tape, const Encoded& enc, std::span<const TokenId> y_prev, nn::Var s_prev);

 private:
  GruParams cell(nn::Tape& tape, const std::string& prefix);
  LuongParams attention(nn::Tape& tape);
  void add_cell(const std::string& prefix, int in, int hidden, Rng& rng);
  nn::Var param(nn::Tape& tape, const std::string& name) { return tape.param(params_.get(name)); }

  GruConfig config_;
  nn::ParameterStore params_;
};

}  // namespace mmseq::model
