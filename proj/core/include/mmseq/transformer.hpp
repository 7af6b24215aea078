#pragma once

// Post-norm transformer encoder-decoder over grid tokens -> segment tokens.

#include <cstdint>
#include <string>
#include <vector>

#include "mmseq/seq2seq.hpp"

namespace mmseq::model {

struct TransformerConfig {
  int d_emb = 64;
  int d_ff = 256;
  int blocks = 2;
  int heads = 4;
  int max_in_len = 20;
  int max_out_len = 100;  // target tokens, before BOS/EOS framing
  int src_vocab = 0;
  int tgt_vocab = 0;
  double dropout = 0.0;
  std::uint64_t seed = 1;

  int d_k() const { return d_emb / heads; }
  void validate() const;
  Hyper to_hyper() const;
  static TransformerConfig from_hyper(const Hyper& hyper);
};

/// PE[pos, 2i] = sin(pos / 10000^(2i/d)), PE[pos, 2i+1] = cos(same).
/// Throws ValidationError when d is odd.
nn::Tensor positional_encoding(std::size_t max_len, std::size_t d);

struct AttentionParams {
  nn::Var wq, bq, wk, bk, wv, bv, wo, bo;
};

struct AttentionOutput {
  nn::Var out;      // [batch * len_q, d]
  nn::Var weights;  // [batch * heads, len_q, len_k]
};

/// Additive mask value for blocked attention positions.
inline constexpr double kMaskValue = -1e30;

/// Scaled dot-product attention over `heads` projected subspaces, heads
/// concatenated and projected by wo. `mask` is [batch, len_q, len_k] with 0
/// for allowed and kMaskValue for blocked positions.
AttentionOutput multi_head_attention(nn::Var q_in, nn::Var kv_in, const AttentionParams& p, std::size_t batch,
                                     std::size_t len_q, std::size_t len_k, std::size_t heads,
                                     const nn::Tensor& mask);

/// Encoder output for a padded batch.
struct EncoderMemory {
  nn::Var states;  // [batch * len, d]
  std::size_t batch = 0;
  std::size_t len = 0;
  std::vector<std::uint8_t> pad;  // batch * len, 1 at PAD
};

class Transformer final : public Seq2SeqModel {
 public:
  explicit Transformer(const TransformerConfig& config);

  std::string tag() const override { return "TFM"; }
  nn::ParameterStore& params() override { return params_; }
  Hyper hyperparameters() const override { return config_.to_hyper(); }
  prep::BatchLimits limits() const override { return {config_.max_in_len, config_.max_out_len}; }
  std::size_t target_vocab() const override { return static_cast<std::size_t>(config_.tgt_vocab); }
  const TransformerConfig& config() const { return config_; }

  nn::Var loss(nn::Tape& tape, const prep::Batch& batch, TokenAccuracy* accuracy = nullptr) override;
  std::unique_ptr<DecoderSession> start_decoding(std::span<const std::vector<TokenId>> inputs) override;
  void set_dropout_seed(std::uint64_t seed) override { dropout_rng_ = Rng(seed); }

  /// `tokens` is batch x len row-major with `pad` marking PAD positions.
  EncoderMemory encode(nn::Tape& tape, std::span<const TokenId> tokens, std::span<const std::uint8_t> pad,
                       std::size_t batch, std::size_t len);
  /// Final decoder states [batch * len, d] for inputs `tokens` (BOS first);
  /// the output projection is applied by the caller.
  nn::Var decode(nn::Tape& tape, const EncoderMemory& memory, std::span<const TokenId> tokens,
                 std::span<const std::uint8_t> pad, std::size_t len);
  /// Attention weights of the most recent encode/decode call, per layer, in
  /// call order (encoder self, then decoder self/cross per block).
  const std::vector<nn::Var>& last_attention() const { return attention_log_; }

 private:
  AttentionParams attention(nn::Tape& tape, const std::string& prefix);
  nn::Var feed_forward(nn::Tape& tape, const std::string& prefix, nn::Var x);
  nn::Var add_norm(nn::Tape& tape, const std::string& prefix, nn::Var x, nn::Var sub);
  nn::Var embed(nn::Tape& tape, const std::string& table, std::span<const TokenId> tokens, std::size_t batch,
                std::size_t len);
  void add_linear(const std::string& name, int in, int out, Rng& rng);
  nn::Var param(nn::Tape& tape, const std::string& name) { return tape.param(params_.get(name)); }

  TransformerConfig config_;
  nn::ParameterStore params_;
  nn::Tensor pe_;
  Rng dropout_rng_;
  std::vector<nn::Var> attention_log_;
};

}  // namespace mmseq::model
