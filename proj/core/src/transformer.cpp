#include "mmseq/transformer.hpp"

#include <cmath>

#include "mmseq/error.hpp"
#include "mmseq/text.hpp"

namespace mmseq::model {

using nn::Shape;
using nn::Tape;
using nn::Tensor;
using nn::Var;

void TransformerConfig::validate() const {
  if (d_emb <= 0 || d_ff <= 0 || blocks <= 0 || heads <= 0) {
    throw ValidationError("transformer dimensions must be positive");
  }
  if (d_emb % heads != 0) throw ValidationError("d_emb must be divisible by heads");
  if (d_emb % 2 != 0) throw ValidationError("d_emb must be even for sinusoidal positions");
  if (max_in_len <= 0 || max_out_len <= 0) throw ValidationError("transformer max lengths must be positive");
  if (src_vocab <= prep::kNumSpecials || tgt_vocab <= prep::kNumSpecials) {
    throw ValidationError("vocabularies must contain more than the special tokens");
  }
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ValidationError("dropout must be in [0, 1)");
}

Hyper TransformerConfig::to_hyper() const {
  return {{"d_emb", std::to_string(d_emb)},         {"d_ff", std::to_string(d_ff)},
          {"blocks", std::to_string(blocks)},       {"heads", std::to_string(heads)},
          {"max_in", std::to_string(max_in_len)},   {"max_out", std::to_string(max_out_len)},
          {"src_vocab", std::to_string(src_vocab)}, {"tgt_vocab", std::to_string(tgt_vocab)},
          {"dropout", format_double(dropout)},      {"seed", std::to_string(seed)}};
}

TransformerConfig TransformerConfig::from_hyper(const Hyper& h) {
  TransformerConfig c;
  c.d_emb = static_cast<int>(hyper_int(h, "d_emb"));
  c.d_ff = static_cast<int>(hyper_int(h, "d_ff"));
  c.blocks = static_cast<int>(hyper_int(h, "blocks"));
  c.heads = static_cast<int>(hyper_int(h, "heads"));
  c.max_in_len = static_cast<int>(hyper_int(h, "max_in"));
  c.max_out_len = static_cast<int>(hyper_int(h, "max_out"));
  c.src_vocab = static_cast<int>(hyper_int(h, "src_vocab"));
  c.tgt_vocab = static_cast<int>(hyper_int(h, "tgt_vocab"));
  c.dropout = hyper_double(h, "dropout");
  c.seed = hyper_uint(h, "seed");
  c.validate();
  return c;
}

Tensor positional_encoding(std::size_t max_len, std::size_t d) {
  if (d == 0 || d % 2 != 0) throw ValidationError("positional encoding needs an even, positive width");
  Tensor pe({max_len, d});
  for (std::size_t pos = 0; pos < max_len; ++pos) {
    for (std::size_t i = 0; i < d / 2; ++i) {
      const double angle =
          static_cast<double>(pos) / std::pow(10000.0, static_cast<double>(2 * i) / static_cast<double>(d));
      pe.at(pos, 2 * i) = std::sin(angle);
      pe.at(pos, 2 * i + 1) = std::cos(angle);
    }
  }
  return pe;
}

AttentionOutput multi_head_attention(Var q_in, Var kv_in, const AttentionParams& p, std::size_t batch,
                                     std::size_t len_q, std::size_t len_k, std::size_t heads, const Tensor& mask) {
  if (mask.shape() != Shape{batch, len_q, len_k}) {
    throw ValidationError("attention mask " + nn::shape_str(mask.shape()) + " does not match [batch, len_q, len_k]");
  }
  const std::size_t d = q_in.dim(1);
  if (d % heads != 0) throw ValidationError("attention width not divisible by heads");
  Tape& tape = *q_in.tape;
  const Var q = nn::split_heads(nn::linear(q_in, p.wq, p.bq), batch, len_q, heads);
  const Var k = nn::split_heads(nn::linear(kv_in, p.wk, p.bk), batch, len_k, heads);
  const Var v = nn::split_heads(nn::linear(kv_in, p.wv, p.bv), batch, len_k, heads);

  Tensor head_mask({batch * heads, len_q, len_k});
  const std::size_t plane = len_q * len_k;
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      std::copy_n(mask.ptr() + b * plane, plane, head_mask.ptr() + (b * heads + h) * plane);
    }
  }
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(d / heads));
  const Var scores = nn::add(nn::scale(nn::matmul_nt(q, k), inv_sqrt_dk), tape.constant(std::move(head_mask)));
  const Var weights = nn::softmax(scores);
  const Var context = nn::merge_heads(nn::matmul(weights, v), batch, heads);
  return {nn::linear(context, p.wo, p.bo), weights};
}

namespace {

// [batch, len_q, len_k] additive mask from key padding and optional causality.
Tensor build_mask(std::span<const std::uint8_t> key_pad, std::size_t batch, std::size_t len_q, std::size_t len_k,
                  bool causal) {
  Tensor m({batch, len_q, len_k});
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < len_q; ++i) {
      for (std::size_t j = 0; j < len_k; ++j) {
        const bool blocked = key_pad[b * len_k + j] != 0 || (causal && j > i);
        if (blocked) m[(b * len_q + i) * len_k + j] = kMaskValue;
      }
    }
  }
  return m;
}

}  // namespace

Transformer::Transformer(const TransformerConfig& config) : config_(config), dropout_rng_(config.seed) {
  config_.validate();
  Rng rng(derive_seed(config_.seed, "transformer.init"));
  const int d = config_.d_emb;
  params_.add_normal("enc.emb", {static_cast<std::size_t>(config_.src_vocab), static_cast<std::size_t>(d)}, 1.0,
                     rng);
  params_.add_normal("dec.emb", {static_cast<std::size_t>(config_.tgt_vocab), static_cast<std::size_t>(d)}, 1.0,
                     rng);
  auto add_attention = [&](const std::string& prefix) {
    for (const char* w : {"q", "k", "v", "o"}) add_linear(prefix + "." + w, d, d, rng);
  };
  auto add_norm = [&](const std::string& prefix) {
    params_.add_constant(prefix + ".gain", {static_cast<std::size_t>(d)}, 1.0);
    params_.add_constant(prefix + ".bias", {static_cast<std::size_t>(d)}, 0.0);
  };
  auto add_ffn = [&](const std::string& prefix) {
    add_linear(prefix + ".ff1", d, config_.d_ff, rng);
    add_linear(prefix + ".ff2", config_.d_ff, d, rng);
  };
  for (int b = 0; b < config_.blocks; ++b) {
    const std::string p = "enc.block" + std::to_string(b);
    add_attention(p + ".self");
    add_norm(p + ".norm1");
    add_ffn(p);
    add_norm(p + ".norm2");
  }
  for (int b = 0; b < config_.blocks; ++b) {
    const std::string p = "dec.block" + std::to_string(b);
    add_attention(p + ".self");
    add_norm(p + ".norm1");
    add_attention(p + ".cross");
    add_norm(p + ".norm2");
    add_ffn(p);
    add_norm(p + ".norm3");
  }
  add_linear("out", d, config_.tgt_vocab, rng);
  pe_ = positional_encoding(static_cast<std::size_t>(std::max(config_.max_in_len, config_.max_out_len + 1)),
                            static_cast<std::size_t>(d));
}

void Transformer::add_linear(const std::string& name, int in, int out, Rng& rng) {
  const auto fan_in = static_cast<std::size_t>(in);
  params_.add_uniform(name + ".w", {fan_in, static_cast<std::size_t>(out)}, fan_in, rng);
  params_.add_uniform(name + ".b", {static_cast<std::size_t>(out)}, fan_in, rng);
}

AttentionParams Transformer::attention(Tape& tape, const std::string& prefix) {
  auto w = [&](const char* n) { return param(tape, prefix + "." + n + ".w"); };
  auto b = [&](const char* n) { return param(tape, prefix + "." + n + ".b"); };
  return {w("q"), b("q"), w("k"), b("k"), w("v"), b("v"), w("o"), b("o")};
}

Var Transformer::feed_forward(Tape& tape, const std::string& prefix, Var x) {
  const Var hidden = nn::relu(nn::linear(x, param(tape, prefix + ".ff1.w"), param(tape, prefix + ".ff1.b")));
  return nn::linear(hidden, param(tape, prefix + ".ff2.w"), param(tape, prefix + ".ff2.b"));
}

Var Transformer::add_norm(Tape& tape, const std::string& prefix, Var x, Var sub) {
  const Var dropped = nn::dropout(sub, config_.dropout, dropout_rng_);
  return nn::layer_norm(nn::add(x, dropped), param(tape, prefix + ".gain"), param(tape, prefix + ".bias"));
}

Var Transformer::embed(Tape& tape, const std::string& table, std::span<const TokenId> tokens, std::size_t batch,
                       std::size_t len) {
  const auto d = static_cast<std::size_t>(config_.d_emb);
  Tensor pos({batch * len, d});
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t < len; ++t) std::copy_n(pe_.ptr() + t * d, d, pos.ptr() + (b * len + t) * d);
  }
  const Var x = nn::add(nn::embedding(param(tape, table), tokens), tape.constant(std::move(pos)));
  return nn::dropout(x, config_.dropout, dropout_rng_);
}

EncoderMemory Transformer::encode(Tape& tape, std::span<const TokenId> tokens, std::span<const std::uint8_t> pad,
                                  std::size_t batch, std::size_t len) {
  if (len == 0 || len > static_cast<std::size_t>(config_.max_in_len)) {
    throw ValidationError("encoder input length " + std::to_string(len) + " outside 1.." +
                          std::to_string(config_.max_in_len));
  }
  if (tokens.size() != batch * len || pad.size() != batch * len) throw ValidationError("encoder batch size mismatch");
  attention_log_.clear();
  const auto heads = static_cast<std::size_t>(config_.heads);
  const Tensor mask = build_mask(pad, batch, len, len, false);
  Var x = embed(tape, "enc.emb", tokens, batch, len);
  for (int b = 0; b < config_.blocks; ++b) {
    const std::string p = "enc.block" + std::to_string(b);
    const AttentionOutput a = multi_head_attention(x, x, attention(tape, p + ".self"), batch, len, len, heads, mask);
    attention_log_.push_back(a.weights);
    x = add_norm(tape, p + ".norm1", x, a.out);
    x = add_norm(tape, p + ".norm2", x, feed_forward(tape, p, x));
  }
  return {x, batch, len, std::vector<std::uint8_t>(pad.begin(), pad.end())};
}

Var Transformer::decode(Tape& tape, const EncoderMemory& memory, std::span<const TokenId> tokens,
                        std::span<const std::uint8_t> pad, std::size_t len) {
  if (len == 0 || len > static_cast<std::size_t>(config_.max_out_len) + 1) {
    throw ValidationError("decoder input length " + std::to_string(len) + " outside 1.." +
                          std::to_string(config_.max_out_len + 1));
  }
  const std::size_t batch = memory.batch;
  if (tokens.size() != batch * len || pad.size() != batch * len) throw ValidationError("decoder batch size mismatch");
  const auto heads = static_cast<std::size_t>(config_.heads);
  const Tensor self_mask = build_mask(pad, batch, len, len, true);
  const Tensor cross_mask = build_mask(memory.pad, batch, len, memory.len, false);
  Var y = embed(tape, "dec.emb", tokens, batch, len);
  for (int b = 0; b < config_.blocks; ++b) {
    const std::string p = "dec.block" + std::to_string(b);
    const AttentionOutput s =
        multi_head_attention(y, y, attention(tape, p + ".self"), batch, len, len, heads, self_mask);
    attention_log_.push_back(s.weights);
    y = add_norm(tape, p + ".norm1", y, s.out);
    const AttentionOutput c = multi_head_attention(y, memory.states, attention(tape, p + ".cross"), batch, len,
                                                   memory.len, heads, cross_mask);
    attention_log_.push_back(c.weights);
    y = add_norm(tape, p + ".norm2", y, c.out);
    y = add_norm(tape, p + ".norm3", y, feed_forward(tape, p, y));
  }
  return y;
}

namespace {

// Splits framed targets into decoder inputs (all but last) and labels (all
// but first).
struct ShiftedTargets {
  std::size_t len = 0;
  std::vector<TokenId> inputs, labels;
  std::vector<std::uint8_t> pad;
};

ShiftedTargets shift_targets(const prep::Batch& b) {
  if (b.tgt_len < 2) throw ValidationError("batch has no framed targets");
  ShiftedTargets s;
  s.len = b.tgt_len - 1;
  for (std::size_t i = 0; i < b.size; ++i) {
    for (std::size_t t = 0; t < s.len; ++t) {
      s.inputs.push_back(b.target(i, t));
      s.pad.push_back(b.tgt_pad[i * b.tgt_len + t]);
      s.labels.push_back(b.target(i, t + 1));
    }
  }
  return s;
}

}  // namespace

Var Transformer::loss(Tape& tape, const prep::Batch& batch, TokenAccuracy* accuracy) {
  const EncoderMemory memory = encode(tape, batch.inputs, batch.in_pad, batch.size, batch.in_len);
  const ShiftedTargets s = shift_targets(batch);
  const Var hidden = decode(tape, memory, s.inputs, s.pad, s.len);
  const Var logits = nn::linear(hidden, param(tape, "out.w"), param(tape, "out.b"));
  if (accuracy) count_correct(logits.value(), s.labels, *accuracy);
  return nn::cross_entropy(logits, s.labels, prep::kPad);
}

namespace {

class TransformerSession final : public DecoderSession {
 public:
  TransformerSession(Transformer& model, std::span<const std::vector<TokenId>> inputs) : model_(model) {
    const prep::Batch b = prep::pad_inputs(inputs, model.config().max_in_len);
    Tape tape;
    tape.set_recording(false);
    const EncoderMemory mem = model.encode(tape, b.inputs, b.in_pad, b.size, b.in_len);
    states_ = mem.states.value();
    len_ = mem.len;
    pad_ = mem.pad;
  }

  std::vector<std::vector<double>> next_log_probs(std::span<const std::size_t> sources,
                                                  std::span<const std::vector<TokenId>> prefixes) override {
    const std::size_t n = prefixes.size();
    const std::size_t d = states_.dim(1);
    std::size_t len = 0;
    for (const auto& p : prefixes) len = std::max(len, p.size());
    Tape tape;
    tape.set_recording(false);
    Tensor mem({n * len_, d});
    std::vector<std::uint8_t> mem_pad(n * len_);
    for (std::size_t i = 0; i < n; ++i) {
      std::copy_n(states_.ptr() + sources[i] * len_ * d, len_ * d, mem.ptr() + i * len_ * d);
      std::copy_n(pad_.begin() + static_cast<std::ptrdiff_t>(sources[i] * len_), len_,
                  mem_pad.begin() + static_cast<std::ptrdiff_t>(i * len_));
    }
    const EncoderMemory memory{tape.constant(std::move(mem)), n, len_, std::move(mem_pad)};
    std::vector<TokenId> tokens(n * len, prep::kPad);
    std::vector<std::uint8_t> pad(n * len, 1);
    std::vector<std::size_t> last(n);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t t = 0; t < prefixes[i].size(); ++t) {
        tokens[i * len + t] = prefixes[i][t];
        pad[i * len + t] = 0;
      }
      last[i] = i * len + prefixes[i].size() - 1;
    }
    const Var hidden = model_.decode(tape, memory, tokens, pad, len);
    const Var logits = nn::linear(nn::gather_rows(hidden, last), tape.param(model_.params().get("out.w")),
                                  tape.param(model_.params().get("out.b")));
    const Tensor lp = log_softmax_rows(logits.value());
    std::vector<std::vector<double>> out(n);
    const std::size_t v = lp.dim(1);
    for (std::size_t i = 0; i < n; ++i) out[i].assign(lp.ptr() + i * v, lp.ptr() + (i + 1) * v);
    return out;
  }

 private:
  Transformer& model_;
  Tensor states_;
  std::size_t len_ = 0;
  std::vector<std::uint8_t> pad_;
};

}  // namespace

std::unique_ptr<DecoderSession> Transformer::start_decoding(std::span<const std::vector<TokenId>> inputs) {
  return std::make_unique<TransformerSession>(*this, inputs);
}

}  // namespace mmseq::model
