#include "mmseq/rnn.hpp"

#include <map>
#include <optional>

#include "mmseq/error.hpp"
#include "mmseq/transformer.hpp"

namespace mmseq::model {

using nn::Shape;
using nn::Tape;
using nn::Tensor;
using nn::Var;

void GruConfig::validate() const {
  if (d_emb <= 0 || hidden <= 0) throw ValidationError("GRU dimensions must be positive");
  if (max_in_len <= 0 || max_out_len <= 0) throw ValidationError("GRU max lengths must be positive");
  if (src_vocab <= prep::kNumSpecials || tgt_vocab <= prep::kNumSpecials) {
    throw ValidationError("vocabularies must contain more than the special tokens");
  }
}

Hyper GruConfig::to_hyper() const {
  return {{"d_emb", std::to_string(d_emb)},       {"hidden", std::to_string(hidden)},
          {"max_in", std::to_string(max_in_len)}, {"max_out", std::to_string(max_out_len)},
          {"src_vocab", std::to_string(src_vocab)}, {"tgt_vocab", std::to_string(tgt_vocab)},
          {"seed", std::to_string(seed)}};
}

GruConfig GruConfig::from_hyper(const Hyper& h) {
  GruConfig c;
  c.d_emb = static_cast<int>(hyper_int(h, "d_emb"));
  c.hidden = static_cast<int>(hyper_int(h, "hidden"));
  c.max_in_len = static_cast<int>(hyper_int(h, "max_in"));
  c.max_out_len = static_cast<int>(hyper_int(h, "max_out"));
  c.src_vocab = static_cast<int>(hyper_int(h, "src_vocab"));
  c.tgt_vocab = static_cast<int>(hyper_int(h, "tgt_vocab"));
  c.seed = hyper_uint(h, "seed");
  c.validate();
  return c;
}

Var gru_cell(Var x, Var h_prev, const GruParams& p) {
  const std::size_t hidden = h_prev.dim(1);
  if (x.value().rank() != 2 || h_prev.value().rank() != 2 || x.dim(0) != h_prev.dim(0)) {
    throw ValidationError("gru_cell expects [batch, in] and [batch, hidden]");
  }
  if (p.w_r.dim(0) != hidden + x.dim(1) || p.w_r.dim(1) != hidden) {
    throw ValidationError("gru_cell weight " + nn::shape_str(p.w_r.shape()) + " does not match hidden " +
                          std::to_string(hidden) + " and input " + std::to_string(x.dim(1)));
  }
  const Var hx = nn::concat_cols(h_prev, x);
  const Var r = nn::sigmoid(nn::linear(hx, p.w_r, p.b_r));
  const Var u = nn::sigmoid(nn::linear(hx, p.w_u, p.b_u));
  const Var candidate = nn::tanh(nn::linear(nn::concat_cols(nn::mul(r, h_prev), x), p.w_h, p.b_h));
  return nn::add(h_prev, nn::mul(u, nn::sub(candidate, h_prev)));
}

namespace {

// 1 where step t is real for that row, broadcast across `width` columns;
// empty when every row is real.
std::optional<Tensor> step_mask(std::span<const std::size_t> lengths, std::size_t t, std::size_t width) {
  bool all = true;
  for (const std::size_t l : lengths) all = all && t < l;
  if (all) return std::nullopt;
  Tensor m({lengths.size(), width});
  for (std::size_t b = 0; b < lengths.size(); ++b) {
    if (t < lengths[b]) std::fill_n(m.ptr() + b * width, width, 1.0);
  }
  return m;
}

Var masked_update(Tape& tape, Var h_prev, Var h_new, const std::optional<Tensor>& mask) {
  if (!mask) return h_new;
  return nn::add(h_prev, nn::mul(tape.constant(*mask), nn::sub(h_new, h_prev)));
}

}  // namespace

BiGruOutput bigru_encode(Var embedded, std::span<const std::size_t> lengths, std::size_t len, const GruParams& fwd,
                         const GruParams& bwd) {
  Tape& tape = *embedded.tape;
  const std::size_t batch = lengths.size();
  if (embedded.dim(0) != batch * len) throw ValidationError("bigru_encode: embedded rows != batch * len");
  for (const std::size_t l : lengths) {
    if (l == 0 || l > len) throw ValidationError("bigru_encode: row length outside 1..len");
  }
  const std::size_t hidden = fwd.b_r.dim(0);
  std::vector<std::size_t> rows(batch);
  auto step_input = [&](std::size_t t) {
    for (std::size_t b = 0; b < batch; ++b) rows[b] = b * len + t;
    return nn::gather_rows(embedded, rows);
  };

  std::vector<Var> f(len), bk(len);
  Var h = tape.constant(Tensor({batch, hidden}));
  for (std::size_t t = 0; t < len; ++t) {
    h = masked_update(tape, h, gru_cell(step_input(t), h, fwd), step_mask(lengths, t, hidden));
    f[t] = h;
  }
  const Var last_fwd = h;
  h = tape.constant(Tensor({batch, hidden}));
  for (std::size_t t = len; t-- > 0;) {
    h = masked_update(tape, h, gru_cell(step_input(t), h, bwd), step_mask(lengths, t, hidden));
    bk[t] = h;
  }
  std::vector<Var> parts;
  parts.reserve(2 * len);
  for (std::size_t t = 0; t < len; ++t) {
    parts.push_back(f[t]);
    parts.push_back(bk[t]);
  }
  const Var states = nn::reshape(nn::concat_cols(parts), {batch * len, 2 * hidden});
  return {states, last_fwd, bk[0]};
}

LuongStep luong_step(Var y_prev_embedded, Var s_prev, Var states, Var keys, const Tensor& mask, const GruParams& cell,
                     const LuongParams& attn) {
  Tape& tape = *s_prev.tape;
  const std::size_t batch = s_prev.dim(0);
  const std::size_t width = s_prev.dim(1);
  const std::size_t len = states.dim(1);
  if (states.value().rank() != 3 || states.dim(0) != batch || keys.dim(1) != len || keys.dim(2) != width ||
      mask.shape() != Shape{batch, len}) {
    throw ValidationError("luong_step: encoder states, keys and mask disagree");
  }
  const Var s = gru_cell(y_prev_embedded, s_prev, cell);
  const Var scores = nn::reshape(nn::matmul_nt(nn::reshape(s, {batch, 1, width}), keys), {batch, len});
  const Var weights = nn::softmax(nn::add(scores, tape.constant(mask)));
  const Var context =
      nn::reshape(nn::matmul(nn::reshape(weights, {batch, 1, len}), states), {batch, states.dim(2)});
  const Var combined = nn::tanh(nn::matmul(nn::concat_cols(context, s), attn.w_c));
  return {nn::matmul(combined, attn.w_s), s, weights};
}

GruSeq2Seq::GruSeq2Seq(const GruConfig& config) : config_(config) {
  config_.validate();
  Rng rng(derive_seed(config_.seed, "gru.init"));
  const auto emb = static_cast<std::size_t>(config_.d_emb);
  const auto enc2 = static_cast<std::size_t>(2 * config_.hidden);
  const auto dw = static_cast<std::size_t>(config_.decoder_width());
  params_.add_normal("enc.emb", {static_cast<std::size_t>(config_.src_vocab), emb}, 1.0, rng);
  params_.add_normal("dec.emb", {static_cast<std::size_t>(config_.tgt_vocab), emb}, 1.0, rng);
  add_cell("enc.fwd", config_.d_emb, config_.hidden, rng);
  add_cell("enc.bwd", config_.d_emb, config_.hidden, rng);
  params_.add_uniform("init.w", {enc2, dw}, enc2, rng);
  params_.add_uniform("init.b", {dw}, enc2, rng);
  add_cell("dec.cell", config_.d_emb, config_.decoder_width(), rng);
  params_.add_uniform("attn.wa", {dw, enc2}, enc2, rng);
  params_.add_uniform("attn.wc", {enc2 + dw, dw}, enc2 + dw, rng);
  params_.add_uniform("attn.ws", {dw, static_cast<std::size_t>(config_.tgt_vocab)}, dw, rng);
}

void GruSeq2Seq::add_cell(const std::string& prefix, int in, int hidden, Rng& rng) {
  const auto fan_in = static_cast<std::size_t>(in + hidden);
  for (const char* gate : {"r", "u", "h"}) {
    params_.add_uniform(prefix + ".w" + gate, {fan_in, static_cast<std::size_t>(hidden)}, fan_in, rng);
    params_.add_uniform(prefix + ".b" + gate, {static_cast<std::size_t>(hidden)}, fan_in, rng);
  }
}

GruParams GruSeq2Seq::cell(Tape& tape, const std::string& prefix) {
  auto p = [&](const char* n) { return param(tape, prefix + "." + n); };
  return {p("wr"), p("br"), p("wu"), p("bu"), p("wh"), p("bh")};
}

LuongParams GruSeq2Seq::attention(Tape& tape) {
  return {param(tape, "attn.wa"), param(tape, "attn.wc"), param(tape, "attn.ws")};
}

GruSeq2Seq::Encoded GruSeq2Seq::encode(Tape& tape, const prep::Batch& batch) {
  const std::size_t len = batch.in_len;
  if (len == 0 || len > static_cast<std::size_t>(config_.max_in_len)) {
    throw ValidationError("encoder input length " + std::to_string(len) + " outside 1.." +
                          std::to_string(config_.max_in_len));
  }
  const Var embedded = nn::embedding(param(tape, "enc.emb"), batch.inputs);
  const BiGruOutput out =
      bigru_encode(embedded, batch.in_lengths, len, cell(tape, "enc.fwd"), cell(tape, "enc.bwd"));
  const std::size_t enc2 = out.states.dim(1);
  const std::size_t dw = static_cast<std::size_t>(config_.decoder_width());
  Encoded e;
  e.states = nn::reshape(out.states, {batch.size, len, enc2});
  e.keys = nn::reshape(nn::matmul_nt(out.states, param(tape, "attn.wa")), {batch.size, len, dw});
  e.init = nn::tanh(nn::linear(nn::concat_cols(out.last_fwd, out.first_bwd), param(tape, "init.w"),
                               param(tape, "init.b")));
  e.mask = Tensor({batch.size, len});
  for (std::size_t i = 0; i < batch.size * len; ++i) {
    if (batch.in_pad[i]) e.mask[i] = kMaskValue;
  }
  return e;
}

LuongStep GruSeq2Seq::step(Tape& tape, const Encoded& enc, std::span<const TokenId> y_prev, Var s_prev) {
  return luong_step(nn::embedding(param(tape, "dec.emb"), y_prev), s_prev, enc.states, enc.keys, enc.mask,
                    cell(tape, "dec.cell"), attention(tape));
}

Var GruSeq2Seq::loss(Tape& tape, const prep::Batch& batch, TokenAccuracy* accuracy) {
  if (batch.tgt_len < 2) throw ValidationError("batch has no framed targets");
  if (batch.tgt_len - 2 > static_cast<std::size_t>(config_.max_out_len)) {
    throw ValidationError("target length exceeds max_out");
  }
  const Encoded enc = encode(tape, batch);
  const std::size_t steps = batch.tgt_len - 1;
  std::vector<Var> logits;
  logits.reserve(steps);
  std::vector<TokenId> y(batch.size);
  Var s = enc.init;
  for (std::size_t t = 0; t < steps; ++t) {
    for (std::size_t b = 0; b < batch.size; ++b) y[b] = batch.target(b, t);
    const LuongStep st = step(tape, enc, y, s);
    logits.push_back(st.logits);
    s = st.state;
  }
  std::vector<TokenId> labels;
  labels.reserve(batch.size * steps);
  for (std::size_t b = 0; b < batch.size; ++b) {
    for (std::size_t t = 0; t < steps; ++t) labels.push_back(batch.target(b, t + 1));
  }
  const Var all = nn::reshape(nn::concat_cols(logits), {batch.size * steps, target_vocab()});
  if (accuracy) count_correct(all.value(), labels, *accuracy);
  return nn::cross_entropy(all, labels, prep::kPad);
}

namespace {

// Caches the decoder state reached after consuming each prefix so beam and
// greedy search only run one cell step per query.
class GruSession final : public DecoderSession {
 public:
  GruSession(GruSeq2Seq& model, std::span<const std::vector<TokenId>> inputs) : model_(model) {
    const prep::Batch b = prep::pad_inputs(inputs, model.config().max_in_len);
    Tape tape;
    tape.set_recording(false);
    const GruSeq2Seq::Encoded e = model.encode(tape, b);
    states_ = e.states.value();
    keys_ = e.keys.value();
    mask_ = e.mask;
    const Tensor& init = e.init.value();
    const std::size_t w = init.dim(1);
    for (std::size_t i = 0; i < b.size; ++i) {
      cache_[{i, {}}] = std::vector<double>(init.ptr() + i * w, init.ptr() + (i + 1) * w);
    }
  }

  std::vector<std::vector<double>> next_log_probs(std::span<const std::size_t> sources,
                                                  std::span<const std::vector<TokenId>> prefixes) override {
    const std::size_t n = prefixes.size();
    const std::size_t len = states_.dim(1), enc2 = states_.dim(2), w = keys_.dim(2);
    std::vector<const std::vector<double>*> parents(n);
    for (std::size_t i = 0; i < n; ++i) {
      if (prefixes[i].empty()) throw ValidationError("decoder prefix must start with BOS");
      std::vector<TokenId> parent(prefixes[i].begin(), prefixes[i].end() - 1);
      auto it = cache_.find({sources[i], parent});
      if (it == cache_.end()) {
        const std::size_t src[] = {sources[i]};
        next_log_probs(src, std::span<const std::vector<TokenId>>(&parent, 1));
        it = cache_.find({sources[i], parent});
      }
      parents[i] = &it->second;
    }
    Tensor states({n, len, enc2}), keys({n, len, w}), mask({n, len}), s_prev({n, w});
    std::vector<TokenId> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t src = sources[i];
      std::copy_n(states_.ptr() + src * len * enc2, len * enc2, states.ptr() + i * len * enc2);
      std::copy_n(keys_.ptr() + src * len * w, len * w, keys.ptr() + i * len * w);
      std::copy_n(mask_.ptr() + src * len, len, mask.ptr() + i * len);
      std::copy(parents[i]->begin(), parents[i]->end(), s_prev.ptr() + i * w);
      y[i] = prefixes[i].back();
    }
    Tape tape;
    tape.set_recording(false);
    GruSeq2Seq::Encoded enc{tape.constant(std::move(states)), tape.constant(std::move(keys)), Var{},
                            std::move(mask)};
    const LuongStep st = model_.step(tape, enc, y, tape.constant(std::move(s_prev)));
    const Tensor& s = st.state.value();
    for (std::size_t i = 0; i < n; ++i) {
      cache_[{sources[i], prefixes[i]}] = std::vector<double>(s.ptr() + i * w, s.ptr() + (i + 1) * w);
    }
    const Tensor lp = log_softmax_rows(st.logits.value());
    const std::size_t v = lp.dim(1);
    std::vector<std::vector<double>> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i].assign(lp.ptr() + i * v, lp.ptr() + (i + 1) * v);
    return out;
  }

 private:
  GruSeq2Seq& model_;
  Tensor states_, keys_, mask_;
  std::map<std::pair<std::size_t, std::vector<TokenId>>, std::vector<double>> cache_;
};

}  // namespace

std::unique_ptr<DecoderSession> GruSeq2Seq::start_decoding(std::span<const std::vector<TokenId>> inputs) {
  return std::make_unique<GruSession>(*this, inputs);
}

}  // namespace mmseq::model
