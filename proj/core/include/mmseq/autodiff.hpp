#pragma once

// Tape-based reverse-mode differentiation over Tensor values.

#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "mmseq/rng.hpp"
#include "mmseq/tensor.hpp"

namespace mmseq::nn {

class Tape;

/// Trainable tensor with its accumulated gradient and Adam moments.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  Tensor adam_m;
  Tensor adam_v;

  Parameter(std::string n, Tensor v);
  void zero_grad();
};

/// Handle to a tape node.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const;
  std::size_t dim(std::size_t i) const { return shape().at(i); }
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t)>;

  Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Value that receives no gradient.
  Var constant(Tensor value);
  /// Free input that receives a gradient (tests, probing).
  Var input(Tensor value);
  /// Parameter input; backward() adds its gradient into p.grad.
  Var param(Parameter& p);

  /// Propagates d(root)/d(node) to every node that depends on a gradient
  /// input; root must hold exactly one element. Each node is visited once.
  void backward(Var root);

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  /// Gradient of a node after backward(); empty when none reached it.
  const Tensor& grad(std::size_t id) const { return nodes_[id].grad; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Disabling recording makes every op produce constants (inference).
  void set_recording(bool on) noexcept { recording_ = on; }
  bool recording() const noexcept { return recording_; }
  /// When on, every op checks its output for NaN/inf and throws NumericError.
  void set_check_finite(bool on) noexcept { check_finite_ = on; }
  bool training() const noexcept { return training_; }
  void set_training(bool on) noexcept { training_ = on; }

  // Used by op implementations.
  Var record(Tensor value, std::span<const Var> parents, Backward backward, const char* op);
  Var record(Tensor value, std::initializer_list<Var> parents, Backward backward, const char* op) {
    return record(std::move(value), std::span<const Var>(parents.begin(), parents.size()), std::move(backward), op);
  }
  /// Gradient buffer of a node, zero-allocated on first use.
  Tensor& grad_buffer(std::size_t id);

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    Backward backward;
    Parameter* param = nullptr;
  };

  std::deque<Node> nodes_;
  bool recording_ = true;
  bool check_finite_ = false;
  bool training_ = false;
};

// --- ops -------------------------------------------------------------------
// Shapes: rank-2 [rows, cols] unless stated; batched ops use rank-3 [B, m, n].

/// [m,k]x[k,n] or batched [B,m,k]x[B,k,n].
Var matmul(Var a, Var b);
/// a x b^T: [m,k]x[n,k] or batched [B,m,k]x[B,n,k].
Var matmul_nt(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
/// Adds a [n] vector to every row of a [..., n] tensor.
Var add_row(Var a, Var row);
Var scale(Var a, double s);
Var relu(Var a);
Var sigmoid(Var a);
Var tanh(Var a);
/// Softmax over the last axis.
Var softmax(Var a);
/// Normalizes over the last axis, then gain * x + bias.
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
/// Rows of table [V, d] picked by ids; result [ids.size(), d].
Var embedding(Var table, std::span<const std::int32_t> ids);
/// Mean negative log-likelihood of targets under softmax(logits [N, V]),
/// skipping rows whose target equals ignore_id.
Var cross_entropy(Var logits, std::span<const std::int32_t> targets, std::int32_t ignore_id);
/// Concatenates rank-2 tensors along columns.
Var concat_cols(std::span<const Var> parts);
Var concat_cols(Var a, Var b);
/// Columns [begin, end) of a rank-2 tensor.
Var slice_cols(Var a, std::size_t begin, std::size_t end);
/// Rows of a rank-2 tensor picked by index (repeats allowed).
Var gather_rows(Var a, std::span<const std::size_t> rows);
Var reshape(Var a, Shape shape);
/// [B*L, H*dk] -> [B*H, L, dk]
Var split_heads(Var x, std::size_t batch, std::size_t len, std::size_t heads);
/// [B*H, L, dk] -> [B*L, H*dk]
Var merge_heads(Var x, std::size_t batch, std::size_t heads);
/// Inverted dropout; identity unless the tape is in training mode.
Var dropout(Var a, double rate, Rng& rng);
Var sum(Var a);
Var mean(Var a);

/// x W + b with W [in, out] and b [out].
Var linear(Var x, Var w, Var b);

}  // namespace mmseq::nn
