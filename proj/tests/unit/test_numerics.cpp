#include <cmath>

#include "../support/gradcheck.hpp"
#include "doctest.h"
#include "mmseq/autodiff.hpp"
#include "mmseq/checkpoint.hpp"
#include "mmseq/error.hpp"
#include "mmseq/optim.hpp"

using namespace mmseq;
using namespace mmseq::nn;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = rng.normal(0.0, scale);
  return t;
}

// Naive triple loop reference.
Tensor naive_matmul(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor c({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a.at(i, p) * b.at(p, j);
      c.at(i, j) = s;
    }
  return c;
}

// Projects any tensor to a scalar with fixed random weights so every output
// entry influences the loss.
Var probe(Var x, Rng& rng) {
  Tape& t = *x.tape;
  return sum(mul(x, t.constant(random_tensor(x.shape(), rng))));
}

void check_op(const std::function<Var(Tape&, std::vector<Var>&)>& build, std::vector<Tensor> inputs,
              double tol = 1e-6) {
  ParameterStore store;
  for (std::size_t i = 0; i < inputs.size(); ++i) store.add("x" + std::to_string(i), inputs[i]);
  const auto loss = [&](Tape& tape) {
    std::vector<Var> vars;
    for (Parameter& p : store.all()) vars.push_back(tape.param(p));
    Rng rng(99);
    return probe(build(tape, vars), rng);
  };
  const auto r = testing::grad_check(store, loss);
  INFO(r.worst);
  CHECK(r.max_rel_error < tol);
}

}  // namespace

TEST_CASE("tensor construction contract") {
  CHECK_THROWS_AS(Tensor({2, 2}, {1.0, 2.0}), ValidationError);
  const Tensor t({2, 3}, 1.5);
  CHECK(t.size() == 6);
  CHECK(t.reshaped({3, 2}).dim(0) == 3);
  CHECK_THROWS_AS(t.reshaped({4}), ValidationError);
}

TEST_CASE("gemm kernels agree with a naive product") {
  Rng rng(1);
  for (auto [m, k, n] : {std::tuple{1, 1, 1}, {3, 5, 7}, {9, 4, 300}, {17, 33, 513}, {5, 64, 2}}) {
    const Tensor a = random_tensor({std::size_t(m), std::size_t(k)}, rng);
    const Tensor b = random_tensor({std::size_t(k), std::size_t(n)}, rng);
    const Tensor ref = naive_matmul(a, b);
    Tensor c({std::size_t(m), std::size_t(n)});
    kernels::gemm_nn(m, k, n, a.ptr(), b.ptr(), c.ptr(), false);
    for (std::size_t i = 0; i < c.size(); ++i) CHECK(c[i] == doctest::Approx(ref[i]).epsilon(1e-12));
    // B^T stored explicitly
    Tensor bt({std::size_t(n), std::size_t(k)});
    for (int p = 0; p < k; ++p)
      for (int j = 0; j < n; ++j) bt.at(j, p) = b.at(p, j);
    kernels::gemm_nt(m, k, n, a.ptr(), bt.ptr(), c.ptr(), false);
    for (std::size_t i = 0; i < c.size(); ++i) CHECK(c[i] == doctest::Approx(ref[i]).epsilon(1e-12));
    Tensor at({std::size_t(k), std::size_t(m)});
    for (int i = 0; i < m; ++i)
      for (int p = 0; p < k; ++p) at.at(p, i) = a.at(i, p);
    kernels::gemm_tn(k, m, n, at.ptr(), b.ptr(), c.ptr(), false);
    for (std::size_t i = 0; i < c.size(); ++i) CHECK(c[i] == doctest::Approx(ref[i]).epsilon(1e-12));
  }
}

TEST_CASE("matmul values and errors") {
  Tape t;
  const Var a = t.constant(Tensor({2, 2}, {1, 2, 3, 4}));
  const Var b = t.constant(Tensor({2, 1}, {5, 6}));
  CHECK(matmul(a, b).value() == Tensor({2, 1}, {17, 39}));
  const Var eye = t.constant(Tensor({2, 2}, {1, 0, 0, 1}));
  CHECK(matmul(a, eye).value() == a.value());
  try {
    matmul(b, b);
    FAIL("expected shape error");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("[2,1]") != std::string::npos);
  }
}

TEST_CASE("op gradients match finite differences") {
  Rng rng(7);
  check_op([](Tape&, std::vector<Var>& v) { return matmul(v[0], v[1]); },
           {random_tensor({3, 4}, rng), random_tensor({4, 5}, rng)});
  check_op([](Tape&, std::vector<Var>& v) { return matmul(v[0], v[1]); },
           {random_tensor({2, 3, 4}, rng), random_tensor({2, 4, 2}, rng)});
  check_op([](Tape&, std::vector<Var>& v) { return matmul_nt(v[0], v[1]); },
           {random_tensor({2, 3, 4}, rng), random_tensor({2, 5, 4}, rng)});
  check_op([](Tape&, std::vector<Var>& v) { return add(v[0], v[1]); },
           {random_tensor({3, 4}, rng), random_tensor({3, 4}, rng)});
  check_op([](Tape&, std::vector<Var>& v) { return sub(v[0], mul(v[0], v[1])); },
           {random_tensor({3, 4}, rng), random_tensor({3, 4}, rng)});
  check_op([](Tape&, std::vector<Var>& v) { return add_row(v[0], v[1]); },
           {random_tensor({3, 4}, rng), random_tensor({4}, rng)});
  check_op([](Tape&, std::vector<Var>& v) { return scale(v[0], -2.5); }, {random_tensor({3}, rng)});
  check_op([](Tape&, std::vector<Var>& v) { return sigmoid(v[0]); }, {random_tensor({3, 4}, rng, 3.0)});
  check_op([](Tape&, std::vector<Var>& v) { return tanh(v[0]); }, {random_tensor({3, 4}, rng, 2.0)});
  {
    // keep every entry away from the kink at 0
    Tensor x = random_tensor({4, 4}, rng);
    for (double& e : x.data()) e += e >= 0 ? 0.1 : -0.1;
    check_op([](Tape&, std::vector<Var>& v) { return relu(v[0]); }, {x});
  }
  check_op([](Tape&, std::vector<Var>& v) { return softmax(v[0]); }, {random_tensor({3, 5}, rng, 2.0)});
  check_op([](Tape&, std::vector<Var>& v) { return layer_norm(v[0], v[1], v[2]); },
           {random_tensor({3, 6}, rng), random_tensor({6}, rng), random_tensor({6}, rng)});
  check_op([](Tape&, std::vector<Var>& v) { return concat_cols(v[0], slice_cols(v[1], 1, 3)); },
           {random_tensor({3, 2}, rng), random_tensor({3, 4}, rng)});
  check_op(
      [](Tape&, std::vector<Var>& v) {
        const std::size_t rows[] = {2, 0, 2, 1};
        return gather_rows(v[0], rows);
      },
      {random_tensor({3, 4}, rng)});
  check_op([](Tape&, std::vector<Var>& v) { return merge_heads(split_heads(v[0], 2, 3, 2), 2, 2); },
           {random_tensor({6, 4}, rng)});
  check_op([](Tape&, std::vector<Var>& v) { return split_heads(v[0], 2, 3, 2); }, {random_tensor({6, 4}, rng)});
  check_op([](Tape&, std::vector<Var>& v) { return reshape(v[0], {2, 6}); }, {random_tensor({3, 4}, rng)});
  check_op(
      [](Tape&, std::vector<Var>& v) {
        const std::int32_t ids[] = {1, 0, 1, 3};
        return embedding(v[0], ids);
      },
      {random_tensor({4, 3}, rng)});
  check_op(
      [](Tape& t, std::vector<Var>& v) {
        const std::int32_t targets[] = {1, 0, 2, 4};
        return reshape(cross_entropy(v[0], targets, 0), {1});
      },
      {random_tensor({4, 5}, rng)});
  check_op([](Tape&, std::vector<Var>& v) { return mean(v[0]); }, {random_tensor({3, 4}, rng)});
}

TEST_CASE("softmax properties") {
  Tape t;
  const Var z = softmax(t.constant(Tensor({1, 4}, 0.0)));
  for (double v : z.value().data()) CHECK(v == 0.25);
  Rng rng(3);
  const Tensor x = random_tensor({5, 7}, rng, 3.0);
  Tensor shifted = x;
  for (double& v : shifted.data()) v += 123.0;
  const Tensor a = softmax(t.constant(x)).value();
  const Tensor b = softmax(t.constant(shifted)).value();
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::abs(a[i] - b[i]) < 1e-12);
  for (std::size_t r = 0; r < 5; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < 7; ++j) s += a.at(r, j);
    CHECK(std::abs(s - 1.0) < 1e-12);
  }
}

TEST_CASE("layer norm examples") {
  Tape t;
  const Var g = t.constant(Tensor({2}, 1.0));
  const Var b = t.constant(Tensor({2}, 0.0));
  const Tensor flat = layer_norm(t.constant(Tensor({1, 2}, {4.0, 4.0})), g, b).value();
  CHECK(flat[0] == 0.0);
  CHECK(flat[1] == 0.0);
  const Tensor y = layer_norm(t.constant(Tensor({1, 2}, {1.0, 3.0})), g, b).value();
  const double expect = 1.0 / std::sqrt(1.0 + 1e-5);
  CHECK(y[0] == doctest::Approx(-expect).epsilon(1e-14));
  CHECK(y[1] == doctest::Approx(expect).epsilon(1e-14));
}

TEST_CASE("cross entropy values and contract") {
  Tape t;
  const std::int32_t targets[] = {1, 2};
  Tensor rigged({2, 4}, 0.0);
  rigged.at(0, 1) = 20.0 + 20.0;
  rigged.at(1, 2) = 40.0;
  CHECK(cross_entropy(t.constant(rigged), targets, -1).value().item() < 1e-8);
  CHECK(cross_entropy(t.constant(Tensor({2, 4}, 0.0)), targets, -1).value().item() ==
        doctest::Approx(std::log(4.0)).epsilon(1e-12));
  const std::int32_t ignored[] = {0, 0};
  CHECK_THROWS_AS(cross_entropy(t.constant(Tensor({2, 4}, 0.0)), ignored, 0), ValidationError);
  const std::int32_t out_of_range[] = {1, 4};
  CHECK_THROWS_AS(cross_entropy(t.constant(Tensor({2, 4}, 0.0)), out_of_range, -1), ValidationError);
  const std::int32_t bad_ids[] = {5};
  CHECK_THROWS_AS(embedding(t.constant(Tensor({4, 2})), bad_ids), ValidationError);
}

TEST_CASE("ignored targets contribute no gradient") {
  ParameterStore store;
  Rng rng(4);
  Parameter& p = store.add("logits", random_tensor({3, 5}, rng));
  Tape t;
  const std::int32_t targets[] = {2, 0, 4};
  t.backward(cross_entropy(t.param(p), targets, 0));
  for (std::size_t j = 0; j < 5; ++j) CHECK(p.grad.at(1, j) == 0.0);
}

TEST_CASE("activation values") {
  Tape t;
  CHECK(relu(t.constant(Tensor({3}, {-1, 0, 2}))).value() == Tensor({3}, {0, 0, 2}));
  CHECK(sigmoid(t.constant(Tensor::scalar(0))).value().item() == 0.5);
  CHECK(tanh(t.constant(Tensor::scalar(0))).value().item() == 0.0);
  ParameterStore s;
  Parameter& p = s.add("x", Tensor({1}, {0.0}));
  Tape t2;
  t2.backward(sum(relu(t2.param(p))));
  CHECK(p.grad[0] == 0.0);
}

TEST_CASE("backward is linear and ops do not mutate inputs") {
  Rng rng(5);
  ParameterStore store;
  Parameter& p = store.add("w", random_tensor({3, 3}, rng));
  const Tensor before = p.value;
  auto f = [&](Tape& t) { return sum(tanh(matmul(t.param(p), t.param(p)))); };
  auto g = [&](Tape& t) { return sum(softmax(t.param(p))); };
  auto grad_of = [&](const std::function<Var(Tape&)>& fn) {
    store.zero_grad();
    Tape t;
    t.backward(fn(t));
    return p.grad;
  };
  const Tensor gf = grad_of(f);
  const Tensor gg = grad_of(g);
  const Tensor gc = grad_of([&](Tape& t) { return add(scale(f(t), 2.0), scale(g(t), -3.0)); });
  for (std::size_t i = 0; i < gc.size(); ++i) CHECK(gc[i] == doctest::Approx(2.0 * gf[i] - 3.0 * gg[i]).epsilon(1e-12));
  CHECK(p.value == before);
}

TEST_CASE("shared parameters accumulate and each node is visited once") {
  ParameterStore store;
  Parameter& p = store.add("x", Tensor({1}, {3.0}));
  Tape t;
  const Var x = t.param(p);
  t.backward(sum(mul(x, x)));  // d/dx x^2 = 6
  CHECK(p.grad[0] == 6.0);
}

TEST_CASE("non-finite values raise NumericError when checking is on") {
  Tape t;
  t.set_check_finite(true);
  const Var x = t.constant(Tensor({1}, {1e308}));
  CHECK_THROWS_AS(scale(x, 10.0), NumericError);
}

TEST_CASE("adam step") {
  ParameterStore store;
  Parameter& p = store.add("w", Tensor({2}, {1.0, -2.0}));
  AdamConfig cfg;
  cfg.lr = 1e-3;
  adam_step(store, cfg);  // zero grads
  CHECK(p.value == Tensor({2}, {1.0, -2.0}));
  CHECK(store.step == 1);

  ParameterStore s2;
  Parameter& q = s2.add("w", Tensor({1}, {0.5}));
  q.grad[0] = 1.0;
  adam_step(s2, cfg);
  CHECK(q.value[0] - 0.5 == doctest::Approx(-cfg.lr / (1.0 + cfg.eps)).epsilon(1e-12));

  q.grad[0] = std::nan("");
  CHECK_THROWS_AS(adam_step(s2, cfg), NumericError);
}

TEST_CASE("adam runs are reproducible") {
  auto run = []() {
    Rng rng(10);
    ParameterStore store;
    store.add_uniform("w", {4, 3}, 4, rng);
    for (int step = 0; step < 20; ++step) {
      store.zero_grad();
      Tape t;
      t.backward(sum(tanh(t.param(store.get("w")))));
      adam_step(store, AdamConfig{});
    }
    return store.get("w").value;
  };
  CHECK(run() == run());
}

TEST_CASE("checkpoint round trip") {
  Rng rng(6);
  ParameterStore store;
  store.add_uniform("enc.w", {3, 4}, 3, rng);
  store.add_normal("emb", {5, 2}, 1.0, rng);
  store.get("enc.w").adam_m.fill(0.25);
  store.step = 17;
  Checkpoint ck;
  ck.model_tag = "TFM";
  ck.hyper["d_emb"] = "8";
  store_to_checkpoint(store, ck, true);
  const std::string bytes = serialize_checkpoint(ck);
  CHECK(bytes.substr(0, 6) == "MMSEQ1");
  CHECK(serialize_checkpoint(parse_checkpoint(bytes)) == bytes);

  const Checkpoint back = parse_checkpoint(bytes);
  CHECK(back.model_tag == "TFM");
  CHECK(back.hyper.at("d_emb") == "8");
  ParameterStore fresh;
  fresh.add("enc.w", Tensor({3, 4}));
  fresh.add("emb", Tensor({5, 2}));
  store_from_checkpoint(fresh, back);
  CHECK(fresh.step == 17);
  CHECK(fresh.get("enc.w").adam_m[0] == 0.25);
  for (std::size_t i = 0; i < 12; ++i) {
    CHECK(fresh.get("enc.w").value[i] == static_cast<double>(static_cast<float>(store.get("enc.w").value[i])));
  }

  CHECK_THROWS_AS(parse_checkpoint("MMSEQ2"), ValidationError);
  CHECK_THROWS_AS(parse_checkpoint(bytes.substr(0, bytes.size() - 3)), ValidationError);
  ParameterStore wrong;
  wrong.add("enc.w", Tensor({4, 3}));
  CHECK_THROWS_AS(store_from_checkpoint(wrong, back), ValidationError);
}
