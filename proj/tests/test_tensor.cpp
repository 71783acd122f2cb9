#include <doctest.h>

#include <cmath>

#include "moco/gradcheck.hpp"
#include "moco/tensor.hpp"

using namespace moco;

namespace {

Tensor randn(Shape shape, RngStream& rng, bool requires_grad = true) {
  Tensor t = Tensor::zeros(std::move(shape), requires_grad);
  fill_normal(t, rng, 0.0, 1.0);
  return t;
}

std::vector<double> weights_for(const Tensor& t, RngStream& rng) {
  std::vector<double> w(t.size());
  for (double& v : w) v = rng.normal();
  return w;
}

}  // namespace

TEST_CASE("matmul identity and annihilation") {
  Tensor eye = Tensor::from_values({2, 2}, {1, 0, 0, 1});
  Tensor m = Tensor::from_values({2, 2}, {1, 2, 3, 4});
  Tensor out = matmul(eye, m);
  CHECK(out.values() == std::vector<double>{1, 2, 3, 4});

  Tensor a = Tensor::from_values({2, 2}, {1, 0, 0, 0});
  Tensor b = Tensor::from_values({2, 1}, {0, 5});
  CHECK(matmul(a, b).values() == std::vector<double>{0, 0});

  CHECK_THROWS_AS(matmul(a, Tensor::zeros({3, 1})), DimensionError);
}

TEST_CASE("matmul gradients vs finite differences") {
  RngStream rng(11);
  Tensor a = randn({3, 4}, rng);
  Tensor b = randn({4, 2}, rng);
  const auto w = weights_for(Tensor::zeros({3, 2}), rng);
  const double err = max_rel_gradient_error(
      [&]() { return masked_sum(matmul(a, b), w); }, {a, b});
  CHECK(err < 1e-6);
}

TEST_CASE("batched_dot values") {
  Tensor q = Tensor::from_values({2, 2}, {1, 0, 0.6, 0.8});
  Tensor k = Tensor::from_values({2, 2}, {1, 0, 0.8, 0.6});
  Tensor out = batched_dot(q, k);
  CHECK(out.values()[0] == doctest::Approx(1.0));
  CHECK(out.values()[1] == doctest::Approx(0.96));
  CHECK_THROWS_AS(batched_dot(q, Tensor::zeros({2, 3})), DimensionError);
}

TEST_CASE("batched_dot equals diagonal of full matmul") {
  RngStream rng(12);
  Tensor q = randn({5, 7}, rng, false);
  Tensor k = randn({5, 7}, rng, false);
  Tensor dots = batched_dot(q, k);
  // oracle: full N x N similarity, take the diagonal
  for (std::size_t i = 0; i < 5; ++i) {
    double full = 0.0;
    for (std::size_t c = 0; c < 7; ++c) {
      full += q.values()[i * 7 + c] * k.values()[i * 7 + c];
    }
    CHECK(dots.values()[i] == doctest::Approx(full).epsilon(1e-12));
  }
}

TEST_CASE("conv2d trivial kernels") {
  // 1x1 kernel of weight 1 is the identity on values
  Tensor x = Tensor::from_values({1, 1, 2, 2}, {1, 2, 3, 4});
  Tensor w1 = Tensor::from_values({1, 1, 1, 1}, {1});
  CHECK(conv2d(x, w1, 1, 0).values() == std::vector<double>{1, 2, 3, 4});

  Tensor ones_in = Tensor::full({1, 1, 3, 3}, 1.0);
  Tensor ones_k = Tensor::full({1, 1, 3, 3}, 1.0);
  Tensor out = conv2d(ones_in, ones_k, 1, 0);
  CHECK(out.shape() == Shape{1, 1, 1, 1});
  CHECK(out.values()[0] == doctest::Approx(9.0));

  CHECK_THROWS_AS(conv2d(ones_in, Tensor::zeros({1, 1, 5, 5}), 1, 0),
                  DimensionError);
}

TEST_CASE("conv2d gradients vs finite differences") {
  RngStream rng(13);
  Tensor x = randn({2, 2, 5, 5}, rng);
  Tensor w = randn({3, 2, 3, 3}, rng);
  Tensor probe = conv2d(x, w, 2, 1);
  const auto mask = weights_for(probe, rng);
  const double err = max_rel_gradient_error(
      [&]() { return masked_sum(conv2d(x, w, 2, 1), mask); }, {x, w});
  CHECK(err < 1e-5);
}

TEST_CASE("relu, global_avg_pool, linear basics") {
  Tensor x = Tensor::from_values({1, 3}, {-1, 0, 2});
  CHECK(relu(x).values() == std::vector<double>{0, 0, 2});

  Tensor cmap = Tensor::full({2, 3, 4, 4}, 2.5);
  Tensor pooled = global_avg_pool(cmap);
  CHECK(pooled.shape() == Shape{2, 3});
  for (double v : pooled.values()) CHECK(v == doctest::Approx(2.5));

  RngStream rng(14);
  Tensor xi = randn({4, 5}, rng);
  Tensor w = randn({5, 3}, rng);
  Tensor b = randn({3}, rng);
  const auto mask = weights_for(Tensor::zeros({4, 3}), rng);
  const double err = max_rel_gradient_error(
      [&]() { return masked_sum(linear(xi, w, b), mask); }, {xi, w, b});
  CHECK(err < 1e-6);
}

TEST_CASE("batch_norm constant input collapses to beta") {
  Tensor x = Tensor::full({6, 3}, 4.2);
  BnState st = make_bn_state(3);
  st.beta.values() = {0.5, -1.0, 2.0};
  Tensor out = batch_norm(x, st, bn_train_single(6));
  for (std::size_t i = 0; i < 6; ++i) {
    CHECK(out.values()[i * 3 + 0] == doctest::Approx(0.5).epsilon(1e-9));
    CHECK(out.values()[i * 3 + 1] == doctest::Approx(-1.0).epsilon(1e-9));
    CHECK(out.values()[i * 3 + 2] == doctest::Approx(2.0).epsilon(1e-9));
  }
}

TEST_CASE("batch_norm per-shard normalization is independent") {
  RngStream rng(15);
  Tensor x = Tensor::zeros({8, 2});
  // two shards with very different means
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t c = 0; c < 2; ++c) {
      x.values()[i * 2 + c] = 100.0 + rng.normal();
      x.values()[(4 + i) * 2 + c] = -50.0 + rng.normal();
    }
  }
  BnState st = make_bn_state(2);
  Tensor out = batch_norm(x, st, bn_train({{0, 4}, {4, 8}}));
  for (std::size_t shard = 0; shard < 2; ++shard) {
    for (std::size_t c = 0; c < 2; ++c) {
      double mean = 0.0;
      for (std::size_t i = 0; i < 4; ++i) {
        mean += out.values()[(shard * 4 + i) * 2 + c];
      }
      CHECK(mean / 4.0 == doctest::Approx(0.0).epsilon(1e-9));
    }
  }
}

TEST_CASE("batch_norm sharded equals concatenated single-shard runs") {
  RngStream rng(16);
  Tensor x = randn({12, 3}, rng, false);
  BnState st = make_bn_state(3);
  fill_uniform(st.gamma, rng, 0.5, 1.5);
  fill_uniform(st.beta, rng, -0.5, 0.5);

  BnState st_copy = make_bn_state(3);
  st_copy.gamma.values() = st.gamma.values();
  st_copy.beta.values() = st.beta.values();

  Tensor sharded = batch_norm(x, st, bn_train({{0, 4}, {4, 8}, {8, 12}}));
  for (std::size_t shard = 0; shard < 3; ++shard) {
    Tensor piece = Tensor::zeros({4, 3});
    std::copy_n(x.values().data() + shard * 12, 12, piece.values().data());
    Tensor normed = batch_norm(piece, st_copy, bn_train_single(4));
    for (std::size_t i = 0; i < 12; ++i) {
      CHECK(std::abs(sharded.values()[shard * 12 + i] - normed.values()[i]) <
            1e-12);
    }
  }
}

TEST_CASE("batch_norm error classes") {
  Tensor x = Tensor::full({4, 2}, 1.0);
  BnState st = make_bn_state(2);
  CHECK_THROWS_AS(batch_norm(x, st, bn_train({{0, 1}, {1, 4}})),
                  DegenerateShardError);
  st.running_var.values()[1] = -0.5;
  CHECK_THROWS_AS(batch_norm(x, st, bn_eval()), CorruptionError);
}

TEST_CASE("batch_norm gradients vs finite differences") {
  RngStream rng(17);
  Tensor x = randn({8, 3}, rng);
  BnState st = make_bn_state(3);
  fill_uniform(st.gamma, rng, 0.5, 1.5);
  fill_uniform(st.beta, rng, -0.5, 0.5);
  const auto mask = weights_for(x, rng);
  const BnMode mode = bn_train({{0, 4}, {4, 8}});
  const double err = max_rel_gradient_error(
      [&]() { return masked_sum(batch_norm(x, st, mode), mask); },
      {x, st.gamma, st.beta});
  CHECK(err < 1e-4);
}

TEST_CASE("l2_normalize values and properties") {
  Tensor x = Tensor::from_values({1, 2}, {3, 4});
  Tensor y = l2_normalize(x);
  CHECK(y.values()[0] == doctest::Approx(0.6));
  CHECK(y.values()[1] == doctest::Approx(0.8));

  RngStream rng(18);
  Tensor r = randn({6, 5}, rng, false);
  Tensor n1 = l2_normalize(r);
  for (std::size_t i = 0; i < 6; ++i) {
    double sq = 0.0;
    for (std::size_t j = 0; j < 5; ++j) {
      sq += n1.values()[i * 5 + j] * n1.values()[i * 5 + j];
    }
    CHECK(std::abs(std::sqrt(sq) - 1.0) < 1e-6);
  }
  Tensor n2 = l2_normalize(n1);
  for (std::size_t i = 0; i < n1.size(); ++i) {
    CHECK(std::abs(n1.values()[i] - n2.values()[i]) < 1e-10);
  }

  CHECK_THROWS_AS(l2_normalize(Tensor::zeros({2, 3})), DegenerateFeatureError);
}

TEST_CASE("l2_normalize gradients vs finite differences") {
  RngStream rng(19);
  Tensor x = randn({5, 6}, rng);
  const auto mask = weights_for(x, rng);
  const double err = max_rel_gradient_error(
      [&]() { return masked_sum(l2_normalize(x), mask); }, {x});
  CHECK(err < 1e-5);
}

TEST_CASE("softmax_cross_entropy analytic cases") {
  Tensor uniform = Tensor::full({3, 4}, 0.7);
  Tensor loss = softmax_cross_entropy(uniform, {0, 1, 3});
  CHECK(loss.values()[0] == doctest::Approx(std::log(4.0)).epsilon(1e-12));

  // forced stabilization: huge positive logit on the target
  Tensor spiked = Tensor::zeros({2, 5});
  spiked.values()[2] = 1e6;
  spiked.values()[5 + 4] = 1e6;
  Tensor tiny = softmax_cross_entropy(spiked, {2, 4});
  CHECK(std::isfinite(tiny.values()[0]));
  CHECK(tiny.values()[0] < 1e-9);

  CHECK_THROWS_AS(softmax_cross_entropy(uniform, {0, 4, 1}), IndexError);
}

TEST_CASE("softmax_cross_entropy shift invariance") {
  RngStream rng(20);
  Tensor logits = randn({6, 9}, rng, false);
  std::vector<std::size_t> targets = {0, 3, 8, 2, 5, 1};
  const double base = softmax_cross_entropy(logits, targets).values()[0];
  Tensor shifted = logits.clone();
  for (std::size_t i = 0; i < 6; ++i) {
    const double c = rng.uniform(-7.0, 7.0);
    for (std::size_t j = 0; j < 9; ++j) shifted.values()[i * 9 + j] += c;
  }
  const double moved = softmax_cross_entropy(shifted, targets).values()[0];
  CHECK(std::abs(base - moved) < 1e-10);
}

TEST_CASE("softmax_cross_entropy gradients vs finite differences") {
  RngStream rng(21);
  Tensor logits = randn({6, 9}, rng);
  std::vector<std::size_t> targets(6);
  for (auto& t : targets) t = rng.uniform_index(9);
  const double err = max_rel_gradient_error(
      [&]() { return softmax_cross_entropy(logits, targets); }, {logits});
  CHECK(err < 1e-6);
}

TEST_CASE("backward seeds ones through sum") {
  Tensor x = Tensor::from_values({3}, {5, -2, 7}, true);
  Tape tape;
  {
    TapeScope scope(tape);
    Tensor loss = sum(x);
    backward(loss, tape);
  }
  CHECK(x.grad() == std::vector<double>{1, 1, 1});
}

TEST_CASE("backward leaves detached operands without gradient") {
  Tensor x = Tensor::from_values({2, 2}, {1, 2, 3, 4}, true);
  Tensor d = x.detached();
  Tape tape;
  {
    TapeScope scope(tape);
    Tensor loss = sum(concat_cols(x, d));
    backward(loss, tape);
  }
  CHECK(x.has_grad());
  CHECK_FALSE(d.has_grad());
  CHECK(tape.received_grad(x));
  CHECK_FALSE(tape.received_grad(d));
}

TEST_CASE("backward accumulates over fan-out") {
  Tensor x = Tensor::from_values({2, 1}, {3, 4}, true);
  Tape tape;
  {
    TapeScope scope(tape);
    Tensor loss = sum(concat_cols(x, x));
    backward(loss, tape);
  }
  CHECK(x.grad() == std::vector<double>{2, 2});
}

TEST_CASE("backward rejects non-scalar or off-tape losses") {
  Tensor x = Tensor::from_values({2, 2}, {1, 2, 3, 4}, true);
  Tape tape;
  {
    TapeScope scope(tape);
    Tensor y = relu(x);
    CHECK_THROWS_AS(backward(y, tape), ContractError);
  }
  Tensor c = Tensor::from_values({1}, {2.0});
  CHECK_THROWS_AS(backward(c, tape), ContractError);
}

TEST_CASE("backward visits nodes in reverse topological order") {
  RngStream rng(22);
  Tensor x = randn({4, 3}, rng);
  Tensor w = randn({3, 3}, rng);
  Tensor b = randn({3}, rng);
  Tape tape;
  {
    TapeScope scope(tape);
    Tensor h = relu(linear(x, w, b));
    Tensor loss = sum(l2_normalize(h));
    backward(loss, tape);
  }
  const auto& order = tape.last_visit_order();
  REQUIRE(order.size() == tape.node_count());
  for (std::size_t i = 1; i < order.size(); ++i) {
    CHECK(order[i] < order[i - 1]);  // strictly descending: consumers first
  }
  for (std::size_t i = 0; i < tape.node_count(); ++i) {
    for (int operand : tape.nodes()[i].operand_nodes) {
      CHECK(operand < static_cast<int>(i));
    }
  }
}

TEST_CASE("composite graph gradients vs finite differences") {
  RngStream rng(23);
  Tensor x = randn({6, 4}, rng, false);
  Tensor w1 = randn({4, 5}, rng);
  Tensor b1 = randn({5}, rng);
  BnState bn = make_bn_state(5);
  fill_uniform(bn.gamma, rng, 0.5, 1.5);
  Tensor w2 = randn({5, 3}, rng);
  Tensor b2 = randn({3}, rng);
  std::vector<std::size_t> targets = {0, 1, 2, 0, 1, 2};
  const BnMode mode = bn_train({{0, 3}, {3, 6}});
  const double err = max_rel_gradient_error(
      [&]() {
        Tensor h = relu(batch_norm(linear(x, w1, b1), bn, mode));
        Tensor feats = l2_normalize(linear(h, w2, b2));
        return softmax_cross_entropy(scale(feats, 1.0 / 0.07), targets);
      },
      {w1, b1, bn.gamma, bn.beta, w2, b2});
  CHECK(err < 1e-4);
}

TEST_CASE("sgd_step plain gradient descent") {
  Tensor p = Tensor::from_values({3}, {1.0, 2.0, 3.0}, true);
  p.mutable_grad() = {0.5, -1.0, 2.0};
  SgdState st;
  st.lr = 1.0;
  st.momentum = 0.0;
  st.weight_decay = 0.0;
  sgd_step({{"p", p}}, st);
  CHECK(p.values()[0] == doctest::Approx(0.5));
  CHECK(p.values()[1] == doctest::Approx(3.0));
  CHECK(p.values()[2] == doctest::Approx(1.0));
}

TEST_CASE("sgd_step matches hand-unrolled momentum recurrence") {
  const double lr = 0.1, mu = 0.9, wd = 0.0001;
  const double p0 = 2.0, g1 = 0.3, g2 = -0.7;
  Tensor p = Tensor::from_values({1}, {p0}, true);
  SgdState st{lr, mu, wd, {}};

  p.mutable_grad() = {g1};
  sgd_step({{"p", p}}, st);
  p.zero_grad();
  p.mutable_grad() = {g2};
  sgd_step({{"p", p}}, st);

  // hand-unrolled
  double v = 0.0, ph = p0;
  double g = g1 + wd * ph;
  v = mu * v + g;
  ph -= lr * v;
  g = g2 + wd * ph;
  v = mu * v + g;
  ph -= lr * v;
  CHECK(std::abs(p.values()[0] - ph) < 1e-12);
}

TEST_CASE("sgd_step flags non-finite gradients with the parameter name") {
  Tensor p = Tensor::from_values({2}, {1.0, 1.0}, true);
  p.mutable_grad() = {0.1, std::nan("")};
  SgdState st;
  try {
    sgd_step({{"head.w", p}}, st);
    FAIL("expected DivergenceError");
  } catch (const DivergenceError& e) {
    CHECK(std::string(e.what()).find("head.w") != std::string::npos);
  }
}

TEST_CASE("sgd_step descends monotonically on a convex quadratic") {
  RngStream rng(24);
  Tensor p = Tensor::zeros({8}, true);
  fill_normal(p, rng, 0.0, 2.0);
  Tensor target = Tensor::zeros({8});
  fill_normal(target, rng, 0.0, 1.0);
  SgdState st{0.05, 0.0, 0.0, {}};
  auto loss_of = [&]() {
    double l = 0.0;
    for (std::size_t i = 0; i < 8; ++i) {
      const double d = p.values()[i] - target.values()[i];
      l += d * d;
    }
    return l;
  };
  double prev = loss_of();
  for (int step = 0; step < 100; ++step) {
    p.zero_grad();
    auto& g = p.mutable_grad();
    for (std::size_t i = 0; i < 8; ++i) {
      g[i] = 2.0 * (p.values()[i] - target.values()[i]);
    }
    sgd_step({{"p", p}}, st);
    const double now = loss_of();
    CHECK(now <= prev);
    prev = now;
  }
}

TEST_CASE("finite_diff_grad analytic cases") {
  Tensor p = Tensor::from_values({1}, {3.0});
  auto grads = finite_diff_grad(
      [&]() { return p.values()[0] * p.values()[0]; }, {p}, 1e-5);
  CHECK(std::abs(grads[0][0] - 6.0) < 1e-7);

  auto zeros = finite_diff_grad([]() { return 42.0; }, {p}, 1e-5);
  CHECK(zeros[0][0] == doctest::Approx(0.0));
}

TEST_CASE("gradcheck op suite stays within tolerance") {
  // small instance count here; the acceptance suite runs the full 20
  auto report = run_gradcheck(7, 3);
  for (const auto& c : report.cases) {
    INFO(c.op);
    CHECK(c.max_rel_err < 1e-4);
  }
}

TEST_CASE("rng streams are deterministic and key-separated") {
  RngStream a(derive_key(42, "init"));
  RngStream b(derive_key(42, "init"));
  RngStream c(derive_key(42, "data"));
  bool diverged = false;
  for (int i = 0; i < 64; ++i) {
    const auto av = a.next_u64();
    CHECK(av == b.next_u64());
    diverged |= (av != c.next_u64());
  }
  CHECK(diverged);
}
