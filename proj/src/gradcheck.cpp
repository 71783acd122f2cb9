#include "moco/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace moco {

double max_rel_gradient_error(const std::function<Tensor()>& make_loss,
                              const std::vector<Tensor>& params, double eps) {
  Tape tape;
  std::vector<std::vector<double>> analytic;
  {
    TapeScope scope(tape);
    Tensor loss = make_loss();
    backward(loss, tape);
  }
  analytic.reserve(params.size());
  for (const Tensor& p : params) {
    analytic.push_back(p.has_grad() ? p.grad()
                                    : std::vector<double>(p.size(), 0.0));
  }
  for (Tensor p : params) p.zero_grad();

  const auto fd = finite_diff_grad(
      [&make_loss]() { return make_loss().values()[0]; }, params, eps);

  double worst = 0.0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    for (std::size_t i = 0; i < analytic[pi].size(); ++i) {
      const double a = analytic[pi][i];
      const double f = fd[pi][i];
      const double mag = std::max(std::abs(a), std::abs(f));
      if (mag < 1e-6) continue;  // both negligible at parameter scale
      worst = std::max(worst, std::abs(a - f) / mag);
    }
  }
  return worst;
}

namespace {

Tensor random_tensor(Shape shape, RngStream& rng, bool requires_grad,
                     double stddev = 1.0) {
  Tensor t = Tensor::zeros(std::move(shape), requires_grad);
  fill_normal(t, rng, 0.0, stddev);
  return t;
}

std::vector<double> random_weights(std::size_t n, RngStream& rng) {
  std::vector<double> w(n);
  for (double& v : w) v = rng.normal();
  return w;
}

// Keeps relu inputs away from the kink so finite differences stay valid.
void nudge_from_zero(Tensor& t, double margin = 1e-2) {
  for (double& v : t.values()) {
    if (std::abs(v) < margin) v = v < 0.0 ? v - margin : v + margin;
  }
}

struct Suite {
  RngStream rng;
  std::size_t instances;
  GradCheckReport report;

  void run_case(const std::string& name,
                const std::function<double(RngStream&)>& instance) {
    GradCheckCase c;
    c.op = name;
    c.instances = instances;
    for (std::size_t i = 0; i < instances; ++i) {
      c.max_rel_err = std::max(c.max_rel_err, instance(rng));
    }
    report.cases.push_back(c);
    report.overall_max = std::max(report.overall_max, c.max_rel_err);
  }
};

double check_matmul(RngStream& rng) {
  Tensor a = random_tensor({3, 4}, rng, true);
  Tensor b = random_tensor({4, 2}, rng, true);
  const auto w = random_weights(6, rng);
  return max_rel_gradient_error(
      [&]() { return masked_sum(matmul(a, b), w); }, {a, b});
}

double check_batched_dot(RngStream& rng) {
  Tensor q = random_tensor({5, 7}, rng, true);
  Tensor k = random_tensor({5, 7}, rng, true);
  const auto w = random_weights(5, rng);
  return max_rel_gradient_error(
      [&]() { return masked_sum(batched_dot(q, k), w); }, {q, k});
}

double check_conv2d(RngStream& rng) {
  const std::size_t stride = 1 + rng.uniform_index(2);
  const std::size_t padding = rng.uniform_index(2);
  Tensor x = random_tensor({2, 3, 5, 6}, rng, true);
  Tensor w = random_tensor({4, 3, 3, 3}, rng, true, 0.5);
  Tensor out = conv2d(x, w, stride, padding);
  const auto mask = random_weights(out.size(), rng);
  return max_rel_gradient_error(
      [&]() { return masked_sum(conv2d(x, w, stride, padding), mask); },
      {x, w});
}

double check_relu(RngStream& rng) {
  Tensor x = random_tensor({4, 6}, rng, true);
  nudge_from_zero(x);
  const auto w = random_weights(24, rng);
  return max_rel_gradient_error([&]() { return masked_sum(relu(x), w); }, {x});
}

double check_global_avg_pool(RngStream& rng) {
  Tensor x = random_tensor({2, 3, 4, 4}, rng, true);
  const auto w = random_weights(6, rng);
  return max_rel_gradient_error(
      [&]() { return masked_sum(global_avg_pool(x), w); }, {x});
}

double check_linear(RngStream& rng) {
  Tensor x = random_tensor({4, 5}, rng, true);
  Tensor w = random_tensor({5, 3}, rng, true);
  Tensor b = random_tensor({3}, rng, true);
  const auto mask = random_weights(12, rng);
  return max_rel_gradient_error(
      [&]() { return masked_sum(linear(x, w, b), mask); }, {x, w, b});
}

double check_add_channel_bias(RngStream& rng) {
  Tensor x = random_tensor({2, 3, 3, 3}, rng, true);
  Tensor b = random_tensor({3}, rng, true);
  const auto mask = random_weights(x.size(), rng);
  return max_rel_gradient_error(
      [&]() { return masked_sum(add_channel_bias(x, b), mask); }, {x, b});
}

double check_batch_norm_train(RngStream& rng) {
  Tensor x = random_tensor({8, 3}, rng, true, 2.0);
  BnState st = make_bn_state(3);
  fill_uniform(st.gamma, rng, 0.5, 1.5);
  fill_uniform(st.beta, rng, -0.5, 0.5);
  const auto mask = random_weights(x.size(), rng);
  const BnMode mode = bn_train({{0, 4}, {4, 8}});
  return max_rel_gradient_error(
      [&]() { return masked_sum(batch_norm(x, st, mode), mask); },
      {x, st.gamma, st.beta});
}

double check_batch_norm_train_4d(RngStream& rng) {
  Tensor x = random_tensor({4, 2, 3, 3}, rng, true, 2.0);
  BnState st = make_bn_state(2);
  fill_uniform(st.gamma, rng, 0.5, 1.5);
  fill_uniform(st.beta, rng, -0.5, 0.5);
  const auto mask = random_weights(x.size(), rng);
  const BnMode mode = bn_train({{0, 2}, {2, 4}});
  return max_rel_gradient_error(
      [&]() { return masked_sum(batch_norm(x, st, mode), mask); },
      {x, st.gamma, st.beta});
}

double check_batch_norm_eval(RngStream& rng) {
  Tensor x = random_tensor({5, 4}, rng, true);
  BnState st = make_bn_state(4);
  fill_uniform(st.gamma, rng, 0.5, 1.5);
  fill_uniform(st.beta, rng, -0.5, 0.5);
  fill_uniform(st.running_mean, rng, -1.0, 1.0);
  fill_uniform(st.running_var, rng, 0.2, 2.0);
  const auto mask = random_weights(x.size(), rng);
  return max_rel_gradient_error(
      [&]() { return masked_sum(batch_norm(x, st, bn_eval()), mask); },
      {x, st.gamma, st.beta});
}

double check_l2_normalize(RngStream& rng) {
  Tensor x = random_tensor({5, 8}, rng, true);
  const auto mask = random_weights(x.size(), rng);
  return max_rel_gradient_error(
      [&]() { return masked_sum(l2_normalize(x), mask); }, {x});
}

double check_softmax_cross_entropy(RngStream& rng) {
  Tensor logits = random_tensor({6, 9}, rng, true, 2.0);
  std::vector<std::size_t> targets(6);
  for (auto& t : targets) t = rng.uniform_index(9);
  return max_rel_gradient_error(
      [&]() { return softmax_cross_entropy(logits, targets); }, {logits});
}

double check_structural_ops(RngStream& rng) {
  // scale + concat_cols + permute_rows + sum in one composite graph
  Tensor a = random_tensor({6, 3}, rng, true);
  Tensor b = random_tensor({6, 4}, rng, true);
  std::vector<std::size_t> perm(6);
  for (std::size_t i = 0; i < 6; ++i) perm[i] = i;
  rng.shuffle(perm);
  const auto mask = random_weights(42, rng);
  return max_rel_gradient_error(
      [&]() {
        Tensor cat = concat_cols(scale(a, 1.0 / 0.07), b);
        return masked_sum(permute_rows(cat, perm), mask);
      },
      {a, b});
}

}  // namespace

GradCheckReport run_gradcheck(std::uint64_t seed, std::size_t instances_per_op) {
  Suite suite{RngStream(derive_key(seed, "gradcheck")), instances_per_op, {}};
  suite.run_case("matmul", check_matmul);
  suite.run_case("batched_dot", check_batched_dot);
  suite.run_case("conv2d", check_conv2d);
  suite.run_case("relu", check_relu);
  suite.run_case("global_avg_pool", check_global_avg_pool);
  suite.run_case("linear", check_linear);
  suite.run_case("add_channel_bias", check_add_channel_bias);
  suite.run_case("batch_norm_train", check_batch_norm_train);
  suite.run_case("batch_norm_train_4d", check_batch_norm_train_4d);
  suite.run_case("batch_norm_eval", check_batch_norm_eval);
  suite.run_case("l2_normalize", check_l2_normalize);
  suite.run_case("softmax_cross_entropy", check_softmax_cross_entropy);
  suite.run_case("structural_ops", check_structural_ops);
  suite.run_case("moco_step_loss", gradcheck_moco_step_loss);
  return suite.report;
}

}  // namespace moco
