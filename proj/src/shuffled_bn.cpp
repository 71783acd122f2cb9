#include "moco/shuffled_bn.hpp"

#include <atomic>
#include <numeric>

namespace moco {

namespace {
std::atomic<std::uint64_t> g_plans_created{0};
}

ShardSlices ShardSpec::slices(std::size_t batch) const {
  if (num_shards == 0) throw ContractError("ShardSpec: num_shards must be > 0");
  if (batch % num_shards != 0) {
    throw ContractError("ShardSpec: batch " + std::to_string(batch) +
                        " not divisible by " + std::to_string(num_shards) +
                        " shards");
  }
  const std::size_t per = batch / num_shards;
  ShardSlices out;
  out.reserve(num_shards);
  for (std::size_t j = 0; j < num_shards; ++j) {
    out.emplace_back(j * per, (j + 1) * per);
  }
  return out;
}

ShufflePlan make_shuffle(std::size_t n, RngStream& rng) {
  if (n < 2) {
    throw ContractError("make_shuffle: need at least 2 samples, got " +
                        std::to_string(n));
  }
  ShufflePlan plan;
  plan.perm.resize(n);
  std::iota(plan.perm.begin(), plan.perm.end(), 0);
  rng.shuffle(plan.perm);
  plan.inv_perm.resize(n);
  for (std::size_t i = 0; i < n; ++i) plan.inv_perm[plan.perm[i]] = i;
  g_plans_created.fetch_add(1, std::memory_order_relaxed);
  return plan;
}

ShufflePlan identity_plan(std::size_t n) {
  ShufflePlan plan;
  plan.perm.resize(n);
  std::iota(plan.perm.begin(), plan.perm.end(), 0);
  plan.inv_perm = plan.perm;
  return plan;
}

std::uint64_t shuffle_plans_created() {
  return g_plans_created.load(std::memory_order_relaxed);
}

Tensor shuffled_forward(Encoder& enc, const Tensor& x_k,
                        const ShufflePlan& plan, const ShardSpec& shards) {
  const std::size_t n = x_k.dim(0);
  if (plan.perm.size() != n) {
    throw ContractError("shuffled_forward: plan covers " +
                        std::to_string(plan.perm.size()) + " rows but batch has " +
                        std::to_string(n));
  }
  const BnMode mode = bn_train(shards.slices(n));
  Tensor shuffled = permute_rows(x_k, plan.perm);
  Tensor encoded = encoder_forward(enc, shuffled, mode);
  return permute_rows(encoded, plan.inv_perm);
}

Tensor shuffled_key_forward(Encoder& f_k, const Tensor& x_k,
                            const ShufflePlan& plan, const ShardSpec& shards) {
  Tensor out = shuffled_forward(f_k, x_k, plan, shards);
  return out.requires_grad() ? out.detached() : out;
}

}  // namespace moco
