#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>

#include "moco/shuffled_bn.hpp"

using namespace moco;

namespace {

EncoderConfig bn_mlp() {
  EncoderConfig cfg;
  cfg.arch = Arch::mlp;
  cfg.widths = {12};
  cfg.input_shape = {5};
  cfg.feature_dim = 4;
  cfg.use_bn = true;
  cfg.bn_shards = 2;
  return cfg;
}

}  // namespace

TEST_CASE("shuffle plans invert exactly") {
  RngStream rng(41);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 2 + rng.uniform_index(30);
    const ShufflePlan plan = make_shuffle(n, rng);
    for (std::size_t i = 0; i < n; ++i) {
      CHECK(plan.inv_perm[plan.perm[i]] == i);
    }
    // permute + unpermute restores values bitwise
    Tensor x = Tensor::zeros({n, 3});
    fill_normal(x, rng, 0.0, 1.0);
    Tensor roundtrip = permute_rows(permute_rows(x, plan.perm), plan.inv_perm);
    CHECK(roundtrip.values() == x.values());
  }
}

TEST_CASE("make_shuffle rejects degenerate batches") {
  RngStream rng(42);
  CHECK_THROWS_AS(make_shuffle(1, rng), ContractError);
  CHECK_THROWS_AS(make_shuffle(0, rng), ContractError);
}

TEST_CASE("permutations of three elements are uniform") {
  RngStream rng(43);
  std::map<std::vector<std::size_t>, int> counts;
  const int draws = 6000;
  for (int i = 0; i < draws; ++i) {
    counts[make_shuffle(3, rng).perm] += 1;
  }
  REQUIRE(counts.size() == 6);
  // chi-square, 5 dof; 15.086 is the p = 0.01 cut
  const double expected = draws / 6.0;
  double chi2 = 0.0;
  for (const auto& [perm, count] : counts) {
    const double d = count - expected;
    chi2 += d * d / expected;
  }
  CHECK(chi2 < 15.086);
}

TEST_CASE("shard slices partition the batch or reject it") {
  ShardSpec spec{4};
  const auto slices = spec.slices(16);
  REQUIRE(slices.size() == 4);
  CHECK(slices[0] == std::pair<std::size_t, std::size_t>{0, 4});
  CHECK(slices[3] == std::pair<std::size_t, std::size_t>{12, 16});
  CHECK_THROWS_AS(spec.slices(18), ContractError);
}

TEST_CASE("identity plan with one shard reduces to the plain forward") {
  RngStream rng(44);
  auto cfg = bn_mlp();
  auto [f_q, f_k] = build_pair(cfg, rng);
  Tensor x = Tensor::zeros({8, 5});
  fill_uniform(x, rng, 0.0, 1.0);

  Encoder plain = snapshot(f_k);
  Tensor via_shuffle =
      shuffled_key_forward(f_k, x, identity_plan(8), ShardSpec{1});
  Tensor direct = encoder_forward(plain, x, bn_train_single(8));
  REQUIRE(via_shuffle.size() == direct.size());
  for (std::size_t i = 0; i < direct.size(); ++i) {
    CHECK(via_shuffle.values()[i] ==
          doctest::Approx(direct.values()[i]).epsilon(1e-12));
  }
}

TEST_CASE("unshuffle restores per-sample encodings (eval-mode check)") {
  RngStream rng(45);
  auto cfg = bn_mlp();
  auto [f_q, f_k] = build_pair(cfg, rng);
  Tensor x = Tensor::zeros({6, 5});
  fill_uniform(x, rng, 0.0, 1.0);
  const ShufflePlan plan = make_shuffle(6, rng);

  // eval-mode BN is row-independent, so shuffling must be invisible
  Tensor shuffled = permute_rows(x, plan.perm);
  Tensor encoded = encoder_forward(f_k, shuffled, bn_eval());
  Tensor restored = permute_rows(encoded, plan.inv_perm);
  Tensor direct = encoder_forward(f_k, x, bn_eval());
  for (std::size_t i = 0; i < direct.size(); ++i) {
    CHECK(restored.values()[i] == doctest::Approx(direct.values()[i]).epsilon(1e-12));
  }
}

TEST_CASE("single-shard loss is invariant to shuffling") {
  RngStream rng(46);
  auto cfg = bn_mlp();
  auto [f_q, f_k] = build_pair(cfg, rng);
  Tensor x = Tensor::zeros({8, 5});
  fill_uniform(x, rng, 0.0, 1.0);

  Tensor with_plan = shuffled_key_forward(f_k, x, make_shuffle(8, rng),
                                          ShardSpec{1});
  Encoder copy = snapshot(f_k);
  Tensor without = encoder_forward(copy, x, bn_train_single(8));
  double max_diff = 0.0;
  for (std::size_t i = 0; i < without.size(); ++i) {
    max_diff = std::max(max_diff,
                        std::abs(with_plan.values()[i] - without.values()[i]));
  }
  CHECK(max_diff < 1e-12);
}

TEST_CASE("with four shards the key-pass statistics usually differ") {
  RngStream rng(47);
  const std::size_t n = 32, shards = 4, per = n / shards;
  Tensor x = Tensor::zeros({n, 1});
  fill_normal(x, rng, 0.0, 1.0);
  const ShufflePlan plan = make_shuffle(n, rng);

  auto shard_mean = [&](const std::vector<std::size_t>& members) {
    double acc = 0.0;
    for (std::size_t r : members) acc += x.values()[r];
    return acc / static_cast<double>(members.size());
  };

  std::size_t differing = 0;
  for (std::size_t i = 0; i < n; ++i) {
    // query pass: contiguous shard of the unshuffled batch
    const std::size_t q_shard = i / per;
    std::vector<std::size_t> q_members;
    for (std::size_t r = q_shard * per; r < (q_shard + 1) * per; ++r) {
      q_members.push_back(r);
    }
    // key pass: shard of this sample's position after shuffling
    const std::size_t pos = plan.inv_perm[i];
    const std::size_t k_shard = pos / per;
    std::vector<std::size_t> k_members;
    for (std::size_t p = k_shard * per; p < (k_shard + 1) * per; ++p) {
      k_members.push_back(plan.perm[p]);
    }
    if (std::abs(shard_mean(q_members) - shard_mean(k_members)) > 1e-9) {
      ++differing;
    }
  }
  CHECK(differing >= n / 2);
}

TEST_CASE("shuffled key output rows follow input rows") {
  RngStream rng(48);
  auto cfg = bn_mlp();
  cfg.use_bn = false;  // row-independent network: order must be exact
  auto [f_q, f_k] = build_pair(cfg, rng);
  Tensor x = Tensor::zeros({8, 5});
  fill_uniform(x, rng, 0.0, 1.0);
  Tensor direct = encoder_forward(f_k, x, bn_train_single(8));
  Tensor via = shuffled_key_forward(f_k, x, make_shuffle(8, rng), ShardSpec{2});
  for (std::size_t i = 0; i < direct.size(); ++i) {
    CHECK(via.values()[i] == doctest::Approx(direct.values()[i]).epsilon(1e-12));
  }
}
