#pragma once

#include <optional>
#include <utility>
#include <vector>

#include "moco/tensor.hpp"

namespace moco {

enum class Arch { mlp, small_conv };
enum class BnBufferUpdate { copy, momentum };
enum class Role { query, key };

struct EncoderConfig {
  Arch arch = Arch::mlp;
  // hidden layer widths (mlp) or channel widths (small_conv)
  std::vector<std::size_t> widths = {256, 128};
  Shape input_shape = {32};  // {dim} for vectors, {C,H,W} for images
  std::size_t feature_dim = 128;
  bool use_bn = true;
  std::size_t bn_shards = 4;
  BnBufferUpdate bn_buffers = BnBufferUpdate::copy;
};

void validate_config(const EncoderConfig& cfg);

// One hidden stage: linear or 3x3/stride-2 conv, optional BN, then relu.
// The bias stays zero (and out of the parameter list) when BN follows.
struct EncoderBlock {
  Tensor w;
  Tensor b;
  std::optional<BnState> bn;
};

struct Encoder {
  EncoderConfig config;
  Role role = Role::query;
  std::vector<EncoderBlock> blocks;
  Tensor head_w;
  Tensor head_b;

  // Learnable tensors in a fixed, name-stable order.
  std::vector<NamedTensor> parameters() const;
  // BN running statistics (never differentiated).
  std::vector<NamedTensor> named_buffers() const;
  void zero_grads();
  void set_learnable(bool learnable);
};

// Builds f_q (initialized) and f_k (exact value copy, grad-exempt).
std::pair<Encoder, Encoder> build_pair(const EncoderConfig& cfg, RngStream& rng);

// L2-normalized feature rows. In train mode every BN layer uses the per-shard
// statistics described by `mode`.
Tensor encoder_forward(Encoder& enc, const Tensor& batch, const BnMode& mode);

struct TappedFeatures {
  Tensor pre_projection;  // input of the projection head
  Tensor projection;      // L2-normalized head output
};
TappedFeatures encoder_forward_tapped(Encoder& enc, const Tensor& batch,
                                      const BnMode& mode);

// theta_k <- m * theta_k + (1 - m) * theta_q, elementwise over learnable
// params; BN running stats follow cfg.bn_buffers (copy or the same EMA).
void momentum_update(Encoder& f_k, const Encoder& f_q, double m);

// Euclidean norm over concatenated parameter differences; BN running
// statistics are excluded.
double param_distance(const Encoder& a, const Encoder& b);

// Deep copy safe to hand to another thread.
Encoder snapshot(const Encoder& enc);

}  // namespace moco
