#include "moco/encoder.hpp"

#include <cmath>

namespace moco {

void validate_config(const EncoderConfig& cfg) {
  if (cfg.feature_dim < 2) {
    throw ConfigError("encoder: feature_dim must be >= 2");
  }
  if (cfg.widths.empty()) {
    throw ConfigError("encoder: widths must be nonempty");
  }
  if (cfg.bn_shards == 0) {
    throw ConfigError("encoder: bn_shards must be positive");
  }
  if (cfg.arch == Arch::mlp && cfg.input_shape.size() != 1) {
    throw ConfigError("encoder: mlp arch expects a 1-d input shape");
  }
  if (cfg.arch == Arch::small_conv && cfg.input_shape.size() != 3) {
    throw ConfigError("encoder: small_conv arch expects a CxHxW input shape");
  }
  for (std::size_t w : cfg.widths) {
    if (w == 0) throw ConfigError("encoder: widths must be positive");
  }
}

namespace {

Tensor init_weight(Shape shape, std::size_t fan_in, RngStream& rng) {
  Tensor w = Tensor::zeros(std::move(shape), true);
  const double s = 1.0 / std::sqrt(static_cast<double>(fan_in));
  fill_uniform(w, rng, -s, s);
  return w;
}

}  // namespace

std::pair<Encoder, Encoder> build_pair(const EncoderConfig& cfg,
                                       RngStream& rng) {
  validate_config(cfg);
  Encoder f_q;
  f_q.config = cfg;
  f_q.role = Role::query;

  std::size_t feat;
  if (cfg.arch == Arch::mlp) {
    feat = cfg.input_shape[0];
    for (std::size_t width : cfg.widths) {
      EncoderBlock blk;
      blk.w = init_weight({feat, width}, feat, rng);
      blk.b = Tensor::zeros({width}, !cfg.use_bn);
      if (cfg.use_bn) blk.bn = make_bn_state(width);
      f_q.blocks.push_back(std::move(blk));
      feat = width;
    }
  } else {
    std::size_t channels = cfg.input_shape[0];
    for (std::size_t width : cfg.widths) {
      EncoderBlock blk;
      blk.w = init_weight({width, channels, 3, 3}, channels * 9, rng);
      blk.b = Tensor::zeros({width}, !cfg.use_bn);
      if (cfg.use_bn) blk.bn = make_bn_state(width);
      f_q.blocks.push_back(std::move(blk));
      channels = width;
    }
    feat = channels;
  }
  f_q.head_w = init_weight({feat, cfg.feature_dim}, feat, rng);
  f_q.head_b = Tensor::zeros({cfg.feature_dim}, true);

  Encoder f_k = snapshot(f_q);
  f_k.role = Role::key;
  f_k.set_learnable(false);
  return {std::move(f_q), std::move(f_k)};
}

std::vector<NamedTensor> Encoder::parameters() const {
  std::vector<NamedTensor> out;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const std::string prefix = "block" + std::to_string(i) + ".";
    out.push_back({prefix + "w", blocks[i].w});
    if (!config.use_bn) out.push_back({prefix + "b", blocks[i].b});
    if (blocks[i].bn) {
      out.push_back({prefix + "bn.gamma", blocks[i].bn->gamma});
      out.push_back({prefix + "bn.beta", blocks[i].bn->beta});
    }
  }
  out.push_back({"head.w", head_w});
  out.push_back({"head.b", head_b});
  return out;
}

std::vector<NamedTensor> Encoder::named_buffers() const {
  std::vector<NamedTensor> out;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    if (!blocks[i].bn) continue;
    const std::string prefix = "block" + std::to_string(i) + ".bn.";
    out.push_back({prefix + "running_mean", blocks[i].bn->running_mean});
    out.push_back({prefix + "running_var", blocks[i].bn->running_var});
  }
  return out;
}

void Encoder::zero_grads() {
  for (auto& [name, t] : parameters()) {
    Tensor tensor = t;
    tensor.zero_grad();
  }
}

void Encoder::set_learnable(bool learnable) {
  for (auto& [name, t] : parameters()) {
    Tensor tensor = t;
    tensor.set_requires_grad(learnable);
  }
  // the zero biases shadowed by BN never learn, in either role
  if (config.use_bn) {
    for (auto& blk : blocks) blk.b.set_requires_grad(false);
  }
}

TappedFeatures encoder_forward_tapped(Encoder& enc, const Tensor& batch,
                                      const BnMode& mode) {
  const EncoderConfig& cfg = enc.config;
  if (cfg.arch == Arch::mlp) {
    if (batch.rank() != 2 || batch.dim(1) != cfg.input_shape[0]) {
      throw DimensionError("encoder_forward: batch " + shape_str(batch.shape()) +
                           " does not match input dim " +
                           std::to_string(cfg.input_shape[0]));
    }
  } else {
    if (batch.rank() != 4 || batch.dim(1) != cfg.input_shape[0] ||
        batch.dim(2) != cfg.input_shape[1] || batch.dim(3) != cfg.input_shape[2]) {
      throw DimensionError("encoder_forward: batch " + shape_str(batch.shape()) +
                           " does not match input shape " +
                           shape_str(cfg.input_shape));
    }
  }

  Tensor h = batch;
  if (cfg.arch == Arch::mlp) {
    for (auto& blk : enc.blocks) {
      h = linear(h, blk.w, blk.b);
      if (blk.bn) h = batch_norm(h, *blk.bn, mode);
      h = relu(h);
    }
  } else {
    for (auto& blk : enc.blocks) {
      h = conv2d(h, blk.w, 2, 1);
      if (!cfg.use_bn) h = add_channel_bias(h, blk.b);
      if (blk.bn) h = batch_norm(h, *blk.bn, mode);
      h = relu(h);
    }
    h = global_avg_pool(h);
  }
  TappedFeatures out;
  out.pre_projection = h;
  out.projection = l2_normalize(linear(h, enc.head_w, enc.head_b));
  return out;
}

Tensor encoder_forward(Encoder& enc, const Tensor& batch, const BnMode& mode) {
  return encoder_forward_tapped(enc, batch, mode).projection;
}

namespace {

void check_matched(const std::vector<NamedTensor>& a,
                   const std::vector<NamedTensor>& b, const char* op) {
  if (a.size() != b.size()) {
    throw ContractError(std::string(op) + ": parameter lists differ in length");
  }
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].name != b[i].name ||
        a[i].tensor.shape() != b[i].tensor.shape()) {
      throw ContractError(std::string(op) + ": parameter mismatch at " +
                          a[i].name);
    }
  }
}

}  // namespace

void momentum_update(Encoder& f_k, const Encoder& f_q, double m) {
  if (m < 0.0 || m >= 1.0) {
    throw ContractError("momentum_update: m must lie in [0, 1), got " +
                        std::to_string(m));
  }
  auto kp = f_k.parameters();
  auto qp = f_q.parameters();
  check_matched(kp, qp, "momentum_update");
  for (std::size_t i = 0; i < kp.size(); ++i) {
    auto& kv = kp[i].tensor.values();
    const auto& qv = qp[i].tensor.values();
    for (std::size_t j = 0; j < kv.size(); ++j) {
      kv[j] = m * kv[j] + (1.0 - m) * qv[j];
    }
  }
  auto kb = f_k.named_buffers();
  auto qb = f_q.named_buffers();
  check_matched(kb, qb, "momentum_update");
  for (std::size_t i = 0; i < kb.size(); ++i) {
    auto& kv = kb[i].tensor.values();
    const auto& qv = qb[i].tensor.values();
    if (f_k.config.bn_buffers == BnBufferUpdate::copy) {
      kv = qv;
    } else {
      for (std::size_t j = 0; j < kv.size(); ++j) {
        kv[j] = m * kv[j] + (1.0 - m) * qv[j];
      }
    }
  }
}

double param_distance(const Encoder& a, const Encoder& b) {
  auto ap = a.parameters();
  auto bp = b.parameters();
  check_matched(ap, bp, "param_distance");
  double sq = 0.0;
  for (std::size_t i = 0; i < ap.size(); ++i) {
    const auto& av = ap[i].tensor.values();
    const auto& bv = bp[i].tensor.values();
    for (std::size_t j = 0; j < av.size(); ++j) {
      const double d = av[j] - bv[j];
      sq += d * d;
    }
  }
  return std::sqrt(sq);
}

Encoder snapshot(const Encoder& enc) {
  Encoder out;
  out.config = enc.config;
  out.role = enc.role;
  for (const auto& blk : enc.blocks) {
    EncoderBlock copy;
    copy.w = blk.w.clone();
    copy.b = blk.b.clone();
    if (blk.bn) {
      BnState bn;
      bn.gamma = blk.bn->gamma.clone();
      bn.beta = blk.bn->beta.clone();
      bn.running_mean = blk.bn->running_mean.clone();
      bn.running_var = blk.bn->running_var.clone();
      bn.running_momentum = blk.bn->running_momentum;
      bn.eps = blk.bn->eps;
      copy.bn = std::move(bn);
    }
    out.blocks.push_back(std::move(copy));
  }
  out.head_w = enc.head_w.clone();
  out.head_b = enc.head_b.clone();
  return out;
}

}  // namespace moco
