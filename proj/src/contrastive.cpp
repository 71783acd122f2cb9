#include "moco/contrastive.hpp"

#include <chrono>
#include <cmath>
#include <numeric>

#include "moco/gradcheck.hpp"

namespace moco {

namespace {

using Clock = std::chrono::steady_clock;

double elapsed_ms(Clock::time_point start) {
  return std::chrono::duration<double, std::milli>(Clock::now() - start)
      .count();
}

void check_unit_rows(const Tensor& keys, const char* op) {
  const std::size_t n = keys.dim(0), c = keys.dim(1);
  for (std::size_t i = 0; i < n; ++i) {
    double sq = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const double v = keys.values()[i * c + j];
      sq += v * v;
    }
    if (std::abs(std::sqrt(sq) - 1.0) > 1e-6) {
      throw ContractError(std::string(op) + ": key row " + std::to_string(i) +
                          " is not unit-normalized");
    }
  }
}

}  // namespace

// ---- KeyQueue ------------------------------------------------------------------

KeyQueue queue_init(std::size_t K, std::size_t C, RngStream& rng) {
  if (K < 1 || C < 2) {
    throw ContractError("queue_init: need K >= 1 and C >= 2");
  }
  KeyQueue q;
  q.capacity = K;
  q.feature_dim = C;
  q.buffer = Tensor::zeros({C, K});
  q.filled = K;
  q.written_step.assign(K, 0);
  for (std::size_t col = 0; col < K; ++col) {
    double sq = 0.0;
    std::vector<double> v(C);
    for (std::size_t c = 0; c < C; ++c) {
      v[c] = rng.normal();
      sq += v[c] * v[c];
    }
    const double norm = std::sqrt(sq);
    for (std::size_t c = 0; c < C; ++c) {
      q.buffer.values()[c * K + col] = v[c] / norm;
    }
  }
  return q;
}

KeyQueue queue_init_empty(std::size_t K, std::size_t C) {
  if (K < 1 || C < 2) {
    throw ContractError("queue_init: need K >= 1 and C >= 2");
  }
  KeyQueue q;
  q.capacity = K;
  q.feature_dim = C;
  q.buffer = Tensor::zeros({C, K});
  q.filled = 0;
  q.written_step.assign(K, -1);
  return q;
}

void enqueue_dequeue(KeyQueue& q, const Tensor& keys, std::int64_t step) {
  if (keys.rank() != 2 || keys.dim(1) != q.feature_dim) {
    throw DimensionError("enqueue_dequeue: keys " + shape_str(keys.shape()) +
                         " do not match feature dim " +
                         std::to_string(q.feature_dim));
  }
  const std::size_t n = keys.dim(0);
  if (n > q.capacity) {
    throw ContractError("enqueue_dequeue: batch of " + std::to_string(n) +
                        " keys exceeds capacity " + std::to_string(q.capacity));
  }
  if (keys.requires_grad()) {
    throw ContractError("enqueue_dequeue: keys must be detached");
  }
  check_unit_rows(keys, "enqueue_dequeue");
  const std::size_t K = q.capacity, C = q.feature_dim;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t col = (q.cursor + i) % K;
    for (std::size_t c = 0; c < C; ++c) {
      q.buffer.values()[c * K + col] = keys.values()[i * C + c];
    }
    q.written_step[col] = step;
  }
  q.cursor = (q.cursor + n) % K;
  q.filled = std::min(q.filled + n, K);
}

double queue_mean_age(const KeyQueue& q, std::int64_t step) {
  if (q.filled == 0) return 0.0;
  double acc = 0.0;
  for (std::size_t col = 0; col < q.filled; ++col) {
    acc += static_cast<double>(step - q.written_step[col]);
  }
  return acc / static_cast<double>(q.filled);
}

std::int64_t queue_max_age(const KeyQueue& q, std::int64_t step) {
  std::int64_t worst = 0;
  for (std::size_t col = 0; col < q.filled; ++col) {
    worst = std::max(worst, step - q.written_step[col]);
  }
  return worst;
}

// ---- logits / loss ----------------------------------------------------------------

Tensor logits_moco(const Tensor& q, const Tensor& k_pos, const KeyQueue& queue,
                   double tau) {
  if (tau <= 0.0) throw ContractError("logits_moco: tau must be positive");
  if (q.rank() != 2 || q.shape() != k_pos.shape() ||
      q.dim(1) != queue.feature_dim) {
    throw DimensionError("logits_moco: q " + shape_str(q.shape()) + ", k " +
                         shape_str(k_pos.shape()) + ", queue dim " +
                         std::to_string(queue.feature_dim));
  }
  if (k_pos.requires_grad()) {
    throw ContractError("logits_moco: positive keys must be detached");
  }
  Tensor l_pos = batched_dot(q, k_pos);
  Tensor negatives = queue.buffer;
  if (queue.filled == 0) {
    return scale(l_pos, 1.0 / tau);
  }
  if (queue.filled < queue.capacity) {
    // contiguous prefix of valid columns (fill_first warmup)
    negatives = Tensor::zeros({queue.feature_dim, queue.filled});
    for (std::size_t c = 0; c < queue.feature_dim; ++c) {
      std::copy_n(queue.buffer.values().data() + c * queue.capacity,
                  queue.filled,
                  negatives.values().data() + c * queue.filled);
    }
  }
  Tensor l_neg = matmul(q, negatives);
  return scale(concat_cols(l_pos, l_neg), 1.0 / tau);
}

Tensor logits_end_to_end(const Tensor& q, const Tensor& k, double tau) {
  if (tau <= 0.0) throw ContractError("logits_end_to_end: tau must be positive");
  if (q.rank() != 2 || q.shape() != k.shape()) {
    throw DimensionError("logits_end_to_end: q " + shape_str(q.shape()) +
                         " vs k " + shape_str(k.shape()));
  }
  Tensor l_pos = batched_dot(q, k);
  Tensor l_all = matmul(q, transpose(k));
  return scale(concat_cols(l_pos, l_all), 1.0 / tau);
}

Tensor infonce_loss(const Tensor& logits) {
  if (logits.rank() != 2) {
    throw DimensionError("infonce_loss: expected N x (1+K) logits, got " +
                         shape_str(logits.shape()));
  }
  const std::vector<std::size_t> targets(logits.dim(0), 0);
  return softmax_cross_entropy(logits, targets);
}

double pretext_accuracy(const Tensor& logits) {
  const std::size_t n = logits.dim(0), m = logits.dim(1);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = logits.values().data() + i * m;
    std::size_t best = 0;
    for (std::size_t j = 1; j < m; ++j) {
      if (row[j] > row[best]) best = j;
    }
    if (best == 0) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(n);
}

// ---- memory bank ---------------------------------------------------------------

MemoryBank bank_init(std::size_t D, std::size_t C, double feature_momentum,
                     RngStream& rng) {
  if (feature_momentum < 0.0 || feature_momentum >= 1.0) {
    throw ContractError("bank_init: feature_momentum must lie in [0, 1)");
  }
  MemoryBank bank;
  bank.feature_momentum = feature_momentum;
  bank.features = Tensor::zeros({D, C});
  bank.last_update_step.assign(D, 0);
  for (std::size_t i = 0; i < D; ++i) {
    double sq = 0.0;
    double* row = bank.features.values().data() + i * C;
    for (std::size_t c = 0; c < C; ++c) {
      row[c] = rng.normal();
      sq += row[c] * row[c];
    }
    const double norm = std::sqrt(sq);
    for (std::size_t c = 0; c < C; ++c) row[c] /= norm;
  }
  return bank;
}

Tensor bank_rows(const MemoryBank& bank, const std::vector<std::size_t>& rows) {
  const std::size_t C = bank.features.dim(1);
  Tensor out = Tensor::zeros({rows.size(), C});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= bank.features.dim(0)) {
      throw IndexError("bank_rows: row " + std::to_string(rows[i]) +
                       " out of range");
    }
    std::copy_n(bank.features.values().data() + rows[i] * C, C,
                out.values().data() + i * C);
  }
  return out;
}

Tensor bank_sample_negatives(const MemoryBank& bank,
                             const std::vector<std::size_t>& exclude,
                             std::size_t K, RngStream& rng,
                             std::vector<std::size_t>* sampled) {
  const std::size_t D = bank.features.dim(0);
  std::vector<bool> banned(D, false);
  for (std::size_t e : exclude) {
    if (e >= D) throw IndexError("bank_sample_negatives: excluded row oob");
    banned[e] = true;
  }
  std::vector<std::size_t> allowed;
  allowed.reserve(D);
  for (std::size_t i = 0; i < D; ++i) {
    if (!banned[i]) allowed.push_back(i);
  }
  if (K > allowed.size()) {
    throw ContractError("bank_sample_negatives: K = " + std::to_string(K) +
                        " exceeds " + std::to_string(allowed.size()) +
                        " available rows");
  }
  // partial Fisher-Yates: uniform without replacement
  for (std::size_t i = 0; i < K; ++i) {
    const std::size_t j = i + rng.uniform_index(allowed.size() - i);
    std::swap(allowed[i], allowed[j]);
  }
  allowed.resize(K);
  if (sampled != nullptr) *sampled = allowed;
  return bank_rows(bank, allowed);
}

void bank_update(MemoryBank& bank, const std::vector<std::size_t>& rows,
                 const Tensor& feats, std::int64_t step) {
  const std::size_t C = bank.features.dim(1);
  if (feats.rank() != 2 || feats.dim(0) != rows.size() || feats.dim(1) != C) {
    throw DimensionError("bank_update: features " + shape_str(feats.shape()) +
                         " do not match " + std::to_string(rows.size()) +
                         " rows of dim " + std::to_string(C));
  }
  const double fm = bank.feature_momentum;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    double* row = bank.features.values().data() + rows[i] * C;
    double sq = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      row[c] = fm * row[c] + (1.0 - fm) * feats.values()[i * C + c];
      sq += row[c] * row[c];
    }
    const double norm = std::sqrt(sq);
    if (norm < kNormFloor) {
      throw DegenerateFeatureError("bank_update: row " +
                                   std::to_string(rows[i]) + " collapsed");
    }
    for (std::size_t c = 0; c < C; ++c) row[c] /= norm;
    bank.last_update_step[rows[i]] = step;
  }
}

double bank_staleness(const MemoryBank& bank,
                      const std::vector<std::size_t>& sampled,
                      std::int64_t step) {
  if (sampled.empty()) return 0.0;
  double acc = 0.0;
  for (std::size_t row : sampled) {
    acc += static_cast<double>(step - bank.last_update_step[row]);
  }
  return acc / static_cast<double>(sampled.size());
}

// ---- train steps -----------------------------------------------------------------

namespace {

void check_finite_loss(double loss, std::int64_t step) {
  if (!std::isfinite(loss)) {
    throw DivergenceError("train step " + std::to_string(step) +
                          ": loss is not finite");
  }
}

}  // namespace

MetricsRecord train_step_moco(MocoState& st, const BatchViews& views,
                              const TrainStepEnv& env) {
  const auto start = Clock::now();
  const std::size_t n = views.x_q.dim(0);
  const ShardSpec shards{env.bn_shards};

  st.f_q.zero_grads();
  Tape tape;
  double loss_value = 0.0;
  double acc = 0.0;
  Tensor keys;
  {
    TapeScope scope(tape);
    Tensor q = encoder_forward(st.f_q, views.x_q, bn_train(shards.slices(n)));
    if (env.shuffle_bn) {
      RngStream plan_rng(derive_key(env.step_key, "shuffle"));
      const ShufflePlan plan = make_shuffle(n, plan_rng);
      keys = shuffled_key_forward(st.f_k, views.x_k, plan, shards);
    } else {
      keys = encoder_forward(st.f_k, views.x_k, bn_train(shards.slices(n)));
      if (keys.requires_grad()) keys = keys.detached();
    }
    Tensor logits = logits_moco(q, keys, st.queue, st.tau);
    Tensor loss = infonce_loss(logits);
    loss_value = loss.values()[0];
    acc = pretext_accuracy(logits);
    check_finite_loss(loss_value, env.step);
    backward(loss, tape);
  }
  st.opt.lr = env.lr;
  sgd_step(st.f_q.parameters(), st.opt);
  momentum_update(st.f_k, st.f_q, st.m);
  if (n > st.queue.capacity) {
    // enqueue-then-dequeue with N > K keeps only the newest K keys
    const std::size_t C = st.queue.feature_dim, K = st.queue.capacity;
    Tensor tail = Tensor::zeros({K, C});
    std::copy_n(keys.values().data() + (n - K) * C, K * C,
                tail.values().data());
    enqueue_dequeue(st.queue, tail, env.step);
  } else {
    enqueue_dequeue(st.queue, keys, env.step);
  }

  MetricsRecord rec;
  rec.step = env.step;
  rec.epoch = env.epoch;
  rec.loss = loss_value;
  rec.pretext_acc = acc;
  rec.param_distance = param_distance(st.f_q, st.f_k);
  rec.queue_mean_age = queue_mean_age(st.queue, env.step);
  rec.wall_ms = env.deterministic ? 0.0 : elapsed_ms(start);
  return rec;
}

MetricsRecord train_step_end_to_end(EndToEndState& st, const BatchViews& views,
                                    const TrainStepEnv& env) {
  const auto start = Clock::now();
  const std::size_t n = views.x_q.dim(0);
  if (n < 2) {
    throw ContractError("train_step_end_to_end: need at least 2 samples");
  }
  const ShardSpec shards{env.bn_shards};
  const bool shared = st.towers == TowerMode::shared;
  Encoder& key_tower = shared ? st.tower_q : st.tower_k;

  st.tower_q.zero_grads();
  if (!shared) st.tower_k.zero_grads();

  Tape tape;
  double loss_value = 0.0;
  double acc = 0.0;
  {
    TapeScope scope(tape);
    Tensor q =
        encoder_forward(st.tower_q, views.x_q, bn_train(shards.slices(n)));
    Tensor k;
    if (env.shuffle_bn) {
      RngStream plan_rng(derive_key(env.step_key, "shuffle"));
      const ShufflePlan plan = make_shuffle(n, plan_rng);
      k = shuffled_forward(key_tower, views.x_k, plan, shards);
    } else {
      k = encoder_forward(key_tower, views.x_k, bn_train(shards.slices(n)));
    }
    Tensor logits = logits_end_to_end(q, k, st.tau);
    Tensor loss = infonce_loss(logits);
    loss_value = loss.values()[0];
    acc = pretext_accuracy(logits);
    check_finite_loss(loss_value, env.step);
    backward(loss, tape);
  }
  st.opt.lr = env.lr;
  std::vector<NamedTensor> params = st.tower_q.parameters();
  if (!shared) {
    for (auto& [name, t] : st.tower_k.parameters()) {
      params.push_back({"tower_k." + name, t});
    }
  }
  sgd_step(params, st.opt);

  MetricsRecord rec;
  rec.step = env.step;
  rec.epoch = env.epoch;
  rec.loss = loss_value;
  rec.pretext_acc = acc;
  rec.param_distance =
      shared ? 0.0 : param_distance(st.tower_q, st.tower_k);
  rec.wall_ms = env.deterministic ? 0.0 : elapsed_ms(start);
  return rec;
}

MetricsRecord train_step_memory_bank(MemoryBankState& st, const Tensor& batch,
                                     const std::vector<std::size_t>& sample_ids,
                                     const TrainStepEnv& env) {
  const auto start = Clock::now();
  const std::size_t n = batch.dim(0);
  if (sample_ids.size() != n) {
    throw ContractError("train_step_memory_bank: ids do not match batch");
  }
  const ShardSpec shards{env.bn_shards};

  st.f.zero_grads();
  Tape tape;
  double loss_value = 0.0;
  double acc = 0.0;
  double staleness = 0.0;
  Tensor q_detached;
  {
    TapeScope scope(tape);
    Tensor q = encoder_forward(st.f, batch, bn_train(shards.slices(n)));
    Tensor positives = bank_rows(st.bank, sample_ids);
    RngStream neg_rng(derive_key(env.step_key, "bank_negatives"));
    std::vector<std::size_t> sampled;
    Tensor negatives = bank_sample_negatives(st.bank, sample_ids,
                                             st.num_negatives, neg_rng,
                                             &sampled);
    staleness = bank_staleness(st.bank, sampled, env.step);
    Tensor l_pos = batched_dot(q, positives);
    Tensor l_neg = matmul(q, transpose(negatives));
    Tensor logits = scale(concat_cols(l_pos, l_neg), 1.0 / st.tau);
    Tensor loss = infonce_loss(logits);
    loss_value = loss.values()[0];
    acc = pretext_accuracy(logits);
    check_finite_loss(loss_value, env.step);
    backward(loss, tape);
    q_detached = q.detached();
  }
  st.opt.lr = env.lr;
  sgd_step(st.f.parameters(), st.opt);
  bank_update(st.bank, sample_ids, q_detached, env.step);

  MetricsRecord rec;
  rec.step = env.step;
  rec.epoch = env.epoch;
  rec.loss = loss_value;
  rec.pretext_acc = acc;
  rec.bank_staleness = staleness;
  rec.wall_ms = env.deterministic ? 0.0 : elapsed_ms(start);
  return rec;
}

// ---- gradcheck hook ---------------------------------------------------------------

double gradcheck_moco_step_loss(RngStream& rng) {
  EncoderConfig cfg;
  cfg.arch = Arch::mlp;
  cfg.widths = {8, 8};
  cfg.input_shape = {5};
  cfg.feature_dim = 6;
  cfg.use_bn = true;
  cfg.bn_shards = 2;
  auto [f_q, f_k] = build_pair(cfg, rng);

  const std::size_t n = 6;
  Tensor x_q = Tensor::zeros({n, 5});
  Tensor x_k = Tensor::zeros({n, 5});
  fill_uniform(x_q, rng, 0.0, 1.0);
  fill_uniform(x_k, rng, 0.0, 1.0);

  KeyQueue queue = queue_init(12, cfg.feature_dim, rng);
  RngStream plan_rng(rng.next_u64());
  const ShufflePlan plan = make_shuffle(n, plan_rng);
  const ShardSpec shards{2};

  std::vector<Tensor> params;
  for (const auto& [name, t] : f_q.parameters()) params.push_back(t);

  return max_rel_gradient_error(
      [&]() {
        Tensor q = encoder_forward(f_q, x_q, bn_train(shards.slices(n)));
        Tensor k = shuffled_key_forward(f_k, x_k, plan, shards);
        return infonce_loss(logits_moco(q, k, queue, 0.07));
      },
      params);
}

}  // namespace moco
