#include "moco/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace moco {

FeatureMatrix extract_features(Encoder& enc, const Dataset& ds, FeatureTap tap,
                               std::size_t batch) {
  if (batch == 0) throw ContractError("extract_features: batch must be > 0");
  FeatureMatrix fm;
  fm.tap = tap;
  fm.rows = ds.size();
  for (std::size_t start = 0; start < ds.size(); start += batch) {
    const std::size_t end = std::min(ds.size(), start + batch);
    std::vector<std::size_t> rows(end - start);
    std::iota(rows.begin(), rows.end(), start);
    Tensor x = stack_samples(ds, rows);
    TappedFeatures feats = encoder_forward_tapped(enc, x, bn_eval());
    const Tensor& t = tap == FeatureTap::projection_output
                          ? feats.projection
                          : feats.pre_projection;
    if (fm.cols == 0) {
      fm.cols = t.dim(1);
      fm.values.reserve(fm.rows * fm.cols);
    }
    fm.values.insert(fm.values.end(), t.values().begin(), t.values().end());
  }
  if (ds.has_labels()) {
    fm.labels.resize(ds.size());
    for (std::size_t i = 0; i < ds.size(); ++i) fm.labels[i] = ds.label(i);
  }
  return fm;
}

FeatureMatrix raw_feature_matrix(const Dataset& ds, bool center) {
  FeatureMatrix fm;
  fm.rows = ds.size();
  fm.cols = ds.sample_size();
  fm.values = ds.values();
  if (center) {
    std::vector<double> mean(fm.cols, 0.0);
    for (std::size_t i = 0; i < fm.rows; ++i) {
      for (std::size_t j = 0; j < fm.cols; ++j) {
        mean[j] += fm.values[i * fm.cols + j];
      }
    }
    for (double& m : mean) m /= static_cast<double>(fm.rows);
    for (std::size_t i = 0; i < fm.rows; ++i) {
      for (std::size_t j = 0; j < fm.cols; ++j) {
        fm.values[i * fm.cols + j] -= mean[j];
      }
    }
  }
  if (ds.has_labels()) {
    fm.labels.resize(ds.size());
    for (std::size_t i = 0; i < ds.size(); ++i) fm.labels[i] = ds.label(i);
  }
  return fm;
}

namespace {

int class_count(const FeatureMatrix& a, const FeatureMatrix& b) {
  int top = 0;
  for (int l : a.labels) top = std::max(top, l);
  for (int l : b.labels) top = std::max(top, l);
  return top + 1;
}

double probe_accuracy(const FeatureMatrix& val, const Tensor& w,
                      const Tensor& b) {
  const std::size_t f = val.cols;
  const std::size_t nc = b.dim(0);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < val.rows; ++i) {
    const double* row = val.values.data() + i * f;
    int best = 0;
    double best_score = -1e300;
    for (std::size_t c = 0; c < nc; ++c) {
      double s = b.values()[c];
      for (std::size_t j = 0; j < f; ++j) {
        s += row[j] * w.values()[j * nc + c];
      }
      if (s > best_score) {
        best_score = s;
        best = static_cast<int>(c);
      }
    }
    if (best == val.labels[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(val.rows);
}

}  // namespace

ProbeResult linear_probe(const FeatureMatrix& train, const FeatureMatrix& val,
                         const ProbeConfig& cfg) {
  if (train.cols != val.cols) {
    throw DimensionError("linear_probe: feature dims disagree");
  }
  if (train.labels.empty() || val.labels.empty()) {
    throw ContractError("linear_probe: labels required");
  }
  const std::size_t nc = static_cast<std::size_t>(class_count(train, val));
  const std::size_t f = train.cols;

  ProbeResult result;
  result.diverged = true;
  for (double lr : cfg.lr_grid) {
    RngStream rng(derive_key(cfg.seed, "probe_init"));
    Tensor w = Tensor::zeros({f, nc}, true);
    fill_uniform(w, rng, -1.0 / std::sqrt(static_cast<double>(f)),
                 1.0 / std::sqrt(static_cast<double>(f)));
    Tensor b = Tensor::zeros({nc}, true);
    SgdState opt{lr, cfg.momentum, cfg.weight_decay, {}};

    std::vector<std::size_t> order(train.rows);
    std::iota(order.begin(), order.end(), 0);
    bool failed = false;
    for (std::size_t epoch = 0; epoch < cfg.epochs && !failed; ++epoch) {
      RngStream erng(derive_key(derive_key(cfg.seed, "probe_epoch"), epoch));
      erng.shuffle(order);
      for (std::size_t start = 0; start < train.rows && !failed;
           start += cfg.batch) {
        const std::size_t end = std::min(train.rows, start + cfg.batch);
        const std::size_t n = end - start;
        Tensor x = Tensor::zeros({n, f});
        std::vector<std::size_t> targets(n);
        for (std::size_t i = 0; i < n; ++i) {
          const std::size_t row = order[start + i];
          std::copy_n(train.values.data() + row * f, f,
                      x.values().data() + i * f);
          targets[i] = static_cast<std::size_t>(train.labels[row]);
        }
        w.zero_grad();
        b.zero_grad();
        Tape tape;
        {
          TapeScope scope(tape);
          Tensor loss = softmax_cross_entropy(linear(x, w, b), targets);
          if (!std::isfinite(loss.values()[0])) {
            failed = true;
            break;
          }
          backward(loss, tape);
        }
        try {
          sgd_step({{"probe.w", w}, {"probe.b", b}}, opt);
        } catch (const DivergenceError&) {
          failed = true;
        }
      }
    }
    if (failed) continue;
    const double acc = probe_accuracy(val, w, b);
    if (!std::isfinite(acc)) continue;
    if (result.diverged || acc > result.accuracy) {
      result.accuracy = acc;
      result.best_lr = lr;
      result.diverged = false;
    }
  }
  return result;
}

double knn_monitor(const FeatureMatrix& train, const FeatureMatrix& val,
                   std::size_t k, std::optional<double> temperature) {
  if (k < 1 || k > train.rows) {
    throw ContractError("knn_monitor: k = " + std::to_string(k) +
                        " out of range for " + std::to_string(train.rows) +
                        " train rows");
  }
  if (train.cols != val.cols) {
    throw DimensionError("knn_monitor: feature dims disagree");
  }
  if (train.labels.empty() || val.labels.empty()) {
    throw ContractError("knn_monitor: labels required");
  }
  const std::size_t f = train.cols;
  const std::size_t nc = static_cast<std::size_t>(class_count(train, val));

  auto normalized = [f](const FeatureMatrix& fm) {
    std::vector<double> out = fm.values;
    for (std::size_t i = 0; i < fm.rows; ++i) {
      double sq = 0.0;
      for (std::size_t j = 0; j < f; ++j) {
        sq += out[i * f + j] * out[i * f + j];
      }
      const double norm = std::sqrt(sq);
      if (norm > 0.0) {
        for (std::size_t j = 0; j < f; ++j) out[i * f + j] /= norm;
      }
    }
    return out;
  };
  const std::vector<double> tr = normalized(train);
  const std::vector<double> va = normalized(val);

  std::size_t hits = 0;
  std::vector<std::pair<double, std::size_t>> sims(train.rows);
  std::vector<double> votes(nc);
  for (std::size_t i = 0; i < val.rows; ++i) {
    const double* vrow = va.data() + i * f;
    for (std::size_t t = 0; t < train.rows; ++t) {
      const double* trow = tr.data() + t * f;
      double dot = 0.0;
      for (std::size_t j = 0; j < f; ++j) dot += vrow[j] * trow[j];
      sims[t] = {dot, t};
    }
    std::partial_sort(sims.begin(), sims.begin() + static_cast<long>(k),
                      sims.end(), [](const auto& a, const auto& b) {
                        if (a.first != b.first) return a.first > b.first;
                        return a.second < b.second;
                      });
    std::fill(votes.begin(), votes.end(), 0.0);
    for (std::size_t j = 0; j < k; ++j) {
      const double weight =
          temperature ? std::exp(sims[j].first / *temperature) : 1.0;
      votes[static_cast<std::size_t>(train.labels[sims[j].second])] += weight;
    }
    std::size_t best = 0;
    for (std::size_t c = 1; c < nc; ++c) {
      if (votes[c] > votes[best]) best = c;  // ties keep the smaller id
    }
    if (static_cast<int>(best) == val.labels[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(val.rows);
}

}  // namespace moco
