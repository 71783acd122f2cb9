#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "moco/eval.hpp"

using namespace moco;

namespace {

EncoderConfig eval_cfg() {
  EncoderConfig cfg;
  cfg.arch = Arch::mlp;
  cfg.widths = {24};
  cfg.input_shape = {10};
  cfg.feature_dim = 6;
  cfg.use_bn = true;
  cfg.bn_shards = 2;
  return cfg;
}

Dataset separable_dataset(std::size_t per_class, std::size_t offset = 0) {
  SynthSpec spec;
  spec.n_classes = 3;
  spec.n_per_class = per_class;
  spec.shape = {10};
  spec.class_sep = 4.0;
  spec.noise_sigma = 0.7;
  spec.seed = 15;
  spec.index_offset = offset;
  return synth_clusters(spec);
}

FeatureMatrix matrix_from(std::vector<double> values, std::size_t rows,
                          std::size_t cols, std::vector<int> labels) {
  FeatureMatrix fm;
  fm.rows = rows;
  fm.cols = cols;
  fm.values = std::move(values);
  fm.labels = std::move(labels);
  return fm;
}

double param_checksum(const Encoder& enc) {
  double acc = 0.0;
  for (const auto& [name, t] : enc.parameters()) {
    for (double v : t.values()) acc += v;
  }
  for (const auto& [name, t] : enc.named_buffers()) {
    for (double v : t.values()) acc += v;
  }
  return acc;
}

}  // namespace

TEST_CASE("extract_features is pure and unit-norm at the projection tap") {
  RngStream rng(81);
  auto [enc, enc_k] = build_pair(eval_cfg(), rng);
  Dataset ds = separable_dataset(20);

  const double checksum_before = param_checksum(enc);
  FeatureMatrix a = extract_features(enc, ds, FeatureTap::projection_output, 16);
  FeatureMatrix b = extract_features(enc, ds, FeatureTap::projection_output, 7);
  CHECK(a.values == b.values);  // batching must not matter in eval mode
  CHECK(param_checksum(enc) == doctest::Approx(checksum_before));

  REQUIRE(a.rows == ds.size());
  REQUIRE(a.cols == 6);
  for (std::size_t i = 0; i < a.rows; ++i) {
    double sq = 0.0;
    for (std::size_t j = 0; j < a.cols; ++j) {
      sq += a.values[i * a.cols + j] * a.values[i * a.cols + j];
    }
    CHECK(std::abs(std::sqrt(sq) - 1.0) < 1e-6);
  }

  FeatureMatrix pre = extract_features(enc, ds, FeatureTap::pre_projection);
  CHECK(pre.cols == 24);
}

TEST_CASE("untrained features on separable data still beat chance") {
  RngStream rng(82);
  auto [enc, enc_k] = build_pair(eval_cfg(), rng);
  Dataset train = separable_dataset(40);
  Dataset val = separable_dataset(15, 40);
  FeatureMatrix ftr = extract_features(enc, train, FeatureTap::projection_output);
  FeatureMatrix fva = extract_features(enc, val, FeatureTap::projection_output);
  const double acc = knn_monitor(ftr, fva, 5, 0.07);
  CHECK(acc > 1.0 / 3.0 + 0.15);  // random projections keep separable data apart
}

TEST_CASE("linear probe solves linearly separable features exactly") {
  // one-hot-ish features per class
  std::vector<double> tr_values, va_values;
  std::vector<int> tr_labels, va_labels;
  RngStream rng(83);
  for (int cls = 0; cls < 2; ++cls) {
    for (int i = 0; i < 30; ++i) {
      const double jitter = 0.1 * rng.normal();
      tr_values.insert(tr_values.end(),
                       {cls == 0 ? 1.0 + jitter : jitter, cls == 1 ? 1.0 : 0.0});
      tr_labels.push_back(cls);
    }
    for (int i = 0; i < 10; ++i) {
      const double jitter = 0.1 * rng.normal();
      va_values.insert(va_values.end(),
                       {cls == 0 ? 1.0 + jitter : jitter, cls == 1 ? 1.0 : 0.0});
      va_labels.push_back(cls);
    }
  }
  FeatureMatrix train = matrix_from(tr_values, 60, 2, tr_labels);
  FeatureMatrix val = matrix_from(va_values, 20, 2, va_labels);
  ProbeConfig cfg;
  cfg.epochs = 40;
  cfg.batch = 16;
  const ProbeResult res = linear_probe(train, val, cfg);
  CHECK_FALSE(res.diverged);
  CHECK(res.accuracy == doctest::Approx(1.0));
}

TEST_CASE("label-shuffled probe sits at chance") {
  RngStream rng(84);
  const std::size_t rows = 400, cols = 12, classes = 10;
  std::vector<double> values(rows * cols);
  for (double& v : values) v = rng.normal();
  std::vector<int> labels(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    labels[i] = static_cast<int>(i % classes);
  }
  FeatureMatrix train = matrix_from(values, rows, cols, labels);

  std::vector<double> vvals(200 * cols);
  for (double& v : vvals) v = rng.normal();
  std::vector<int> vlabels(200);
  for (std::size_t i = 0; i < 200; ++i) vlabels[i] = static_cast<int>(i % classes);
  FeatureMatrix val = matrix_from(vvals, 200, cols, vlabels);

  ProbeConfig cfg;
  cfg.epochs = 30;
  const ProbeResult res = linear_probe(train, val, cfg);
  CHECK_FALSE(res.diverged);
  CHECK(std::abs(res.accuracy - 0.10) <= 0.03);  // chance for 10 classes
}

TEST_CASE("knn_monitor matches a brute-force neighbor search") {
  RngStream rng(85);
  const std::size_t ntr = 200, nva = 40, cols = 16;
  std::vector<double> tr(ntr * cols), va(nva * cols);
  for (double& v : tr) v = rng.normal();
  for (double& v : va) v = rng.normal();
  std::vector<int> trl(ntr), val_labels(nva);
  for (auto& l : trl) l = static_cast<int>(rng.uniform_index(4));
  for (auto& l : val_labels) l = static_cast<int>(rng.uniform_index(4));
  FeatureMatrix train = matrix_from(tr, ntr, cols, trl);
  FeatureMatrix val = matrix_from(va, nva, cols, val_labels);

  const std::size_t k = 7;
  const double temperature = 0.1;
  const double got = knn_monitor(train, val, k, temperature);

  // oracle: exhaustive sort per row on normalized copies
  auto norm_rows = [cols](std::vector<double> v, std::size_t rows) {
    for (std::size_t i = 0; i < rows; ++i) {
      double sq = 0.0;
      for (std::size_t j = 0; j < cols; ++j) sq += v[i * cols + j] * v[i * cols + j];
      const double n = std::sqrt(sq);
      for (std::size_t j = 0; j < cols; ++j) v[i * cols + j] /= n;
    }
    return v;
  };
  const auto trn = norm_rows(tr, ntr);
  const auto van = norm_rows(va, nva);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < nva; ++i) {
    std::vector<std::pair<double, std::size_t>> sims;
    for (std::size_t t = 0; t < ntr; ++t) {
      double dot = 0.0;
      for (std::size_t j = 0; j < cols; ++j) {
        dot += van[i * cols + j] * trn[t * cols + j];
      }
      sims.push_back({dot, t});
    }
    std::sort(sims.begin(), sims.end(), [](const auto& a, const auto& b) {
      if (a.first != b.first) return a.first > b.first;
      return a.second < b.second;
    });
    std::vector<double> votes(4, 0.0);
    for (std::size_t j = 0; j < k; ++j) {
      votes[static_cast<std::size_t>(trl[sims[j].second])] +=
          std::exp(sims[j].first / temperature);
    }
    std::size_t best = 0;
    for (std::size_t c = 1; c < 4; ++c) {
      if (votes[c] > votes[best]) best = c;
    }
    if (static_cast<int>(best) == val_labels[i]) ++hits;
  }
  CHECK(got == doctest::Approx(static_cast<double>(hits) / nva));
}

TEST_CASE("knn degenerate cases") {
  FeatureMatrix train = matrix_from({1, 0, 0, 1, -1, 0, 0, -1}, 4, 2,
                                    {0, 1, 0, 1});
  FeatureMatrix val = matrix_from({1, 0}, 1, 2, {0});
  // identical point with k=1 takes that label
  CHECK(knn_monitor(train, val, 1, std::nullopt) == doctest::Approx(1.0));
  // k == train size with uniform weights and balanced classes: every class
  // ties and the smallest id wins, which is chance here
  CHECK(knn_monitor(train, val, 4, std::nullopt) == doctest::Approx(1.0));
  FeatureMatrix val1 = matrix_from({0, -1}, 1, 2, {1});
  CHECK(knn_monitor(train, val1, 4, std::nullopt) == doctest::Approx(0.0));
  CHECK_THROWS_AS(knn_monitor(train, val, 9, std::nullopt), ContractError);
}

TEST_CASE("knn accuracy is invariant to orthogonal feature rotation") {
  RngStream rng(86);
  const std::size_t ntr = 120, nva = 30, cols = 8;
  std::vector<double> tr(ntr * cols), va(nva * cols);
  for (double& v : tr) v = rng.normal();
  for (double& v : va) v = rng.normal();
  std::vector<int> trl(ntr), vl(nva);
  for (auto& l : trl) l = static_cast<int>(rng.uniform_index(3));
  for (auto& l : vl) l = static_cast<int>(rng.uniform_index(3));

  // random orthogonal matrix via Gram-Schmidt
  std::vector<double> basis(cols * cols);
  for (std::size_t r = 0; r < cols; ++r) {
    for (std::size_t c = 0; c < cols; ++c) basis[r * cols + c] = rng.normal();
    for (std::size_t p = 0; p < r; ++p) {
      double dot = 0.0;
      for (std::size_t c = 0; c < cols; ++c) {
        dot += basis[r * cols + c] * basis[p * cols + c];
      }
      for (std::size_t c = 0; c < cols; ++c) {
        basis[r * cols + c] -= dot * basis[p * cols + c];
      }
    }
    double sq = 0.0;
    for (std::size_t c = 0; c < cols; ++c) sq += basis[r * cols + c] * basis[r * cols + c];
    const double norm = std::sqrt(sq);
    for (std::size_t c = 0; c < cols; ++c) basis[r * cols + c] /= norm;
  }
  auto rotate = [&](const std::vector<double>& v, std::size_t rows) {
    std::vector<double> out(v.size(), 0.0);
    for (std::size_t i = 0; i < rows; ++i) {
      for (std::size_t r = 0; r < cols; ++r) {
        double acc = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
          acc += v[i * cols + c] * basis[r * cols + c];
        }
        out[i * cols + r] = acc;
      }
    }
    return out;
  };

  FeatureMatrix train = matrix_from(tr, ntr, cols, trl);
  FeatureMatrix val = matrix_from(va, nva, cols, vl);
  FeatureMatrix train_rot = matrix_from(rotate(tr, ntr), ntr, cols, trl);
  FeatureMatrix val_rot = matrix_from(rotate(va, nva), nva, cols, vl);
  CHECK(knn_monitor(train, val, 10, 0.07) ==
        doctest::Approx(knn_monitor(train_rot, val_rot, 10, 0.07)));
}

TEST_CASE("probe accuracy is stable under feature column permutation") {
  RngStream rng(87);
  Dataset train_ds = separable_dataset(60);
  Dataset val_ds = separable_dataset(20, 60);
  auto [enc, enc_k] = build_pair(eval_cfg(), rng);
  FeatureMatrix train = extract_features(enc, train_ds, FeatureTap::pre_projection);
  FeatureMatrix val = extract_features(enc, val_ds, FeatureTap::pre_projection);

  ProbeConfig cfg;
  cfg.epochs = 40;
  const double base = linear_probe(train, val, cfg).accuracy;

  std::vector<std::size_t> perm(train.cols);
  std::iota(perm.begin(), perm.end(), 0);
  rng.shuffle(perm);
  auto permute = [&](FeatureMatrix fm) {
    FeatureMatrix out = fm;
    for (std::size_t i = 0; i < fm.rows; ++i) {
      for (std::size_t j = 0; j < fm.cols; ++j) {
        out.values[i * fm.cols + j] = fm.values[i * fm.cols + perm[j]];
      }
    }
    return out;
  };
  cfg.seed = 1;  // re-seeded init per the invariant's testable form
  const double permuted =
      linear_probe(permute(train), permute(val), cfg).accuracy;
  CHECK(std::abs(base - permuted) < 0.01 + 1e-9);
}
