#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "moco/data.hpp"

using namespace moco;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

void write_bytes(const std::string& path, const std::vector<unsigned char>& b) {
  std::ofstream out(path, std::ios::binary);
  out.write(reinterpret_cast<const char*>(b.data()),
            static_cast<std::streamsize>(b.size()));
}

std::vector<unsigned char> read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void push_u32_be(std::vector<unsigned char>& v, std::uint32_t x) {
  v.push_back(static_cast<unsigned char>(x >> 24));
  v.push_back(static_cast<unsigned char>(x >> 16));
  v.push_back(static_cast<unsigned char>(x >> 8));
  v.push_back(static_cast<unsigned char>(x));
}

// Minimal IDX pair: `count` images of 4x3 with deterministic byte patterns.
std::pair<std::string, std::string> make_idx_fixture(std::size_t count) {
  std::vector<unsigned char> images;
  push_u32_be(images, 0x00000803);
  push_u32_be(images, static_cast<std::uint32_t>(count));
  push_u32_be(images, 4);
  push_u32_be(images, 3);
  for (std::size_t i = 0; i < count * 12; ++i) {
    images.push_back(static_cast<unsigned char>((i * 37 + 11) % 256));
  }
  std::vector<unsigned char> labels;
  push_u32_be(labels, 0x00000801);
  push_u32_be(labels, static_cast<std::uint32_t>(count));
  for (std::size_t i = 0; i < count; ++i) {
    labels.push_back(static_cast<unsigned char>(i % 10));
  }
  const std::string suffix = std::to_string(count) + ".idx";
  const std::string ip = temp_path("fixture_images_" + suffix);
  const std::string lp = temp_path("fixture_labels_" + suffix);
  write_bytes(ip, images);
  write_bytes(lp, labels);
  return {ip, lp};
}

// independent oracle: centered cosine 1-NN (leave-one-out would be trivial;
// here train/val come from disjoint index ranges)
double raw_knn_1nn(const Dataset& train, const Dataset& val) {
  const std::size_t d = train.sample_size();
  std::vector<double> mean(d, 0.0);
  for (std::size_t i = 0; i < train.size(); ++i) {
    for (std::size_t j = 0; j < d; ++j) mean[j] += train.sample_values(i)[j];
  }
  for (double& m : mean) m /= static_cast<double>(train.size());
  auto center = [&](const double* row, std::vector<double>& out) {
    double sq = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      out[j] = row[j] - mean[j];
      sq += out[j] * out[j];
    }
    const double norm = std::sqrt(sq);
    if (norm > 0.0) {
      for (double& v : out) v /= norm;
    }
  };
  std::vector<double> a(d), b(d);
  std::size_t hits = 0;
  for (std::size_t v = 0; v < val.size(); ++v) {
    center(val.sample_values(v), a);
    double best = -2.0;
    std::size_t best_row = 0;
    for (std::size_t t = 0; t < train.size(); ++t) {
      center(train.sample_values(t), b);
      double dot = 0.0;
      for (std::size_t j = 0; j < d; ++j) dot += a[j] * b[j];
      if (dot > best) {
        best = dot;
        best_row = t;
      }
    }
    if (train.label(best_row) == val.label(v)) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(val.size());
}

}  // namespace

TEST_CASE("load_idx decodes headers and scales bytes") {
  auto [images, labels] = make_idx_fixture(2);
  Dataset ds = load_idx(images, labels);
  CHECK(ds.size() == 2);
  CHECK(ds.sample_shape() == Shape{1, 4, 3});
  CHECK(ds.has_labels());
  CHECK(ds.label(0) == 0);
  CHECK(ds.label(1) == 1);
  // byte 11 is the first pixel; byte 255 and 0 scale to the range ends
  CHECK(ds.sample_values(0)[0] == doctest::Approx(11.0 / 255.0));
  Dataset probe({1, 1, 1}, {1.0}, {3});
  CHECK(probe.sample_values(0)[0] == doctest::Approx(1.0));
}

TEST_CASE("idx round trip is byte-identical") {
  auto [images, labels] = make_idx_fixture(100);
  Dataset ds = load_idx(images, labels);
  const std::string out_images = temp_path("rt_images.idx");
  const std::string out_labels = temp_path("rt_labels.idx");
  write_idx(ds, out_images, out_labels);
  CHECK(read_bytes(images) == read_bytes(out_images));
  CHECK(read_bytes(labels) == read_bytes(out_labels));
}

TEST_CASE("idx errors carry the right classes") {
  auto [images, labels] = make_idx_fixture(3);

  // bad magic
  auto bytes = read_bytes(images);
  bytes[3] = 0x99;
  const std::string bad_magic = temp_path("bad_magic.idx");
  write_bytes(bad_magic, bytes);
  CHECK_THROWS_AS(load_idx(bad_magic, labels), FormatError);

  // truncated payload
  bytes = read_bytes(images);
  bytes.resize(bytes.size() - 5);
  const std::string truncated = temp_path("truncated.idx");
  write_bytes(truncated, bytes);
  CHECK_THROWS_AS(load_idx(truncated, labels), IoError);

  // count mismatch
  auto [other_images, other_labels] = make_idx_fixture(4);
  CHECK_THROWS_AS(load_idx(images, other_labels), ConsistencyError);

  CHECK_THROWS_AS(load_idx(temp_path("missing.idx"), labels), IoError);
}

TEST_CASE("synth_clusters is deterministic and noise-free classes collapse") {
  SynthSpec spec;
  spec.n_classes = 3;
  spec.n_per_class = 5;
  spec.shape = {8};
  spec.noise_sigma = 0.0;
  Dataset a = synth_clusters(spec);
  Dataset b = synth_clusters(spec);
  CHECK(a.values() == b.values());
  for (std::size_t s = 1; s < 5; ++s) {
    for (std::size_t j = 0; j < 8; ++j) {
      CHECK(a.sample_values(s)[j] == doctest::Approx(a.sample_values(0)[j]));
    }
  }
  spec.seed = 8;
  Dataset c = synth_clusters(spec);
  CHECK(c.values() != a.values());
}

TEST_CASE("train/val splits share prototypes but not samples") {
  SynthSpec train_spec;
  train_spec.n_classes = 4;
  train_spec.n_per_class = 20;
  train_spec.shape = {16};
  SynthSpec val_spec = train_spec;
  val_spec.n_per_class = 10;
  val_spec.index_offset = 20;
  Dataset train = synth_clusters(train_spec);
  Dataset val = synth_clusters(val_spec);
  for (std::size_t v = 0; v < val.size(); ++v) {
    for (std::size_t t = 0; t < train.size(); ++t) {
      bool same = true;
      for (std::size_t j = 0; j < 16 && same; ++j) {
        same = val.sample_values(v)[j] == train.sample_values(t)[j];
      }
      CHECK_FALSE(same);
    }
  }
}

TEST_CASE("difficulty knobs calibrate raw-input kNN accuracy") {
  auto make_pair = [](double sep, double noise) {
    SynthSpec spec;
    spec.n_classes = 5;
    spec.n_per_class = 60;
    spec.shape = {24};
    spec.class_sep = sep;
    spec.noise_sigma = noise;
    SynthSpec val = spec;
    val.n_per_class = 30;
    val.index_offset = 60;
    return std::pair{synth_clusters(spec), synth_clusters(val)};
  };
  auto [easy_train, easy_val] = make_pair(4.0, 1.0);  // ratio 4
  CHECK(raw_knn_1nn(easy_train, easy_val) >= 0.95);

  auto [hard_train, hard_val] = make_pair(0.5, 1.0);  // ratio 0.5
  CHECK(raw_knn_1nn(hard_train, hard_val) < 0.45);    // near chance (0.2)
}

TEST_CASE("label reads are counted") {
  SynthSpec spec;
  spec.n_classes = 2;
  spec.n_per_class = 3;
  spec.shape = {4};
  Dataset ds = synth_clusters(spec);
  const auto before = ds.label_reads();
  (void)ds.label(0);
  (void)ds.label(5);
  CHECK(ds.label_reads() == before + 2);
}

TEST_CASE("all-zero augmentation config is the identity") {
  SynthSpec spec;
  spec.n_classes = 2;
  spec.n_per_class = 4;
  spec.shape = {1, 6, 6};
  Dataset ds = synth_clusters(spec);
  AugmentationConfig cfg;
  cfg.crop_pad = 0;
  cfg.flip_prob = 0.0;
  cfg.jitter_strength = 0.0;
  cfg.grayscale_prob = 0.0;
  cfg.vector_noise_sigma = 0.0;
  cfg.vector_dropout_prob = 0.0;
  RngStream rng(51);
  auto [q, k] = augment_two_views(ds, 2, cfg, rng);
  for (std::size_t j = 0; j < ds.sample_size(); ++j) {
    CHECK(q.values()[j] == ds.sample_values(2)[j]);
    CHECK(k.values()[j] == ds.sample_values(2)[j]);
  }
}

TEST_CASE("nonzero augmentation yields distinct views in shape and range") {
  SynthSpec spec;
  spec.n_classes = 2;
  spec.n_per_class = 4;
  spec.shape = {12};
  Dataset ds = synth_clusters(spec);
  AugmentationConfig cfg;  // defaults: noise + dropout for vectors
  RngStream rng(52);
  auto [q, k] = augment_two_views(ds, 1, cfg, rng);
  CHECK(q.shape() == ds.sample_shape());
  CHECK(q.values() != k.values());
  for (double v : q.values()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
}

TEST_CASE("pad-and-crop is a translation by at most the pad") {
  SynthSpec spec;
  spec.n_classes = 2;
  spec.n_per_class = 2;
  spec.shape = {1, 7, 7};
  Dataset ds = synth_clusters(spec);
  AugmentationConfig cfg;
  cfg.crop_pad = 2;
  cfg.flip_prob = 0.0;
  cfg.jitter_strength = 0.0;
  cfg.grayscale_prob = 0.0;

  RngStream rng(53);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor view = augment_view(ds, 0, cfg, rng);
    // exhaustive offsets: the view must equal one zero-padded shift
    bool matched = false;
    for (int dy = -2; dy <= 2 && !matched; ++dy) {
      for (int dx = -2; dx <= 2 && !matched; ++dx) {
        bool equal = true;
        for (int y = 0; y < 7 && equal; ++y) {
          for (int x = 0; x < 7 && equal; ++x) {
            const int sy = y + dy, sx = x + dx;
            const double want =
                (sy < 0 || sy >= 7 || sx < 0 || sx >= 7)
                    ? 0.0
                    : ds.sample_values(0)[sy * 7 + sx];
            equal = view.values()[y * 7 + x] == want;
          }
        }
        matched = equal;
      }
    }
    CHECK(matched);
  }
}

TEST_CASE("minibatches drop the partial batch and reshuffle per epoch") {
  SynthSpec spec;
  spec.n_classes = 2;
  spec.n_per_class = 5;  // D = 10
  spec.shape = {4};
  Dataset ds = synth_clusters(spec);

  auto b1 = minibatches(ds, 4, 77);
  CHECK(b1.size() == 2);  // 10/4 with drop-last
  auto b2 = minibatches(ds, 4, 77);
  CHECK(b1 == b2);
  auto b3 = minibatches(ds, 4, 78);
  CHECK(b1 != b3);
}

TEST_CASE("every sample appears in its expected proportion across epochs") {
  SynthSpec spec;
  spec.n_classes = 2;
  spec.n_per_class = 5;  // D = 10, batch 4 => 8 of 10 used per epoch
  spec.shape = {4};
  Dataset ds = synth_clusters(spec);

  std::vector<std::size_t> counts(10, 0);
  const std::size_t epochs = 4000;
  for (std::size_t e = 0; e < epochs; ++e) {
    for (const auto& batch : minibatches(ds, 4, derive_key(123, e))) {
      for (std::size_t row : batch) counts[row] += 1;
    }
  }
  const double expected = 0.8 * static_cast<double>(epochs);
  for (std::size_t row = 0; row < 10; ++row) {
    CHECK(std::abs(counts[row] / expected - 1.0) < 0.02);
  }
}

TEST_CASE("prefetcher matches synchronous assembly") {
  SynthSpec spec;
  spec.n_classes = 3;
  spec.n_per_class = 16;
  spec.shape = {6};
  Dataset ds = synth_clusters(spec);
  AugmentationConfig cfg;
  auto plan = minibatches(ds, 8, 500);

  BatchPrefetcher sync(ds, plan, cfg, 999, false);
  BatchPrefetcher async(ds, plan, cfg, 999, true);
  while (true) {
    auto a = sync.next();
    auto b = async.next();
    CHECK(a.has_value() == b.has_value());
    if (!a || !b) break;
    CHECK(a->rows == b->rows);
    CHECK(a->x_q.values() == b->x_q.values());
    CHECK(a->x_k.values() == b->x_k.values());
  }
}
