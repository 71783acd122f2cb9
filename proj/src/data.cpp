#include "moco/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

namespace moco {

namespace {

constexpr std::uint32_t kImagesMagic = 0x00000803;
constexpr std::uint32_t kLabelsMagic = 0x00000801;

std::uint32_t read_u32_be(std::istream& in, const std::string& path) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) {
    throw IoError("truncated IDX file: " + path);
  }
  return (static_cast<std::uint32_t>(b[0]) << 24) |
         (static_cast<std::uint32_t>(b[1]) << 16) |
         (static_cast<std::uint32_t>(b[2]) << 8) |
         static_cast<std::uint32_t>(b[3]);
}

void write_u32_be(std::ostream& out, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v >> 24),
                              static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

}  // namespace

Dataset::Dataset(Shape sample_shape, std::vector<double> values,
                 std::vector<int> labels)
    : sample_shape_(std::move(sample_shape)),
      values_(std::move(values)),
      labels_(std::move(labels)) {
  const std::size_t per = shape_numel(sample_shape_);
  if (per == 0 || values_.size() % per != 0) {
    throw ConsistencyError("dataset values do not tile the sample shape");
  }
  count_ = values_.size() / per;
  if (!labels_.empty() && labels_.size() != count_) {
    throw ConsistencyError("dataset has " + std::to_string(count_) +
                           " samples but " + std::to_string(labels_.size()) +
                           " labels");
  }
  ids_.resize(count_);
  std::iota(ids_.begin(), ids_.end(), 0);
}

Dataset::Dataset(const Dataset& other)
    : sample_shape_(other.sample_shape_),
      values_(other.values_),
      labels_(other.labels_),
      ids_(other.ids_),
      count_(other.count_) {}

Dataset& Dataset::operator=(const Dataset& other) {
  if (this != &other) {
    sample_shape_ = other.sample_shape_;
    values_ = other.values_;
    labels_ = other.labels_;
    ids_ = other.ids_;
    count_ = other.count_;
  }
  return *this;
}

int Dataset::label(std::size_t i) const {
  if (labels_.empty()) throw ContractError("dataset has no labels");
  if (i >= count_) {
    throw IndexError("label index " + std::to_string(i) + " out of range");
  }
  label_reads_.fetch_add(1, std::memory_order_relaxed);
  return labels_[i];
}

// ---- IDX -------------------------------------------------------------------

Dataset load_idx(const std::string& images_path,
                 const std::string& labels_path) {
  std::ifstream img(images_path, std::ios::binary);
  if (!img) throw IoError("cannot open " + images_path);
  const std::uint32_t img_magic = read_u32_be(img, images_path);
  if (img_magic != kImagesMagic) {
    throw FormatError("bad IDX image magic in " + images_path);
  }
  const std::uint32_t count = read_u32_be(img, images_path);
  const std::uint32_t rows = read_u32_be(img, images_path);
  const std::uint32_t cols = read_u32_be(img, images_path);
  const std::size_t pixels =
      static_cast<std::size_t>(count) * rows * cols;
  std::vector<unsigned char> raw(pixels);
  if (!img.read(reinterpret_cast<char*>(raw.data()),
                static_cast<std::streamsize>(pixels))) {
    throw IoError("truncated IDX image payload in " + images_path);
  }

  std::ifstream lab(labels_path, std::ios::binary);
  if (!lab) throw IoError("cannot open " + labels_path);
  const std::uint32_t lab_magic = read_u32_be(lab, labels_path);
  if (lab_magic != kLabelsMagic) {
    throw FormatError("bad IDX label magic in " + labels_path);
  }
  const std::uint32_t lab_count = read_u32_be(lab, labels_path);
  if (lab_count != count) {
    throw ConsistencyError("IDX count mismatch: " + std::to_string(count) +
                           " images vs " + std::to_string(lab_count) +
                           " labels");
  }
  std::vector<unsigned char> raw_labels(lab_count);
  if (!lab.read(reinterpret_cast<char*>(raw_labels.data()),
                static_cast<std::streamsize>(lab_count))) {
    throw IoError("truncated IDX label payload in " + labels_path);
  }

  std::vector<double> values(pixels);
  for (std::size_t i = 0; i < pixels; ++i) {
    values[i] = static_cast<double>(raw[i]) / 255.0;
  }
  std::vector<int> labels(raw_labels.begin(), raw_labels.end());
  return Dataset({1, rows, cols}, std::move(values), std::move(labels));
}

void write_idx(const Dataset& ds, const std::string& images_path,
               const std::string& labels_path) {
  if (ds.sample_shape().size() != 3 || ds.sample_shape()[0] != 1) {
    throw ContractError("write_idx: only single-channel image datasets");
  }
  if (!ds.has_labels()) throw ContractError("write_idx: labels required");

  std::ofstream img(images_path, std::ios::binary);
  if (!img) throw IoError("cannot create " + images_path);
  write_u32_be(img, kImagesMagic);
  write_u32_be(img, static_cast<std::uint32_t>(ds.size()));
  write_u32_be(img, static_cast<std::uint32_t>(ds.sample_shape()[1]));
  write_u32_be(img, static_cast<std::uint32_t>(ds.sample_shape()[2]));
  for (double v : ds.values()) {
    const auto byte = static_cast<unsigned char>(
        std::lround(clamp01(v) * 255.0));
    img.write(reinterpret_cast<const char*>(&byte), 1);
  }
  if (!img) throw IoError("failed writing " + images_path);

  std::ofstream lab(labels_path, std::ios::binary);
  if (!lab) throw IoError("cannot create " + labels_path);
  write_u32_be(lab, kLabelsMagic);
  write_u32_be(lab, static_cast<std::uint32_t>(ds.size()));
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto byte = static_cast<unsigned char>(ds.label(i));
    lab.write(reinterpret_cast<const char*>(&byte), 1);
  }
  if (!lab) throw IoError("failed writing " + labels_path);
}

// ---- synthetic corpus --------------------------------------------------------

namespace {

// 3x3 box blur with clamped borders, applied per channel.
void box_blur(std::vector<double>& field, std::size_t c, std::size_t h,
              std::size_t w) {
  std::vector<double> out(field.size());
  for (std::size_t ci = 0; ci < c; ++ci) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        double acc = 0.0;
        int cnt = 0;
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            const int yy = static_cast<int>(y) + dy;
            const int xx = static_cast<int>(x) + dx;
            if (yy < 0 || xx < 0 || yy >= static_cast<int>(h) ||
                xx >= static_cast<int>(w)) {
              continue;
            }
            acc += field[(ci * h + yy) * w + xx];
            ++cnt;
          }
        }
        out[(ci * h + y) * w + x] = acc / cnt;
      }
    }
  }
  field = std::move(out);
}

}  // namespace

Dataset synth_clusters(const SynthSpec& spec) {
  if (spec.n_classes < 2) {
    throw ContractError("synth_clusters: need at least 2 classes");
  }
  const std::size_t dim = shape_numel(spec.shape);
  RngStream proto_rng(derive_key(spec.seed, "synth_proto"));

  std::vector<std::vector<double>> prototypes(spec.n_classes);
  for (auto& proto : prototypes) {
    proto.resize(dim);
    for (double& v : proto) v = proto_rng.normal();
    if (spec.shape.size() == 3) {
      box_blur(proto, spec.shape[0], spec.shape[1], spec.shape[2]);
      box_blur(proto, spec.shape[0], spec.shape[1], spec.shape[2]);
    }
    double norm = 0.0;
    for (double v : proto) norm += v * v;
    norm = std::sqrt(norm);
    const double target = spec.class_sep;
    for (double& v : proto) v = norm > 0.0 ? v / norm * target : 0.0;
  }

  // affine squash into [0,1]; 3-sigma tails rarely clamp
  const double span = spec.class_sep + 3.0 * spec.noise_sigma + 1e-9;
  const double gain = 0.5 / span;

  // every (class, sample index) owns its own noise stream, so splits with
  // different index_offset never share samples
  const std::uint64_t sample_root = derive_key(spec.seed, "synth_sample");
  std::vector<double> values(spec.n_classes * spec.n_per_class * dim);
  std::vector<int> labels(spec.n_classes * spec.n_per_class);
  std::size_t row = 0;
  for (std::size_t cls = 0; cls < spec.n_classes; ++cls) {
    const std::uint64_t class_key = derive_key(sample_root, cls);
    for (std::size_t s = 0; s < spec.n_per_class; ++s, ++row) {
      labels[row] = static_cast<int>(cls);
      RngStream rng(derive_key(class_key, spec.index_offset + s));
      double* dst = values.data() + row * dim;
      for (std::size_t d = 0; d < dim; ++d) {
        const double raw = prototypes[cls][d] + spec.noise_sigma * rng.normal();
        dst[d] = clamp01(0.5 + raw * gain);
      }
    }
  }
  return Dataset(spec.shape, std::move(values), std::move(labels));
}

// ---- augmentation -------------------------------------------------------------

namespace {

void augment_vector(std::vector<double>& v, const AugmentationConfig& cfg,
                    RngStream& rng) {
  for (double& x : v) {
    if (cfg.vector_noise_sigma > 0.0) {
      x += cfg.vector_noise_sigma * rng.normal();
    }
  }
  if (cfg.vector_dropout_prob > 0.0) {
    for (double& x : v) {
      if (rng.bernoulli(cfg.vector_dropout_prob)) x = 0.0;
    }
  }
  for (double& x : v) x = clamp01(x);
}

void augment_image(std::vector<double>& v, const Shape& shape,
                   const AugmentationConfig& cfg, RngStream& rng) {
  const std::size_t c = shape[0], h = shape[1], w = shape[2];
  if (cfg.crop_pad > 0) {
    const auto pad = static_cast<std::size_t>(cfg.crop_pad);
    const std::size_t ph = h + 2 * pad, pw = w + 2 * pad;
    std::vector<double> padded(c * ph * pw, 0.0);
    for (std::size_t ci = 0; ci < c; ++ci) {
      for (std::size_t y = 0; y < h; ++y) {
        std::copy_n(v.data() + (ci * h + y) * w, w,
                    padded.data() + (ci * ph + y + pad) * pw + pad);
      }
    }
    const std::size_t oy = rng.uniform_index(2 * pad + 1);
    const std::size_t ox = rng.uniform_index(2 * pad + 1);
    for (std::size_t ci = 0; ci < c; ++ci) {
      for (std::size_t y = 0; y < h; ++y) {
        std::copy_n(padded.data() + (ci * ph + y + oy) * pw + ox, w,
                    v.data() + (ci * h + y) * w);
      }
    }
  }
  if (rng.bernoulli(cfg.flip_prob)) {
    for (std::size_t ci = 0; ci < c; ++ci) {
      for (std::size_t y = 0; y < h; ++y) {
        double* row = v.data() + (ci * h + y) * w;
        std::reverse(row, row + w);
      }
    }
  }
  if (cfg.jitter_strength > 0.0) {
    const double s = cfg.jitter_strength;
    const double brightness = 1.0 + rng.uniform(-s, s);
    const double contrast = 1.0 + rng.uniform(-s, s);
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    for (double& x : v) x = (mean + (x - mean) * contrast) * brightness;
  }
  if (c == 3 && rng.bernoulli(cfg.grayscale_prob)) {
    const std::size_t plane = h * w;
    for (std::size_t p = 0; p < plane; ++p) {
      const double luma =
          0.299 * v[p] + 0.587 * v[plane + p] + 0.114 * v[2 * plane + p];
      v[p] = v[plane + p] = v[2 * plane + p] = luma;
    }
  }
  for (double& x : v) x = clamp01(x);
}

}  // namespace

Tensor augment_view(const Dataset& ds, std::size_t row,
                    const AugmentationConfig& cfg, RngStream& rng) {
  std::vector<double> v(ds.sample_values(row),
                        ds.sample_values(row) + ds.sample_size());
  if (ds.sample_shape().size() == 3) {
    augment_image(v, ds.sample_shape(), cfg, rng);
  } else {
    augment_vector(v, cfg, rng);
  }
  return Tensor::from_values(ds.sample_shape(), std::move(v));
}

std::pair<Tensor, Tensor> augment_two_views(const Dataset& ds, std::size_t row,
                                            const AugmentationConfig& cfg,
                                            RngStream& rng) {
  Tensor q = augment_view(ds, row, cfg, rng);
  Tensor k = augment_view(ds, row, cfg, rng);
  return {std::move(q), std::move(k)};
}

// ---- batching -----------------------------------------------------------------

std::vector<std::vector<std::size_t>> minibatches(const Dataset& ds,
                                                  std::size_t batch,
                                                  std::uint64_t epoch_seed) {
  if (batch == 0 || batch > ds.size()) {
    throw ContractError("minibatches: batch size " + std::to_string(batch) +
                        " invalid for dataset of " + std::to_string(ds.size()));
  }
  std::vector<std::size_t> order(ds.size());
  std::iota(order.begin(), order.end(), 0);
  RngStream rng(derive_key(epoch_seed, "batch_order"));
  rng.shuffle(order);

  std::vector<std::vector<std::size_t>> out;
  const std::size_t full = ds.size() / batch;  // drop-last
  out.reserve(full);
  for (std::size_t b = 0; b < full; ++b) {
    out.emplace_back(order.begin() + b * batch,
                     order.begin() + (b + 1) * batch);
  }
  return out;
}

BatchViews make_batch_views(const Dataset& ds,
                            const std::vector<std::size_t>& rows,
                            const AugmentationConfig& cfg,
                            std::uint64_t batch_key) {
  const std::size_t n = rows.size();
  Shape batch_shape;
  batch_shape.push_back(n);
  for (std::size_t d : ds.sample_shape()) batch_shape.push_back(d);

  BatchViews out;
  out.rows = rows;
  out.x_q = Tensor::zeros(batch_shape);
  out.x_k = Tensor::zeros(batch_shape);
  const std::size_t per = ds.sample_size();
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint64_t sample_key = derive_key(batch_key, rows[i]);
    RngStream rq(derive_key(sample_key, "view_q"));
    RngStream rk(derive_key(sample_key, "view_k"));
    Tensor vq = augment_view(ds, rows[i], cfg, rq);
    Tensor vk = augment_view(ds, rows[i], cfg, rk);
    std::copy_n(vq.values().data(), per, out.x_q.values().data() + i * per);
    std::copy_n(vk.values().data(), per, out.x_k.values().data() + i * per);
  }
  return out;
}

Tensor stack_samples(const Dataset& ds, const std::vector<std::size_t>& rows) {
  Shape batch_shape;
  batch_shape.push_back(rows.size());
  for (std::size_t d : ds.sample_shape()) batch_shape.push_back(d);
  Tensor out = Tensor::zeros(batch_shape);
  const std::size_t per = ds.sample_size();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(ds.sample_values(rows[i]), per,
                out.values().data() + i * per);
  }
  return out;
}

// ---- prefetcher -----------------------------------------------------------------

BatchPrefetcher::BatchPrefetcher(const Dataset& ds,
                                 std::vector<std::vector<std::size_t>> plan,
                                 AugmentationConfig cfg,
                                 std::uint64_t epoch_key, bool async)
    : ds_(ds),
      plan_(std::move(plan)),
      cfg_(cfg),
      epoch_key_(epoch_key),
      async_(async) {
  if (async_) {
    worker_ = std::thread([this]() { worker_loop(); });
  }
}

BatchPrefetcher::~BatchPrefetcher() {
  if (async_) {
    {
      std::lock_guard<std::mutex> lock(mu_);
      stop_ = true;
    }
    cv_.notify_all();
    worker_.join();
  }
}

void BatchPrefetcher::worker_loop() {
  for (std::size_t b = 0; b < plan_.size(); ++b) {
    BatchViews views =
        make_batch_views(ds_, plan_[b], cfg_, derive_key(epoch_key_, b));
    std::unique_lock<std::mutex> lock(mu_);
    cv_.wait(lock, [this]() { return stop_ || ready_.size() < kDepth; });
    if (stop_) return;
    ready_.push_back(std::move(views));
    ++produced_;
    cv_.notify_all();
  }
  std::lock_guard<std::mutex> lock(mu_);
  produced_ = plan_.size();
  stop_ = true;
  cv_.notify_all();
}

std::optional<BatchViews> BatchPrefetcher::next() {
  if (!async_) {
    if (next_index_ >= plan_.size()) return std::nullopt;
    const std::size_t b = next_index_++;
    return make_batch_views(ds_, plan_[b], cfg_, derive_key(epoch_key_, b));
  }
  std::unique_lock<std::mutex> lock(mu_);
  cv_.wait(lock, [this]() { return !ready_.empty() || stop_; });
  if (ready_.empty()) return std::nullopt;
  BatchViews views = std::move(ready_.front());
  ready_.pop_front();
  cv_.notify_all();
  return views;
}

}  // namespace moco
