#include "moco/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace moco {

void tape_push(Tape& tape, Tape::Node&& node, Tensor& out);

namespace {

thread_local Tape* g_active_tape = nullptr;
thread_local std::unordered_set<const void*>* g_recipient_ids = nullptr;
thread_local std::vector<std::shared_ptr<detail::TensorData>>* g_recipient_handles =
    nullptr;

using detail::TensorData;
using DataPtr = std::shared_ptr<TensorData>;

bool grad_wanted(std::initializer_list<const Tensor*> operands) {
  if (g_active_tape == nullptr) return false;
  for (const Tensor* t : operands) {
    if (t->defined() && t->requires_grad()) return true;
  }
  return false;
}

// Gradient buffer of `td`, allocated (zeroed) on first touch; nullptr if the
// tensor does not participate in differentiation.
std::vector<double>* grad_target(const DataPtr& td) {
  if (!td->requires_grad) return nullptr;
  if (td->grad.empty()) {
    td->grad.assign(td->values.size(), 0.0);
    if (g_recipient_ids != nullptr) {
      if (g_recipient_ids->insert(td.get()).second) {
        g_recipient_handles->push_back(td);
      }
    }
  } else if (g_recipient_ids != nullptr) {
    if (g_recipient_ids->insert(td.get()).second) {
      g_recipient_handles->push_back(td);
    }
  }
  return &td->grad;
}

// Registers a backward rule for `out`; call after the forward values exist
// and only when grad_wanted() said yes.
void record(Tensor& out, std::initializer_list<const Tensor*> operands,
            std::function<void()> pull) {
  out.set_requires_grad(true);
  Tape::Node node;
  node.pull = std::move(pull);
  node.output_id = out.id();
  for (const Tensor* t : operands) {
    if (t->defined() && t->raw()->tape_node >= 0) {
      node.operand_nodes.push_back(t->raw()->tape_node);
    }
  }
  tape_push(*g_active_tape, std::move(node), out);
}

void check_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " +
                         std::to_string(rank) + " tensor, got shape " +
                         shape_str(t.shape()));
  }
}

}  // namespace

// Defined at namespace scope so `record` can use it while Tape's internals
// stay private to this translation unit via friendship with OpRecorder.
class OpRecorder {
 public:
  static void push(Tape& tape, Tape::Node&& node, Tensor& out) {
    out.raw()->tape_node = static_cast<int>(tape.nodes_.size());
    tape.nodes_.push_back(std::move(node));
  }
};

void tape_push(Tape& tape, Tape::Node&& node, Tensor& out) {
  OpRecorder::push(tape, std::move(node), out);
}

// ---- shape utils ------------------------------------------------------------

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// ---- Tensor -----------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  auto d = std::make_shared<TensorData>();
  d->shape = std::move(shape);
  for (std::size_t extent : d->shape) {
    if (extent == 0) {
      throw DimensionError("tensor extents must be positive, got " +
                           shape_str(d->shape));
    }
  }
  d->values.assign(shape_numel(d->shape), value);
  d->requires_grad = requires_grad;
  return Tensor(std::move(d));
}

Tensor Tensor::from_values(Shape shape, std::vector<double> values,
                           bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  if (values.size() != t.size()) {
    throw DimensionError("value count " + std::to_string(values.size()) +
                         " does not match shape " + shape_str(t.shape()));
  }
  t.values() = std::move(values);
  return t;
}

std::vector<double>& Tensor::mutable_grad() {
  if (data_->grad.empty()) data_->grad.assign(data_->values.size(), 0.0);
  return data_->grad;
}

Tensor Tensor::detached() const {
  auto d = std::make_shared<TensorData>();
  d->shape = data_->shape;
  d->values = data_->values;  // copy: detached keys are later mutated freely
  d->requires_grad = false;
  return Tensor(std::move(d));
}

Tensor Tensor::clone() const {
  auto d = std::make_shared<TensorData>();
  d->shape = data_->shape;
  d->values = data_->values;
  d->requires_grad = data_->requires_grad;
  return Tensor(std::move(d));
}

// ---- Tape -------------------------------------------------------------------

void Tape::clear() {
  nodes_.clear();
  grad_recipients_.clear();
  recipient_handles_.clear();
  visit_order_.clear();
}

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) {
  g_active_tape = &tape;
}

TapeScope::~TapeScope() { g_active_tape = previous_; }

Tape* active_tape() { return g_active_tape; }

// ---- ops --------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_rank(a, 2, "matmul");
  check_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), p = a.dim(1), n = b.dim(1);
  if (b.dim(0) != p) {
    throw DimensionError("matmul: inner extents disagree, " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  Tensor out = Tensor::zeros({m, n});
  {
    const double* av = a.values().data();
    const double* bv = b.values().data();
    double* ov = out.values().data();
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t k = 0; k < p; ++k) {
        const double aik = av[i * p + k];
        const double* brow = bv + k * n;
        double* orow = ov + i * n;
        for (std::size_t j = 0; j < n; ++j) orow[j] += aik * brow[j];
      }
    }
  }
  if (grad_wanted({&a, &b})) {
    record(out, {&a, &b}, [ad = a.handle(), bd = b.handle(), od = out.handle(),
                           m, p, n]() {
      if (od->grad.empty()) return;
      const double* g = od->grad.data();
      if (auto* ga = grad_target(ad)) {
        const double* bv = bd->values.data();
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t k = 0; k < p; ++k) {
            double acc = 0.0;
            const double* grow = g + i * n;
            const double* brow = bv + k * n;
            for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
            (*ga)[i * p + k] += acc;
          }
        }
      }
      if (auto* gb = grad_target(bd)) {
        const double* av = ad->values.data();
        for (std::size_t i = 0; i < m; ++i) {
          const double* grow = g + i * n;
          for (std::size_t k = 0; k < p; ++k) {
            const double aik = av[i * p + k];
            double* gbrow = gb->data() + k * n;
            for (std::size_t j = 0; j < n; ++j) gbrow[j] += aik * grow[j];
          }
        }
      }
    });
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  check_rank(a, 2, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  Tensor out = Tensor::zeros({n, m});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      out.values()[j * m + i] = a.values()[i * n + j];
    }
  }
  if (grad_wanted({&a})) {
    record(out, {&a}, [ad = a.handle(), od = out.handle(), m, n]() {
      if (od->grad.empty()) return;
      if (auto* ga = grad_target(ad)) {
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t j = 0; j < n; ++j) {
            (*ga)[i * n + j] += od->grad[j * m + i];
          }
        }
      }
    });
  }
  return out;
}

Tensor batched_dot(const Tensor& q, const Tensor& k) {
  check_rank(q, 2, "batched_dot");
  check_rank(k, 2, "batched_dot");
  if (q.shape() != k.shape()) {
    throw DimensionError("batched_dot: shapes differ, " + shape_str(q.shape()) +
                         " vs " + shape_str(k.shape()));
  }
  const std::size_t n = q.dim(0), c = q.dim(1);
  Tensor out = Tensor::zeros({n, 1});
  for (std::size_t i = 0; i < n; ++i) {
    double acc = 0.0;
    const double* qr = q.values().data() + i * c;
    const double* kr = k.values().data() + i * c;
    for (std::size_t j = 0; j < c; ++j) acc += qr[j] * kr[j];
    out.values()[i] = acc;
  }
  if (grad_wanted({&q, &k})) {
    record(out, {&q, &k},
           [qd = q.handle(), kd = k.handle(), od = out.handle(), n, c]() {
             if (od->grad.empty()) return;
             const double* g = od->grad.data();
             if (auto* gq = grad_target(qd)) {
               for (std::size_t i = 0; i < n; ++i) {
                 for (std::size_t j = 0; j < c; ++j) {
                   (*gq)[i * c + j] += g[i] * kd->values[i * c + j];
                 }
               }
             }
             if (auto* gk = grad_target(kd)) {
               for (std::size_t i = 0; i < n; ++i) {
                 for (std::size_t j = 0; j < c; ++j) {
                   (*gk)[i * c + j] += g[i] * qd->values[i * c + j];
                 }
               }
             }
           });
  }
  return out;
}

Tensor conv2d(const Tensor& x, const Tensor& w, std::size_t stride,
              std::size_t padding) {
  check_rank(x, 4, "conv2d");
  check_rank(w, 4, "conv2d");
  if (stride == 0) throw ContractError("conv2d: stride must be positive");
  const std::size_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(1) != cin) {
    throw DimensionError("conv2d: input channels disagree, " +
                         shape_str(x.shape()) + " vs " + shape_str(w.shape()));
  }
  if (kh > h + 2 * padding || kw > wd + 2 * padding) {
    throw DimensionError("conv2d: kernel " + shape_str(w.shape()) +
                         " larger than padded input " + shape_str(x.shape()));
  }
  const std::size_t oh = (h + 2 * padding - kh) / stride + 1;
  const std::size_t ow = (wd + 2 * padding - kw) / stride + 1;
  Tensor out = Tensor::zeros({n, cout, oh, ow});

  const double* xv = x.values().data();
  const double* wv = w.values().data();
  double* ov = out.values().data();
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(padding);
  for (std::size_t ni = 0; ni < n; ++ni) {
    for (std::size_t co = 0; co < cout; ++co) {
      for (std::size_t oy = 0; oy < oh; ++oy) {
        for (std::size_t ox = 0; ox < ow; ++ox) {
          double acc = 0.0;
          for (std::size_t ci = 0; ci < cin; ++ci) {
            for (std::size_t ky = 0; ky < kh; ++ky) {
              const std::ptrdiff_t iy =
                  static_cast<std::ptrdiff_t>(oy * stride + ky) - pad;
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
              for (std::size_t kx = 0; kx < kw; ++kx) {
                const std::ptrdiff_t ix =
                    static_cast<std::ptrdiff_t>(ox * stride + kx) - pad;
                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(wd)) continue;
                acc += xv[((ni * cin + ci) * h + iy) * wd + ix] *
                       wv[((co * cin + ci) * kh + ky) * kw + kx];
              }
            }
          }
          ov[((ni * cout + co) * oh + oy) * ow + ox] = acc;
        }
      }
    }
  }

  if (grad_wanted({&x, &w})) {
    record(out, {&x, &w}, [xd = x.handle(), wdh = w.handle(), od = out.handle(),
                           n, cin, h, wd, cout, kh, kw, oh, ow, stride, pad]() {
      if (od->grad.empty()) return;
      const double* g = od->grad.data();
      auto* gx = grad_target(xd);
      auto* gw = grad_target(wdh);
      if (!gx && !gw) return;
      const double* xv = xd->values.data();
      const double* wv = wdh->values.data();
      for (std::size_t ni = 0; ni < n; ++ni) {
        for (std::size_t co = 0; co < cout; ++co) {
          for (std::size_t oy = 0; oy < oh; ++oy) {
            for (std::size_t ox = 0; ox < ow; ++ox) {
              const double go = g[((ni * cout + co) * oh + oy) * ow + ox];
              if (go == 0.0) continue;
              for (std::size_t ci = 0; ci < cin; ++ci) {
                for (std::size_t ky = 0; ky < kh; ++ky) {
                  const std::ptrdiff_t iy =
                      static_cast<std::ptrdiff_t>(oy * stride + ky) - pad;
                  if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                  for (std::size_t kx = 0; kx < kw; ++kx) {
                    const std::ptrdiff_t ix =
                        static_cast<std::ptrdiff_t>(ox * stride + kx) - pad;
                    if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(wd))
                      continue;
                    const std::size_t xi = ((ni * cin + ci) * h + iy) * wd + ix;
                    const std::size_t wi = ((co * cin + ci) * kh + ky) * kw + kx;
                    if (gx) (*gx)[xi] += go * wv[wi];
                    if (gw) (*gw)[wi] += go * xv[xi];
                  }
                }
              }
            }
          }
        }
      }
    });
  }
  return out;
}

Tensor add_channel_bias(const Tensor& x, const Tensor& b) {
  check_rank(x, 4, "add_channel_bias");
  check_rank(b, 1, "add_channel_bias");
  const std::size_t n = x.dim(0), c = x.dim(1), spatial = x.dim(2) * x.dim(3);
  if (b.dim(0) != c) {
    throw DimensionError("add_channel_bias: channel extents disagree, " +
                         shape_str(x.shape()) + " vs " + shape_str(b.shape()));
  }
  Tensor out = Tensor::zeros(x.shape());
  for (std::size_t ni = 0; ni < n; ++ni) {
    for (std::size_t ci = 0; ci < c; ++ci) {
      const double bias = b.values()[ci];
      const std::size_t base = (ni * c + ci) * spatial;
      for (std::size_t s = 0; s < spatial; ++s) {
        out.values()[base + s] = x.values()[base + s] + bias;
      }
    }
  }
  if (grad_wanted({&x, &b})) {
    record(out, {&x, &b}, [xd = x.handle(), bd = b.handle(), od = out.handle(),
                           n, c, spatial]() {
      if (od->grad.empty()) return;
      const double* g = od->grad.data();
      if (auto* gx = grad_target(xd)) {
        for (std::size_t i = 0; i < gx->size(); ++i) (*gx)[i] += g[i];
      }
      if (auto* gb = grad_target(bd)) {
        for (std::size_t ni = 0; ni < n; ++ni) {
          for (std::size_t ci = 0; ci < c; ++ci) {
            const std::size_t base = (ni * c + ci) * spatial;
            double acc = 0.0;
            for (std::size_t s = 0; s < spatial; ++s) acc += g[base + s];
            (*gb)[ci] += acc;
          }
        }
      }
    });
  }
  return out;
}

Tensor relu(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    out.values()[i] = x.values()[i] > 0.0 ? x.values()[i] : 0.0;
  }
  if (grad_wanted({&x})) {
    record(out, {&x}, [xd = x.handle(), od = out.handle()]() {
      if (od->grad.empty()) return;
      if (auto* gx = grad_target(xd)) {
        for (std::size_t i = 0; i < gx->size(); ++i) {
          if (xd->values[i] > 0.0) (*gx)[i] += od->grad[i];
        }
      }
    });
  }
  return out;
}

Tensor global_avg_pool(const Tensor& x) {
  check_rank(x, 4, "global_avg_pool");
  const std::size_t n = x.dim(0), c = x.dim(1), spatial = x.dim(2) * x.dim(3);
  Tensor out = Tensor::zeros({n, c});
  for (std::size_t ni = 0; ni < n; ++ni) {
    for (std::size_t ci = 0; ci < c; ++ci) {
      const std::size_t base = (ni * c + ci) * spatial;
      double acc = 0.0;
      for (std::size_t s = 0; s < spatial; ++s) acc += x.values()[base + s];
      out.values()[ni * c + ci] = acc / static_cast<double>(spatial);
    }
  }
  if (grad_wanted({&x})) {
    record(out, {&x},
           [xd = x.handle(), od = out.handle(), n, c, spatial]() {
             if (od->grad.empty()) return;
             if (auto* gx = grad_target(xd)) {
               const double inv = 1.0 / static_cast<double>(spatial);
               for (std::size_t ni = 0; ni < n; ++ni) {
                 for (std::size_t ci = 0; ci < c; ++ci) {
                   const double go = od->grad[ni * c + ci] * inv;
                   const std::size_t base = (ni * c + ci) * spatial;
                   for (std::size_t s = 0; s < spatial; ++s) {
                     (*gx)[base + s] += go;
                   }
                 }
               }
             }
           });
  }
  return out;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  check_rank(x, 2, "linear");
  check_rank(w, 2, "linear");
  check_rank(b, 1, "linear");
  const std::size_t n = x.dim(0), p = x.dim(1), q = w.dim(1);
  if (w.dim(0) != p || b.dim(0) != q) {
    throw DimensionError("linear: shapes disagree, x" + shape_str(x.shape()) +
                         " w" + shape_str(w.shape()) + " b" +
                         shape_str(b.shape()));
  }
  Tensor out = Tensor::zeros({n, q});
  {
    const double* xv = x.values().data();
    const double* wv = w.values().data();
    const double* bv = b.values().data();
    double* ov = out.values().data();
    for (std::size_t i = 0; i < n; ++i) {
      double* orow = ov + i * q;
      for (std::size_t j = 0; j < q; ++j) orow[j] = bv[j];
      for (std::size_t k = 0; k < p; ++k) {
        const double xik = xv[i * p + k];
        const double* wrow = wv + k * q;
        for (std::size_t j = 0; j < q; ++j) orow[j] += xik * wrow[j];
      }
    }
  }
  if (grad_wanted({&x, &w, &b})) {
    record(out, {&x, &w, &b}, [xd = x.handle(), wd = w.handle(),
                               bd = b.handle(), od = out.handle(), n, p, q]() {
      if (od->grad.empty()) return;
      const double* g = od->grad.data();
      if (auto* gx = grad_target(xd)) {
        const double* wv = wd->values.data();
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t k = 0; k < p; ++k) {
            double acc = 0.0;
            const double* grow = g + i * q;
            const double* wrow = wv + k * q;
            for (std::size_t j = 0; j < q; ++j) acc += grow[j] * wrow[j];
            (*gx)[i * p + k] += acc;
          }
        }
      }
      if (auto* gw = grad_target(wd)) {
        const double* xv = xd->values.data();
        for (std::size_t i = 0; i < n; ++i) {
          const double* grow = g + i * q;
          for (std::size_t k = 0; k < p; ++k) {
            const double xik = xv[i * p + k];
            double* gwrow = gw->data() + k * q;
            for (std::size_t j = 0; j < q; ++j) gwrow[j] += xik * grow[j];
          }
        }
      }
      if (auto* gb = grad_target(bd)) {
        for (std::size_t i = 0; i < n; ++i) {
          const double* grow = g + i * q;
          for (std::size_t j = 0; j < q; ++j) (*gb)[j] += grow[j];
        }
      }
    });
  }
  return out;
}

// ---- batch norm -------------------------------------------------------------

BnState make_bn_state(std::size_t channels) {
  BnState st;
  st.gamma = Tensor::full({channels}, 1.0, true);
  st.beta = Tensor::zeros({channels}, true);
  st.running_mean = Tensor::zeros({channels});
  st.running_var = Tensor::full({channels}, 1.0);
  return st;
}

namespace {

struct BnLayout {
  std::size_t batch;
  std::size_t channels;
  std::size_t spatial;  // 1 for rank-2 input
};

BnLayout bn_layout(const Tensor& x, const BnState& st, const char* op) {
  if (x.rank() != 2 && x.rank() != 4) {
    throw DimensionError(std::string(op) +
                         ": expected rank-2 or rank-4 input, got " +
                         shape_str(x.shape()));
  }
  BnLayout lay;
  lay.batch = x.dim(0);
  lay.channels = x.dim(1);
  lay.spatial = x.rank() == 4 ? x.dim(2) * x.dim(3) : 1;
  if (st.gamma.dim(0) != lay.channels || st.beta.dim(0) != lay.channels ||
      st.running_mean.dim(0) != lay.channels ||
      st.running_var.dim(0) != lay.channels) {
    throw DimensionError(std::string(op) + ": state has " +
                         std::to_string(st.gamma.dim(0)) +
                         " channels but input " + shape_str(x.shape()));
  }
  return lay;
}

inline std::size_t bn_index(const BnLayout& lay, std::size_t row, std::size_t c,
                            std::size_t s) {
  return (row * lay.channels + c) * lay.spatial + s;
}

void check_shards(const ShardSlices& shards, std::size_t batch) {
  if (shards.empty()) {
    throw ContractError("batch_norm: train mode requires shard slices");
  }
  std::size_t expect = 0;
  for (const auto& [begin, end] : shards) {
    if (begin != expect || end <= begin || end > batch) {
      throw ContractError("batch_norm: shard slices must partition the batch");
    }
    if (end - begin < 2) {
      throw DegenerateShardError("batch_norm: shard [" + std::to_string(begin) +
                                 "," + std::to_string(end) +
                                 ") has fewer than 2 samples");
    }
    expect = end;
  }
  if (expect != batch) {
    throw ContractError("batch_norm: shard slices must cover the batch");
  }
}

}  // namespace

Tensor batch_norm(const Tensor& x, BnState& st, const BnMode& mode) {
  const BnLayout lay = bn_layout(x, st, "batch_norm");
  const std::size_t C = lay.channels;
  Tensor out = Tensor::zeros(x.shape());
  const double* xv = x.values().data();
  double* ov = out.values().data();
  const double* gammav = st.gamma.values().data();
  const double* betav = st.beta.values().data();

  if (!mode.training) {
    for (std::size_t c = 0; c < C; ++c) {
      if (st.running_var.values()[c] < 0.0) {
        throw CorruptionError("batch_norm: negative running_var in channel " +
                              std::to_string(c));
      }
    }
    std::vector<double> invstd(C);
    for (std::size_t c = 0; c < C; ++c) {
      invstd[c] = 1.0 / std::sqrt(st.running_var.values()[c] + st.eps);
    }
    for (std::size_t row = 0; row < lay.batch; ++row) {
      for (std::size_t c = 0; c < C; ++c) {
        const double mu = st.running_mean.values()[c];
        for (std::size_t s = 0; s < lay.spatial; ++s) {
          const std::size_t i = bn_index(lay, row, c, s);
          ov[i] = gammav[c] * (xv[i] - mu) * invstd[c] + betav[c];
        }
      }
    }
    if (grad_wanted({&x, &st.gamma, &st.beta})) {
      record(out, {&x, &st.gamma, &st.beta},
             [xd = x.handle(), gd = st.gamma.handle(), bd = st.beta.handle(),
              od = out.handle(), lay, invstd,
              mean = st.running_mean.values()]() {
               if (od->grad.empty()) return;
               const double* g = od->grad.data();
               auto* gx = grad_target(xd);
               auto* gg = grad_target(gd);
               auto* gb = grad_target(bd);
               for (std::size_t row = 0; row < lay.batch; ++row) {
                 for (std::size_t c = 0; c < lay.channels; ++c) {
                   for (std::size_t s = 0; s < lay.spatial; ++s) {
                     const std::size_t i = bn_index(lay, row, c, s);
                     const double xhat =
                         (xd->values[i] - mean[c]) * invstd[c];
                     if (gx) (*gx)[i] += g[i] * gd->values[c] * invstd[c];
                     if (gg) (*gg)[c] += g[i] * xhat;
                     if (gb) (*gb)[c] += g[i];
                   }
                 }
               }
             });
    }
    return out;
  }

  // training: per-shard batch statistics
  check_shards(mode.shards, lay.batch);
  const std::size_t S = mode.shards.size();
  std::vector<double> means(S * C), invstds(S * C);
  std::vector<double> batch_mean(C, 0.0), batch_var_unbiased(C, 0.0);
  for (std::size_t sh = 0; sh < S; ++sh) {
    const auto [begin, end] = mode.shards[sh];
    const double m = static_cast<double>((end - begin) * lay.spatial);
    for (std::size_t c = 0; c < C; ++c) {
      double mean = 0.0;
      for (std::size_t row = begin; row < end; ++row) {
        for (std::size_t s = 0; s < lay.spatial; ++s) {
          mean += xv[bn_index(lay, row, c, s)];
        }
      }
      mean /= m;
      double var = 0.0;
      for (std::size_t row = begin; row < end; ++row) {
        for (std::size_t s = 0; s < lay.spatial; ++s) {
          const double d = xv[bn_index(lay, row, c, s)] - mean;
          var += d * d;
        }
      }
      var /= m;  // biased, used for normalization
      means[sh * C + c] = mean;
      invstds[sh * C + c] = 1.0 / std::sqrt(var + st.eps);
      batch_mean[c] += mean / static_cast<double>(S);
      // unbiased correction when folding into running statistics
      const double unbiased = m > 1.0 ? var * m / (m - 1.0) : var;
      batch_var_unbiased[c] += unbiased / static_cast<double>(S);
    }
  }
  for (std::size_t sh = 0; sh < S; ++sh) {
    const auto [begin, end] = mode.shards[sh];
    for (std::size_t row = begin; row < end; ++row) {
      for (std::size_t c = 0; c < C; ++c) {
        const double mu = means[sh * C + c];
        const double is = invstds[sh * C + c];
        for (std::size_t s = 0; s < lay.spatial; ++s) {
          const std::size_t i = bn_index(lay, row, c, s);
          ov[i] = gammav[c] * (xv[i] - mu) * is + betav[c];
        }
      }
    }
  }
  const double rho = st.running_momentum;
  for (std::size_t c = 0; c < C; ++c) {
    st.running_mean.values()[c] =
        (1.0 - rho) * st.running_mean.values()[c] + rho * batch_mean[c];
    st.running_var.values()[c] =
        (1.0 - rho) * st.running_var.values()[c] + rho * batch_var_unbiased[c];
  }

  if (grad_wanted({&x, &st.gamma, &st.beta})) {
    record(out, {&x, &st.gamma, &st.beta},
           [xd = x.handle(), gd = st.gamma.handle(), bd = st.beta.handle(),
            od = out.handle(), lay, shards = mode.shards, means, invstds]() {
             if (od->grad.empty()) return;
             const double* g = od->grad.data();
             auto* gx = grad_target(xd);
             auto* gg = grad_target(gd);
             auto* gb = grad_target(bd);
             const std::size_t C = lay.channels;
             for (std::size_t sh = 0; sh < shards.size(); ++sh) {
               const auto [begin, end] = shards[sh];
               const double m =
                   static_cast<double>((end - begin) * lay.spatial);
               for (std::size_t c = 0; c < C; ++c) {
                 const double mu = means[sh * C + c];
                 const double is = invstds[sh * C + c];
                 double sum_g = 0.0, sum_gx = 0.0;
                 for (std::size_t row = begin; row < end; ++row) {
                   for (std::size_t s = 0; s < lay.spatial; ++s) {
                     const std::size_t i = bn_index(lay, row, c, s);
                     const double xhat = (xd->values[i] - mu) * is;
                     sum_g += g[i];
                     sum_gx += g[i] * xhat;
                   }
                 }
                 if (gg) (*gg)[c] += sum_gx;
                 if (gb) (*gb)[c] += sum_g;
                 if (gx) {
                   const double gamma_is = gd->values[c] * is;
                   const double mean_g = sum_g / m;
                   const double mean_gx = sum_gx / m;
                   for (std::size_t row = begin; row < end; ++row) {
                     for (std::size_t s = 0; s < lay.spatial; ++s) {
                       const std::size_t i = bn_index(lay, row, c, s);
                       const double xhat = (xd->values[i] - mu) * is;
                       (*gx)[i] += gamma_is * (g[i] - mean_g - xhat * mean_gx);
                     }
                   }
                 }
               }
             }
           });
  }
  return out;
}

Tensor l2_normalize(const Tensor& x) {
  check_rank(x, 2, "l2_normalize");
  const std::size_t n = x.dim(0), c = x.dim(1);
  Tensor out = Tensor::zeros(x.shape());
  std::vector<double> norms(n);
  for (std::size_t i = 0; i < n; ++i) {
    double sq = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const double v = x.values()[i * c + j];
      sq += v * v;
    }
    const double norm = std::sqrt(sq);
    if (norm < kNormFloor) {
      throw DegenerateFeatureError("l2_normalize: row " + std::to_string(i) +
                                   " has norm " + std::to_string(norm) +
                                   " below the floor");
    }
    norms[i] = norm;
    for (std::size_t j = 0; j < c; ++j) {
      out.values()[i * c + j] = x.values()[i * c + j] / norm;
    }
  }
  if (grad_wanted({&x})) {
    record(out, {&x},
           [xd = x.handle(), od = out.handle(), norms, n, c]() {
             if (od->grad.empty()) return;
             if (auto* gx = grad_target(xd)) {
               const double* g = od->grad.data();
               const double* y = od->values.data();
               for (std::size_t i = 0; i < n; ++i) {
                 double gy = 0.0;
                 for (std::size_t j = 0; j < c; ++j) {
                   gy += g[i * c + j] * y[i * c + j];
                 }
                 for (std::size_t j = 0; j < c; ++j) {
                   (*gx)[i * c + j] +=
                       (g[i * c + j] - y[i * c + j] * gy) / norms[i];
                 }
               }
             }
           });
  }
  return out;
}

Tensor softmax_cross_entropy(const Tensor& logits,
                             const std::vector<std::size_t>& targets) {
  check_rank(logits, 2, "softmax_cross_entropy");
  const std::size_t n = logits.dim(0), m = logits.dim(1);
  if (targets.size() != n) {
    throw DimensionError("softmax_cross_entropy: " + std::to_string(n) +
                         " rows but " + std::to_string(targets.size()) +
                         " targets");
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (targets[i] >= m) {
      throw IndexError("softmax_cross_entropy: target " +
                       std::to_string(targets[i]) + " out of range [0," +
                       std::to_string(m) + ") in row " + std::to_string(i));
    }
  }
  std::vector<double> softmax(n * m);
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = logits.values().data() + i * m;
    double mx = row[0];
    for (std::size_t j = 1; j < m; ++j) mx = std::max(mx, row[j]);
    double denom = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      const double e = std::exp(row[j] - mx);
      softmax[i * m + j] = e;
      denom += e;
    }
    for (std::size_t j = 0; j < m; ++j) softmax[i * m + j] /= denom;
    loss += -(row[targets[i]] - mx - std::log(denom));
  }
  loss /= static_cast<double>(n);
  Tensor out = Tensor::from_values({1}, {loss});
  if (grad_wanted({&logits})) {
    record(out, {&logits},
           [ld = logits.handle(), od = out.handle(), softmax, targets, n, m]() {
             if (od->grad.empty()) return;
             if (auto* gl = grad_target(ld)) {
               const double go = od->grad[0] / static_cast<double>(n);
               for (std::size_t i = 0; i < n; ++i) {
                 for (std::size_t j = 0; j < m; ++j) {
                   double d = softmax[i * m + j];
                   if (j == targets[i]) d -= 1.0;
                   (*gl)[i * m + j] += go * d;
                 }
               }
             }
           });
  }
  return out;
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
  check_rank(a, 2, "concat_cols");
  check_rank(b, 2, "concat_cols");
  if (a.dim(0) != b.dim(0)) {
    throw DimensionError("concat_cols: row counts disagree, " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const std::size_t n = a.dim(0), ca = a.dim(1), cb = b.dim(1);
  Tensor out = Tensor::zeros({n, ca + cb});
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(a.values().data() + i * ca, ca,
                out.values().data() + i * (ca + cb));
    std::copy_n(b.values().data() + i * cb, cb,
                out.values().data() + i * (ca + cb) + ca);
  }
  if (grad_wanted({&a, &b})) {
    record(out, {&a, &b},
           [ad = a.handle(), bd = b.handle(), od = out.handle(), n, ca, cb]() {
             if (od->grad.empty()) return;
             const double* g = od->grad.data();
             if (auto* ga = grad_target(ad)) {
               for (std::size_t i = 0; i < n; ++i) {
                 for (std::size_t j = 0; j < ca; ++j) {
                   (*ga)[i * ca + j] += g[i * (ca + cb) + j];
                 }
               }
             }
             if (auto* gb = grad_target(bd)) {
               for (std::size_t i = 0; i < n; ++i) {
                 for (std::size_t j = 0; j < cb; ++j) {
                   (*gb)[i * cb + j] += g[i * (ca + cb) + ca + j];
                 }
               }
             }
           });
  }
  return out;
}

Tensor scale(const Tensor& x, double c) {
  Tensor out = Tensor::zeros(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out.values()[i] = c * x.values()[i];
  if (grad_wanted({&x})) {
    record(out, {&x}, [xd = x.handle(), od = out.handle(), c]() {
      if (od->grad.empty()) return;
      if (auto* gx = grad_target(xd)) {
        for (std::size_t i = 0; i < gx->size(); ++i) {
          (*gx)[i] += c * od->grad[i];
        }
      }
    });
  }
  return out;
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  Tensor out = Tensor::from_values({1}, {acc});
  if (grad_wanted({&x})) {
    record(out, {&x}, [xd = x.handle(), od = out.handle()]() {
      if (od->grad.empty()) return;
      if (auto* gx = grad_target(xd)) {
        for (std::size_t i = 0; i < gx->size(); ++i) (*gx)[i] += od->grad[0];
      }
    });
  }
  return out;
}

Tensor masked_sum(const Tensor& x, const std::vector<double>& weights) {
  if (weights.size() != x.size()) {
    throw DimensionError("masked_sum: weight count " +
                         std::to_string(weights.size()) +
                         " does not match tensor " + shape_str(x.shape()));
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) acc += x.values()[i] * weights[i];
  Tensor out = Tensor::from_values({1}, {acc});
  if (grad_wanted({&x})) {
    record(out, {&x}, [xd = x.handle(), od = out.handle(), weights]() {
      if (od->grad.empty()) return;
      if (auto* gx = grad_target(xd)) {
        for (std::size_t i = 0; i < gx->size(); ++i) {
          (*gx)[i] += od->grad[0] * weights[i];
        }
      }
    });
  }
  return out;
}

Tensor permute_rows(const Tensor& x, const std::vector<std::size_t>& perm) {
  if (x.rank() == 0) throw DimensionError("permute_rows: rank-0 tensor");
  const std::size_t n = x.dim(0);
  if (perm.size() != n) {
    throw ContractError("permute_rows: permutation length " +
                        std::to_string(perm.size()) + " but " +
                        std::to_string(n) + " rows");
  }
  std::vector<bool> seen(n, false);
  for (std::size_t p : perm) {
    if (p >= n || seen[p]) {
      throw ContractError("permute_rows: not a permutation of the rows");
    }
    seen[p] = true;
  }
  const std::size_t row = x.size() / n;
  Tensor out = Tensor::zeros(x.shape());
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(x.values().data() + perm[i] * row, row,
                out.values().data() + i * row);
  }
  if (grad_wanted({&x})) {
    record(out, {&x},
           [xd = x.handle(), od = out.handle(), perm, n, row]() {
             if (od->grad.empty()) return;
             if (auto* gx = grad_target(xd)) {
               const double* g = od->grad.data();
               for (std::size_t i = 0; i < n; ++i) {
                 double* dst = gx->data() + perm[i] * row;
                 const double* src = g + i * row;
                 for (std::size_t j = 0; j < row; ++j) dst[j] += src[j];
               }
             }
           });
  }
  return out;
}

// ---- backward ---------------------------------------------------------------

void backward(const Tensor& loss, Tape& tape) {
  if (!loss.defined() || loss.size() != 1) {
    throw ContractError("backward: loss must be a scalar tensor");
  }
  if (loss.raw()->tape_node < 0) {
    throw ContractError("backward: loss is not on the tape");
  }
  tape.grad_recipients_.clear();
  tape.recipient_handles_.clear();
  tape.visit_order_.clear();
  g_recipient_ids = &tape.grad_recipients_;
  g_recipient_handles = &tape.recipient_handles_;

  loss.raw()->grad.assign(1, 1.0);
  tape.grad_recipients_.insert(loss.id());
  tape.recipient_handles_.push_back(loss.handle());

  for (int i = static_cast<int>(tape.nodes_.size()) - 1; i >= 0; --i) {
    tape.visit_order_.push_back(i);
    tape.nodes_[static_cast<std::size_t>(i)].pull();
  }
  g_recipient_ids = nullptr;
  g_recipient_handles = nullptr;

  for (const auto& td : tape.recipient_handles_) {
    for (double g : td->grad) {
      if (!std::isfinite(g)) {
        throw DivergenceError("backward: non-finite gradient encountered");
      }
    }
  }
}

// ---- SGD --------------------------------------------------------------------

void sgd_step(const std::vector<NamedTensor>& params, SgdState& st) {
  if (st.velocity.size() < params.size()) st.velocity.resize(params.size());
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    const Tensor& p = params[pi].tensor;
    if (!p.has_grad()) continue;
    const auto& g = p.grad();
    for (double gv : g) {
      if (!std::isfinite(gv)) {
        throw DivergenceError("sgd_step: non-finite gradient in parameter " +
                              params[pi].name);
      }
    }
    auto& v = st.velocity[pi];
    if (v.size() != p.size()) v.assign(p.size(), 0.0);
    auto& values = p.raw()->values;
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double gp = g[i] + st.weight_decay * values[i];
      v[i] = st.momentum * v[i] + gp;
      values[i] -= st.lr * v[i];
    }
  }
}

// ---- finite differences -------------------------------------------------------

std::vector<std::vector<double>> finite_diff_grad(
    const std::function<double()>& f, const std::vector<Tensor>& params,
    double eps) {
  if (eps <= 0.0) throw ContractError("finite_diff_grad: eps must be positive");
  std::vector<std::vector<double>> grads;
  grads.reserve(params.size());
  for (const Tensor& p : params) {
    std::vector<double> g(p.size());
    auto& values = p.raw()->values;
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + eps;
      const double up = f();
      values[i] = saved - eps;
      const double down = f();
      values[i] = saved;
      g[i] = (up - down) / (2.0 * eps);
    }
    grads.push_back(std::move(g));
  }
  return grads;
}

// ---- init helpers -------------------------------------------------------------

void fill_uniform(Tensor& t, RngStream& rng, double lo, double hi) {
  for (double& v : t.values()) v = rng.uniform(lo, hi);
}

void fill_normal(Tensor& t, RngStream& rng, double mean, double stddev) {
  for (double& v : t.values()) v = rng.normal(mean, stddev);
}

}  // namespace moco
