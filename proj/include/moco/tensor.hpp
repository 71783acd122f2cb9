#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "moco/errors.hpp"
#include "moco/rng.hpp"

namespace moco {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
struct TensorData {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // empty == absent
  bool requires_grad = false;
  int tape_node = -1;  // index into the active tape, -1 if not recorded
};
}  // namespace detail

// Dense row-major f64 tensor. Copies are shallow (shared buffer); use
// clone() for a deep copy. The gradient buffer stays absent until a
// backward pass accumulates into it.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_values(Shape shape, std::vector<double> values,
                            bool requires_grad = false);

  bool defined() const { return static_cast<bool>(data_); }
  const Shape& shape() const { return data_->shape; }
  std::size_t rank() const { return data_->shape.size(); }
  std::size_t dim(std::size_t i) const { return data_->shape[i]; }
  std::size_t size() const { return data_->values.size(); }

  std::vector<double>& values() { return data_->values; }
  const std::vector<double>& values() const { return data_->values; }

  bool requires_grad() const { return data_->requires_grad; }
  void set_requires_grad(bool b) { data_->requires_grad = b; }

  bool has_grad() const { return !data_->grad.empty(); }
  const std::vector<double>& grad() const { return data_->grad; }
  // Allocates a zeroed gradient buffer on first use.
  std::vector<double>& mutable_grad();
  // Drops the gradient buffer (back to "absent").
  void zero_grad() { data_->grad.clear(); }

  // Same buffer, no gradient flow.
  Tensor detached() const;
  // Deep copy of values; gradient state is not copied.
  Tensor clone() const;

  // Stable identity for audits (tape recipients, parameter checksums).
  const void* id() const { return data_.get(); }

  detail::TensorData* raw() const { return data_.get(); }
  std::shared_ptr<detail::TensorData> handle() const { return data_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorData> d) : data_(std::move(d)) {}
  std::shared_ptr<detail::TensorData> data_;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

// Reverse-mode tape. Ops append nodes in execution order, so operands always
// precede their consumers; backward() walks the node list once in reverse.
class Tape {
 public:
  struct Node {
    std::function<void()> pull;           // accumulates into operand grads
    std::vector<int> operand_nodes;       // tape ids of taped operands
    const void* output_id = nullptr;
  };

  void clear();
  std::size_t node_count() const { return nodes_.size(); }
  const std::vector<Node>& nodes() const { return nodes_; }

  // True if the last backward() accumulated gradient into this tensor.
  bool received_grad(const Tensor& t) const {
    return grad_recipients_.count(t.id()) > 0;
  }
  std::size_t recipient_count() const { return grad_recipients_.size(); }

  // Node indices in the order the last backward() visited them.
  const std::vector<int>& last_visit_order() const { return visit_order_; }

 private:
  friend class TapeScope;
  friend void backward(const Tensor& loss, Tape& tape);
  friend class OpRecorder;

  std::vector<Node> nodes_;
  std::unordered_set<const void*> grad_recipients_;
  std::vector<std::shared_ptr<detail::TensorData>> recipient_handles_;
  std::vector<int> visit_order_;
};

// Installs `tape` as the thread's active tape for the scope's lifetime.
// Ops executed with no active tape run forward-only.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape();

// ---- batch normalization state -------------------------------------------

struct BnState {
  Tensor gamma;         // learnable per-channel scale
  Tensor beta;          // learnable per-channel shift
  Tensor running_mean;  // buffer
  Tensor running_var;   // buffer
  double running_momentum = 0.1;
  double eps = 1e-5;
};

BnState make_bn_state(std::size_t channels);

using ShardSlices = std::vector<std::pair<std::size_t, std::size_t>>;  // [begin,end) rows

struct BnMode {
  bool training = false;
  ShardSlices shards;  // must partition the batch in train mode
};

inline BnMode bn_eval() { return BnMode{false, {}}; }
inline BnMode bn_train(ShardSlices shards) { return BnMode{true, std::move(shards)}; }
inline BnMode bn_train_single(std::size_t batch) {
  return BnMode{true, {{0, batch}}};
}

// ---- operations ------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);                     // rank-2 only
Tensor batched_dot(const Tensor& q, const Tensor& k);  // N x C -> N x 1
Tensor conv2d(const Tensor& x, const Tensor& w, std::size_t stride,
              std::size_t padding);
Tensor add_channel_bias(const Tensor& x, const Tensor& b);  // NCHW + C
Tensor relu(const Tensor& x);
Tensor global_avg_pool(const Tensor& x);  // NCHW -> N x C
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);
Tensor batch_norm(const Tensor& x, BnState& st, const BnMode& mode);
Tensor l2_normalize(const Tensor& x);
Tensor softmax_cross_entropy(const Tensor& logits,
                             const std::vector<std::size_t>& targets);
Tensor concat_cols(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double c);
Tensor sum(const Tensor& x);
// Scalar dot product with a fixed (non-differentiated) weight vector.
Tensor masked_sum(const Tensor& x, const std::vector<double>& weights);
Tensor permute_rows(const Tensor& x, const std::vector<std::size_t>& perm);

// Minimum row norm accepted by l2_normalize; below it the feature is dead.
inline constexpr double kNormFloor = 1e-12;

// Accumulates gradients for every requires_grad tensor reachable from loss.
// Throws ContractError if loss is not scalar or not on the tape, and
// DivergenceError if any accumulated gradient is non-finite.
void backward(const Tensor& loss, Tape& tape);

// ---- SGD -------------------------------------------------------------------

struct SgdState {
  double lr = 0.03;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::vector<std::vector<double>> velocity;  // aligned with the param list
};

// g' = g + wd * p;  v <- momentum * v + g';  p <- p - lr * v.
// Parameters without a gradient buffer are skipped.
void sgd_step(const std::vector<NamedTensor>& params, SgdState& st);

// ---- finite differences (gradient oracle) ----------------------------------

// Central differences of f with respect to every coordinate of every param.
// f is evaluated with perturbed values written in place; params are restored.
std::vector<std::vector<double>> finite_diff_grad(
    const std::function<double()>& f, const std::vector<Tensor>& params,
    double eps);

// ---- init helpers ----------------------------------------------------------

void fill_uniform(Tensor& t, RngStream& rng, double lo, double hi);
void fill_normal(Tensor& t, RngStream& rng, double mean, double stddev);

}  // namespace moco
