#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "moco/tensor.hpp"

namespace moco {

// Max relative error between the tape gradients of make_loss() and central
// finite differences over `params`. make_loss must rebuild the graph from the
// current parameter values on every call.
double max_rel_gradient_error(const std::function<Tensor()>& make_loss,
                              const std::vector<Tensor>& params,
                              double eps = 1e-5);

struct GradCheckCase {
  std::string op;
  std::size_t instances = 0;
  double max_rel_err = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckCase> cases;
  double overall_max = 0.0;
  bool pass(double tol) const { return overall_max < tol; }
};

// Finite-difference sweep over every differentiable op plus the full
// MoCo step loss, `instances_per_op` random instances each.
GradCheckReport run_gradcheck(std::uint64_t seed, std::size_t instances_per_op);

// One random instance of the full MoCo step loss (encoder forward, queue
// logits, InfoNCE) checked against finite differences over all f_q params.
// Lives with the contrastive module; wired into run_gradcheck.
double gradcheck_moco_step_loss(RngStream& rng);

}  // namespace moco
