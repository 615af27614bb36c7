#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "bda/tensor.hpp"

namespace bda {

// One finite-difference check: `forward` rebuilds the operation from the
// input vector (so the oracle can substitute perturbed copies), and every
// tensor in `inputs` is gradient-checked. Constants (loss targets) live in
// the closure instead. `has_kinks` turns on the relu-margin guard: inputs are
// deterministically re-drawn until no pre-activation sits within 10 steps of
// a kink, which is where central differences stop being a valid oracle.
struct FdCheck {
  std::function<Tensor(const std::vector<Tensor>&)> forward;
  std::vector<Tensor> inputs;
  double step = 1e-5;
  bool has_kinks = false;
};

using FdCheckBuilder = std::function<FdCheck(std::uint64_t seed)>;

struct GradCheckCase {
  std::string name;
  FdCheckBuilder make;
};

// All differentiable operations plus the 2-level encoder/decoder composite.
std::vector<GradCheckCase> gradcheck_cases();

// Max relative error |g - g_fd| / max(1,|g|) over every checked leaf.
double run_gradcheck_case(const FdCheckBuilder& make, std::uint64_t seed);

struct GradCheckResult {
  std::string name;
  double max_rel_err = 0.0;
  bool pass = false;
};

inline constexpr double kGradCheckTolerance = 1e-4;  // double precision

std::vector<GradCheckResult> run_gradient_checks(int seeds_per_case, std::uint64_t base_seed,
                                                 double tolerance = kGradCheckTolerance);

}  // namespace bda
