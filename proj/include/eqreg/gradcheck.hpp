#pragma once

#include "eqreg/grad_tape.hpp"

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace eqreg {

/// Builds a scalar loss on a fresh tape from the given parameter nodes.
using LossBuilder = std::function<GradTape::Var(GradTape&, const std::vector<GradTape::Var>&)>;

struct GradCheckResult {
  double max_rel_error = 0.0;  // worst over parameters
  std::size_t worst_param = 0;
};

/// Compares backward() against central differences, parameter by parameter:
/// |g_analytic - g_numeric| / max(|g_analytic|, |g_numeric|, floor) with
/// Frobenius norms.
GradCheckResult check_gradients(const std::vector<Matrix>& params, const LossBuilder& build, double step = 1e-5,
                                double floor = 1e-8);

/// One named finite-difference case per tape primitive and loss, on small
/// seeded inputs.
struct NamedGradCheck {
  std::string name;
  GradCheckResult result;
};
std::vector<NamedGradCheck> primitive_gradient_checks(std::uint64_t seed);

}  // namespace eqreg
