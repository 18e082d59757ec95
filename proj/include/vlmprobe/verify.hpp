#pragma once

// Randomized self-checks of the attention-mass derivative identities: the
// analytic group derivative against central differences, second-order
// convergence of the first-order factorization, and residual-scale
// suppression of the direction derivative.

#include <cstddef>
#include <cstdint>

namespace vlmprobe {

struct DerivativeCheck {
  std::size_t trials = 0;
  // Group derivative vs central difference (eps 1e-5).
  double max_identity_rel_error = 0.0;
  // Per-trial log-log slope of the factorization residual over
  // delta in {1e-2, 1e-3, 1e-4}.
  double mean_factorization_slope = 0.0;
  double min_factorization_slope = 0.0;
  double max_factorization_slope = 0.0;
  // sensitivity(100 r) / sensitivity(r).
  double min_suppression_ratio = 0.0;
  double max_suppression_ratio = 0.0;

  bool identity_ok() const { return max_identity_rel_error < 1e-5; }
  bool factorization_ok() const {
    return mean_factorization_slope >= 1.8 && mean_factorization_slope <= 2.2;
  }
  bool suppression_ok() const {
    return min_suppression_ratio >= 0.009 && max_suppression_ratio <= 0.011;
  }
};

/// Head dims 4..128 and group sizes 1..64 drawn per trial.
DerivativeCheck verify_mass_derivative(std::size_t trials, std::uint64_t seed);

}  // namespace vlmprobe
