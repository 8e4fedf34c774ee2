#pragma once

#include <cstddef>
#include <vector>

#include "ctxcomp/errors.hpp"

namespace ctxcomp::theory {

// Finite discrete source. Probabilities must be non-negative and sum to 1
// within 1e-12.
struct DiscreteSource {
  std::vector<double> p;

  explicit DiscreteSource(std::vector<double> probs);
  std::size_t size() const { return p.size(); }
};

// Non-negative distortion matrix d(x, x_hat) over source x reconstruction
// alphabets.
struct DistortionSpec {
  std::size_t n_source = 0;
  std::size_t n_reconstruction = 0;
  std::vector<double> d;  // row-major

  double at(std::size_t x, std::size_t y) const { return d[x * n_reconstruction + y]; }
  static DistortionSpec hamming(std::size_t n);
};

// Shannon entropy in bits, with 0*log 0 = 0.
double entropy(const DiscreteSource& source);

struct RDResult {
  double target_distortion = 0.0;
  double rate_bits = 0.0;
  long iterations = 0;
  bool converged = false;
};

// Rate-distortion function R(D) = min I(X;X') s.t. E[d] <= D, via the
// Blahut-Arimoto alternating minimization with a bisection search on the
// Lagrange multiplier to match the target distortion. Iteration cap 1e5,
// per-sweep tolerance on the rate.
RDResult blahut_arimoto(const DiscreteSource& source, const DistortionSpec& distortion,
                        double target_distortion, double tolerance = 1e-9);

// R(0) = H(X) for discrete lossless reconstruction; cross-checked against
// the Blahut-Arimoto solver at D = 0 within 1e-4.
double lossless_rate(const DiscreteSource& source);

struct DecompositionReport {
  double entropy_bits = 0.0;
  double kl_bits = 0.0;
  double cross_entropy_bits = 0.0;
  double residual = 0.0;  // |CE - H - KL|
};

// H, KL and CE computed independently; q must cover the support of p.
DecompositionReport ce_decomposition(const DiscreteSource& p, const DiscreteSource& q);

enum class Feasibility { feasible, infeasible };

// Lossless reconstruction is infeasible iff H(X) > budget. The boundary
// H == budget counts as feasible.
Feasibility feasibility_check(double entropy_bits, double budget_bits);

}  // namespace ctxcomp::theory
