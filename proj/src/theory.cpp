#include "ctxcomp/theory.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace ctxcomp::theory {

namespace {
constexpr long kIterationCap = 100000;
}  // namespace

DiscreteSource::DiscreteSource(std::vector<double> probs) : p(std::move(probs)) {
  if (p.empty()) throw ContractError("source: empty pmf");
  double sum = 0.0;
  for (double v : p) {
    if (v < 0.0 || !std::isfinite(v)) throw ContractError("source: invalid probability");
    sum += v;
  }
  if (std::abs(sum - 1.0) > 1e-12)
    throw ContractError("source: pmf sums to " + std::to_string(sum) + ", not 1");
}

DistortionSpec DistortionSpec::hamming(std::size_t n) {
  DistortionSpec spec;
  spec.n_source = n;
  spec.n_reconstruction = n;
  spec.d.assign(n * n, 1.0);
  for (std::size_t i = 0; i < n; ++i) spec.d[i * n + i] = 0.0;
  return spec;
}

double entropy(const DiscreteSource& source) {
  double h = 0.0;
  for (double v : source.p) {
    if (v > 0.0) h -= v * std::log2(v);
  }
  return h;
}

namespace {

struct BaSolution {
  double distortion = 0.0;
  double rate_bits = 0.0;
  long iterations = 0;
};

// Alternating minimization at a fixed multiplier. Row-shifted exponents
// keep exp(-lambda*d) from underflowing; the shift cancels in w = qA/Z.
BaSolution ba_at_multiplier(const DiscreteSource& src, const DistortionSpec& dist,
                            double lambda, double tolerance, std::vector<double>& q) {
  const std::size_t n = src.size(), m = dist.n_reconstruction;
  std::vector<double> a(n * m);
  std::vector<double> row_min(n);
  for (std::size_t x = 0; x < n; ++x) {
    double mn = std::numeric_limits<double>::infinity();
    for (std::size_t y = 0; y < m; ++y) mn = std::min(mn, dist.at(x, y));
    row_min[x] = mn;
    for (std::size_t y = 0; y < m; ++y)
      a[x * m + y] = std::exp(-lambda * (dist.at(x, y) - mn));
  }

  std::vector<double> z(n), w(n * m), new_q(m);
  double prev_rate = std::numeric_limits<double>::infinity();
  BaSolution sol;
  for (long sweep = 0; sweep < kIterationCap; ++sweep) {
    for (std::size_t x = 0; x < n; ++x) {
      double zx = 0.0;
      for (std::size_t y = 0; y < m; ++y) zx += q[y] * a[x * m + y];
      z[x] = zx;
      for (std::size_t y = 0; y < m; ++y) w[x * m + y] = q[y] * a[x * m + y] / zx;
    }
    std::fill(new_q.begin(), new_q.end(), 0.0);
    for (std::size_t x = 0; x < n; ++x)
      for (std::size_t y = 0; y < m; ++y) new_q[y] += src.p[x] * w[x * m + y];
    q = new_q;

    double rate = 0.0, d_avg = 0.0;
    for (std::size_t x = 0; x < n; ++x) {
      for (std::size_t y = 0; y < m; ++y) {
        const double wxy = w[x * m + y];
        if (wxy > 0.0 && q[y] > 0.0) rate += src.p[x] * wxy * std::log2(wxy / q[y]);
        d_avg += src.p[x] * wxy * dist.at(x, y);
      }
    }
    sol.iterations = sweep + 1;
    sol.rate_bits = std::max(0.0, rate);
    sol.distortion = d_avg;
    if (std::abs(rate - prev_rate) < tolerance) return sol;
    prev_rate = rate;
  }
  throw NumericError("blahut_arimoto: inner sweep did not converge within iteration cap");
}

}  // namespace

RDResult blahut_arimoto(const DiscreteSource& source, const DistortionSpec& distortion,
                        double target_distortion, double tolerance) {
  if (distortion.n_source != source.size())
    throw ContractError("blahut_arimoto: distortion/source size mismatch");
  for (double v : distortion.d)
    if (v < 0.0 || !std::isfinite(v))
      throw ContractError("blahut_arimoto: distortion must be non-negative");
  if (target_distortion < 0.0)
    throw NumericError("blahut_arimoto: negative distortion is unreachable (infeasible)");

  const std::size_t n = source.size(), m = distortion.n_reconstruction;

  // trivial regime: a single reconstruction letter already achieves D
  double d_max = std::numeric_limits<double>::infinity();
  for (std::size_t y = 0; y < m; ++y) {
    double e = 0.0;
    for (std::size_t x = 0; x < n; ++x) e += source.p[x] * distortion.at(x, y);
    d_max = std::min(d_max, e);
  }
  RDResult res;
  res.target_distortion = target_distortion;
  if (target_distortion >= d_max) {
    res.rate_bits = 0.0;
    res.converged = true;
    return res;
  }

  double min_pos_d = std::numeric_limits<double>::infinity();
  for (double v : distortion.d)
    if (v > 0.0) min_pos_d = std::min(min_pos_d, v);
  const double lambda_hi_cap = 700.0 / min_pos_d;

  long total_iters = 0;
  std::vector<double> q(m, 1.0 / static_cast<double>(m));
  double lo = 0.0, hi = lambda_hi_cap;
  BaSolution best;
  bool have_solution = false;
  for (int step = 0; step < 200; ++step) {
    const double mid = 0.5 * (lo + hi);
    std::vector<double> q_mid = q;  // warm start from the last accepted q
    BaSolution sol = ba_at_multiplier(source, distortion, mid, tolerance, q_mid);
    total_iters += sol.iterations;
    if (total_iters > kIterationCap)
      throw NumericError("blahut_arimoto: multiplier search exceeded iteration cap");

    if (sol.distortion > target_distortion) {
      lo = mid;  // need a steeper slope to push distortion down
    } else {
      hi = mid;
      best = sol;
      q = q_mid;
      have_solution = true;
    }
    if (have_solution && std::abs(best.distortion - target_distortion) < 1e-10) break;
    if (hi - lo < 1e-13 * lambda_hi_cap) break;
  }
  if (!have_solution) {
    // target below anything reachable by the capped multiplier; solve at
    // the cap and report it (distortion there is numerically ~0)
    std::vector<double> q_cap(m, 1.0 / static_cast<double>(m));
    best = ba_at_multiplier(source, distortion, lambda_hi_cap, tolerance, q_cap);
    total_iters += best.iterations;
  }
  res.rate_bits = best.rate_bits;
  res.iterations = total_iters;
  res.converged = true;
  return res;
}

double lossless_rate(const DiscreteSource& source) {
  const double h = entropy(source);
  const RDResult ba =
      blahut_arimoto(source, DistortionSpec::hamming(source.size()), 0.0, 1e-9);
  if (std::abs(ba.rate_bits - h) > 1e-4)
    throw NumericError("lossless_rate: solver disagrees with entropy by " +
                       std::to_string(std::abs(ba.rate_bits - h)));
  return h;
}

DecompositionReport ce_decomposition(const DiscreteSource& p, const DiscreteSource& q) {
  if (p.size() != q.size()) throw ContractError("ce_decomposition: size mismatch");
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p.p[i] > 0.0 && q.p[i] <= 0.0)
      throw NumericError("ce_decomposition: q lacks support where p > 0 (KL infinite)");
  }
  DecompositionReport rep;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p.p[i] > 0.0) {
      rep.entropy_bits -= p.p[i] * std::log2(p.p[i]);
      rep.kl_bits += p.p[i] * std::log2(p.p[i] / q.p[i]);
      rep.cross_entropy_bits -= p.p[i] * std::log2(q.p[i]);
    }
  }
  rep.residual = std::abs(rep.cross_entropy_bits - rep.entropy_bits - rep.kl_bits);
  return rep;
}

Feasibility feasibility_check(double entropy_bits, double budget_bits) {
  if (entropy_bits < 0.0 || budget_bits < 0.0)
    throw ContractError("feasibility_check: arguments must be non-negative");
  return entropy_bits > budget_bits ? Feasibility::infeasible : Feasibility::feasible;
}

}  // namespace ctxcomp::theory
