#include "vlmprobe/verify.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <vector>

#include "vlmprobe/error.hpp"
#include "vlmprobe/probes.hpp"
#include "vlmprobe/rng.hpp"
#include "vlmprobe/rope.hpp"
#include "vlmprobe/tensor.hpp"

namespace vlmprobe {
namespace {

struct Case {
  RopeConfig rope;
  Vector query;
  double query_pos = 0.0;
  Matrix keys;
  std::vector<double> positions;
  TokenPartition partition;
};

Case draw_case(Rng& rng) {
  Case c;
  c.rope = RopeConfig{4 + 2 * rng.below(63)};
  const std::size_t nv = 1 + rng.below(64);
  const std::size_t nt = 1 + rng.below(64);
  const std::size_t n = nv + nt;
  c.query.resize(c.rope.head_dim);
  for (double& x : c.query) x = rng.normal();
  c.keys = Matrix(n, c.rope.head_dim);
  for (double& x : c.keys.data()) x = rng.normal();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  c.partition.seq_len = n;
  c.partition.vision.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(nv));
  c.partition.text.assign(order.begin() + static_cast<std::ptrdiff_t>(nv), order.end());
  c.partition.canonicalize();
  for (std::size_t i = 0; i < n; ++i) c.positions.push_back(static_cast<double>(i));
  c.query_pos = static_cast<double>(n);
  return c;
}

double vision_mass(const Case& c, double phi) {
  const ShiftedKeys s = phase_shift_keys(c.keys, c.positions, c.partition.vision, phi, c.rope);
  const Vector a = softmax(attention_logits(c.query, s.keys, c.query_pos, s.positions, c.rope));
  double m = 0.0;
  for (std::size_t v : c.partition.vision) m += a[v];
  return m;
}

double loglog_slope(const std::array<double, 3>& x, const std::array<double, 3>& y) {
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < 3; ++i) {
    mx += std::log(x[i]) / 3.0;
    my += std::log(y[i]) / 3.0;
  }
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < 3; ++i) {
    num += (std::log(x[i]) - mx) * (std::log(y[i]) - my);
    den += (std::log(x[i]) - mx) * (std::log(x[i]) - mx);
  }
  return num / den;
}

}  // namespace

DerivativeCheck verify_mass_derivative(std::size_t trials, std::uint64_t seed) {
  require(trials > 0, ErrorKind::InvalidArgument, "trials must be positive");
  DerivativeCheck out;
  out.trials = trials;
  out.min_factorization_slope = out.min_suppression_ratio = std::numeric_limits<double>::infinity();
  out.max_factorization_slope = out.max_suppression_ratio = -std::numeric_limits<double>::infinity();
  Rng rng(seed);
  const std::array<double, 3> deltas = {1e-2, 1e-3, 1e-4};
  for (std::size_t t = 0; t < trials; ++t) {
    const Case c = draw_case(rng);
    const double analytic = group_derivative_analytic(c.query, c.query_pos, c.keys, c.positions,
                                                      c.partition, c.rope);
    const double eps = 1e-5;
    const double fd = (vision_mass(c, eps) - vision_mass(c, -eps)) / (2 * eps);
    out.max_identity_rel_error =
        std::max(out.max_identity_rel_error, std::abs(analytic - fd) / (std::abs(fd) + 1e-12));

    std::array<double, 3> resid{};
    for (std::size_t i = 0; i < 3; ++i) {
      const RopeProbeResult r = rope_probe(c.query, c.query_pos, c.keys, c.positions, c.partition,
                                           deltas[i], c.rope);
      resid[i] = std::abs(r.delta_alpha_v - r.balance_factor * r.delta_g_v);
    }
    const double slope = loglog_slope(deltas, resid);
    out.mean_factorization_slope += slope / static_cast<double>(trials);
    out.min_factorization_slope = std::min(out.min_factorization_slope, slope);
    out.max_factorization_slope = std::max(out.max_factorization_slope, slope);

    // A small update whose derivative is mostly orthogonal to the residual.
    const std::size_t d = c.rope.head_dim;
    Vector r(d), a(d), da(d);
    for (double& x : r) x = rng.normal();
    for (double& x : a) x = rng.normal();
    for (double& x : da) x = rng.normal();
    a = scale(a, 0.05 * rng.uniform() * l2_norm(r) / l2_norm(a));
    const double along = dot(da, r) / dot(r, r);
    for (std::size_t k = 0; k < d; ++k) da[k] -= 0.9 * along * r[k];
    const double ratio = residual_phase_sensitivity(scale(r, 100.0), a, da) /
                         residual_phase_sensitivity(r, a, da);
    out.min_suppression_ratio = std::min(out.min_suppression_ratio, ratio);
    out.max_suppression_ratio = std::max(out.max_suppression_ratio, ratio);
  }
  return out;
}

}  // namespace vlmprobe
