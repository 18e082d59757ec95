#include "vlmprobe/rope.hpp"

#include <cmath>

#include "vlmprobe/error.hpp"

namespace vlmprobe {

std::string_view to_string(RotationPairing pairing) {
  switch (pairing) {
    case RotationPairing::Interleaved: return "interleaved";
    case RotationPairing::Half: return "half";
  }
  return "unknown";
}

RotationPairing parse_pairing(std::string_view name) {
  if (name == "interleaved") return RotationPairing::Interleaved;
  if (name == "half") return RotationPairing::Half;
  fail(ErrorKind::Format, "unknown rotation pairing convention '" + std::string(name) +
                              "'; supported: interleaved, half");
}

void RopeConfig::validate() const {
  require(head_dim >= 2 && head_dim % 2 == 0, ErrorKind::InvalidArgument,
          "rope head_dim must be even and >= 2, got " + std::to_string(head_dim));
  require(base > 1.0, ErrorKind::InvalidArgument, "rope base must be > 1");
}

double RopeConfig::frequency(std::size_t pair) const {
  return std::pow(base, -2.0 * static_cast<double>(pair) / static_cast<double>(head_dim));
}

namespace {

/// Frequency table of the most recent config seen on this thread.
const std::vector<double>& frequencies(const RopeConfig& cfg) {
  thread_local std::size_t cached_dim = 0;
  thread_local double cached_base = 0.0;
  thread_local std::vector<double> table;
  if (cached_dim != cfg.head_dim || cached_base != cfg.base) {
    table.resize(cfg.pair_count());
    for (std::size_t p = 0; p < table.size(); ++p) table[p] = cfg.frequency(p);
    cached_dim = cfg.head_dim;
    cached_base = cfg.base;
  }
  return table;
}

}  // namespace

std::pair<std::size_t, std::size_t> RopeConfig::pair_indices(std::size_t pair) const {
  if (pairing == RotationPairing::Interleaved) return {2 * pair, 2 * pair + 1};
  return {pair, pair + head_dim / 2};
}

Vector rope_rotate(std::span<const double> v, double position, const RopeConfig& cfg) {
  require(v.size() % 2 == 0, ErrorKind::InvalidArgument,
          "rope_rotate needs an even-length vector, got " + std::to_string(v.size()));
  cfg.validate();
  require(v.size() == cfg.head_dim, ErrorKind::InvalidArgument,
          "rope_rotate: vector length " + std::to_string(v.size()) + " != head_dim " +
              std::to_string(cfg.head_dim));
  Vector out(v.begin(), v.end());
  if (position == 0.0) return out;
  const std::vector<double>& omega = frequencies(cfg);
  for (std::size_t p = 0; p < cfg.pair_count(); ++p) {
    const auto [a, b] = cfg.pair_indices(p);
    const double angle = position * omega[p];
    const double c = std::cos(angle);
    const double s = std::sin(angle);
    out[a] = v[a] * c - v[b] * s;
    out[b] = v[a] * s + v[b] * c;
  }
  return out;
}

Vector attention_logits(std::span<const double> query, const Matrix& keys, double query_pos,
                        std::span<const double> key_positions, const RopeConfig& cfg) {
  cfg.validate();
  require(query.size() == cfg.head_dim && keys.cols() == cfg.head_dim,
          ErrorKind::InvalidArgument, "attention_logits: head_dim mismatch");
  require(key_positions.size() == keys.rows(), ErrorKind::InvalidArgument,
          "attention_logits: " + std::to_string(keys.rows()) + " keys but " +
              std::to_string(key_positions.size()) + " positions");
  const Vector q = rope_rotate(query, query_pos, cfg);
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(cfg.head_dim));
  Vector logits(keys.rows());
  for (std::size_t j = 0; j < keys.rows(); ++j) {
    logits[j] = dot(q, rope_rotate(keys.row(j), key_positions[j], cfg)) * inv_sqrt_d;
  }
  return logits;
}

AttentionRow attention_weights(std::span<const double> logits, std::size_t causal_boundary) {
  require(causal_boundary > 0, ErrorKind::Precondition, "no attendable keys");
  require(causal_boundary <= logits.size(), ErrorKind::InvalidArgument,
          "causal boundary beyond logits length");
  AttentionRow row;
  row.causal_boundary = causal_boundary;
  row.query_pos = causal_boundary - 1;
  row.weights.assign(logits.size(), 0.0);
  const Vector attended = softmax(logits.first(causal_boundary));
  std::copy(attended.begin(), attended.end(), row.weights.begin());
  return row;
}

ShiftedKeys phase_shift_keys(const Matrix& keys, std::span<const double> key_positions,
                             std::span<const std::size_t> shift_set, double delta,
                             const RopeConfig& cfg) {
  cfg.validate();
  require(keys.cols() == cfg.head_dim, ErrorKind::InvalidArgument,
          "phase_shift_keys: head_dim mismatch");
  require(key_positions.size() == keys.rows(), ErrorKind::InvalidArgument,
          "phase_shift_keys: positions/keys length mismatch");
  ShiftedKeys out{keys, {key_positions.begin(), key_positions.end()}};
  for (std::size_t idx : shift_set) {
    require(idx < keys.rows(), ErrorKind::InvalidArgument,
            "phase_shift_keys: index " + std::to_string(idx) + " out of range");
    out.positions[idx] += delta;
  }
  return out;
}

Vector apply_rope_generator(std::span<const double> rotated, const RopeConfig& cfg) {
  cfg.validate();
  require(rotated.size() == cfg.head_dim, ErrorKind::InvalidArgument,
          "generator: head_dim mismatch");
  Vector out(rotated.size(), 0.0);
  const std::vector<double>& omega = frequencies(cfg);
  for (std::size_t p = 0; p < cfg.pair_count(); ++p) {
    const auto [a, b] = cfg.pair_indices(p);
    const double w = omega[p];
    out[a] = -w * rotated[b];
    out[b] = w * rotated[a];
  }
  return out;
}

double logit_phase_derivative(std::span<const double> query, std::span<const double> key,
                              double query_pos, double key_pos, const RopeConfig& cfg) {
  require(query.size() == key.size(), ErrorKind::InvalidArgument,
          "logit_phase_derivative: query/key length mismatch");
  const Vector q = rope_rotate(query, query_pos, cfg);
  const Vector k = rope_rotate(key, key_pos, cfg);
  return dot(q, apply_rope_generator(k, cfg)) / std::sqrt(static_cast<double>(cfg.head_dim));
}

}  // namespace vlmprobe
