#pragma once

// Rotary position embedding, single-head scaled dot-product attention, and the
// analytic phase derivative of a logit.
//
// Positions are continuous: shifting a key by `delta` rotates every frequency
// band i by delta * omega_i, so integer "steps" are the special case delta = 1.

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "vlmprobe/tensor.hpp"

namespace vlmprobe {

/// Which coordinates form the 2D rotation pairs.
enum class RotationPairing {
  Interleaved,  // (2i, 2i+1), GPT-J / original RoFormer layout
  Half,         // (i, i + d/2), GPT-NeoX / HF LLaMA rotate_half layout
};

std::string_view to_string(RotationPairing pairing);
/// Throws Format listing the supported conventions for an unknown name.
RotationPairing parse_pairing(std::string_view name);

struct RopeConfig {
  std::size_t head_dim = 0;
  double base = 10000.0;
  RotationPairing pairing = RotationPairing::Interleaved;

  void validate() const;
  std::size_t pair_count() const { return head_dim / 2; }
  /// omega_i = base^(-2i / head_dim)
  double frequency(std::size_t pair) const;
  /// Coordinates (first, second) of rotation pair `pair`.
  std::pair<std::size_t, std::size_t> pair_indices(std::size_t pair) const;
};

Vector rope_rotate(std::span<const double> v, double position, const RopeConfig& cfg);

/// l_j = <R(q_pos) q, R(pos_j) k_j> / sqrt(head_dim), on pre-rotation inputs.
Vector attention_logits(std::span<const double> query, const Matrix& keys, double query_pos,
                        std::span<const double> key_positions, const RopeConfig& cfg);

struct AttentionRow {
  Vector weights;
  std::size_t query_pos = 0;
  std::size_t causal_boundary = 0;  // positions >= boundary carry exactly zero weight
};

AttentionRow attention_weights(std::span<const double> logits, std::size_t causal_boundary);

struct ShiftedKeys {
  Matrix keys;
  std::vector<double> positions;
};

/// Advances the positions of the keys in `shift_set` by `delta`. Keys stay
/// pre-rotation, so the extra phase is applied when logits are recomputed.
ShiftedKeys phase_shift_keys(const Matrix& keys, std::span<const double> key_positions,
                             std::span<const std::size_t> shift_set, double delta,
                             const RopeConfig& cfg);

/// d/dphi of <q', R(phi) k'> / sqrt(d) at phi = 0, where R(phi) advances every
/// band by phi * omega_i. Evaluated as <q', G k'> with the block-diagonal
/// generator G = diag([[0, -omega_i], [omega_i, 0]]).
double logit_phase_derivative(std::span<const double> query, std::span<const double> key,
                              double query_pos, double key_pos, const RopeConfig& cfg);

/// Applies the generator G to an already rotated vector.
Vector apply_rope_generator(std::span<const double> rotated, const RopeConfig& cfg);

}  // namespace vlmprobe
