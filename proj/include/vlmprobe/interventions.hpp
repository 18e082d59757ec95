#pragma once

// Representation-level manipulations of vision embeddings: RMS scale matching,
// multilayer feature concatenation, and grid average pooling.

#include <cstddef>
#include <span>
#include <vector>

#include "vlmprobe/partition.hpp"
#include "vlmprobe/tensor.hpp"

namespace vlmprobe {

enum class CalibrationSource {
  Fixed,     // use target_rms as given
  FromText,  // mean RMS of the text rows of the same input
};

struct NormCalibration {
  double target_rms = 0.83;  // typical text-token RMS of a LLaVA-class decoder
  CalibrationSource source = CalibrationSource::Fixed;
};

/// The RMS each vision row will be scaled to for this input.
double resolve_target_rms(const Matrix& embeddings, const TokenPartition& partition,
                          const NormCalibration& cal);

/// Rescales every vision row to the calibrated RMS. Other rows are copied.
Matrix normalize_vision(const Matrix& embeddings, const TokenPartition& partition,
                        const NormCalibration& cal);

/// Concatenates the selected feature layers per token, then projects:
/// out = [f_{id_0} | f_{id_1} | ...] * projector.
Matrix multilayer_concat(std::span<const Matrix> layer_features,
                         std::span<const std::size_t> layer_ids, const Matrix& projector);

/// 2D average pooling of a square token grid down to target_count tokens
/// (a perfect square, at most the input count). Windows tile the canvas
/// without overlap; when the grid sides do not divide, tokens on a window
/// boundary contribute to both neighbours in proportion to the area covered.
Matrix avg_pool_compress(const Matrix& tokens, std::size_t target_count);

}  // namespace vlmprobe
