#include "vlmprobe/interventions.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "vlmprobe/error.hpp"

namespace vlmprobe {

namespace {

std::size_t exact_sqrt(std::size_t n) {
  auto r = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(n))));
  return r * r == n ? r : 0;
}

}  // namespace

double resolve_target_rms(const Matrix& embeddings, const TokenPartition& partition,
                          const NormCalibration& cal) {
  if (cal.source == CalibrationSource::Fixed) {
    require(cal.target_rms > 0.0 && std::isfinite(cal.target_rms), ErrorKind::InvalidArgument,
            "target RMS must be positive and finite");
    return cal.target_rms;
  }
  require(!partition.text.empty(), ErrorKind::Precondition,
          "text-calibrated normalization needs at least one text row");
  double sum = 0.0;
  for (std::size_t i : partition.text) sum += rms(embeddings.row(i));
  const double target = sum / static_cast<double>(partition.text.size());
  require(target > 0.0, ErrorKind::Precondition, "text rows have zero RMS");
  return target;
}

Matrix normalize_vision(const Matrix& embeddings, const TokenPartition& partition,
                        const NormCalibration& cal) {
  partition.validate();
  require(embeddings.rows() == partition.seq_len, ErrorKind::InvalidArgument,
          "embedding rows " + std::to_string(embeddings.rows()) + " != seq_len " +
              std::to_string(partition.seq_len));
  const double target = resolve_target_rms(embeddings, partition, cal);
  Matrix out = embeddings;
  for (std::size_t i : partition.vision) {
    const double r = rms(embeddings.row(i));
    require(r > 0.0, ErrorKind::Precondition,
            "vision row " + std::to_string(i) + " is zero; direction undefined");
    const double factor = target / r;
    for (double& x : out.row(i)) x *= factor;
  }
  return out;
}

Matrix multilayer_concat(std::span<const Matrix> layer_features,
                         std::span<const std::size_t> layer_ids, const Matrix& projector) {
  require(!layer_ids.empty(), ErrorKind::InvalidArgument, "empty layer list");
  std::size_t tokens = 0;
  std::size_t width = 0;
  for (std::size_t k = 0; k < layer_ids.size(); ++k) {
    const std::size_t id = layer_ids[k];
    require(id < layer_features.size(), ErrorKind::InvalidArgument,
            "layer id " + std::to_string(id) + " beyond " +
                std::to_string(layer_features.size()) + " feature layers");
    const Matrix& f = layer_features[id];
    if (k == 0) tokens = f.rows();
    require(f.rows() == tokens, ErrorKind::InvalidArgument,
            "feature layer " + std::to_string(id) + " has " + std::to_string(f.rows()) +
                " tokens, expected " + std::to_string(tokens));
    width += f.cols();
  }
  require(width == projector.rows(), ErrorKind::InvalidArgument,
          "concatenated width " + std::to_string(width) + " != projector input width " +
              std::to_string(projector.rows()));
  Matrix stacked(tokens, width);
  std::size_t offset = 0;
  for (std::size_t id : layer_ids) {
    const Matrix& f = layer_features[id];
    for (std::size_t t = 0; t < tokens; ++t) {
      for (std::size_t c = 0; c < f.cols(); ++c) stacked(t, offset + c) = f(t, c);
    }
    offset += f.cols();
  }
  return matmul(stacked, projector);
}

Matrix avg_pool_compress(const Matrix& tokens, std::size_t target_count) {
  const std::size_t n = tokens.rows();
  require(n > 0, ErrorKind::InvalidArgument, "no tokens to pool");
  const std::size_t side = exact_sqrt(n);
  require(side > 0, ErrorKind::InvalidArgument,
          "token count " + std::to_string(n) + " is not a square grid");
  const std::size_t out_side = target_count > 0 ? exact_sqrt(target_count) : 0;
  require(out_side > 0 && out_side <= side, ErrorKind::InvalidArgument,
          "target " + std::to_string(target_count) + " is not a square grid no larger than " +
              std::to_string(side) + "x" + std::to_string(side));
  if (out_side == side) return tokens;
  // Output cell i spans [i*side, (i+1)*side) and input cell j spans
  // [j*out_side, (j+1)*out_side) in units of 1/(side*out_side) of the canvas;
  // each input is weighted by its overlap, so a non-dividing grid
  // (24x24 -> 16x16) splits boundary tokens between neighbours.
  auto span_of = [side, out_side](std::size_t i) {
    const std::size_t lo = i * side / out_side;
    const std::size_t hi = ((i + 1) * side + out_side - 1) / out_side;
    return std::pair{lo, hi};
  };
  auto overlap = [side, out_side](std::size_t i, std::size_t j) {
    const std::size_t lo = std::max(i * side, j * out_side);
    const std::size_t hi = std::min((i + 1) * side, (j + 1) * out_side);
    return static_cast<double>(hi > lo ? hi - lo : 0);
  };
  const double inv_area = 1.0 / static_cast<double>(side * side);
  Matrix out(target_count, tokens.cols());
  std::vector<double> terms;
  for (std::size_t by = 0; by < out_side; ++by) {
    const auto [y0, y1] = span_of(by);
    for (std::size_t bx = 0; bx < out_side; ++bx) {
      const auto [x0, x1] = span_of(bx);
      auto dst = out.row(by * out_side + bx);
      for (std::size_t c = 0; c < dst.size(); ++c) {
        terms.clear();
        for (std::size_t y = y0; y < y1; ++y) {
          const double wy = overlap(by, y);
          for (std::size_t x = x0; x < x1; ++x) {
            terms.push_back(wy * overlap(bx, x) * tokens(y * side + x, c));
          }
        }
        // Summing in sorted order makes each pooled value independent of the
        // token order inside its window, bit for bit.
        std::sort(terms.begin(), terms.end());
        double sum = 0.0;
        for (double v : terms) sum += v;
        dst[c] = sum * inv_area;
      }
    }
  }
  return out;
}

}  // namespace vlmprobe
