#pragma once

// Small pre-norm RoPE decoder with a controllable vision/text norm skew.
//
// Block: h += W_o MHA(RMSNorm(h)); h += W_2 gelu(W_1 RMSNorm(h)). Inputs are
// laid out as [system | vision | text]. Text and system embeddings have RMS 1;
// vision rows come from a fixed random projection of per-patch features and
// are scaled to RMS = vision_norm_skew. The model is never trained: it exists
// so that probes and interventions can be exercised on real forward passes.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "vlmprobe/partition.hpp"
#include "vlmprobe/probes.hpp"
#include "vlmprobe/rope.hpp"
#include "vlmprobe/scene2ds.hpp"
#include "vlmprobe/tensor.hpp"
#include "vlmprobe/trace_io.hpp"

namespace vlmprobe {

struct ToyConfig {
  std::size_t layers = 6;
  std::size_t heads = 4;
  std::size_t head_dim = 16;
  std::size_t vocab = 64;
  std::size_t n_vision = 36;
  std::size_t n_text = 12;
  std::size_t n_system = 8;
  double vision_norm_skew = 1.0;
  std::uint64_t seed = 0;
  double rope_base = 10000.0;
  RotationPairing pairing = RotationPairing::Interleaved;
  std::size_t mlp_mult = 4;
  double rms_eps = kDefaultRmsEps;
  /// Init scale of the output projections (W_o, W_2) relative to 1/sqrt(fan_in).
  double update_gain = 4.0;

  std::size_t model_dim() const { return heads * head_dim; }
  std::size_t seq_len() const { return n_system + n_vision + n_text; }
  RopeConfig rope() const { return {head_dim, rope_base, pairing}; }
  TokenPartition partition() const { return TokenPartition::contiguous(n_system, n_vision, n_text); }
  void validate() const;

  /// Keys as in the struct; rotation pairing as "interleaved" or "half".
  static ToyConfig from_json(const std::string& text);
  static ToyConfig load(const std::filesystem::path& path);
  std::string to_json() const;

  bool operator==(const ToyConfig&) const = default;
};

struct LayerWeights {
  Matrix wq, wk, wv, wo;  // model_dim x model_dim
  Matrix w1;              // model_dim x mlp_mult * model_dim
  Matrix w2;              // mlp_mult * model_dim x model_dim

  bool operator==(const LayerWeights&) const = default;
};

struct ForwardRecord {
  std::vector<Matrix> hidden_states;  // layers + 1 residual streams, input first
  AttentionTrace trace;               // every position captured as a query row
  Vector logits;                      // readout of the last position
};

/// Number of per-patch vision features: color one-hot, shape one-hot,
/// object flag, background flag.
inline constexpr std::size_t kVisionFeatures = kColorCount + kShapeCount + 2;

class ToyModel {
 public:
  static ToyModel build(const ToyConfig& cfg);

  const ToyConfig& config() const { return cfg_; }
  const std::vector<LayerWeights>& layers() const { return layers_; }
  const Matrix& embedding() const { return embedding_; }
  const Matrix& projector() const { return projector_; }
  const Matrix& readout() const { return readout_; }

  /// Runs every block. Positions default to 0..n-1; any causal layout works as
  /// long as rows are in sequence order.
  ForwardRecord forward(const Matrix& inputs, const TokenPartition& partition,
                        std::span<const double> positions = {}) const;
  /// Only the first `layers` blocks; the readout is taken at that depth.
  ForwardRecord forward_prefix(const Matrix& inputs, const TokenPartition& partition,
                               std::size_t layers) const;

  /// Lowercased words hashed (FNV-1a) onto ids 1..vocab-1; 0 is padding.
  std::vector<std::size_t> tokenize(std::string_view text) const;
  std::span<const double> token_embedding(std::size_t id) const { return embedding_.row(id); }

  Vector background_patch(double skew) const;
  Vector object_patch(Color color, Shape shape, double skew) const;
  /// n_vision rows in row-major grid order; needs a square vision count.
  Matrix vision_rows(const Scene& scene, double skew) const;
  /// Full input: fixed system prompt, vision rows, padded question tokens.
  Matrix assemble(const Scene& scene, const Question& question, double skew) const;
  Matrix assemble(const Scene& scene, const Question& question) const {
    return assemble(scene, question, cfg_.vision_norm_skew);
  }

  bool operator==(const ToyModel&) const = default;

 private:
  ForwardRecord run(const Matrix& inputs, const TokenPartition& partition,
                    std::span<const double> positions, std::size_t layers) const;

  ToyConfig cfg_;
  std::vector<LayerWeights> layers_;
  Matrix embedding_;  // vocab x model_dim, rows at RMS 1
  Matrix projector_;  // kVisionFeatures x model_dim
  Matrix readout_;    // model_dim x vocab
};

/// Packages a forward pass for writing as a trace file.
TraceBundle to_bundle(const ToyModel& model, const ForwardRecord& record,
                      const TokenPartition& partition);

// ---------------------------------------------------------------------------
// Answering 2DS-lite questions

class Predictor {
 public:
  virtual ~Predictor() = default;
  virtual std::string answer(const Matrix& inputs, const TokenPartition& partition,
                             const Question& question) const = 0;
};

/// Runs the model and picks the choice whose tokens score highest in the
/// final logits. With compress_to_one the vision span is average-pooled to a
/// single token first.
class ToyModelPredictor : public Predictor {
 public:
  ToyModelPredictor(const ToyModel& model, bool compress_to_one)
      : model_(model), compress_(compress_to_one) {}
  std::string answer(const Matrix& inputs, const TokenPartition& partition,
                     const Question& question) const override;

 private:
  const ToyModel& model_;
  bool compress_;
};

/// Reads each vision row back to its nearest patch prototype, places it at the
/// grid cell implied by its sequence index, and answers geometrically. Entirely
/// dependent on token order.
class PositionalReadout : public Predictor {
 public:
  PositionalReadout(const ToyModel& model, double skew);
  std::string answer(const Matrix& inputs, const TokenPartition& partition,
                     const Question& question) const override;

 private:
  const ToyModel& model_;
  std::vector<std::optional<SceneObject>> labels_;  // nullopt for background
  std::vector<Vector> prototypes_;
};

using Scorer = std::function<bool(const std::string& prediction, const Question& question)>;
bool exact_match(const std::string& prediction, const Question& question);

struct ToyEvaluation {
  std::size_t correct = 0;
  std::size_t total = 0;
  double accuracy() const { return total ? static_cast<double>(correct) / total : 0.0; }
};

/// Scores every question of a grid-placed dataset. With a permutation seed the
/// vision rows of each input are shuffled (seed derived per question).
ToyEvaluation evaluate(const ToyModel& model, const Predictor& predictor, const Dataset& dataset,
                       const Scorer& scorer, std::optional<std::uint64_t> permute_seed,
                       double skew);

/// A grid-placed 2DS set truncated to `questions` questions.
Dataset lite_dataset(std::uint64_t seed, std::size_t questions);

// ---------------------------------------------------------------------------
// Skew mechanism study

/// Mean |delta alpha_V| over the first `layers` layers, all heads, and every
/// text query row.
double early_sensitivity(const ToyModel& model, const Matrix& inputs,
                         const TokenPartition& partition, std::size_t layers, double delta);

struct MechanismConfig {
  ToyConfig model;           // seed field ignored; one model per study seed
  std::uint64_t first_seed = 0;
  std::size_t seeds = 64;
  std::size_t scenes_per_seed = 8;
  double skew = 100.0;
  double target_rms = 0.83;
  std::size_t early_layers = 2;
  double delta = 1.0;
};

struct MechanismResult {
  std::vector<double> unskewed;    // per seed
  std::vector<double> skewed;
  std::vector<double> normalized;
  double mean_unskewed = 0.0;
  double mean_skewed = 0.0;
  double mean_normalized = 0.0;
  double gap() const { return mean_unskewed - mean_skewed; }
  /// Fraction of the gap closed by normalizing the skewed input.
  double recovery() const { return (mean_normalized - mean_skewed) / gap(); }
};

MechanismResult measure_skew_mechanism(const MechanismConfig& cfg);

}  // namespace vlmprobe
