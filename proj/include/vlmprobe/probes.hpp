#pragma once

// Measurements of how a decoder uses vision-token position: order sensitivity
// (PSI), per-head modality balance (CMB), rotary phase sensitivity, attention
// entropy, and residual-stream norm profiles.
//
// Conventions shared by the phase-sensitivity functions:
//  - queries and keys are pre-rotation; rotation is applied with the given
//    positions so perturbed phases can be re-applied;
//  - every row of `keys` is attendable (callers slice to the causal prefix);
//  - the vision group V comes from the partition, and T is every attendable
//    non-vision key (text, system, and unclassified), so alpha_T = 1 - alpha_V.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "vlmprobe/partition.hpp"
#include "vlmprobe/rope.hpp"
#include "vlmprobe/tensor.hpp"

namespace vlmprobe {

// ---------------------------------------------------------------------------
// Order sensitivity

/// (acc_original - acc_permuted) / acc_original. Units only need to agree.
double psi(double acc_original, double acc_permuted);

/// Rows at vision positions reordered by a seeded uniform permutation; every
/// other row is copied unchanged.
Matrix permute_vision_tokens(const Matrix& embeddings, const TokenPartition& partition,
                             std::uint64_t seed);

// ---------------------------------------------------------------------------
// Modality balance

/// Vision share of one head's attention. With include_system false the system
/// prompt is dropped from the denominator (vision / (vision + text)).
double cmb_head(const AttentionRow& attn, const TokenPartition& partition, bool include_system);

struct AttentionShare {
  double system = 0.0;
  double vision = 0.0;
  double text = 0.0;
};

/// Shares of one row's classified mass; they sum to one.
AttentionShare attention_share(const AttentionRow& attn, const TokenPartition& partition);
/// Mean over layers, heads, and every captured query row.
AttentionShare attention_share(const AttentionTrace& trace, const TokenPartition& partition);

struct CmbHeatmap {
  Matrix values;  // layers x heads, each in [0, 1]
  bool include_system = false;
  std::size_t samples = 0;  // attention rows averaged into each cell
};

/// Mean-of-cells accumulator. Order-insensitive and mergeable, so samples can
/// be folded in any grouping.
class CmbAccumulator {
 public:
  CmbAccumulator(std::size_t layers, std::size_t heads, bool include_system);

  void add(std::size_t layer, std::size_t head, double value);
  void merge(const CmbAccumulator& other);
  CmbHeatmap heatmap() const;

 private:
  std::size_t layers_;
  std::size_t heads_;
  bool include_system_;
  std::vector<double> sums_;
  std::vector<std::size_t> counts_;
};

/// Which captured query rows a trace-level probe reads.
enum class QuerySelection {
  Last,          // the step that emits the first generated token
  TextQueries,   // every query row at a user-text position
  All,
};

CmbHeatmap cmb_heatmap(const AttentionTrace& trace, const TokenPartition& partition,
                       bool include_system, QuerySelection selection = QuerySelection::Last);

// ---------------------------------------------------------------------------
// Rotary phase sensitivity

struct RopeProbeResult {
  double alpha_v_base = 0.0;
  double alpha_v_shifted = 0.0;
  double delta_alpha_v = 0.0;   // alpha_v_shifted - alpha_v_base
  double g_v = 0.0;             // attention-weighted mean of d l_v / d phi
  double delta_g_v = 0.0;       // same weights on the finite logit change
  double balance_factor = 0.0;  // alpha_V (1 - alpha_V)
};

/// Shifts only the vision keys by `delta` position steps and reports the
/// attention-level and logit-level response.
RopeProbeResult rope_probe(std::span<const double> query, double query_pos, const Matrix& keys,
                           std::span<const double> key_positions,
                           const TokenPartition& partition, double delta,
                           const RopeConfig& cfg);

/// Group quantities of the phase derivative of the vision attention mass.
struct GroupPhaseTerms {
  double alpha_v = 0.0;
  double alpha_t = 0.0;
  double g_v = 0.0;
  double g_t = 0.0;           // zero when alpha_T == 0
  double d_alpha_v = 0.0;     // alpha_V alpha_T (g_V - g_T)
};

/// Phase applied to the keys in `shift_set` (a subset of key indices).
GroupPhaseTerms group_phase_terms(std::span<const double> query, double query_pos,
                                  const Matrix& keys, std::span<const double> key_positions,
                                  const TokenPartition& partition,
                                  std::span<const std::size_t> shift_set,
                                  const RopeConfig& cfg);

/// d alpha_V / d phi for a phase applied to the vision keys only (g_T = 0).
double group_derivative_analytic(std::span<const double> query, double query_pos,
                                 const Matrix& keys, std::span<const double> key_positions,
                                 const TokenPartition& partition, const RopeConfig& cfg);

/// d alpha_v / d phi for one key v, phase applied to the keys in `shift_set`:
/// alpha_v (d l_v - sum_k alpha_k d l_k).
double single_key_derivative(std::span<const double> query, double query_pos,
                             const Matrix& keys, std::span<const double> key_positions,
                             std::size_t key_index, std::span<const std::size_t> shift_set,
                             const RopeConfig& cfg);

/// Norm of d u / d phi for u = h / |h|, h = residual + attn_out:
/// |(I - u u^T) d_attn_dphi| / |h|.
double residual_phase_sensitivity(std::span<const double> residual,
                                  std::span<const double> attn_out,
                                  std::span<const double> d_attn_dphi);

struct RopeSensitivityProfile {
  // layers x heads means over the selected query rows
  Matrix mean_alpha_v;
  Matrix mean_delta_alpha_v;
  Matrix mean_abs_delta_alpha_v;
  Matrix mean_g_v;
  Matrix mean_delta_g_v;
  Matrix mean_abs_delta_g_v;
  Matrix mean_balance;
  std::vector<std::size_t> samples;  // per layer, query rows x heads
  double delta = 1.0;

  /// Mean of |delta alpha_V| over heads for one layer.
  double layer_abs_delta_alpha_v(std::size_t layer) const;
};

RopeSensitivityProfile rope_sensitivity(const AttentionTrace& trace,
                                        const TokenPartition& partition, const RopeConfig& cfg,
                                        double delta,
                                        QuerySelection selection = QuerySelection::Last);

// ---------------------------------------------------------------------------
// Entropy and norms

/// Shannon entropy of the attention restricted to (attendable) vision keys,
/// normalized by ln|V|. |V| = 1 yields 0.
double attention_entropy(const AttentionRow& attn, const TokenPartition& partition);

struct EntropyTable {
  std::vector<double> per_layer;  // mean over heads and selected rows
  double overall = 0.0;
  std::size_t samples = 0;
};

/// TextQueries reproduces averaging every text token's attention over the
/// vision tokens; Last reads only the answer step. All layers are averaged.
EntropyTable entropy_table(const AttentionTrace& trace, const TokenPartition& partition,
                           QuerySelection selection = QuerySelection::TextQueries);

struct NormProfile {
  std::vector<double> vision_mean;
  std::vector<double> text_mean;
  std::vector<std::optional<double>> ratio;  // vision / text, absent when text mean is 0
};

/// Mean L2 norm of vision rows and of text rows per layer; system rows excluded.
NormProfile norm_profile(std::span<const Matrix> hidden_states, const TokenPartition& partition);

}  // namespace vlmprobe
