#pragma once

#include <cstddef>
#include <optional>
#include <vector>

#include "vlmprobe/rope.hpp"
#include "vlmprobe/tensor.hpp"

namespace vlmprobe {

using IndexSet = std::vector<std::size_t>;

enum class TokenRole { System, Vision, Text, Other };

/// Classification of sequence positions into system prompt, vision, and user
/// text. Positions in none of the sets are legal and count as `Other`.
struct TokenPartition {
  IndexSet system;
  IndexSet vision;
  IndexSet text;
  std::size_t seq_len = 0;

  /// Checks bounds, ordering, and pairwise disjointness.
  void validate() const;
  /// Sorts each set, then validates.
  void canonicalize();

  TokenRole role_of(std::size_t index) const;
  std::vector<TokenRole> roles() const;

  /// Restriction to positions < boundary (keys visible to a causal query).
  TokenPartition prefix(std::size_t boundary) const;

  /// Contiguous [system | vision | text] layout.
  static TokenPartition contiguous(std::size_t n_system, std::size_t n_vision,
                                   std::size_t n_text);

  bool operator==(const TokenPartition&) const = default;
};

/// Pre-rotation queries/keys and attention rows of one attention head.
struct HeadTrace {
  Matrix queries;    // n_query x head_dim
  Matrix keys;       // seq_len x head_dim
  Matrix attention;  // n_query x seq_len, zero beyond each causal boundary

  bool operator==(const HeadTrace&) const = default;
};

/// Per-layer, per-head capture of one forward pass (or decoding step).
struct AttentionTrace {
  std::size_t layers = 0;
  std::size_t heads = 0;
  std::size_t head_dim = 0;
  std::size_t seq_len = 0;
  std::vector<std::size_t> query_indices;  // sequence index of each query row
  std::vector<double> query_positions;     // rotary position of each query row
  std::vector<double> key_positions;       // rotary position of each key
  std::vector<HeadTrace> head_traces;      // layer-major

  std::size_t query_count() const { return query_indices.size(); }
  const HeadTrace& at(std::size_t layer, std::size_t head) const {
    return head_traces[layer * heads + head];
  }
  HeadTrace& at(std::size_t layer, std::size_t head) { return head_traces[layer * heads + head]; }

  AttentionRow attention_row(std::size_t layer, std::size_t head, std::size_t query_row) const;

  /// Query row whose sequence index is `index`, if captured.
  std::optional<std::size_t> row_for_index(std::size_t index) const;

  /// Throws on inconsistent shapes.
  void validate() const;

  bool operator==(const AttentionTrace&) const = default;
};

}  // namespace vlmprobe
