#pragma once

// Binary attention-trace container ("ATRC").
//
// Layout, all integers and floats little-endian:
//
//   bytes 0..3   magic "ATRC"
//   u32          format version (currently 1)
//   u64          metadata length M
//   M bytes      UTF-8 JSON metadata
//   u64          payload length P
//   P bytes      payload: for each layer, for each head: queries
//                (n_query x head_dim), keys (seq_len x head_dim), attention
//                (n_query x seq_len); then, when declared, hidden states
//                ((layers + 1) x seq_len x model_dim). Elements are f32 or
//                f64 as declared by the metadata "dtype".
//
// Queries and keys are stored before rotation so probes can re-apply RoPE at
// perturbed phases. See docs/TRACE_FORMAT.md for the metadata keys.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "vlmprobe/partition.hpp"
#include "vlmprobe/rope.hpp"
#include "vlmprobe/tensor.hpp"

namespace vlmprobe {

inline constexpr std::uint32_t kTraceFormatVersion = 1;

enum class TraceDtype { F32, F64 };

struct TraceBundle {
  std::string model_name = "unknown";
  AttentionTrace trace;
  TokenPartition partition;
  RopeConfig rope;
  std::vector<Matrix> hidden_states;  // empty, or layers + 1 matrices of seq_len rows
  TraceDtype dtype = TraceDtype::F64;  // payload precision on disk
  std::size_t renormalized_rows = 0;   // set by the reader
};

/// Serialized bytes; identical inputs give identical bytes.
std::string encode_trace(const TraceBundle& bundle, TraceDtype dtype);
TraceBundle decode_trace(const std::string& bytes);

void write_trace(const TraceBundle& bundle, const std::filesystem::path& path,
                 TraceDtype dtype = TraceDtype::F64);
TraceBundle read_trace(const std::filesystem::path& path);

}  // namespace vlmprobe
