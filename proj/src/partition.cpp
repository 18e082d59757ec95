#include "vlmprobe/partition.hpp"

#include <algorithm>
#include <string>

#include "vlmprobe/error.hpp"

namespace vlmprobe {

namespace {

void check_set(const IndexSet& set, std::size_t seq_len, const char* name) {
  for (std::size_t i = 0; i < set.size(); ++i) {
    require(set[i] < seq_len, ErrorKind::InvalidArgument,
            std::string("partition: ") + name + " index " + std::to_string(set[i]) +
                " >= seq_len " + std::to_string(seq_len));
    require(i == 0 || set[i - 1] < set[i], ErrorKind::InvalidArgument,
            std::string("partition: ") + name + " set is not strictly increasing");
  }
}

}  // namespace

void TokenPartition::canonicalize() {
  std::sort(system.begin(), system.end());
  std::sort(vision.begin(), vision.end());
  std::sort(text.begin(), text.end());
  validate();
}

void TokenPartition::validate() const {
  check_set(system, seq_len, "system");
  check_set(vision, seq_len, "vision");
  check_set(text, seq_len, "text");
  std::vector<int> seen(seq_len, 0);
  for (const IndexSet* set : {&system, &vision, &text}) {
    for (std::size_t i : *set) {
      require(++seen[i] == 1, ErrorKind::InvalidArgument,
              "partition sets overlap at index " + std::to_string(i));
    }
  }
}

TokenRole TokenPartition::role_of(std::size_t index) const {
  auto in = [index](const IndexSet& s) { return std::binary_search(s.begin(), s.end(), index); };
  if (in(vision)) return TokenRole::Vision;
  if (in(text)) return TokenRole::Text;
  if (in(system)) return TokenRole::System;
  return TokenRole::Other;
}

std::vector<TokenRole> TokenPartition::roles() const {
  std::vector<TokenRole> out(seq_len, TokenRole::Other);
  for (std::size_t i : system) out[i] = TokenRole::System;
  for (std::size_t i : vision) out[i] = TokenRole::Vision;
  for (std::size_t i : text) out[i] = TokenRole::Text;
  return out;
}

TokenPartition TokenPartition::prefix(std::size_t boundary) const {
  auto cut = [boundary](const IndexSet& s) {
    return IndexSet(s.begin(), std::lower_bound(s.begin(), s.end(), boundary));
  };
  return {cut(system), cut(vision), cut(text), std::min(boundary, seq_len)};
}

TokenPartition TokenPartition::contiguous(std::size_t n_system, std::size_t n_vision,
                                          std::size_t n_text) {
  TokenPartition p;
  p.seq_len = n_system + n_vision + n_text;
  for (std::size_t i = 0; i < n_system; ++i) p.system.push_back(i);
  for (std::size_t i = 0; i < n_vision; ++i) p.vision.push_back(n_system + i);
  for (std::size_t i = 0; i < n_text; ++i) p.text.push_back(n_system + n_vision + i);
  return p;
}

AttentionRow AttentionTrace::attention_row(std::size_t layer, std::size_t head,
                                           std::size_t query_row) const {
  const HeadTrace& h = at(layer, head);
  AttentionRow row;
  const auto w = h.attention.row(query_row);
  row.weights.assign(w.begin(), w.end());
  row.query_pos = query_indices[query_row];
  row.causal_boundary = query_indices[query_row] + 1;
  return row;
}

std::optional<std::size_t> AttentionTrace::row_for_index(std::size_t index) const {
  for (std::size_t r = 0; r < query_indices.size(); ++r) {
    if (query_indices[r] == index) return r;
  }
  return std::nullopt;
}

void AttentionTrace::validate() const {
  require(layers > 0 && heads > 0, ErrorKind::InvalidArgument, "trace has no layers or heads");
  require(head_dim >= 2 && head_dim % 2 == 0, ErrorKind::InvalidArgument,
          "trace head_dim must be even");
  require(seq_len > 0, ErrorKind::InvalidArgument, "trace has empty sequence");
  require(query_positions.size() == query_indices.size(), ErrorKind::InvalidArgument,
          "trace query positions/indices length mismatch");
  require(!query_indices.empty(), ErrorKind::InvalidArgument, "trace has no query rows");
  require(key_positions.size() == seq_len, ErrorKind::InvalidArgument,
          "trace key positions length != seq_len");
  for (std::size_t qi : query_indices) {
    require(qi < seq_len, ErrorKind::InvalidArgument, "trace query index beyond seq_len");
  }
  for (double p : key_positions) {
    require(p >= 0.0, ErrorKind::InvalidArgument, "negative key position");
  }
  for (double p : query_positions) {
    require(p >= 0.0, ErrorKind::InvalidArgument, "negative query position");
  }
  require(head_traces.size() == layers * heads, ErrorKind::InvalidArgument,
          "trace head count mismatch");
  const std::size_t nq = query_indices.size();
  for (const HeadTrace& h : head_traces) {
    require(h.queries.rows() == nq && h.queries.cols() == head_dim, ErrorKind::InvalidArgument,
            "trace query tensor shape mismatch");
    require(h.keys.rows() == seq_len && h.keys.cols() == head_dim, ErrorKind::InvalidArgument,
            "trace key tensor shape mismatch");
    require(h.attention.rows() == nq && h.attention.cols() == seq_len,
            ErrorKind::InvalidArgument, "trace attention tensor shape mismatch");
  }
}

}  // namespace vlmprobe
