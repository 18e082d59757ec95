#include "vlmprobe/probes.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "vlmprobe/error.hpp"
#include "vlmprobe/rng.hpp"

namespace vlmprobe {

namespace {

/// Logits and their phase derivatives for one query. The derivative is zero
/// for keys outside the shifted set.
struct LogitJet {
  Vector logits;
  Vector dlogits;
};

void check_keys(std::span<const double> query, const Matrix& keys,
                std::span<const double> key_positions, const RopeConfig& cfg) {
  cfg.validate();
  require(query.size() == cfg.head_dim, ErrorKind::InvalidArgument,
          "query length " + std::to_string(query.size()) + " != head_dim " +
              std::to_string(cfg.head_dim));
  require(keys.cols() == cfg.head_dim, ErrorKind::InvalidArgument,
          "key width " + std::to_string(keys.cols()) + " != head_dim " +
              std::to_string(cfg.head_dim));
  require(keys.rows() > 0, ErrorKind::Precondition, "no attendable keys");
  require(key_positions.size() == keys.rows(), ErrorKind::InvalidArgument,
          "key positions length != key count");
}

std::vector<char> membership(std::span<const std::size_t> set, std::size_t n, const char* what) {
  std::vector<char> mask(n, 0);
  for (std::size_t i : set) {
    require(i < n, ErrorKind::InvalidArgument,
            std::string(what) + " index " + std::to_string(i) + " beyond " +
                std::to_string(n) + " keys");
    mask[i] = 1;
  }
  return mask;
}

LogitJet logit_jet(std::span<const double> query, double query_pos, const Matrix& keys,
                   std::span<const double> key_positions, const std::vector<char>& shifted,
                   const RopeConfig& cfg) {
  const Vector q = rope_rotate(query, query_pos, cfg);
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(cfg.head_dim));
  LogitJet jet{Vector(keys.rows()), Vector(keys.rows(), 0.0)};
  for (std::size_t j = 0; j < keys.rows(); ++j) {
    const Vector k = rope_rotate(keys.row(j), key_positions[j], cfg);
    jet.logits[j] = dot(q, k) * inv_sqrt_d;
    if (shifted[j]) jet.dlogits[j] = dot(q, apply_rope_generator(k, cfg)) * inv_sqrt_d;
  }
  return jet;
}

/// (vision mass, everything else), summed separately so alpha_V = 1 exactly
/// when no other key exists.
std::pair<double, double> split_mass(const Vector& weights, const std::vector<char>& vision) {
  double v = 0.0;
  double t = 0.0;
  for (std::size_t j = 0; j < weights.size(); ++j) (vision[j] ? v : t) += weights[j];
  return {v, t};
}

std::vector<std::size_t> select_rows(const AttentionTrace& trace, const TokenPartition& partition,
                                     QuerySelection selection) {
  std::vector<std::size_t> rows;
  switch (selection) {
    case QuerySelection::Last:
      rows.push_back(trace.query_count() - 1);
      break;
    case QuerySelection::All:
      for (std::size_t r = 0; r < trace.query_count(); ++r) rows.push_back(r);
      break;
    case QuerySelection::TextQueries:
      for (std::size_t r = 0; r < trace.query_count(); ++r) {
        if (partition.role_of(trace.query_indices[r]) == TokenRole::Text) rows.push_back(r);
      }
      require(!rows.empty(), ErrorKind::Precondition, "trace has no query rows at text positions");
      break;
  }
  return rows;
}

void check_trace(const AttentionTrace& trace, const TokenPartition& partition) {
  require(!trace.head_traces.empty() && trace.query_count() > 0, ErrorKind::Precondition,
          "empty trace");
  trace.validate();
  require(partition.seq_len == trace.seq_len, ErrorKind::InvalidArgument,
          "partition seq_len " + std::to_string(partition.seq_len) + " != trace seq_len " +
              std::to_string(trace.seq_len));
  partition.validate();
}

bool has_vision_before(const TokenPartition& partition, std::size_t boundary) {
  return !partition.vision.empty() && partition.vision.front() < boundary;
}

}  // namespace

double psi(double acc_original, double acc_permuted) {
  require(acc_original > 0.0, ErrorKind::Precondition,
          "psi: original accuracy must be > 0, got " + std::to_string(acc_original));
  return (acc_original - acc_permuted) / acc_original;
}

Matrix permute_vision_tokens(const Matrix& embeddings, const TokenPartition& partition,
                             std::uint64_t seed) {
  partition.validate();
  require(!partition.vision.empty(), ErrorKind::Precondition, "empty vision set");
  require(embeddings.rows() == partition.seq_len, ErrorKind::InvalidArgument,
          "embedding rows " + std::to_string(embeddings.rows()) + " != seq_len " +
              std::to_string(partition.seq_len));
  std::vector<std::size_t> order(partition.vision.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed);
  for (std::size_t i = order.size(); i > 1; --i) {
    std::swap(order[i - 1], order[rng.below(i)]);
  }
  Matrix out = embeddings;
  for (std::size_t i = 0; i < order.size(); ++i) {
    out.set_row(partition.vision[i], embeddings.row(partition.vision[order[i]]));
  }
  return out;
}

double cmb_head(const AttentionRow& attn, const TokenPartition& partition, bool include_system) {
  require(attn.weights.size() == partition.seq_len, ErrorKind::InvalidArgument,
          "attention row length " + std::to_string(attn.weights.size()) + " != seq_len " +
              std::to_string(partition.seq_len));
  double v = 0.0;
  double t = 0.0;
  double s = 0.0;
  for (std::size_t i : partition.vision) v += attn.weights[i];
  for (std::size_t i : partition.text) t += attn.weights[i];
  if (include_system) {
    for (std::size_t i : partition.system) s += attn.weights[i];
  }
  const double denom = v + t + s;
  require(denom > 0.0, ErrorKind::Precondition, "no attendable modality mass");
  return std::clamp(v / denom, 0.0, 1.0);
}

AttentionShare attention_share(const AttentionRow& attn, const TokenPartition& partition) {
  require(attn.weights.size() == partition.seq_len, ErrorKind::InvalidArgument,
          "attention row length != seq_len");
  AttentionShare share;
  for (std::size_t i : partition.system) share.system += attn.weights[i];
  for (std::size_t i : partition.vision) share.vision += attn.weights[i];
  for (std::size_t i : partition.text) share.text += attn.weights[i];
  const double total = share.system + share.vision + share.text;
  require(total > 0.0, ErrorKind::Precondition, "no attendable modality mass");
  share.system /= total;
  share.vision /= total;
  share.text /= total;
  return share;
}

AttentionShare attention_share(const AttentionTrace& trace, const TokenPartition& partition) {
  check_trace(trace, partition);
  AttentionShare sum;
  std::size_t n = 0;
  for (std::size_t l = 0; l < trace.layers; ++l) {
    for (std::size_t h = 0; h < trace.heads; ++h) {
      for (std::size_t r = 0; r < trace.query_count(); ++r) {
        const AttentionShare s = attention_share(trace.attention_row(l, h, r), partition);
        sum.system += s.system;
        sum.vision += s.vision;
        sum.text += s.text;
        ++n;
      }
    }
  }
  const double inv = 1.0 / static_cast<double>(n);
  return {sum.system * inv, sum.vision * inv, sum.text * inv};
}

CmbAccumulator::CmbAccumulator(std::size_t layers, std::size_t heads, bool include_system)
    : layers_(layers),
      heads_(heads),
      include_system_(include_system),
      sums_(layers * heads, 0.0),
      counts_(layers * heads, 0) {}

void CmbAccumulator::add(std::size_t layer, std::size_t head, double value) {
  require(layer < layers_ && head < heads_, ErrorKind::InvalidArgument,
          "CMB cell out of range");
  sums_[layer * heads_ + head] += value;
  ++counts_[layer * heads_ + head];
}

void CmbAccumulator::merge(const CmbAccumulator& other) {
  require(other.layers_ == layers_ && other.heads_ == heads_ &&
              other.include_system_ == include_system_,
          ErrorKind::InvalidArgument, "cannot merge CMB accumulators of different shape");
  for (std::size_t i = 0; i < sums_.size(); ++i) {
    sums_[i] += other.sums_[i];
    counts_[i] += other.counts_[i];
  }
}

CmbHeatmap CmbAccumulator::heatmap() const {
  CmbHeatmap map{Matrix(layers_, heads_), include_system_, 0};
  std::size_t min_count = counts_.empty() ? 0 : counts_.front();
  for (std::size_t i = 0; i < sums_.size(); ++i) {
    map.values.data()[i] = counts_[i] ? std::clamp(sums_[i] / counts_[i], 0.0, 1.0) : 0.0;
    min_count = std::min(min_count, counts_[i]);
  }
  map.samples = min_count;
  return map;
}

CmbHeatmap cmb_heatmap(const AttentionTrace& trace, const TokenPartition& partition,
                       bool include_system, QuerySelection selection) {
  check_trace(trace, partition);
  CmbAccumulator acc(trace.layers, trace.heads, include_system);
  for (std::size_t r : select_rows(trace, partition, selection)) {
    for (std::size_t l = 0; l < trace.layers; ++l) {
      for (std::size_t h = 0; h < trace.heads; ++h) {
        acc.add(l, h, cmb_head(trace.attention_row(l, h, r), partition, include_system));
      }
    }
  }
  return acc.heatmap();
}

RopeProbeResult rope_probe(std::span<const double> query, double query_pos, const Matrix& keys,
                           std::span<const double> key_positions,
                           const TokenPartition& partition, double delta,
                           const RopeConfig& cfg) {
  require(!std::isnan(delta), ErrorKind::InvalidArgument, "rope probe delta is NaN");
  check_keys(query, keys, key_positions, cfg);
  require(!partition.vision.empty(), ErrorKind::Precondition, "empty vision set");
  const auto vision = membership(partition.vision, keys.rows(), "vision");

  const LogitJet base = logit_jet(query, query_pos, keys, key_positions, vision, cfg);
  const Vector alpha = softmax(base.logits);
  const auto [mass_v, mass_t] = split_mass(alpha, vision);
  require(mass_v > 0.0, ErrorKind::Precondition, "vision attention mass is zero; g_V undefined");

  const ShiftedKeys shifted = phase_shift_keys(keys, key_positions, partition.vision, delta, cfg);
  const Vector shifted_logits =
      attention_logits(query, shifted.keys, query_pos, shifted.positions, cfg);
  const Vector alpha_shifted = softmax(shifted_logits);
  const auto [shift_v, shift_t] = split_mass(alpha_shifted, vision);

  RopeProbeResult out;
  out.alpha_v_base = mass_v / (mass_v + mass_t);
  out.alpha_v_shifted = shift_v / (shift_v + shift_t);
  out.delta_alpha_v = out.alpha_v_shifted - out.alpha_v_base;
  double g = 0.0;
  double dg = 0.0;
  for (std::size_t v : partition.vision) {
    g += alpha[v] * base.dlogits[v];
    dg += alpha[v] * (shifted_logits[v] - base.logits[v]);
  }
  out.g_v = g / mass_v;
  out.delta_g_v = dg / mass_v;
  out.balance_factor = out.alpha_v_base * (mass_t / (mass_v + mass_t));
  return out;
}

GroupPhaseTerms group_phase_terms(std::span<const double> query, double query_pos,
                                  const Matrix& keys, std::span<const double> key_positions,
                                  const TokenPartition& partition,
                                  std::span<const std::size_t> shift_set,
                                  const RopeConfig& cfg) {
  check_keys(query, keys, key_positions, cfg);
  require(!partition.vision.empty(), ErrorKind::Precondition, "empty vision set");
  const auto vision = membership(partition.vision, keys.rows(), "vision");
  const auto shifted = membership(shift_set, keys.rows(), "shift set");

  const LogitJet jet = logit_jet(query, query_pos, keys, key_positions, shifted, cfg);
  const Vector alpha = softmax(jet.logits);
  double mass_v = 0.0;
  double mass_t = 0.0;
  double s_v = 0.0;
  double s_t = 0.0;
  for (std::size_t j = 0; j < alpha.size(); ++j) {
    if (vision[j]) {
      mass_v += alpha[j];
      s_v += alpha[j] * jet.dlogits[j];
    } else {
      mass_t += alpha[j];
      s_t += alpha[j] * jet.dlogits[j];
    }
  }
  require(mass_v > 0.0, ErrorKind::Precondition, "vision attention mass is zero; g_V undefined");
  const double total = mass_v + mass_t;
  GroupPhaseTerms out;
  out.alpha_v = mass_v / total;
  out.alpha_t = mass_t / total;
  out.g_v = s_v / mass_v;
  out.g_t = mass_t > 0.0 ? s_t / mass_t : 0.0;
  // alpha_V alpha_T (g_V - g_T) without dividing by the group masses.
  out.d_alpha_v = (out.alpha_t * s_v - out.alpha_v * s_t) / total;
  return out;
}

double group_derivative_analytic(std::span<const double> query, double query_pos,
                                 const Matrix& keys, std::span<const double> key_positions,
                                 const TokenPartition& partition, const RopeConfig& cfg) {
  return group_phase_terms(query, query_pos, keys, key_positions, partition, partition.vision,
                           cfg)
      .d_alpha_v;
}

double single_key_derivative(std::span<const double> query, double query_pos,
                             const Matrix& keys, std::span<const double> key_positions,
                             std::size_t key_index, std::span<const std::size_t> shift_set,
                             const RopeConfig& cfg) {
  check_keys(query, keys, key_positions, cfg);
  require(key_index < keys.rows(), ErrorKind::InvalidArgument,
          "key index " + std::to_string(key_index) + " out of range");
  const auto shifted = membership(shift_set, keys.rows(), "shift set");
  const LogitJet jet = logit_jet(query, query_pos, keys, key_positions, shifted, cfg);
  const Vector alpha = softmax(jet.logits);
  double mean = 0.0;
  for (std::size_t j = 0; j < alpha.size(); ++j) mean += alpha[j] * jet.dlogits[j];
  return alpha[key_index] * (jet.dlogits[key_index] - mean);
}

double residual_phase_sensitivity(std::span<const double> residual,
                                  std::span<const double> attn_out,
                                  std::span<const double> d_attn_dphi) {
  require(!residual.empty() && residual.size() == attn_out.size() &&
              residual.size() == d_attn_dphi.size(),
          ErrorKind::InvalidArgument, "residual, attention output, and derivative lengths differ");
  const Vector h = add(residual, attn_out);
  const double norm = l2_norm(h);
  require(norm > 0.0, ErrorKind::Precondition, "hidden state h is zero; direction undefined");
  const Vector u = scale(h, 1.0 / norm);
  const double along = dot(u, d_attn_dphi);
  Vector projected(d_attn_dphi.begin(), d_attn_dphi.end());
  for (std::size_t i = 0; i < projected.size(); ++i) projected[i] -= along * u[i];
  return l2_norm(projected) / norm;
}

double RopeSensitivityProfile::layer_abs_delta_alpha_v(std::size_t layer) const {
  const auto row = mean_abs_delta_alpha_v.row(layer);
  double sum = 0.0;
  for (double x : row) sum += x;
  return row.empty() ? 0.0 : sum / static_cast<double>(row.size());
}

RopeSensitivityProfile rope_sensitivity(const AttentionTrace& trace,
                                        const TokenPartition& partition, const RopeConfig& cfg,
                                        double delta, QuerySelection selection) {
  check_trace(trace, partition);
  require(cfg.head_dim == trace.head_dim, ErrorKind::InvalidArgument,
          "rope head_dim differs from trace head_dim");
  const std::size_t L = trace.layers;
  const std::size_t H = trace.heads;
  RopeSensitivityProfile p;
  p.delta = delta;
  for (Matrix* m : {&p.mean_alpha_v, &p.mean_delta_alpha_v, &p.mean_abs_delta_alpha_v, &p.mean_g_v,
                    &p.mean_delta_g_v, &p.mean_abs_delta_g_v, &p.mean_balance}) {
    *m = Matrix(L, H);
  }
  p.samples.assign(L, 0);

  std::vector<std::size_t> rows;
  for (std::size_t r : select_rows(trace, partition, selection)) {
    if (has_vision_before(partition, trace.query_indices[r] + 1)) rows.push_back(r);
  }
  require(!rows.empty(), ErrorKind::Precondition,
          "no selected query row attends to any vision token");

  for (std::size_t l = 0; l < L; ++l) {
    for (std::size_t h = 0; h < H; ++h) {
      const HeadTrace& ht = trace.at(l, h);
      for (std::size_t r : rows) {
        const std::size_t boundary = trace.query_indices[r] + 1;
        const RopeProbeResult res = rope_probe(
            ht.queries.row(r), trace.query_positions[r], ht.keys.top_rows(boundary),
            std::span(trace.key_positions).first(boundary), partition.prefix(boundary), delta,
            cfg);
        p.mean_alpha_v(l, h) += res.alpha_v_base;
        p.mean_delta_alpha_v(l, h) += res.delta_alpha_v;
        p.mean_abs_delta_alpha_v(l, h) += std::abs(res.delta_alpha_v);
        p.mean_g_v(l, h) += res.g_v;
        p.mean_delta_g_v(l, h) += res.delta_g_v;
        p.mean_abs_delta_g_v(l, h) += std::abs(res.delta_g_v);
        p.mean_balance(l, h) += res.balance_factor;
      }
      p.samples[l] += rows.size();
    }
  }
  const double inv = 1.0 / static_cast<double>(rows.size());
  for (Matrix* m : {&p.mean_alpha_v, &p.mean_delta_alpha_v, &p.mean_abs_delta_alpha_v, &p.mean_g_v,
                    &p.mean_delta_g_v, &p.mean_abs_delta_g_v, &p.mean_balance}) {
    for (double& x : m->data()) x *= inv;
  }
  return p;
}

double attention_entropy(const AttentionRow& attn, const TokenPartition& partition) {
  const std::size_t limit =
      attn.causal_boundary > 0 ? std::min(attn.causal_boundary, attn.weights.size())
                               : attn.weights.size();
  double mass = 0.0;
  std::size_t count = 0;
  for (std::size_t v : partition.vision) {
    require(v < attn.weights.size(), ErrorKind::InvalidArgument,
            "vision index beyond attention row");
    if (v >= limit) continue;
    mass += attn.weights[v];
    ++count;
  }
  require(count > 0 && mass > 0.0, ErrorKind::Precondition, "zero vision attention mass");
  if (count == 1) return 0.0;
  double h = 0.0;
  for (std::size_t v : partition.vision) {
    if (v >= limit) continue;
    const double p = attn.weights[v] / mass;
    if (p > 0.0) h -= p * std::log(p);
  }
  return std::clamp(h / std::log(static_cast<double>(count)), 0.0, 1.0);
}

EntropyTable entropy_table(const AttentionTrace& trace, const TokenPartition& partition,
                           QuerySelection selection) {
  check_trace(trace, partition);
  std::vector<std::size_t> rows;
  for (std::size_t r : select_rows(trace, partition, selection)) {
    if (has_vision_before(partition, trace.query_indices[r] + 1)) rows.push_back(r);
  }
  require(!rows.empty(), ErrorKind::Precondition,
          "no selected query row attends to any vision token");
  EntropyTable table;
  table.per_layer.assign(trace.layers, 0.0);
  for (std::size_t l = 0; l < trace.layers; ++l) {
    for (std::size_t h = 0; h < trace.heads; ++h) {
      for (std::size_t r : rows) {
        table.per_layer[l] += attention_entropy(trace.attention_row(l, h, r), partition);
      }
    }
    table.per_layer[l] /= static_cast<double>(trace.heads * rows.size());
    table.overall += table.per_layer[l];
  }
  table.overall /= static_cast<double>(trace.layers);
  table.samples = trace.layers * trace.heads * rows.size();
  return table;
}

NormProfile norm_profile(std::span<const Matrix> hidden_states, const TokenPartition& partition) {
  require(!hidden_states.empty(), ErrorKind::InvalidArgument, "no hidden states");
  partition.validate();
  require(!partition.vision.empty(), ErrorKind::Precondition, "empty vision group");
  require(!partition.text.empty(), ErrorKind::Precondition, "empty text group");
  NormProfile out;
  for (std::size_t l = 0; l < hidden_states.size(); ++l) {
    const Matrix& hs = hidden_states[l];
    require(hs.rows() == partition.seq_len, ErrorKind::InvalidArgument,
            "layer " + std::to_string(l) + " has " + std::to_string(hs.rows()) +
                " rows, expected seq_len " + std::to_string(partition.seq_len));
    auto mean_norm = [&hs](const IndexSet& set) {
      double sum = 0.0;
      for (std::size_t i : set) sum += l2_norm(hs.row(i));
      return sum / static_cast<double>(set.size());
    };
    const double v = mean_norm(partition.vision);
    const double t = mean_norm(partition.text);
    out.vision_mean.push_back(v);
    out.text_mean.push_back(t);
    out.ratio.push_back(t > 0.0 ? std::optional<double>(v / t) : std::nullopt);
  }
  return out;
}

}  // namespace vlmprobe
