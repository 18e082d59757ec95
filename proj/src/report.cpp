#include "vlmprobe/report.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <json.hpp>

#include "vlmprobe/error.hpp"

namespace vlmprobe {

namespace {

std::string quote_json(const std::string& s) { return nlohmann::json(s).dump(); }

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string cell_csv(const Cell& cell) {
  if (const auto* i = std::get_if<std::int64_t>(&cell)) return std::to_string(*i);
  if (const auto* d = std::get_if<double>(&cell)) return format_double(*d);
  return csv_field(std::get<std::string>(cell));
}

std::string cell_json(const Cell& cell) {
  if (const auto* i = std::get_if<std::int64_t>(&cell)) return std::to_string(*i);
  if (const auto* d = std::get_if<double>(&cell)) {
    return std::isfinite(*d) ? format_double(*d) : "null";
  }
  return quote_json(std::get<std::string>(cell));
}

Cell index(std::size_t i) { return static_cast<std::int64_t>(i); }

}  // namespace

void Report::add_row(std::vector<Cell> row) {
  require(row.size() == columns.size(), ErrorKind::InvalidArgument,
          "report '" + name + "': row has " + std::to_string(row.size()) + " cells, expected " +
              std::to_string(columns.size()));
  rows.push_back(std::move(row));
}

ReportFormat parse_report_format(const std::string& name) {
  if (name == "csv") return ReportFormat::Csv;
  if (name == "json") return ReportFormat::Json;
  fail(ErrorKind::InvalidArgument, "unknown report format '" + name + "'; supported: csv, json");
}

ReportFormat report_format_for(const std::filesystem::path& path) {
  return path.extension() == ".json" ? ReportFormat::Json : ReportFormat::Csv;
}

std::string format_double(double value) {
  if (std::isnan(value)) return "nan";
  if (std::isinf(value)) return value > 0 ? "inf" : "-inf";
  if (value == 0.0) return "0";  // folds -0 as well
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, value, std::chars_format::general, 9);
  return std::string(buf, res.ptr);
}

std::string render_csv(const Report& report) {
  std::string out;
  for (std::size_t c = 0; c < report.columns.size(); ++c) {
    if (c) out += ',';
    out += csv_field(report.columns[c]);
  }
  out += '\n';
  for (const auto& row : report.rows) {
    for (std::size_t c = 0; c < row.size(); ++c) {
      if (c) out += ',';
      out += cell_csv(row[c]);
    }
    out += '\n';
  }
  return out;
}

std::string render_json(const Report& report) {
  std::string out = "{\n  \"report\": " + quote_json(report.name) + ",\n  \"meta\": {";
  for (std::size_t i = 0; i < report.meta.size(); ++i) {
    out += i ? ", " : "";
    out += quote_json(report.meta[i].first) + ": " + cell_json(report.meta[i].second);
  }
  out += "},\n  \"columns\": [";
  for (std::size_t c = 0; c < report.columns.size(); ++c) {
    out += c ? ", " : "";
    out += quote_json(report.columns[c]);
  }
  out += "],\n  \"rows\": [";
  for (std::size_t r = 0; r < report.rows.size(); ++r) {
    out += r ? ",\n    [" : "\n    [";
    for (std::size_t c = 0; c < report.rows[r].size(); ++c) {
      out += c ? ", " : "";
      out += cell_json(report.rows[r][c]);
    }
    out += "]";
  }
  out += report.rows.empty() ? "]\n}\n" : "\n  ]\n}\n";
  return out;
}

void emit_report(const Report& report, ReportFormat format, const std::filesystem::path& path) {
  std::ofstream file(path, std::ios::binary | std::ios::trunc);
  require(file.good(), ErrorKind::Io, "cannot open report file " + path.string());
  file << (format == ReportFormat::Json ? render_json(report) : render_csv(report));
  file.flush();
  require(file.good(), ErrorKind::Io, "failed writing report file " + path.string());
}

Report psi_report(double acc_original, double acc_permuted) {
  Report r{"psi", {"acc_original", "acc_permuted", "psi"}, {}, {}};
  r.add_row({acc_original, acc_permuted, psi(acc_original, acc_permuted)});
  return r;
}

Report cmb_report(const CmbHeatmap& heatmap) {
  Report r{"cmb", {"layer", "head", "value"}, {}, {}};
  r.meta = {{"include_system", std::string(heatmap.include_system ? "true" : "false")},
            {"samples", index(heatmap.samples)}};
  for (std::size_t l = 0; l < heatmap.values.rows(); ++l) {
    for (std::size_t h = 0; h < heatmap.values.cols(); ++h) {
      r.add_row({index(l), index(h), heatmap.values(l, h)});
    }
  }
  return r;
}

Report share_report(const AttentionShare& share) {
  Report r{"attention_share", {"group", "share"}, {}, {}};
  r.add_row({std::string("system"), share.system});
  r.add_row({std::string("vision"), share.vision});
  r.add_row({std::string("text"), share.text});
  return r;
}

Report rope_report(const RopeSensitivityProfile& p) {
  Report r{"rope_sensitivity",
           {"layer", "head", "alpha_v", "delta_alpha_v", "abs_delta_alpha_v", "g_v", "delta_g_v",
            "abs_delta_g_v", "balance_factor"},
           {},
           {}};
  r.meta = {{"delta", p.delta}};
  for (std::size_t l = 0; l < p.mean_alpha_v.rows(); ++l) {
    for (std::size_t h = 0; h < p.mean_alpha_v.cols(); ++h) {
      r.add_row({index(l), index(h), p.mean_alpha_v(l, h), p.mean_delta_alpha_v(l, h),
                 p.mean_abs_delta_alpha_v(l, h), p.mean_g_v(l, h), p.mean_delta_g_v(l, h),
                 p.mean_abs_delta_g_v(l, h), p.mean_balance(l, h)});
    }
  }
  return r;
}

Report entropy_report(const EntropyTable& table) {
  Report r{"entropy", {"layer", "entropy"}, {}, {}};
  r.meta = {{"overall", table.overall}, {"samples", index(table.samples)}};
  for (std::size_t l = 0; l < table.per_layer.size(); ++l) {
    r.add_row({index(l), table.per_layer[l]});
  }
  return r;
}

Report norm_report(const NormProfile& p) {
  Report r{"norms", {"layer", "vision_mean", "text_mean", "ratio"}, {}, {}};
  for (std::size_t l = 0; l < p.vision_mean.size(); ++l) {
    r.add_row({index(l), p.vision_mean[l], p.text_mean[l],
               p.ratio[l] ? Cell(*p.ratio[l]) : Cell(std::string())});
  }
  return r;
}

}  // namespace vlmprobe
