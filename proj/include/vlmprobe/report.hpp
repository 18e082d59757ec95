#pragma once

// Tabular probe reports and their CSV / JSON serialization.
//
// Output is locale-independent: floats go through std::to_chars at nine
// significant digits, columns keep insertion order, and metadata keys are
// written in insertion order too, so emitting a report twice yields identical
// bytes.

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "vlmprobe/probes.hpp"

namespace vlmprobe {

using Cell = std::variant<std::int64_t, double, std::string>;

struct Report {
  std::string name;
  std::vector<std::string> columns;
  std::vector<std::vector<Cell>> rows;
  std::vector<std::pair<std::string, Cell>> meta;

  void add_row(std::vector<Cell> row);
};

enum class ReportFormat { Csv, Json };

ReportFormat parse_report_format(const std::string& name);
/// Picks the format from the file extension (.json, otherwise CSV).
ReportFormat report_format_for(const std::filesystem::path& path);

std::string format_double(double value);

std::string render_csv(const Report& report);
std::string render_json(const Report& report);
void emit_report(const Report& report, ReportFormat format, const std::filesystem::path& path);

Report psi_report(double acc_original, double acc_permuted);
/// layer,head,value triples; a heatmap without cells gives a header-only table.
Report cmb_report(const CmbHeatmap& heatmap);
Report share_report(const AttentionShare& share);
Report rope_report(const RopeSensitivityProfile& profile);
Report entropy_report(const EntropyTable& table);
Report norm_report(const NormProfile& profile);

}  // namespace vlmprobe
