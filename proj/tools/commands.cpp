#include "commands.hpp"

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "vlmprobe/error.hpp"
#include "vlmprobe/interventions.hpp"
#include "vlmprobe/probes.hpp"
#include "vlmprobe/report.hpp"
#include "vlmprobe/scene2ds.hpp"
#include "vlmprobe/toy_model.hpp"
#include "vlmprobe/trace_io.hpp"
#include "vlmprobe/verify.hpp"

namespace vlmprobe::cli {
namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;

std::string slurp(const fs::path& path) {
  std::ifstream file(path, std::ios::binary);
  require(file.good(), ErrorKind::Io, "cannot open " + path.string());
  std::stringstream ss;
  ss << file.rdbuf();
  return ss.str();
}

void emit(const Report& report, const fs::path& path) {
  emit_report(report, report_format_for(path), path);
  std::cout << "wrote " << path.string() << "\n";
}

// Matrices on disk are plain CSV: one row per line, comma-separated numbers,
// written at full round-trip precision.
Matrix read_matrix_csv(const fs::path& path) {
  std::istringstream in(slurp(path));
  std::vector<std::vector<double>> rows;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<double> row;
    std::size_t start = 0;
    while (start <= line.size()) {
      const std::size_t comma = std::min(line.find(',', start), line.size());
      const char* first = line.data() + start;
      const char* last = line.data() + comma;
      while (first < last && *first == ' ') ++first;
      double v = 0.0;
      const auto [ptr, ec] = std::from_chars(first, last, v);
      require(ec == std::errc() && ptr == last, ErrorKind::Format,
              path.string() + ":" + std::to_string(line_no) + ": not a number");
      row.push_back(v);
      start = comma + 1;
    }
    require(rows.empty() || row.size() == rows.front().size(), ErrorKind::Format,
            path.string() + ":" + std::to_string(line_no) + ": ragged row");
    rows.push_back(std::move(row));
  }
  require(!rows.empty(), ErrorKind::Format, path.string() + ": empty matrix");
  return Matrix::from_rows(rows);
}

void write_matrix_csv(const Matrix& m, const fs::path& path) {
  std::string out;
  char buf[32];
  for (std::size_t r = 0; r < m.rows(); ++r) {
    for (std::size_t c = 0; c < m.cols(); ++c) {
      if (c) out += ',';
      const auto res = std::to_chars(buf, buf + sizeof buf, m(r, c));
      out.append(buf, res.ptr);
    }
    out += '\n';
  }
  std::ofstream file(path, std::ios::binary | std::ios::trunc);
  require(file.good(), ErrorKind::Io, "cannot open " + path.string() + " for writing");
  file << out;
  require(file.good(), ErrorKind::Io, "failed writing " + path.string());
  std::cout << "wrote " << path.string() << "\n";
}

QuerySelection parse_queries(const std::string& s) {
  if (s == "last") return QuerySelection::Last;
  if (s == "text") return QuerySelection::TextQueries;
  if (s == "all") return QuerySelection::All;
  fail(ErrorKind::InvalidArgument, "unknown query selection '" + s + "'; supported: last, text, all");
}

TraceDtype parse_dtype(const std::string& s) {
  if (s == "f64") return TraceDtype::F64;
  if (s == "f32") return TraceDtype::F32;
  fail(ErrorKind::InvalidArgument, "unknown dtype '" + s + "'; supported: f32, f64");
}

/// Accuracy from an evaluation report (meta.accuracy) or {"accuracy": x}.
double read_accuracy(const fs::path& path) {
  json j;
  try {
    j = json::parse(slurp(path));
    if (j.contains("meta") && j["meta"].contains("accuracy")) return j["meta"]["accuracy"].get<double>();
    if (j.contains("accuracy")) return j["accuracy"].get<double>();
  } catch (const json::exception& e) {
    fail(ErrorKind::Format, path.string() + ": " + e.what());
  }
  fail(ErrorKind::Format, path.string() + ": no accuracy field (expected meta.accuracy or accuracy)");
}

/// Predictions as JSON lines {"id": ..., "answer": ...} or one JSON object
/// mapping question id to answer.
std::map<std::string, std::string> read_predictions(const fs::path& path) {
  const std::string text = slurp(path);
  std::map<std::string, std::string> out;
  try {
    const json whole = json::parse(text, nullptr, false);
    if (!whole.is_discarded() && whole.is_object() && !whole.contains("id")) {
      for (const auto& [k, v] : whole.items()) out[k] = v.get<std::string>();
      return out;
    }
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      const json j = json::parse(line);
      out[j.at("id").get<std::string>()] = j.at("answer").get<std::string>();
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::Format, "malformed predictions file " + path.string() + ": " + e.what());
  }
  return out;
}

ToyConfig toy_config(const std::string& config_path, std::uint64_t seed) {
  ToyConfig cfg = config_path.empty() ? ToyConfig{} : ToyConfig::load(config_path);
  cfg.seed = seed;
  cfg.validate();
  return cfg;
}

TraceBundle load_trace(const std::string& path) {
  TraceBundle b = read_trace(path);
  if (b.renormalized_rows > 0) {
    std::cout << "note: renormalized " << b.renormalized_rows << " attention rows\n";
  }
  return b;
}

std::vector<std::size_t> parse_counts(const std::string& s, std::size_t expected,
                                      const std::string& what) {
  std::vector<std::size_t> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    const std::size_t comma = std::min(s.find(',', start), s.size());
    std::size_t v = 0;
    const auto [ptr, ec] = std::from_chars(s.data() + start, s.data() + comma, v);
    require(ec == std::errc() && ptr == s.data() + comma, ErrorKind::InvalidArgument,
            what + ": '" + s + "' is not a comma-separated list of integers");
    out.push_back(v);
    start = comma + 1;
  }
  require(expected == 0 || out.size() == expected, ErrorKind::InvalidArgument,
          what + ": expected " + std::to_string(expected) + " values");
  return out;
}

// ---------------------------------------------------------------------------

void add_gen2ds(CLI::App& app) {
  struct Opts {
    std::uint64_t seed = 0;
    std::string out;
    std::string objects = "2..6";
    std::size_t per_category = 100;
    std::size_t resolution = kDefaultResolution;
    bool png = false;
    bool grid = false;
    bool twins = false;
  };
  auto o = std::make_shared<Opts>();
  auto* cmd = app.add_subcommand("gen2ds", "Generate the 2DS spatial-reasoning corpus");
  cmd->add_option("--seed", o->seed, "Generation seed")->required();
  cmd->add_option("--out", o->out, "Output directory")->required();
  cmd->add_option("--objects", o->objects, "Object count or range, e.g. 4 or 2..6");
  cmd->add_option("--scenes-per-category", o->per_category, "Scenes per object count");
  cmd->add_option("--resolution", o->resolution, "Image side in pixels");
  cmd->add_flag("--png", o->png, "Also write PNG images");
  cmd->add_flag("--grid", o->grid, "Place objects at 6x6 grid cell centers");
  cmd->add_flag("--validate-twins", o->twins,
                "Check that every relative question has an answer-flipping twin scene");
  cmd->callback([o] {
    DatasetConfig cfg;
    cfg.seed = o->seed;
    cfg.scenes_per_category = o->per_category;
    cfg.grid = o->grid;
    cfg.validate_twins = o->twins;
    const std::size_t dots = o->objects.find("..");
    const std::string lo = o->objects.substr(0, dots);
    const std::string hi = dots == std::string::npos ? lo : o->objects.substr(dots + 2);
    const auto a = parse_counts(lo, 1, "--objects");
    const auto b = parse_counts(hi, 1, "--objects");
    cfg.min_objects = a[0];
    cfg.max_objects = b[0];
    const Dataset ds = generate_dataset(cfg);
    write_dataset(ds, o->out, o->resolution, o->png);
    std::cout << "generated " << ds.scenes.size() << " scenes, " << ds.questions.size()
              << " questions\nwrote " << (fs::path(o->out) / "manifest.json").string() << "\n";
  });
}

void add_eval2ds(CLI::App& app) {
  struct Opts {
    std::string pred, manifest, report;
  };
  auto o = std::make_shared<Opts>();
  auto* cmd = app.add_subcommand("eval2ds", "Score predictions against a 2DS manifest");
  cmd->add_option("--pred", o->pred, "Predictions (JSON lines of {id, answer}, or an id->answer object)")
      ->required();
  cmd->add_option("--manifest", o->manifest, "manifest.json written by gen2ds")->required();
  cmd->add_option("--report", o->report, "Accuracy table (.csv or .json)")->required();
  cmd->callback([o] {
    const Dataset ds = read_dataset(o->manifest);
    const EvalTable t = evaluate_answers(read_predictions(o->pred), ds.questions);
    Report r{"2ds_accuracy", {"category", "correct", "total", "accuracy"}, {}, {}};
    auto add = [&r](const CellScore& c) {
      r.add_row({c.category, static_cast<std::int64_t>(c.correct),
                 static_cast<std::int64_t>(c.total), 100.0 * c.accuracy()});
    };
    for (const CellScore& c : t.cells) add(c);
    add(t.overall);
    r.meta = {{"accuracy", t.overall.accuracy()}, {"missing", static_cast<std::int64_t>(t.missing)}};
    emit(r, o->report);
    std::cout << "overall accuracy " << format_double(100.0 * t.overall.accuracy()) << "%";
    if (t.missing) std::cout << " (" << t.missing << " questions without a prediction)";
    std::cout << "\n";
  });
}

void add_toy(CLI::App& app) {
  auto* toy = app.add_subcommand("toy", "Run the instrumented toy decoder");
  toy->require_subcommand(1);

  struct RunOpts {
    std::uint64_t seed = 0;
    std::string config;
    double skew = 1.0;
    std::size_t question = 0;
    bool normalize = false;
    double target_rms = 0.83;
    std::string trace;
    std::string dtype = "f64";
    std::string norms;
  };
  auto r = std::make_shared<RunOpts>();
  auto* run = toy->add_subcommand("run", "Forward one 2DS-lite question and write its trace");
  run->add_option("--seed", r->seed, "Model and scene seed")->required();
  run->add_option("--config", r->config, "ToyConfig JSON file");
  run->add_option("--skew", r->skew, "Vision input RMS relative to text");
  run->add_option("--question", r->question, "Index into the 2DS-lite set");
  run->add_flag("--normalize", r->normalize, "RMS-normalize vision rows before the forward pass");
  run->add_option("--target-rms", r->target_rms, "Target RMS for --normalize");
  run->add_option("--trace", r->trace, "Output trace file")->required();
  run->add_option("--dtype", r->dtype, "Payload precision: f64 or f32");
  run->add_option("--norms", r->norms, "Also write the per-layer norm profile (.csv or .json)");
  run->callback([r] {
    const ToyConfig cfg = toy_config(r->config, r->seed);
    const ToyModel model = ToyModel::build(cfg);
    const Dataset lite = lite_dataset(r->seed, r->question + 1);
    require(r->question < lite.questions.size(), ErrorKind::InvalidArgument,
            "question index out of range");
    const Question& q = lite.questions[r->question];
    const TokenPartition part = cfg.partition();
    Matrix inputs = model.assemble(lite.scene(q.scene_id), q, r->skew);
    if (r->normalize) {
      inputs = normalize_vision(inputs, part, NormCalibration{r->target_rms, CalibrationSource::Fixed});
    }
    const ForwardRecord rec = model.forward(inputs, part);
    write_trace(to_bundle(model, rec, part), r->trace, parse_dtype(r->dtype));
    std::cout << "question " << q.id << ": " << q.text << "\nwrote " << r->trace << "\n";
    if (!r->norms.empty()) emit(norm_report(norm_profile(rec.hidden_states, part)), r->norms);
  });

  struct EvalOpts {
    std::uint64_t seed = 0;
    std::string config;
    std::size_t questions = 200;
    std::string pipeline = "compress";
    std::optional<std::uint64_t> permute_seed;
    double skew = 1.0;
    std::string report;
  };
  auto e = std::make_shared<EvalOpts>();
  auto* ev = toy->add_subcommand("eval", "Accuracy of a toy pipeline on 2DS-lite");
  ev->add_option("--seed", e->seed, "Model and dataset seed")->required();
  ev->add_option("--config", e->config, "ToyConfig JSON file");
  ev->add_option("--questions", e->questions, "Number of questions");
  ev->add_option("--pipeline", e->pipeline,
                 "compress (vision pooled to one token), full, or positional (index readout)");
  ev->add_option("--permute-seed", e->permute_seed, "Shuffle vision tokens with this seed");
  ev->add_option("--skew", e->skew, "Vision input RMS relative to text");
  ev->add_option("--report", e->report, "Per-question results (.csv or .json)")->required();
  ev->callback([e] {
    const ToyConfig cfg = toy_config(e->config, e->seed);
    const ToyModel model = ToyModel::build(cfg);
    std::unique_ptr<Predictor> pred;
    if (e->pipeline == "compress" || e->pipeline == "full") {
      pred = std::make_unique<ToyModelPredictor>(model, e->pipeline == "compress");
    } else if (e->pipeline == "positional") {
      pred = std::make_unique<PositionalReadout>(model, e->skew);
    } else {
      fail(ErrorKind::InvalidArgument,
           "unknown pipeline '" + e->pipeline + "'; supported: compress, full, positional");
    }
    const Dataset lite = lite_dataset(e->seed, e->questions);
    Report rep{"toy_eval", {"question", "category", "gold", "prediction", "correct"}, {}, {}};
    const TokenPartition part = cfg.partition();
    std::size_t correct = 0;
    // Same per-question shuffle as evaluate(), kept inline to record predictions.
    for (std::size_t i = 0; i < lite.questions.size(); ++i) {
      const Question& q = lite.questions[i];
      Matrix inputs = model.assemble(lite.scene(q.scene_id), q, e->skew);
      if (e->permute_seed) inputs = permute_vision_tokens(inputs, part, Rng::derive(*e->permute_seed, i));
      const std::string a = pred->answer(inputs, part, q);
      const bool ok = exact_match(a, q);
      correct += ok;
      rep.add_row({q.id, q.category(), q.gold, a, static_cast<std::int64_t>(ok)});
    }
    const double acc = static_cast<double>(correct) / static_cast<double>(lite.questions.size());
    rep.meta = {{"pipeline", e->pipeline},
                {"accuracy", acc},
                {"correct", static_cast<std::int64_t>(correct)},
                {"total", static_cast<std::int64_t>(lite.questions.size())},
                {"permute_seed", e->permute_seed ? std::to_string(*e->permute_seed) : std::string("none")}};
    emit(rep, e->report);
    std::cout << e->pipeline << " pipeline: " << correct << "/" << lite.questions.size()
              << " correct\n";
  });

  struct MechOpts {
    std::uint64_t seed = 0;
    std::string config;
    std::size_t seeds = 64;
    std::size_t scenes = 8;
    double skew = 100.0;
    double target_rms = 0.83;
    std::size_t layers = 2;
    double delta = 1.0;
    std::string report;
  };
  auto m = std::make_shared<MechOpts>();
  auto* mech = toy->add_subcommand(
      "mechanism", "Early-layer RoPE sensitivity at skew 1, skewed, and skewed then normalized");
  mech->add_option("--seed", m->seed, "First model seed")->required();
  mech->add_option("--config", m->config, "ToyConfig JSON file");
  mech->add_option("--seeds", m->seeds, "Number of model seeds");
  mech->add_option("--scenes", m->scenes, "Scenes per seed");
  mech->add_option("--skew", m->skew, "Skew of the skewed condition");
  mech->add_option("--target-rms", m->target_rms, "Normalization target");
  mech->add_option("--layers", m->layers, "Early layers averaged");
  mech->add_option("--delta", m->delta, "RoPE probe shift in positions");
  mech->add_option("--report", m->report, "Per-seed results (.csv or .json)")->required();
  mech->callback([m] {
    MechanismConfig cfg;
    cfg.model = toy_config(m->config, m->seed);
    cfg.first_seed = m->seed;
    cfg.seeds = m->seeds;
    cfg.scenes_per_seed = m->scenes;
    cfg.skew = m->skew;
    cfg.target_rms = m->target_rms;
    cfg.early_layers = m->layers;
    cfg.delta = m->delta;
    const MechanismResult res = measure_skew_mechanism(cfg);
    Report rep{"skew_mechanism", {"seed", "unskewed", "skewed", "normalized"}, {}, {}};
    for (std::size_t s = 0; s < res.unskewed.size(); ++s) {
      rep.add_row({static_cast<std::int64_t>(cfg.first_seed + s), res.unskewed[s], res.skewed[s],
                   res.normalized[s]});
    }
    rep.meta = {{"skew", cfg.skew},
                {"mean_unskewed", res.mean_unskewed},
                {"mean_skewed", res.mean_skewed},
                {"mean_normalized", res.mean_normalized},
                {"gap", res.gap()},
                {"recovery", res.gap() != 0.0 ? res.recovery() : 0.0}};
    emit(rep, m->report);
    std::cout << "mean early |dalpha_V|: skew 1 " << format_double(res.mean_unskewed) << ", skew "
              << format_double(cfg.skew) << " " << format_double(res.mean_skewed)
              << ", normalized " << format_double(res.mean_normalized) << "\n";
  });
}

void add_probe(CLI::App& app) {
  auto* probe = app.add_subcommand("probe", "Attention probes over trace files");
  probe->require_subcommand(1);

  struct PsiOpts {
    std::string orig, perm, report;
    std::optional<double> acc_orig, acc_perm;
  };
  auto p = std::make_shared<PsiOpts>();
  auto* psi_cmd = probe->add_subcommand("psi", "Permutation sensitivity index from two accuracies");
  auto* orig = psi_cmd->add_option("--orig", p->orig, "Report of the original-order run");
  auto* perm = psi_cmd->add_option("--perm", p->perm, "Report of the permuted run");
  auto* ao = psi_cmd->add_option("--acc-orig", p->acc_orig, "Original accuracy");
  auto* ap = psi_cmd->add_option("--acc-perm", p->acc_perm, "Permuted accuracy");
  orig->excludes(ao);
  perm->excludes(ap);
  psi_cmd->add_option("--report", p->report, "Output report (.csv or .json)");
  psi_cmd->callback([p] {
    require(!p->orig.empty() || p->acc_orig, ErrorKind::InvalidArgument,
            "need --orig or --acc-orig");
    require(!p->perm.empty() || p->acc_perm, ErrorKind::InvalidArgument,
            "need --perm or --acc-perm");
    const double a = p->acc_orig ? *p->acc_orig : read_accuracy(p->orig);
    const double b = p->acc_perm ? *p->acc_perm : read_accuracy(p->perm);
    const double v = psi(a, b);
    if (!p->report.empty()) emit(psi_report(a, b), p->report);
    std::cout << "PSI " << format_double(v) << "\n";
  });

  struct TraceOpts {
    std::string trace, report, queries;
    bool include_system = false;
    double delta = 1.0;
  };
  auto add_trace_cmd = [probe](const std::string& name, const std::string& help,
                               const std::string& default_queries) {
    auto o = std::make_shared<TraceOpts>();
    o->queries = default_queries;
    auto* cmd = probe->add_subcommand(name, help);
    cmd->add_option("--trace", o->trace, "Trace file")->required();
    cmd->add_option("--report", o->report, "Output report (.csv or .json)")->required();
    return std::pair{cmd, o};
  };

  {
    auto [cmd, o] = add_trace_cmd("cmb", "Cross-modal balance heatmap per layer and head", "last");
    cmd->add_option("--queries", o->queries, "Query rows: last, text, or all");
    cmd->add_flag("--include-system", o->include_system, "Keep system mass in the denominator");
    cmd->callback([o] {
      const TraceBundle b = load_trace(o->trace);
      const CmbHeatmap h = cmb_heatmap(b.trace, b.partition, o->include_system, parse_queries(o->queries));
      emit(cmb_report(h), o->report);
      std::cout << h.values.rows() << "x" << h.values.cols() << " heatmap over " << h.samples
                << " query rows\n";
    });
  }
  {
    auto [cmd, o] = add_trace_cmd("share", "System / vision / text attention shares", "all");
    cmd->callback([o] {
      const TraceBundle b = load_trace(o->trace);
      const AttentionShare s = attention_share(b.trace, b.partition);
      emit(share_report(s), o->report);
      std::cout << "system " << format_double(s.system) << ", vision " << format_double(s.vision)
                << ", text " << format_double(s.text) << "\n";
    });
  }
  {
    auto [cmd, o] = add_trace_cmd("rope", "Vision-mass response to a RoPE shift of the vision keys", "last");
    cmd->add_option("--delta", o->delta, "Shift in positions");
    cmd->add_option("--queries", o->queries, "Query rows: last, text, or all");
    cmd->callback([o] {
      const TraceBundle b = load_trace(o->trace);
      const RopeSensitivityProfile p =
          rope_sensitivity(b.trace, b.partition, b.rope, o->delta, parse_queries(o->queries));
      emit(rope_report(p), o->report);
      std::cout << "layer-0 mean |dalpha_V| " << format_double(p.layer_abs_delta_alpha_v(0)) << "\n";
    });
  }
  {
    auto [cmd, o] = add_trace_cmd("entropy", "Normalized entropy of attention over vision tokens", "text");
    cmd->add_option("--queries", o->queries, "Query rows: text, last, or all");
    cmd->callback([o] {
      const TraceBundle b = load_trace(o->trace);
      const EntropyTable t = entropy_table(b.trace, b.partition, parse_queries(o->queries));
      emit(entropy_report(t), o->report);
      std::cout << "overall entropy " << format_double(t.overall) << "\n";
    });
  }
  {
    auto [cmd, o] = add_trace_cmd("norms", "Mean hidden-state norms of vision and text rows", "all");
    cmd->callback([o] {
      const TraceBundle b = load_trace(o->trace);
      require(!b.hidden_states.empty(), ErrorKind::Precondition,
              "trace " + o->trace + " carries no hidden states");
      const NormProfile p = norm_profile(b.hidden_states, b.partition);
      emit(norm_report(p), o->report);
      if (p.ratio.front()) {
        std::cout << "input vision/text norm ratio " << format_double(*p.ratio.front()) << "\n";
      }
    });
  }
}

void add_intervene(CLI::App& app) {
  auto* iv = app.add_subcommand("intervene", "Embedding interventions on CSV matrices");
  iv->require_subcommand(1);

  struct NormOpts {
    std::string in, out, partition, report;
    double target_rms = 0.83;
    bool from_text = false;
  };
  auto n = std::make_shared<NormOpts>();
  auto* norm = iv->add_subcommand("normalize", "Rescale vision rows to a target RMS");
  norm->add_option("--in", n->in, "Embedding matrix CSV")->required();
  norm->add_option("--partition", n->partition,
                   "Contiguous layout as system,vision,text row counts")->required();
  auto* target = norm->add_option("--target-rms", n->target_rms, "Target RMS");
  norm->add_flag("--from-text", n->from_text, "Use the mean RMS of the text rows as target")
      ->excludes(target);
  norm->add_option("--out", n->out, "Output CSV")->required();
  norm->add_option("--report", n->report, "Norm profile before and after (.csv or .json)");
  norm->callback([n] {
    const Matrix in = read_matrix_csv(n->in);
    const auto c = parse_counts(n->partition, 3, "--partition");
    const TokenPartition part = TokenPartition::contiguous(c[0], c[1], c[2]);
    const NormCalibration cal{n->target_rms,
                              n->from_text ? CalibrationSource::FromText : CalibrationSource::Fixed};
    const Matrix out = normalize_vision(in, part, cal);
    write_matrix_csv(out, n->out);
    if (!n->report.empty()) emit(norm_report(norm_profile(std::vector<Matrix>{in, out}, part)), n->report);
    std::cout << "vision rows scaled to RMS " << format_double(resolve_target_rms(in, part, cal)) << "\n";
  });

  struct MlOpts {
    std::vector<std::string> features;
    std::string ids, projector, out;
  };
  auto m = std::make_shared<MlOpts>();
  auto* ml = iv->add_subcommand("multilayer", "Concatenate feature layers and project");
  ml->add_option("--features", m->features, "Per-layer feature CSVs, in layer order")
      ->required()
      ->delimiter(',');
  ml->add_option("--ids", m->ids, "Comma-separated layer indices to concatenate")->required();
  ml->add_option("--projector", m->projector, "Projector matrix CSV")->required();
  ml->add_option("--out", m->out, "Output CSV")->required();
  ml->callback([m] {
    std::vector<Matrix> layers;
    for (const std::string& f : m->features) layers.push_back(read_matrix_csv(f));
    const auto ids = parse_counts(m->ids, 0, "--ids");
    const Matrix out = multilayer_concat(layers, ids, read_matrix_csv(m->projector));
    write_matrix_csv(out, m->out);
    std::cout << out.rows() << " tokens x " << out.cols() << " features\n";
  });

  struct PoolOpts {
    std::string in, out;
    std::size_t target = 1;
  };
  auto p = std::make_shared<PoolOpts>();
  auto* pool = iv->add_subcommand("compress", "Average-pool a square token grid");
  pool->add_option("--in", p->in, "Token matrix CSV (rows in grid order)")->required();
  pool->add_option("--target", p->target, "Output token count (a perfect square)")->required();
  pool->add_option("--out", p->out, "Output CSV")->required();
  pool->callback([p] {
    const Matrix out = avg_pool_compress(read_matrix_csv(p->in), p->target);
    write_matrix_csv(out, p->out);
    std::cout << "pooled to " << out.rows() << " tokens\n";
  });
}

void add_verify(CLI::App& app) {
  auto* verify = app.add_subcommand("verify", "Randomized self-checks");
  verify->require_subcommand(1);
  struct Opts {
    std::size_t trials = 1000;
    std::uint64_t seed = 0;
    std::string report;
  };
  auto o = std::make_shared<Opts>();
  auto* cmd = verify->add_subcommand(
      "appendix-a", "Attention-mass derivative identity, factorization order, residual suppression");
  cmd->add_option("--trials", o->trials, "Random instances");
  cmd->add_option("--seed", o->seed, "Instance seed")->required();
  cmd->add_option("--report", o->report, "Results (.csv or .json)");
  cmd->callback([o] {
    const DerivativeCheck c = verify_mass_derivative(o->trials, o->seed);
    auto status = [](bool ok) { return std::string(ok ? "pass" : "FAIL"); };
    if (!o->report.empty()) {
      Report r{"mass_derivative_checks", {"check", "statistic", "value", "limit", "status"}, {}, {}};
      r.add_row({std::string("derivative_identity"), std::string("max_rel_error"),
                 c.max_identity_rel_error, std::string("< 1e-5"), status(c.identity_ok())});
      r.add_row({std::string("factorization"), std::string("mean_loglog_slope"),
                 c.mean_factorization_slope, std::string("2 +- 0.2"), status(c.factorization_ok())});
      r.add_row({std::string("factorization"), std::string("min_loglog_slope"),
                 c.min_factorization_slope, std::string(""), std::string("")});
      r.add_row({std::string("factorization"), std::string("max_loglog_slope"),
                 c.max_factorization_slope, std::string(""), std::string("")});
      r.add_row({std::string("suppression"), std::string("min_ratio_c100"), c.min_suppression_ratio,
                 std::string(">= 0.009"), status(c.suppression_ok())});
      r.add_row({std::string("suppression"), std::string("max_ratio_c100"), c.max_suppression_ratio,
                 std::string("<= 0.011"), status(c.suppression_ok())});
      r.meta = {{"trials", static_cast<std::int64_t>(c.trials)},
                {"seed", std::to_string(o->seed)}};
      emit(r, o->report);
    }
    std::cout << c.trials << " trials\n"
              << "  derivative identity: max relative error "
              << format_double(c.max_identity_rel_error) << " (" << status(c.identity_ok()) << ")\n"
              << "  factorization: mean log-log slope " << format_double(c.mean_factorization_slope)
              << ", range [" << format_double(c.min_factorization_slope) << ", "
              << format_double(c.max_factorization_slope) << "] (" << status(c.factorization_ok())
              << ")\n"
              << "  suppression: ratio at 100x residual in [" << format_double(c.min_suppression_ratio)
              << ", " << format_double(c.max_suppression_ratio) << "] ("
              << status(c.suppression_ok()) << ")\n";
    if (!(c.identity_ok() && c.factorization_ok() && c.suppression_ok())) {
      throw CheckFailed("derivative checks outside tolerance");
    }
  });
}

}  // namespace

void register_commands(CLI::App& app) {
  add_gen2ds(app);
  add_eval2ds(app);
  add_toy(app);
  add_probe(app);
  add_intervene(app);
  add_verify(app);
}

}  // namespace vlmprobe::cli
