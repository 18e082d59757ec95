// Acceptance checks AC1..AC10. Prints one PASS/FAIL line per criterion and
// exits nonzero if any fails. Optional arguments restrict the run to the
// named criteria, e.g. `vlmprobe_acceptance AC1 AC6`.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "support/instances.hpp"
#include "vlmprobe/error.hpp"
#include "vlmprobe/interventions.hpp"
#include "vlmprobe/probes.hpp"
#include "vlmprobe/scene2ds.hpp"
#include "vlmprobe/toy_model.hpp"
#include "vlmprobe/trace_io.hpp"

namespace {

using namespace vlmprobe;
using vlmprobe::testing::central_difference;
using vlmprobe::testing::Instance;
using vlmprobe::testing::loglog_slope;
using vlmprobe::testing::random_instance;
using vlmprobe::testing::random_sized_instance;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* pattern, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, pattern, args...);
  return buf;
}

// --- AC1: group derivative against central differences -------------------------

Outcome ac1() {
  Rng rng(0xac1);
  const std::size_t n = 1000;
  double worst = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const Instance in = random_sized_instance(rng);
    const double analytic = group_derivative_analytic(in.query, in.query_pos, in.keys,
                                                      in.key_positions, in.partition, in.rope);
    const double fd = central_difference(in, in.partition.vision, in.partition.vision, 1e-5);
    worst = std::max(worst, std::abs(analytic - fd) / (std::abs(fd) + 1e-12));
  }
  return {worst < 1e-5, fmt("%zu instances, max relative error %.3g (limit 1e-5)", n, worst)};
}

// --- AC2: second-order residual of the factorization ------------------------------

Outcome ac2() {
  Rng rng(0xac2);
  const std::vector<double> deltas = {1e-2, 1e-3, 1e-4};
  const std::size_t n = 200;
  std::vector<double> log_mean(deltas.size(), 0.0);
  std::size_t within = 0;
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  for (std::size_t i = 0; i < n; ++i) {
    const Instance in = random_instance(rng, 4 + 2 * rng.below(31), 1 + rng.below(32),
                                        1 + rng.below(32));
    std::vector<double> resid;
    for (std::size_t j = 0; j < deltas.size(); ++j) {
      const RopeProbeResult r = rope_probe(in.query, in.query_pos, in.keys, in.key_positions,
                                           in.partition, deltas[j], in.rope);
      resid.push_back(std::abs(r.delta_alpha_v - r.balance_factor * r.delta_g_v));
      log_mean[j] += std::log(resid.back()) / static_cast<double>(n);
    }
    const double slope = loglog_slope(deltas, resid);
    within += std::abs(slope - 2.0) <= 0.2;
    lo = std::min(lo, slope);
    hi = std::max(hi, slope);
  }
  // The fit is linear in log(residual), so the slope of the geometric-mean
  // residual equals the mean per-instance slope.
  std::vector<double> geo(deltas.size());
  for (std::size_t j = 0; j < deltas.size(); ++j) geo[j] = std::exp(log_mean[j]);
  const double population = loglog_slope(deltas, geo);
  return {std::abs(population - 2.0) <= 0.2 && within >= 100,
          fmt("%zu instances; population slope %.4f (limit 2.0 +- 0.2); %zu/%zu instances "
              "individually within tolerance (need >= 100); per-instance range [%.3f, %.3f]",
              n, population, within, n, lo, hi)};
}

// --- AC3: residual-scale suppression ---------------------------------------------

Outcome ac3() {
  Rng rng(0xac3);
  const std::size_t dim = 64;
  const std::size_t n = 200;
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  for (std::size_t i = 0; i < n; ++i) {
    Vector r(dim), a(dim), da(dim);
    for (double& x : r) x = rng.normal();
    for (double& x : a) x = rng.normal();
    for (double& x : da) x = rng.normal();
    // The update is small next to the residual, and its derivative mostly
    // orthogonal to the residual direction.
    a = scale(a, 0.05 * rng.uniform() * l2_norm(r) / l2_norm(a));
    const double along = dot(da, r) / dot(r, r);
    for (std::size_t k = 0; k < dim; ++k) da[k] -= 0.9 * along * r[k];
    const double s1 = residual_phase_sensitivity(r, a, da);
    const double s100 = residual_phase_sensitivity(scale(r, 100.0), a, da);
    lo = std::min(lo, s100 / s1);
    hi = std::max(hi, s100 / s1);
  }
  return {lo >= 0.009 && hi <= 0.011,
          fmt("%zu instances, ratio in [%.5f, %.5f] (limit [0.009, 0.011])", n, lo, hi)};
}

// --- AC4: rotation invariants ----------------------------------------------------

Outcome ac4() {
  Rng rng(0xac4);
  double norm_err = 0.0;
  double add_err = 0.0;
  double shift_err = 0.0;
  std::size_t cases = 0;
  for (RotationPairing pairing : {RotationPairing::Interleaved, RotationPairing::Half}) {
    for (int i = 0; i < 250; ++i, ++cases) {
      const RopeConfig cfg{4 + 2 * rng.below(63), 10000.0, pairing};
      Vector q(cfg.head_dim), k(cfg.head_dim);
      for (double& x : q) x = rng.normal();
      for (double& x : k) x = rng.normal();
      const double p1 = rng.uniform(-1000.0, 1000.0);
      const double p2 = rng.uniform(-1000.0, 1000.0);
      const Vector rq = rope_rotate(q, p1, cfg);
      norm_err = std::max(norm_err, std::abs(l2_norm(rq) - l2_norm(q)) / l2_norm(q));
      const Vector two_step = rope_rotate(rq, p2, cfg);
      const Vector one_step = rope_rotate(q, p1 + p2, cfg);
      add_err = std::max(add_err, l2_norm(sub(two_step, one_step)) / l2_norm(q));
      const double m = rng.uniform(0.0, 100.0);
      const double n = rng.uniform(0.0, 100.0);
      const double base = dot(rope_rotate(q, m, cfg), rope_rotate(k, n, cfg));
      for (double s : {1.0, 37.5, 1e3, 1e4}) {
        const double moved = dot(rope_rotate(q, m + s, cfg), rope_rotate(k, n + s, cfg));
        shift_err = std::max(shift_err, std::abs(moved - base));
      }
    }
  }
  const bool pass = norm_err < 1e-12 && add_err < 1e-10 && shift_err < 1e-9;
  return {pass, fmt("%zu cases; norm %.2g (<1e-12), additivity %.2g (<1e-10), "
                    "relative shift to 1e4 %.2g (<1e-9)",
                    cases, norm_err, add_err, shift_err)};
}

// --- AC5: PSI arithmetic ------------------------------------------------------------

Outcome ac5() {
  struct Row {
    double a, b, expected;
  };
  const std::vector<Row> rows = {{78.20, 77.35, 1.09}, {61.36, 58.62, 4.47}, {56.63, 33.37, 41.07}};
  double worst = 0.0;
  std::string values;
  for (const Row& r : rows) {
    const double pct = 100.0 * psi(r.a, r.b);
    worst = std::max(worst, std::abs(pct - r.expected));
    values += fmt("%s%.3f", values.empty() ? "" : ", ", pct);
  }
  return {worst <= 0.01, "psi = " + values + fmt(" pp; max deviation %.4f pp (limit 0.01)", worst)};
}

// --- AC6: skew mechanism on the toy model -------------------------------------------

Outcome ac6() {
  const MechanismConfig cfg;
  const auto t0 = std::chrono::steady_clock::now();
  const MechanismResult r = measure_skew_mechanism(cfg);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const bool pass = cfg.seeds >= 20 && r.mean_skewed < r.mean_unskewed && r.recovery() >= 0.5 &&
                    secs < 120.0;
  return {pass, fmt("%zu seeds x %zu scenes; mean early |dalpha_V| skew1 %.6g, skew%.0f %.6g, "
                    "normalized %.6g; recovery %.3f (limit >= 0.5); %.1fs (limit 120s)",
                    cfg.seeds, cfg.scenes_per_seed, r.mean_unskewed, cfg.skew, r.mean_skewed,
                    r.mean_normalized, r.recovery(), secs)};
}

// --- AC7: permutation sensitivity of two toy pipelines ---------------------------

Outcome ac7() {
  const ToyModel model = ToyModel::build(ToyConfig{});
  const Dataset lite = lite_dataset(7, 200);
  const std::uint64_t perm_seed = 77;
  const ToyModelPredictor pooled(model, true);
  const ToyEvaluation p0 = evaluate(model, pooled, lite, exact_match, std::nullopt, 1.0);
  const ToyEvaluation p1 = evaluate(model, pooled, lite, exact_match, perm_seed, 1.0);
  const PositionalReadout readout(model, 1.0);
  const ToyEvaluation r0 = evaluate(model, readout, lite, exact_match, std::nullopt, 1.0);
  const ToyEvaluation r1 = evaluate(model, readout, lite, exact_match, perm_seed, 1.0);
  const double psi_pooled = psi(p0.accuracy(), p1.accuracy());
  const double psi_readout = psi(r0.accuracy(), r1.accuracy());
  const bool pass = p0.total == 200 && psi_pooled == 0.0 && psi_readout > 0.3;
  return {pass, fmt("%zu questions; compress-to-1 acc %.3f -> %.3f, PSI %.6g (must be 0); "
                    "positional readout acc %.3f -> %.3f, PSI %.4f (limit > 0.3)",
                    p0.total, p0.accuracy(), p1.accuracy(), psi_pooled, r0.accuracy(),
                    r1.accuracy(), psi_readout)};
}

// --- AC8: 2DS corpus ---------------------------------------------------------------

std::uint64_t hash_tree(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const std::string& s) {
    for (unsigned char c : s) h = (h ^ c) * 0x100000001b3ULL;
  };
  for (const auto& f : files) {
    mix(std::filesystem::relative(f, dir).generic_string());
    std::ifstream in(f, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    mix(ss.str());
  }
  return h;
}

Outcome ac8() {
  const auto t0 = std::chrono::steady_clock::now();
  const Dataset ds = generate_dataset(DatasetConfig{});
  std::map<std::size_t, std::size_t> per_cat;
  for (const Scene& s : ds.scenes) ++per_cat[s.meta_category];
  bool counts = ds.scenes.size() == 500 && ds.questions.size() == 3000 && per_cat.size() == 5;
  for (const auto& [m, c] : per_cat) counts = counts && c == 100;

  std::size_t oracle_ok = 0;
  std::size_t mirror_ok = 0;
  std::map<std::string, std::string> gold;
  for (const Question& q : ds.questions) {
    const Scene& s = ds.scene(q.scene_id);
    try {
      oracle_ok += oracle_answer(s, q) == q.gold;
      bool both = true;
      for (MirrorAxis axis : {MirrorAxis::Horizontal, MirrorAxis::Vertical}) {
        both = both && oracle_answer(mirror_scene(s, axis), mirror_question(q, axis)) == q.gold;
      }
      mirror_ok += both;
    } catch (const Error&) {
    }
    gold[q.id] = q.gold;
  }
  const EvalTable table = evaluate_answers(gold, ds.questions);
  bool perfect = table.overall.correct == table.overall.total;
  for (const CellScore& c : table.cells) perfect = perfect && c.total > 0 && c.correct == c.total;

  const auto root = std::filesystem::temp_directory_path() / "vlmprobe_ac8";
  std::filesystem::remove_all(root);
  write_dataset(ds, root / "a");
  write_dataset(generate_dataset(DatasetConfig{}), root / "b");
  const std::uint64_t ha = hash_tree(root / "a");
  const std::uint64_t hb = hash_tree(root / "b");
  std::filesystem::remove_all(root);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  const bool pass = counts && oracle_ok == 3000 && mirror_ok == 3000 && perfect && ha == hb &&
                    secs < 60.0;
  return {pass, fmt("%zu scenes / %zu questions (100 per category: %s); oracle %zu/3000; "
                    "mirrors %zu/3000; gold eval %.2f%%; rebuild hash %016llx %s; %.1fs (limit 60s)",
                    ds.scenes.size(), ds.questions.size(), counts ? "yes" : "no", oracle_ok,
                    mirror_ok, 100.0 * table.overall.accuracy(),
                    static_cast<unsigned long long>(ha), ha == hb ? "identical" : "DIFFERS", secs)};
}

// --- AC9: entropy endpoints ----------------------------------------------------------

Outcome ac9() {
  const TokenPartition p{{0}, {1, 2, 3, 4}, {5}, 6};
  auto row = [](Vector w) {
    AttentionRow r;
    r.weights = std::move(w);
    r.causal_boundary = r.weights.size();
    return r;
  };
  const double uniform = attention_entropy(row({0.2, 0.15, 0.15, 0.15, 0.15, 0.2}), p);
  const double one_hot = attention_entropy(row({0.3, 0, 0, 0.4, 0, 0.3}), p);
  const double half = attention_entropy(row({0.2, 0.25, 0, 0.25, 0, 0.3}), p);
  const bool pass = std::abs(uniform - 1.0) <= 1e-9 && one_hot == 0.0 && half == 0.5;
  return {pass, fmt("uniform %.17g (1 +- 1e-9), one-hot %.17g (0), two-of-four %.17g (0.5 exact)",
                    uniform, one_hot, half)};
}

// --- AC10: trace file round trip -----------------------------------------------------

double max_diff(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return std::numeric_limits<double>::infinity();
  double m = 0.0;
  for (std::size_t i = 0; i < a.data().size(); ++i) {
    m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  }
  return m;
}

Outcome ac10() {
  ToyConfig cfg;
  cfg.seed = 10;
  cfg.vision_norm_skew = 10.0;
  const ToyModel model = ToyModel::build(cfg);
  const Dataset lite = lite_dataset(10, 6);
  const Question& q = lite.questions[3];
  const TokenPartition part = cfg.partition();
  const ForwardRecord rec = model.forward(model.assemble(lite.scene(q.scene_id), q), part);
  const TraceBundle live = to_bundle(model, rec, part);

  const auto path = std::filesystem::temp_directory_path() / "vlmprobe_ac10.atrc";
  write_trace(live, path);
  const TraceBundle loaded = read_trace(path);
  std::filesystem::remove(path);
  const bool exact = loaded.trace == live.trace && loaded.partition == live.partition &&
                     loaded.hidden_states == live.hidden_states &&
                     encode_trace(loaded, TraceDtype::F64) == encode_trace(live, TraceDtype::F64);

  double worst = 0.0;
  for (QuerySelection sel : {QuerySelection::Last, QuerySelection::TextQueries}) {
    const auto a = rope_sensitivity(live.trace, live.partition, live.rope, 1.0, sel);
    const auto b = rope_sensitivity(loaded.trace, loaded.partition, loaded.rope, 1.0, sel);
    worst = std::max({worst, max_diff(a.mean_abs_delta_alpha_v, b.mean_abs_delta_alpha_v),
                      max_diff(a.mean_g_v, b.mean_g_v), max_diff(a.mean_balance, b.mean_balance)});
    for (bool sys : {false, true}) {
      worst = std::max(worst, max_diff(cmb_heatmap(live.trace, live.partition, sys, sel).values,
                                       cmb_heatmap(loaded.trace, loaded.partition, sys, sel).values));
    }
  }
  const EntropyTable ea = entropy_table(live.trace, live.partition);
  const EntropyTable eb = entropy_table(loaded.trace, loaded.partition);
  worst = std::max(worst, std::abs(ea.overall - eb.overall));
  const NormProfile na = norm_profile(live.hidden_states, live.partition);
  const NormProfile nb = norm_profile(loaded.hidden_states, loaded.partition);
  for (std::size_t l = 0; l < na.vision_mean.size(); ++l) {
    worst = std::max(worst, std::abs(na.vision_mean[l] - nb.vision_mean[l]));
  }
  const AttentionShare sa = attention_share(live.trace, live.partition);
  const AttentionShare sb = attention_share(loaded.trace, loaded.partition);
  worst = std::max({worst, std::abs(sa.vision - sb.vision), std::abs(sa.text - sb.text)});
  return {exact && worst <= 1e-12,
          fmt("round trip %s; probe max |file - in-process| %.3g (limit 1e-12)",
              exact ? "bit-exact" : "NOT bit-exact", worst)};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> checks = {
      {"AC1", ac1}, {"AC2", ac2}, {"AC3", ac3}, {"AC4", ac4}, {"AC5", ac5},
      {"AC6", ac6}, {"AC7", ac7}, {"AC8", ac8}, {"AC9", ac9}, {"AC10", ac10}};
  std::set<std::string> only(argv + 1, argv + argc);
  int failures = 0;
  for (const auto& [id, check] : checks) {
    if (!only.empty() && !only.count(id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome out;
    try {
      out = check();
    } catch (const std::exception& e) {
      out = {false, std::string("threw: ") + e.what()};
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("%-4s %s  %s [%.2fs]\n", id.c_str(), out.pass ? "PASS" : "FAIL",
                out.detail.c_str(), secs);
    std::fflush(stdout);
    failures += !out.pass;
  }
  return failures == 0 ? 0 : 1;
}
