#include "vlmprobe/toy_model.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "vlmprobe/error.hpp"
#include "vlmprobe/interventions.hpp"
#include "vlmprobe/rng.hpp"

namespace vlmprobe {

namespace {

using nlohmann::json;

constexpr std::string_view kSystemPrompt =
    "a chat between a curious user and an artificial intelligence assistant the assistant "
    "gives helpful answers";

Matrix gaussian(std::size_t rows, std::size_t cols, double stddev, Rng& rng) {
  Matrix m(rows, cols);
  for (double& x : m.data()) x = stddev * rng.normal();
  return m;
}

double gelu(double x) {
  constexpr double k = 0.7978845608028654;  // sqrt(2 / pi)
  return 0.5 * x * (1.0 + std::tanh(k * (x + 0.044715 * x * x * x)));
}

Vector scaled_to_rms(Vector v, double target) {
  const double r = rms(v);
  require(r > 0.0, ErrorKind::Precondition, "cannot rescale a zero vector");
  for (double& x : v) x *= target / r;
  return v;
}

Matrix rms_rows(const Matrix& h, double eps) {
  Matrix out(h.rows(), h.cols());
  for (std::size_t i = 0; i < h.rows(); ++i) out.set_row(i, rms_norm(h.row(i), eps));
  return out;
}

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t hash = 0xcbf29ce484222325ULL;
  for (char c : s) {
    hash ^= static_cast<unsigned char>(c);
    hash *= 0x100000001b3ULL;
  }
  return hash;
}

double choice_score(const ToyModel& model, const Vector& logits, const std::string& choice) {
  const auto ids = model.tokenize(choice);
  double sum = 0.0;
  for (std::size_t id : ids) sum += logits[id];
  return ids.empty() ? -INFINITY : sum / static_cast<double>(ids.size());
}

double cosine(std::span<const double> a, std::span<const double> b) {
  return dot(a, b) / (l2_norm(a) * l2_norm(b));
}

}  // namespace

// ---------------------------------------------------------------------------

void ToyConfig::validate() const {
  require(heads >= 1 && head_dim >= 2 && head_dim % 2 == 0, ErrorKind::InvalidArgument,
          "toy config needs heads >= 1 and an even head_dim >= 2");
  require(vocab >= 2 && n_vision >= 1 && n_text >= 1, ErrorKind::InvalidArgument,
          "toy config needs vocab >= 2, n_vision >= 1, n_text >= 1");
  require(vision_norm_skew >= 1.0, ErrorKind::InvalidArgument, "vision_norm_skew must be >= 1");
  require(mlp_mult >= 1 && rms_eps >= 0.0 && update_gain > 0.0, ErrorKind::InvalidArgument,
          "toy config needs mlp_mult >= 1, rms_eps >= 0, update_gain > 0");
  rope().validate();
}

ToyConfig ToyConfig::from_json(const std::string& text) {
  ToyConfig c;
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    fail(ErrorKind::Format, std::string("toy config is not valid JSON: ") + e.what());
  }
  require(j.is_object(), ErrorKind::Format, "toy config must be a JSON object");
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "layers") c.layers = value.get<std::size_t>();
      else if (key == "heads") c.heads = value.get<std::size_t>();
      else if (key == "head_dim") c.head_dim = value.get<std::size_t>();
      else if (key == "vocab") c.vocab = value.get<std::size_t>();
      else if (key == "n_vision") c.n_vision = value.get<std::size_t>();
      else if (key == "n_text") c.n_text = value.get<std::size_t>();
      else if (key == "n_system") c.n_system = value.get<std::size_t>();
      else if (key == "vision_norm_skew") c.vision_norm_skew = value.get<double>();
      else if (key == "seed") c.seed = value.get<std::uint64_t>();
      else if (key == "rope_base") c.rope_base = value.get<double>();
      else if (key == "rotation_pairing") c.pairing = parse_pairing(value.get<std::string>());
      else if (key == "mlp_mult") c.mlp_mult = value.get<std::size_t>();
      else if (key == "rms_eps") c.rms_eps = value.get<double>();
      else if (key == "update_gain") c.update_gain = value.get<double>();
      else fail(ErrorKind::Format, "unknown toy config key '" + key + "'");
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::Format, std::string("bad toy config value: ") + e.what());
  }
  c.validate();
  return c;
}

ToyConfig ToyConfig::load(const std::filesystem::path& path) {
  std::ifstream file(path);
  require(file.good(), ErrorKind::Io, "cannot open toy config " + path.string());
  std::stringstream ss;
  ss << file.rdbuf();
  return from_json(ss.str());
}

std::string ToyConfig::to_json() const {
  json j{{"layers", layers},
         {"heads", heads},
         {"head_dim", head_dim},
         {"vocab", vocab},
         {"n_vision", n_vision},
         {"n_text", n_text},
         {"n_system", n_system},
         {"vision_norm_skew", vision_norm_skew},
         {"seed", seed},
         {"rope_base", rope_base},
         {"rotation_pairing", std::string(to_string(pairing))},
         {"mlp_mult", mlp_mult},
         {"rms_eps", rms_eps},
         {"update_gain", update_gain}};
  return j.dump(2);
}

// ---------------------------------------------------------------------------

ToyModel ToyModel::build(const ToyConfig& cfg) {
  cfg.validate();
  ToyModel m;
  m.cfg_ = cfg;
  const std::size_t d = cfg.model_dim();
  const std::size_t hidden = cfg.mlp_mult * d;
  const double in_scale = 1.0 / std::sqrt(static_cast<double>(d));
  const double out_scale = cfg.update_gain * in_scale;
  const double mlp_out_scale = cfg.update_gain / std::sqrt(static_cast<double>(hidden));

  Rng rng(Rng::derive(cfg.seed, 0));
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    LayerWeights w;
    w.wq = gaussian(d, d, in_scale, rng);
    w.wk = gaussian(d, d, in_scale, rng);
    w.wv = gaussian(d, d, in_scale, rng);
    w.wo = gaussian(d, d, out_scale, rng);
    w.w1 = gaussian(d, hidden, in_scale, rng);
    w.w2 = gaussian(hidden, d, mlp_out_scale, rng);
    m.layers_.push_back(std::move(w));
  }
  Rng embed_rng(Rng::derive(cfg.seed, 1));
  m.embedding_ = gaussian(cfg.vocab, d, 1.0, embed_rng);
  for (std::size_t i = 0; i < cfg.vocab; ++i) {
    m.embedding_.set_row(i, scaled_to_rms(Vector(m.embedding_.row(i).begin(),
                                                 m.embedding_.row(i).end()),
                                          1.0));
  }
  Rng proj_rng(Rng::derive(cfg.seed, 2));
  m.projector_ = gaussian(kVisionFeatures, d, 1.0, proj_rng);
  Rng out_rng(Rng::derive(cfg.seed, 3));
  m.readout_ = gaussian(d, cfg.vocab, in_scale, out_rng);
  return m;
}

ForwardRecord ToyModel::forward(const Matrix& inputs, const TokenPartition& partition,
                                std::span<const double> positions) const {
  return run(inputs, partition, positions, cfg_.layers);
}

ForwardRecord ToyModel::forward_prefix(const Matrix& inputs, const TokenPartition& partition,
                                       std::size_t layers) const {
  require(layers <= cfg_.layers, ErrorKind::InvalidArgument,
          "forward_prefix: " + std::to_string(layers) + " layers requested, model has " +
              std::to_string(cfg_.layers));
  return run(inputs, partition, {}, layers);
}

ForwardRecord ToyModel::run(const Matrix& inputs, const TokenPartition& partition,
                            std::span<const double> positions, std::size_t layers) const {
  const std::size_t n = inputs.rows();
  const std::size_t d = cfg_.model_dim();
  const std::size_t hd = cfg_.head_dim;
  require(inputs.cols() == d, ErrorKind::InvalidArgument,
          "input width " + std::to_string(inputs.cols()) + " != model_dim " + std::to_string(d));
  require(n > 0, ErrorKind::InvalidArgument, "empty input sequence");
  require(partition.seq_len == n, ErrorKind::InvalidArgument,
          "partition seq_len " + std::to_string(partition.seq_len) + " != input rows " +
              std::to_string(n));
  partition.validate();
  std::vector<double> pos(n);
  if (positions.empty()) {
    for (std::size_t i = 0; i < n; ++i) pos[i] = static_cast<double>(i);
  } else {
    require(positions.size() == n, ErrorKind::InvalidArgument,
            "positions length != input rows");
    pos.assign(positions.begin(), positions.end());
  }
  const RopeConfig rope = cfg_.rope();
  const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));

  ForwardRecord rec;
  AttentionTrace& t = rec.trace;
  t.layers = layers;
  t.heads = cfg_.heads;
  t.head_dim = hd;
  t.seq_len = n;
  for (std::size_t i = 0; i < n; ++i) t.query_indices.push_back(i);
  t.query_positions = pos;
  t.key_positions = pos;

  Matrix h = inputs;
  rec.hidden_states.push_back(h);
  for (std::size_t l = 0; l < layers; ++l) {
    const LayerWeights& w = layers_[l];
    const Matrix xn = rms_rows(h, cfg_.rms_eps);
    const Matrix q = matmul(xn, w.wq);
    const Matrix k = matmul(xn, w.wk);
    const Matrix v = matmul(xn, w.wv);
    Matrix mixed(n, d);
    for (std::size_t head = 0; head < cfg_.heads; ++head) {
      HeadTrace ht{Matrix(n, hd), Matrix(n, hd), Matrix(n, n)};
      std::vector<Vector> qr(n);
      std::vector<Vector> kr(n);
      for (std::size_t i = 0; i < n; ++i) {
        const auto qi = q.row(i).subspan(head * hd, hd);
        const auto ki = k.row(i).subspan(head * hd, hd);
        ht.queries.set_row(i, qi);
        ht.keys.set_row(i, ki);
        qr[i] = rope_rotate(qi, pos[i], rope);
        kr[i] = rope_rotate(ki, pos[i], rope);
      }
      Vector logits(n);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j <= i; ++j) logits[j] = dot(qr[i], kr[j]) * inv_sqrt_hd;
        const AttentionRow row = attention_weights(logits, i + 1);
        ht.attention.set_row(i, row.weights);
        for (std::size_t j = 0; j <= i; ++j) {
          const double a = row.weights[j];
          for (std::size_t c = 0; c < hd; ++c) mixed(i, head * hd + c) += a * v(j, head * hd + c);
        }
      }
      t.head_traces.push_back(std::move(ht));
    }
    const Matrix attn_out = matmul(mixed, w.wo);
    for (std::size_t i = 0; i < h.data().size(); ++i) h.data()[i] += attn_out.data()[i];
    Matrix act = matmul(rms_rows(h, cfg_.rms_eps), w.w1);
    for (double& x : act.data()) x = gelu(x);
    const Matrix mlp_out = matmul(act, w.w2);
    for (std::size_t i = 0; i < h.data().size(); ++i) h.data()[i] += mlp_out.data()[i];
    rec.hidden_states.push_back(h);
  }
  rec.logits = vec_mat(h.row(n - 1), readout_);
  return rec;
}

std::vector<std::size_t> ToyModel::tokenize(std::string_view text) const {
  std::vector<std::size_t> ids;
  std::string word;
  auto flush = [&] {
    if (word.empty()) return;
    ids.push_back(1 + fnv1a(word) % (cfg_.vocab - 1));
    word.clear();
  };
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c)) {
      word += static_cast<char>(std::tolower(c));
    } else {
      flush();
    }
  }
  flush();
  return ids;
}

Vector ToyModel::background_patch(double skew) const {
  Vector f(kVisionFeatures, 0.0);
  f[kVisionFeatures - 1] = 1.0;
  return scaled_to_rms(vec_mat(f, projector_), skew);
}

Vector ToyModel::object_patch(Color color, Shape shape, double skew) const {
  Vector f(kVisionFeatures, 0.0);
  f[static_cast<std::size_t>(color)] = 1.0;
  f[kColorCount + static_cast<std::size_t>(shape)] = 1.0;
  f[kColorCount + kShapeCount] = 1.0;
  return scaled_to_rms(vec_mat(f, projector_), skew);
}

Matrix ToyModel::vision_rows(const Scene& scene, double skew) const {
  require(cfg_.n_vision == kLiteGrid * kLiteGrid, ErrorKind::InvalidArgument,
          "scene embedding needs n_vision = 36 (6x6 grid), got " +
              std::to_string(cfg_.n_vision));
  const Vector bg = background_patch(skew);
  Matrix rows(cfg_.n_vision, cfg_.model_dim());
  for (std::size_t i = 0; i < cfg_.n_vision; ++i) rows.set_row(i, bg);
  for (const SceneObject& o : scene.objects) {
    const auto [r, c] = grid_cell(o.x, o.y);
    rows.set_row(r * kLiteGrid + c, object_patch(o.color, o.shape, skew));
  }
  return rows;
}

Matrix ToyModel::assemble(const Scene& scene, const Question& question, double skew) const {
  Matrix out(cfg_.seq_len(), cfg_.model_dim());
  const auto system_ids = tokenize(kSystemPrompt);
  for (std::size_t i = 0; i < cfg_.n_system; ++i) {
    out.set_row(i, token_embedding(system_ids[i % system_ids.size()]));
  }
  const Matrix vis = vision_rows(scene, skew);
  for (std::size_t i = 0; i < cfg_.n_vision; ++i) out.set_row(cfg_.n_system + i, vis.row(i));
  auto ids = tokenize(question.text);
  ids.resize(cfg_.n_text, 0);
  for (std::size_t i = 0; i < cfg_.n_text; ++i) {
    out.set_row(cfg_.n_system + cfg_.n_vision + i, token_embedding(ids[i]));
  }
  return out;
}

TraceBundle to_bundle(const ToyModel& model, const ForwardRecord& record,
                      const TokenPartition& partition) {
  TraceBundle b;
  b.model_name = "toy-decoder-seed" + std::to_string(model.config().seed);
  b.trace = record.trace;
  b.partition = partition;
  b.rope = model.config().rope();
  b.hidden_states = record.hidden_states;
  return b;
}

// ---------------------------------------------------------------------------

std::string ToyModelPredictor::answer(const Matrix& inputs, const TokenPartition& partition,
                                      const Question& question) const {
  require(!question.choices.empty(), ErrorKind::InvalidArgument,
          "question " + question.id + " has no choices");
  ForwardRecord rec;
  if (compress_) {
    require(!partition.vision.empty(), ErrorKind::Precondition, "empty vision set");
    Matrix vis(partition.vision.size(), inputs.cols());
    for (std::size_t i = 0; i < partition.vision.size(); ++i) {
      vis.set_row(i, inputs.row(partition.vision[i]));
    }
    const Matrix pooled = avg_pool_compress(vis, 1);
    // Rebuild the sequence with the vision span collapsed to one token.
    Matrix compact(inputs.rows() - vis.rows() + 1, inputs.cols());
    TokenPartition cp;
    cp.seq_len = compact.rows();
    const auto roles = partition.roles();
    std::size_t out = 0;
    bool placed = false;
    for (std::size_t i = 0; i < inputs.rows(); ++i) {
      if (roles[i] == TokenRole::Vision) {
        if (placed) continue;
        compact.set_row(out, pooled.row(0));
        cp.vision.push_back(out++);
        placed = true;
        continue;
      }
      compact.set_row(out, inputs.row(i));
      if (roles[i] == TokenRole::System) cp.system.push_back(out);
      if (roles[i] == TokenRole::Text) cp.text.push_back(out);
      ++out;
    }
    rec = model_.forward(compact, cp);
  } else {
    rec = model_.forward(inputs, partition);
  }
  std::size_t best = 0;
  double best_score = choice_score(model_, rec.logits, question.choices[0]);
  for (std::size_t i = 1; i < question.choices.size(); ++i) {
    const double s = choice_score(model_, rec.logits, question.choices[i]);
    if (s > best_score) {
      best = i;
      best_score = s;
    }
  }
  return question.choices[best];
}

PositionalReadout::PositionalReadout(const ToyModel& model, double skew) : model_(model) {
  labels_.push_back(std::nullopt);
  prototypes_.push_back(model.background_patch(skew));
  for (std::size_t c = 0; c < kColorCount; ++c) {
    for (std::size_t s = 0; s < kShapeCount; ++s) {
      SceneObject o;
      o.color = static_cast<Color>(c);
      o.shape = static_cast<Shape>(s);
      labels_.push_back(o);
      prototypes_.push_back(model.object_patch(o.color, o.shape, skew));
    }
  }
}

std::string PositionalReadout::answer(const Matrix& inputs, const TokenPartition& partition,
                                      const Question& question) const {
  require(partition.vision.size() == kLiteGrid * kLiteGrid, ErrorKind::Precondition,
          "positional readout needs a 6x6 vision grid");
  Scene decoded;
  decoded.id = question.scene_id;
  const double cell = 1.0 / static_cast<double>(kLiteGrid);
  for (std::size_t i = 0; i < partition.vision.size(); ++i) {
    const auto row = inputs.row(partition.vision[i]);
    std::size_t best = 0;
    double best_cos = -2.0;
    for (std::size_t p = 0; p < prototypes_.size(); ++p) {
      const double c = cosine(row, prototypes_[p]);
      if (c > best_cos) {
        best = p;
        best_cos = c;
      }
    }
    if (!labels_[best]) continue;
    SceneObject o = *labels_[best];
    o.x = (static_cast<double>(i % kLiteGrid) + 0.5) * cell;
    o.y = (static_cast<double>(i / kLiteGrid) + 0.5) * cell;
    decoded.objects.push_back(o);
  }
  decoded.meta_category = decoded.objects.size();
  try {
    return oracle_answer(decoded, question);
  } catch (const Error&) {
    return "unanswerable";
  }
}

bool exact_match(const std::string& prediction, const Question& question) {
  return resolve_prediction(prediction, question.choices) == canonicalize_answer(question.gold);
}

ToyEvaluation evaluate(const ToyModel& model, const Predictor& predictor, const Dataset& dataset,
                       const Scorer& scorer, std::optional<std::uint64_t> permute_seed,
                       double skew) {
  const TokenPartition partition = model.config().partition();
  ToyEvaluation ev;
  for (std::size_t i = 0; i < dataset.questions.size(); ++i) {
    const Question& q = dataset.questions[i];
    Matrix inputs = model.assemble(dataset.scene(q.scene_id), q, skew);
    if (permute_seed) inputs = permute_vision_tokens(inputs, partition, Rng::derive(*permute_seed, i));
    ++ev.total;
    if (scorer(predictor.answer(inputs, partition, q), q)) ++ev.correct;
  }
  return ev;
}

Dataset lite_dataset(std::uint64_t seed, std::size_t questions) {
  DatasetConfig cfg;
  cfg.seed = seed;
  cfg.grid = true;
  const std::size_t per_scene = 6;
  const std::size_t categories = kMaxObjects - kMinObjects + 1;
  cfg.scenes_per_category =
      std::max<std::size_t>(1, (questions + per_scene * categories - 1) / (per_scene * categories));
  Dataset ds = generate_dataset(cfg);
  if (ds.questions.size() > questions) ds.questions.resize(questions);
  return ds;
}

// ---------------------------------------------------------------------------

double early_sensitivity(const ToyModel& model, const Matrix& inputs,
                         const TokenPartition& partition, std::size_t layers, double delta) {
  require(layers >= 1 && layers <= model.config().layers, ErrorKind::InvalidArgument,
          "early layer count out of range");
  const ForwardRecord rec = model.forward_prefix(inputs, partition, layers);
  const RopeSensitivityProfile p = rope_sensitivity(rec.trace, partition, model.config().rope(),
                                                    delta, QuerySelection::TextQueries);
  double sum = 0.0;
  for (std::size_t l = 0; l < layers; ++l) sum += p.layer_abs_delta_alpha_v(l);
  return sum / static_cast<double>(layers);
}

MechanismResult measure_skew_mechanism(const MechanismConfig& cfg) {
  require(cfg.seeds >= 1 && cfg.scenes_per_seed >= 1, ErrorKind::InvalidArgument,
          "mechanism study needs at least one seed and one scene");
  MechanismResult res;
  const NormCalibration cal{cfg.target_rms, CalibrationSource::Fixed};
  for (std::size_t s = 0; s < cfg.seeds; ++s) {
    ToyConfig mc = cfg.model;
    mc.seed = cfg.first_seed + s;
    const ToyModel model = ToyModel::build(mc);
    const TokenPartition partition = mc.partition();
    double a = 0.0;
    double b = 0.0;
    double c = 0.0;
    Rng rng(Rng::derive(mc.seed, 0x5ce9e));
    for (std::size_t k = 0; k < cfg.scenes_per_seed; ++k) {
      Scene scene;
      scene.id = "mech" + std::to_string(k);
      const std::size_t n_obj = kMinObjects + rng.below(kMaxObjects - kMinObjects + 1);
      scene.objects = place_objects_on_grid(draw_object_set(n_obj, rng), rng);
      scene.meta_category = n_obj;
      const std::vector<Question> qs = generate_questions(scene, rng);
      const Question& q = qs[rng.below(qs.size())];
      a += early_sensitivity(model, model.assemble(scene, q, 1.0), partition, cfg.early_layers,
                             cfg.delta);
      const Matrix skewed = model.assemble(scene, q, cfg.skew);
      b += early_sensitivity(model, skewed, partition, cfg.early_layers, cfg.delta);
      c += early_sensitivity(model, normalize_vision(skewed, partition, cal), partition,
                             cfg.early_layers, cfg.delta);
    }
    const double inv = 1.0 / static_cast<double>(cfg.scenes_per_seed);
    res.unskewed.push_back(a * inv);
    res.skewed.push_back(b * inv);
    res.normalized.push_back(c * inv);
  }
  auto mean = [](const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  };
  res.mean_unskewed = mean(res.unskewed);
  res.mean_skewed = mean(res.skewed);
  res.mean_normalized = mean(res.normalized);
  return res;
}

}  // namespace vlmprobe
