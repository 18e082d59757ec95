#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "vlmprobe/error.hpp"
#include "vlmprobe/interventions.hpp"
#include "vlmprobe/toy_model.hpp"

namespace vlmprobe {
namespace {

ToyConfig small_config(std::uint64_t seed = 3) {
  ToyConfig c;
  c.layers = 3;
  c.heads = 2;
  c.head_dim = 8;
  c.seed = seed;
  return c;
}

struct Fixture {
  ToyModel model;
  Dataset ds;
  Matrix inputs;
  TokenPartition partition;
};

Fixture fixture(std::uint64_t seed = 3, double skew = 1.0) {
  ToyModel model = ToyModel::build(small_config(seed));
  Dataset ds = lite_dataset(seed, 12);
  const Question& q = ds.questions[0];
  Matrix in = model.assemble(ds.scene(q.scene_id), q, skew);
  TokenPartition p = model.config().partition();
  return {std::move(model), std::move(ds), std::move(in), std::move(p)};
}

TEST(ToyConfig, JsonRoundTrip) {
  ToyConfig c = small_config(17);
  c.pairing = RotationPairing::Half;
  c.vision_norm_skew = 12.5;
  const ToyConfig back = ToyConfig::from_json(c.to_json());
  EXPECT_EQ(back.to_json(), c.to_json());
  EXPECT_EQ(back.pairing, RotationPairing::Half);
  EXPECT_EQ(back.seed, 17u);
}

TEST(ToyConfig, RejectsBadInput) {
  EXPECT_THROW(ToyConfig::from_json("{\"layres\": 2}"), Error);
  EXPECT_THROW(ToyConfig::from_json("{\"head_dim\": 7}"), Error);
  EXPECT_THROW(ToyConfig::from_json("{\"vision_norm_skew\": 0.5}"), Error);
  EXPECT_THROW(ToyConfig::from_json("{\"layers\": \"six\"}"), Error);
  EXPECT_THROW(ToyConfig::from_json("[1, 2]"), Error);
  EXPECT_THROW(ToyConfig::from_json("{"), Error);
  EXPECT_THROW(ToyConfig::load("/nonexistent/toy.json"), Error);
}

TEST(ToyModel, BuildIsSeedDeterministic) {
  EXPECT_EQ(ToyModel::build(small_config(5)), ToyModel::build(small_config(5)));
  EXPECT_NE(ToyModel::build(small_config(5)).layers()[0].wq,
            ToyModel::build(small_config(6)).layers()[0].wq);
  const ToyModel m = ToyModel::build(small_config(5));
  for (std::size_t id = 0; id < m.config().vocab; ++id) {
    EXPECT_NEAR(rms(m.token_embedding(id)), 1.0, 1e-12);
  }
}

TEST(ToyModel, TokenizerRange) {
  const ToyModel m = ToyModel::build(small_config());
  const auto ids = m.tokenize("Is the Red circle LEFT of the blue square?");
  ASSERT_EQ(ids.size(), 9u);
  for (std::size_t id : ids) {
    EXPECT_GE(id, 1u);
    EXPECT_LT(id, m.config().vocab);
  }
  EXPECT_EQ(m.tokenize("red"), m.tokenize("RED"));
  EXPECT_TRUE(m.tokenize("   ").empty());
}

TEST(ToyModel, VisionRowsCarryTheSkew) {
  const Fixture f = fixture();
  for (double skew : {1.0, 100.0}) {
    const Matrix rows = f.model.vision_rows(f.ds.scenes[0], skew);
    ASSERT_EQ(rows.rows(), 36u);
    for (std::size_t i = 0; i < rows.rows(); ++i) EXPECT_NEAR(rms(rows.row(i)), skew, 1e-9 * skew);
  }
  ToyConfig c = small_config();
  c.n_vision = 25;
  EXPECT_THROW(ToyModel::build(c).vision_rows(f.ds.scenes[0], 1.0), Error);
}

TEST(ToyModel, ForwardShapesAndRowSums) {
  const Fixture f = fixture();
  const ForwardRecord rec = f.model.forward(f.inputs, f.partition);
  ASSERT_EQ(rec.hidden_states.size(), 4u);
  EXPECT_EQ(rec.logits.size(), f.model.config().vocab);
  EXPECT_NO_THROW(rec.trace.validate());
  for (std::size_t l = 0; l < 3; ++l) {
    for (std::size_t h = 0; h < 2; ++h) {
      const Matrix& a = rec.trace.at(l, h).attention;
      for (std::size_t i = 0; i < a.rows(); ++i) {
        double sum = 0.0;
        for (std::size_t j = 0; j < a.cols(); ++j) {
          sum += a(i, j);
          if (j > i) {
            EXPECT_EQ(a(i, j), 0.0);
          }
        }
        EXPECT_NEAR(sum, 1.0, 1e-12);
      }
    }
  }
}

TEST(ToyModel, PrefixMatchesFullForward) {
  const Fixture f = fixture();
  const ForwardRecord full = f.model.forward(f.inputs, f.partition);
  const ForwardRecord prefix = f.model.forward_prefix(f.inputs, f.partition, 2);
  ASSERT_EQ(prefix.hidden_states.size(), 3u);
  for (std::size_t l = 0; l < 3; ++l) EXPECT_EQ(prefix.hidden_states[l], full.hidden_states[l]);
  EXPECT_EQ(prefix.trace.at(1, 1).attention, full.trace.at(1, 1).attention);
  EXPECT_THROW(f.model.forward_prefix(f.inputs, f.partition, 4), Error);
}

TEST(ToyModel, Causality) {
  const Fixture f = fixture();
  Matrix later = f.inputs;
  for (double& x : later.row(later.rows() - 1)) x += 1.0;
  const ForwardRecord a = f.model.forward(f.inputs, f.partition);
  const ForwardRecord b = f.model.forward(later, f.partition);
  for (std::size_t l = 0; l < a.hidden_states.size(); ++l) {
    for (std::size_t i = 0; i + 1 < f.inputs.rows(); ++i) {
      ASSERT_TRUE(std::ranges::equal(a.hidden_states[l].row(i), b.hidden_states[l].row(i)));
    }
  }
}

TEST(ToyModel, PositionOffsetInvariance) {
  const Fixture f = fixture();
  std::vector<double> shifted(f.inputs.rows());
  for (std::size_t i = 0; i < shifted.size(); ++i) shifted[i] = static_cast<double>(i) + 250.0;
  const ForwardRecord a = f.model.forward(f.inputs, f.partition);
  const ForwardRecord b = f.model.forward(f.inputs, f.partition, shifted);
  for (std::size_t i = 0; i < a.logits.size(); ++i) EXPECT_NEAR(a.logits[i], b.logits[i], 1e-9);
}

TEST(ToyModel, TextRowsIgnoreVisionOrderWithoutPositions) {
  // One block with every position equal: text rows see the vision span as a set.
  ToyConfig c = small_config();
  c.layers = 1;
  const ToyModel m = ToyModel::build(c);
  const Dataset ds = lite_dataset(4, 6);
  const Question& q = ds.questions[0];
  const Matrix in = m.assemble(ds.scene(q.scene_id), q, 1.0);
  const TokenPartition p = c.partition();
  const std::vector<double> zeros(in.rows(), 0.0);
  const ForwardRecord a = m.forward(in, p, zeros);
  const ForwardRecord b = m.forward(permute_vision_tokens(in, p, 11), p, zeros);
  for (std::size_t t : p.text) {
    for (std::size_t k = 0; k < in.cols(); ++k) {
      EXPECT_NEAR(a.hidden_states[1](t, k), b.hidden_states[1](t, k), 1e-12);
    }
  }
}

TEST(ToyModel, ForwardErrors) {
  const Fixture f = fixture();
  EXPECT_THROW(f.model.forward(Matrix(f.inputs.rows(), 3), f.partition), Error);
  EXPECT_THROW(f.model.forward(f.inputs, TokenPartition::contiguous(1, 1, 1)), Error);
  const std::vector<double> short_pos(3, 0.0);
  EXPECT_THROW(f.model.forward(f.inputs, f.partition, short_pos), Error);
}

TEST(ToyModel, ZeroLayersIsLinearReadout) {
  ToyConfig c = small_config();
  c.layers = 0;
  const ToyModel m = ToyModel::build(c);
  const Dataset ds = lite_dataset(2, 6);
  const Question& q = ds.questions[0];
  const Matrix in = m.assemble(ds.scene(q.scene_id), q);
  const ForwardRecord rec = m.forward(in, c.partition());
  EXPECT_EQ(rec.logits, vec_mat(in.row(in.rows() - 1), m.readout()));
  EXPECT_EQ(rec.hidden_states.size(), 1u);
}

TEST(ToyModel, InputNormRatioFollowsSkew) {
  ToyConfig c;
  c.seed = 12;
  const ToyModel m = ToyModel::build(c);
  const Dataset ds = lite_dataset(12, 6);
  const Question& q = ds.questions[0];
  const TokenPartition p = c.partition();
  for (double skew : {1.0, 10.0}) {
    const Matrix in = m.assemble(ds.scene(q.scene_id), q, skew);
    const NormProfile prof = norm_profile(std::vector<Matrix>{in}, p);
    EXPECT_NEAR(*prof.ratio[0], skew, 0.01 * skew);
  }
}

TEST(ToyModel, SkewedVisionDominatesEarlyLayers) {
  ToyConfig c;
  c.seed = 13;
  const ToyModel m = ToyModel::build(c);
  const Dataset ds = lite_dataset(13, 6);
  const Question& q = ds.questions[0];
  const TokenPartition p = c.partition();
  const ForwardRecord rec = m.forward(m.assemble(ds.scene(q.scene_id), q, 10.0), p);
  const NormProfile prof = norm_profile(rec.hidden_states, p);
  for (std::size_t l = 0; l <= c.layers / 4; ++l) EXPECT_GE(*prof.ratio[l], 2.0) << l;
  EXPECT_LT(*prof.ratio.back(), *prof.ratio.front());
  const AttentionShare share = attention_share(rec.trace, p);
  EXPECT_GT(share.vision, share.text);
}

TEST(ToyModel, NormalizedInputMatchesTextScale) {
  ToyConfig c;
  c.seed = 14;
  const ToyModel m = ToyModel::build(c);
  const Dataset ds = lite_dataset(14, 6);
  const Question& q = ds.questions[0];
  const TokenPartition p = c.partition();
  const Matrix skewed = m.assemble(ds.scene(q.scene_id), q, 100.0);
  const Matrix fixed = normalize_vision(skewed, p, NormCalibration{});
  const auto before = norm_profile(std::vector<Matrix>{skewed}, p);
  const auto after = norm_profile(std::vector<Matrix>{fixed}, p);
  EXPECT_LT(*after.ratio[0], *before.ratio[0]);
  EXPECT_NEAR(*after.ratio[0], 0.83, 1e-9);
}

TEST(ToyModel, ForwardIsDeterministic) {
  const Fixture f = fixture();
  const ForwardRecord a = f.model.forward(f.inputs, f.partition);
  const ForwardRecord b = f.model.forward(f.inputs, f.partition);
  EXPECT_EQ(a.logits, b.logits);
  EXPECT_EQ(a.trace, b.trace);
}

TEST(Predictors, PositionalReadoutSolvesOrderedInputs) {
  const ToyModel m = ToyModel::build(small_config());
  const Dataset ds = lite_dataset(8, 60);
  for (double skew : {1.0, 100.0}) {
    const PositionalReadout readout(m, skew);
    EXPECT_EQ(evaluate(m, readout, ds, exact_match, std::nullopt, skew).accuracy(), 1.0);
    EXPECT_LT(evaluate(m, readout, ds, exact_match, 21, skew).accuracy(), 0.9);
  }
}

TEST(Predictors, CompressedPipelineIgnoresVisionOrder) {
  const ToyModel m = ToyModel::build(small_config());
  const Dataset ds = lite_dataset(9, 18);
  const ToyModelPredictor pred(m, true);
  const TokenPartition p = m.config().partition();
  for (std::size_t i = 0; i < ds.questions.size(); ++i) {
    const Question& q = ds.questions[i];
    const Matrix in = m.assemble(ds.scene(q.scene_id), q);
    EXPECT_EQ(pred.answer(in, p, q), pred.answer(permute_vision_tokens(in, p, i), p, q));
  }
  const auto plain = evaluate(m, pred, ds, exact_match, std::nullopt, 1.0);
  const auto shuffled = evaluate(m, pred, ds, exact_match, 5, 1.0);
  EXPECT_EQ(plain.correct, shuffled.correct);
}

TEST(Predictors, AnswersAreChoices) {
  const ToyModel m = ToyModel::build(small_config());
  const Dataset ds = lite_dataset(10, 12);
  const ToyModelPredictor pred(m, false);
  const TokenPartition p = m.config().partition();
  for (const Question& q : ds.questions) {
    const std::string a = pred.answer(m.assemble(ds.scene(q.scene_id), q), p, q);
    EXPECT_NE(std::find(q.choices.begin(), q.choices.end(), a), q.choices.end());
  }
}

class ConstantPredictor : public Predictor {
 public:
  explicit ConstantPredictor(std::string a) : a_(std::move(a)) {}
  std::string answer(const Matrix&, const TokenPartition&, const Question&) const override {
    return a_;
  }

 private:
  std::string a_;
};

class GoldPredictor : public Predictor {
 public:
  std::string answer(const Matrix&, const TokenPartition&, const Question& q) const override {
    return q.gold;
  }
};

TEST(Evaluate, GoldAndChance) {
  const ToyModel m = ToyModel::build(small_config());
  const Dataset ds = lite_dataset(15, 600);
  EXPECT_EQ(evaluate(m, GoldPredictor{}, ds, exact_match, std::nullopt, 1.0).accuracy(), 1.0);
  Dataset relative = ds;
  std::erase_if(relative.questions,
                [](const Question& q) { return q.spatial != SpatialAxis::Relative; });
  ASSERT_EQ(relative.questions.size(), 300u);
  const double acc =
      evaluate(m, ConstantPredictor("yes"), relative, exact_match, std::nullopt, 1.0).accuracy();
  // Three standard errors of a fair coin over 300 draws.
  EXPECT_NEAR(acc, 0.5, 3 * std::sqrt(0.25 / 300));
}

TEST(LiteDataset, SizeAndGrid) {
  const Dataset ds = lite_dataset(1, 200);
  EXPECT_EQ(ds.questions.size(), 200u);
  for (const Scene& s : ds.scenes) {
    for (const SceneObject& o : s.objects) {
      const auto [r, c] = grid_cell(o.x, o.y);
      EXPECT_NEAR(o.x, (c + 0.5) / kLiteGrid, 1e-15);
      EXPECT_NEAR(o.y, (r + 0.5) / kLiteGrid, 1e-15);
    }
  }
}

TEST(Mechanism, EarlyLayersInsensitiveToInputScaleAtLayerZero) {
  // Pre-norm with eps = 0 makes the first block blind to per-row rescaling.
  ToyConfig c = small_config();
  c.rms_eps = 0.0;
  const ToyModel m = ToyModel::build(c);
  const Dataset ds = lite_dataset(3, 6);
  const Question& q = ds.questions[0];
  const TokenPartition p = c.partition();
  const double a = early_sensitivity(m, m.assemble(ds.scene(q.scene_id), q, 1.0), p, 1, 1.0);
  const double b = early_sensitivity(m, m.assemble(ds.scene(q.scene_id), q, 100.0), p, 1, 1.0);
  EXPECT_NEAR(a, b, 1e-12 * a);
  EXPECT_GT(a, 0.0);
  EXPECT_THROW(early_sensitivity(m, m.assemble(ds.scene(q.scene_id), q, 1.0), p, 0, 1.0), Error);
}

TEST(Mechanism, StudyShapes) {
  MechanismConfig cfg;
  cfg.model = small_config();
  cfg.seeds = 2;
  cfg.scenes_per_seed = 1;
  const MechanismResult r = measure_skew_mechanism(cfg);
  EXPECT_EQ(r.unskewed.size(), 2u);
  EXPECT_EQ(r.normalized.size(), 2u);
  EXPECT_NEAR(r.mean_skewed, (r.skewed[0] + r.skewed[1]) / 2, 1e-15);
  const MechanismResult again = measure_skew_mechanism(cfg);
  EXPECT_EQ(again.skewed, r.skewed);
  cfg.seeds = 0;
  EXPECT_THROW(measure_skew_mechanism(cfg), Error);
}

}  // namespace
}  // namespace vlmprobe
