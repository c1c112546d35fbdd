#include <cmath>

#include <gtest/gtest.h>

#include "csr/errors.hpp"
#include "csr/evaluation.hpp"
#include "pipeline_fixture.hpp"
#include "test_helpers.hpp"

namespace csr {
namespace {

constexpr ImageSize kImage{224, 224};

// Confusion matrix first, then F1 from its rows and columns.
std::vector<double> brute_force_f1(const std::vector<std::size_t>& preds, const std::vector<std::size_t>& targets,
                                   std::size_t L) {
  std::vector<std::vector<int>> cm(L, std::vector<int>(L, 0));
  for (std::size_t i = 0; i < preds.size(); ++i) ++cm[targets[i]][preds[i]];
  std::vector<double> f1(L);
  for (std::size_t l = 0; l < L; ++l) {
    int tp = cm[l][l], row = 0, col = 0;
    for (std::size_t j = 0; j < L; ++j) {
      row += cm[l][j];
      col += cm[j][l];
    }
    const double precision = col ? static_cast<double>(tp) / col : 0.0;
    const double recall = row ? static_cast<double>(tp) / row : 0.0;
    f1[l] = precision + recall > 0 ? 2 * precision * recall / (precision + recall) : 0.0;
  }
  return f1;
}

TEST(MacroF1, Examples) {
  const std::vector<std::size_t> t{0, 1, 2, 1, 0};
  EXPECT_DOUBLE_EQ(macro_f1(t, t, 3).macro, 1.0);

  const std::vector<std::size_t> zeros{0, 0, 0}, ones{1, 1, 1};
  EXPECT_DOUBLE_EQ(macro_f1(zeros, ones, 2).macro, 0.0);

  const std::vector<std::size_t> preds{0, 0, 1, 1}, targets{0, 1, 1, 1};
  const auto f = macro_f1(preds, targets, 2);
  EXPECT_NEAR(f.per_class[0], 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(f.per_class[1], 4.0 / 5.0, 1e-15);
  EXPECT_NEAR(f.macro, 11.0 / 15.0, 1e-15);
}

TEST(MacroF1, AbsentClassScoresZero) {
  const std::vector<std::size_t> t{0, 1, 0, 1};
  const auto f = macro_f1(t, t, 3);
  EXPECT_EQ(f.per_class[2], 0.0);
  EXPECT_NEAR(f.macro, 2.0 / 3.0, 1e-15);
}

TEST(MacroF1, Errors) {
  EXPECT_THROW(macro_f1(std::vector<std::size_t>{}, std::vector<std::size_t>{}, 2), DomainError);
  EXPECT_THROW(macro_f1(std::vector<std::size_t>{0}, std::vector<std::size_t>{0, 1}, 2), DimensionError);
  EXPECT_THROW(macro_f1(std::vector<std::size_t>{2}, std::vector<std::size_t>{0}, 2), DomainError);
}

TEST(MacroF1, MatchesConfusionMatrixAndIsPermutationInvariant) {
  Rng rng(1);
  for (int t = 0; t < 2000; ++t) {
    const std::size_t L = 1 + t % 4, n = 1 + static_cast<std::size_t>(rng.uniform_int(0, 19));
    std::vector<std::size_t> preds(n), targets(n);
    for (std::size_t i = 0; i < n; ++i) {
      preds[i] = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(L - 1)));
      targets[i] = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(L - 1)));
    }
    const auto f = macro_f1(preds, targets, L);
    const auto expected = brute_force_f1(preds, targets, L);
    double mean = 0.0;
    for (std::size_t l = 0; l < L; ++l) {
      EXPECT_NEAR(f.per_class[l], expected[l], 1e-12);
      mean += expected[l] / static_cast<double>(L);
    }
    EXPECT_NEAR(f.macro, mean, 1e-12);

    for (std::size_t i = n - 1; i > 0; --i) {
      const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i)));
      std::swap(preds[i], preds[j]);
      std::swap(targets[i], targets[j]);
    }
    EXPECT_NEAR(macro_f1(preds, targets, L).macro, f.macro, 1e-12);
  }
}

TEST(PointingGame, HitMissAndNoBoxes) {
  Grid map(7, 7, 0.0);
  map.at(2, 3) = 1.0;  // center (112, 80)
  const std::vector<PixelBox> hit{{96, 64, 128, 96}};
  const std::vector<PixelBox> miss{{192, 192, 224, 224}};
  EXPECT_EQ(pointing_game(map, hit, kImage), std::optional<bool>(true));
  EXPECT_EQ(pointing_game(map, miss, kImage), std::optional<bool>(false));
  const std::vector<PixelBox> both{miss[0], hit[0]};
  EXPECT_EQ(pointing_game(map, both, kImage), std::optional<bool>(true));
  EXPECT_EQ(pointing_game(map, {}, kImage), std::nullopt);
}

TEST(PointingGame, InvariantUnderMonotoneTransforms) {
  Rng rng(2);
  for (int t = 0; t < 200; ++t) {
    Grid map(7, 7);
    for (auto& x : map.values) x = rng.uniform(-1.0, 1.0);
    const auto x1 = static_cast<std::uint32_t>(rng.uniform_int(0, 180));
    const auto y1 = static_cast<std::uint32_t>(rng.uniform_int(0, 180));
    const std::vector<PixelBox> boxes{{x1, y1, x1 + 44, y1 + 44}};
    const auto base = pointing_game(map, boxes, kImage);
    for (auto f : {+[](double x) { return 3.0 * x + 1.0; }, +[](double x) { return std::exp(x); },
                   +[](double x) { return std::atan(5.0 * x); }}) {
      Grid g = map;
      for (auto& x : g.values) x = f(x);
      EXPECT_EQ(pointing_game(g, boxes, kImage), base);
    }
  }
}

Atlas unit_atlas(std::size_t K, std::size_t M) {
  Atlas atlas(K, M, 1);
  for (auto& p : atlas.prototypes) p = {1.0};
  return atlas;
}

TEST(SelectPgMap, DominantWeight) {
  const Atlas atlas = unit_atlas(2, 2);
  TaskHead head(2, 4);
  for (std::size_t i = 0; i < 4; ++i) head.weight(1, i) = 0.1;
  head.weight(1, 2) = 5.0;
  const DenseVector scores{0.9, 0.8, 0.3, 0.7};
  Prediction p;
  p.predicted_class = 1;
  const auto sel = select_pg_map(scores, atlas, head, p);
  EXPECT_EQ(sel.prototype, 2u);
  EXPECT_FALSE(sel.fallback);
}

TEST(SelectPgMap, EqualWeightsPickHighestScore) {
  const Atlas atlas = unit_atlas(2, 2);
  TaskHead head(2, 4);
  for (auto& w : head.weights) w = 0.5;
  Prediction p;
  p.predicted_class = 0;
  EXPECT_EQ(select_pg_map(DenseVector{0.2, 0.6, 0.9, 0.1}, atlas, head, p).prototype, 2u);
}

TEST(SelectPgMap, ZeroContributionsFallBackAndFlag) {
  const Atlas atlas = unit_atlas(2, 2);
  const TaskHead head(2, 4);  // all-zero weights
  Prediction p;
  const auto sel = select_pg_map(DenseVector{0.2, 0.6, 0.9, 0.1}, atlas, head, p);
  EXPECT_EQ(sel.prototype, 2u);
  EXPECT_TRUE(sel.fallback);
}

TEST(SelectPgMap, SkipsDiscarded) {
  Atlas atlas = unit_atlas(2, 2);
  atlas.discarded[2] = true;
  TaskHead head(2, 4);
  for (auto& w : head.weights) w = 1.0;
  Prediction p;
  EXPECT_EQ(select_pg_map(DenseVector{0.2, 0.6, 0.9, 0.1}, atlas, head, p).prototype, 1u);
  for (std::size_t i = 0; i < 4; ++i) atlas.discarded[i] = true;
  EXPECT_THROW(select_pg_map(DenseVector{0.2, 0.6, 0.9, 0.1}, atlas, head, p), DomainError);
}

// Two concepts on channels 0 and 1, one blob each on a 7x7 grid.
std::vector<LabeledFeatures> toy_samples() {
  std::vector<LabeledFeatures> out;
  for (std::size_t i = 0; i < 6; ++i) {
    LabeledFeatures s;
    s.id = "t" + std::to_string(i);
    const std::size_t k = i % 2;
    s.concept_labels = {k == 0, k == 1};
    s.target_class = k;
    s.image_size = kImage;
    s.features = FeatureMap(3, 7, 7, 0.05);
    const std::size_t h = i, w = 6 - i;
    s.features.at(k, h, w) = 1.0;
    s.concept_boxes = {{k, cell_block_to_box(h, w, h + 1, w + 1, 7, 7, kImage)}};
    out.push_back(std::move(s));
  }
  return out;
}

Model toy_model(double bias_gap) {
  Model m;
  m.projector = Projector::identity(3, 3);
  m.atlas = Atlas(2, 1, 3);
  m.atlas.prototypes = {{1, 0, 0}, {0, 1, 0}};
  m.head = TaskHead(2, 2);
  m.head.weight(0, 0) = 10.0;
  m.head.weight(1, 1) = 10.0;
  m.head.biases = {bias_gap, 0.0};
  return m;
}

TEST(Evaluate, ToyModelIsPerfect) {
  const auto samples = toy_samples();
  const auto r = evaluate(toy_model(0.0), samples, 2);
  EXPECT_EQ(r.num_samples, 6u);
  EXPECT_DOUBLE_EQ(r.macro_f1, 1.0);
  ASSERT_TRUE(r.pg_hit_rate);
  EXPECT_DOUBLE_EQ(*r.pg_hit_rate, 1.0);
  EXPECT_EQ(r.pg_evaluated, 6u);
  EXPECT_EQ(r.explanation_size, 2u);
  EXPECT_EQ(r.indecisive, 0u);
  const auto j = r.to_json();
  EXPECT_EQ(j["samples"].size(), 6u);
  const std::vector<std::string> names{"a", "b"};
  EXPECT_NE(r.to_table(names).find("F1 a"), std::string::npos);
}

TEST(OracleInteraction, DecisiveModelGainsExactlyZero) {
  const auto samples = toy_samples();
  const auto r = oracle_interaction_eval(toy_model(0.0), samples, 2);
  EXPECT_EQ(r.interacted, 0u);
  ASSERT_TRUE(r.interaction_gain);
  EXPECT_EQ(*r.interaction_gain, 0.0);
  EXPECT_EQ(*r.interacted_macro_f1, r.macro_f1);
}

TEST(OracleInteraction, LeavesModelUntouched) {
  const auto samples = toy_samples();
  const Model model = toy_model(4.0);  // class-1 logits end up nearly tied
  const auto before_projector = projector_to_json(model.projector).dump();
  const auto before_atlas = atlas_to_json(model.atlas).dump();
  const auto before_head = task_head_to_json(model.head).dump();
  const auto r = oracle_interaction_eval(model, samples, 2);
  EXPECT_GT(r.interacted, 0u);
  EXPECT_EQ(projector_to_json(model.projector).dump(), before_projector);
  EXPECT_EQ(atlas_to_json(model.atlas).dump(), before_atlas);
  EXPECT_EQ(task_head_to_json(model.head).dump(), before_head);
}

TEST(OracleInteraction, NeedsBoxes) {
  auto samples = toy_samples();
  for (auto& s : samples) s.concept_boxes.clear();
  EXPECT_THROW(oracle_interaction_eval(toy_model(0.0), samples, 2), DomainError);
}

// A small trained model on generated data, shared by the checks below.
class TrainedModel : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new testing::TempDir("eval");
    cfg_ = new PipelineConfig(testing::small_pipeline_config(dir_->path()));
    testing::run_training_stages(*cfg_);
  }
  static void TearDownTestSuite() {
    delete cfg_;
    delete dir_;
  }
  static testing::TempDir* dir_;
  static PipelineConfig* cfg_;
};
testing::TempDir* TrainedModel::dir_ = nullptr;
PipelineConfig* TrainedModel::cfg_ = nullptr;

// Loose sanity bounds for the desk-scale fixture; the full-size thresholds
// are checked by the acceptance binary on default settings.
TEST_F(TrainedModel, CleanPredictionsAndPointingAreSane) {
  const auto report = stage_eval(*cfg_);
  EXPECT_GE(report.macro_f1, 0.9);
  ASSERT_TRUE(report.pg_hit_rate);
  EXPECT_GE(*report.pg_hit_rate, 0.85);
}

// The selected map should belong to a concept that is present and maps to
// the predicted class; under the priority rule that is what fixes the class.
TEST_F(TrainedModel, SelectedConceptExplainsPredictedClass) {
  const auto model = require_model(*cfg_);
  const auto manifest = require_manifest(*cfg_);
  auto syn = cfg_->synthetic;
  syn.finalize();
  std::size_t checked = 0, agree = 0;
  for (const auto& s : manifest.load_split(Split::kTest)) {
    if (s.boxes().empty()) continue;
    const auto scores = similarity_scores(projected_similarity_maps(s.features, model.projector, model.atlas).maps);
    const auto p = predict(model.head, scores);
    if (p.predicted_class != s.target_class) continue;
    const auto sel = select_pg_map(scores, model.atlas, model.head, p);
    const std::size_t k = model.atlas.id_of(sel.prototype).concept_index;
    ++checked;
    agree += (s.concept_labels[k] == 1 && syn.concept_class[k] == p.predicted_class) ? 1 : 0;
  }
  ASSERT_GT(checked, 0u);
  EXPECT_GE(static_cast<double>(agree) / static_cast<double>(checked), 0.9) << agree << " of " << checked;
}

TEST_F(TrainedModel, EvalIsRepeatable) {
  EXPECT_EQ(stage_eval(*cfg_).to_json(), stage_eval(*cfg_).to_json());
}

}  // namespace
}  // namespace csr
