#include <algorithm>
#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "csr/errors.hpp"
#include "csr/reasoning.hpp"
#include "test_helpers.hpp"

namespace csr {
namespace {

constexpr ImageSize kImage{224, 224};  // 7x7 grid -> 32 px cells

Atlas random_atlas(Rng& rng, std::size_t K, std::size_t M, std::size_t D) {
  Atlas atlas(K, M, D);
  for (auto& p : atlas.prototypes) p = testing::unit_vector(rng, D);
  return atlas;
}

TaskHead random_head(Rng& rng, std::size_t L, std::size_t MK) {
  TaskHead head(L, MK);
  for (auto& w : head.weights) w = rng.normal();
  for (auto& b : head.biases) b = rng.normal();
  return head;
}

// Random maps with both signs, as similarity maps have.
std::vector<Grid> random_maps(Rng& rng, std::size_t n, std::size_t h = 7, std::size_t w = 7) {
  std::vector<Grid> maps;
  for (std::size_t i = 0; i < n; ++i) {
    Grid g(h, w);
    for (auto& x : g.values) x = rng.uniform(-1.0, 1.0);
    maps.push_back(std::move(g));
  }
  return maps;
}

PixelBox cell_box(std::size_t h, std::size_t w) { return cell_block_to_box(h, w, h + 1, w + 1, 7, 7, kImage); }

TEST(SimilarityMaps, IdentityAndBasisCells) {
  Atlas atlas(1, 1, 3);
  atlas.prototypes = {{1, 0, 0}};
  FeatureMap f(3, 2, 3);
  for (std::size_t h = 0; h < 2; ++h)
    for (std::size_t w = 0; w < 3; ++w) f.at(0, h, w) = 2.5;
  const auto maps = projected_similarity_maps(f, Projector::identity(3, 3), atlas);
  for (double x : maps.maps[0].values) EXPECT_NEAR(x, 1.0, 1e-15);
  EXPECT_EQ(maps.degenerate_cells, 0u);
}

TEST(SimilarityMaps, DiscardedPrototypeIsAllZero) {
  Rng rng(1);
  Atlas atlas = random_atlas(rng, 2, 2, 4);
  atlas.discarded[1] = true;
  const auto maps = projected_similarity_maps(testing::random_features(rng, 4, 3, 3), Projector::identity(4, 4), atlas);
  EXPECT_EQ(maps.maps[1], Grid(3, 3, 0.0));
  EXPECT_EQ(similarity_scores(maps.maps)[1], 0.0);
}

TEST(SimilarityMaps, MatchBruteForce) {
  Rng rng(2);
  for (int t = 0; t < 20; ++t) {
    const std::size_t C = 5, D = 3;
    Atlas atlas = random_atlas(rng, 3, 2, D);
    Projector proj(D, C);
    for (auto& x : proj.matrix) x = rng.normal();
    const auto f = testing::random_features(rng, C, 4, 3);
    const auto maps = projected_similarity_maps(f, proj, atlas);
    const auto scores = similarity_scores(maps.maps);
    for (std::size_t i = 0; i < atlas.size(); ++i) {
      double best = -INFINITY;
      for (std::size_t h = 0; h < 4; ++h) {
        for (std::size_t w = 0; w < 3; ++w) {
          DenseVector u(D, 0.0);
          double n = 0.0;
          for (std::size_t r = 0; r < D; ++r) {
            for (std::size_t c = 0; c < C; ++c) u[r] += proj.at(r, c) * f.at(c, h, w);
            n += u[r] * u[r];
          }
          double s = 0.0;
          for (std::size_t r = 0; r < D; ++r) s += atlas.prototypes[i][r] * u[r] / std::sqrt(n);
          EXPECT_NEAR(maps.maps[i].at(h, w), s, 1e-12);
          best = std::max(best, s);
        }
      }
      EXPECT_NEAR(scores[i], best, 1e-12);
    }
  }
}

TEST(SimilarityMaps, DegenerateCellScoresZero) {
  Atlas atlas(1, 1, 2);
  atlas.prototypes = {{-1, 0}};
  FeatureMap f(2, 1, 2, {1.0, 0.0, 0.0, 0.0});  // cell (0,1) is the zero vector
  const auto maps = projected_similarity_maps(f, Projector::identity(2, 2), atlas);
  EXPECT_EQ(maps.degenerate_cells, 1u);
  EXPECT_EQ(maps.maps[0], Grid(1, 2, {-1.0, 0.0}));
}

TEST(SimilarityScores, Examples) {
  Grid g(4, 5, 0.1);
  g.at(2, 3) = 0.85;
  EXPECT_EQ(similarity_scores(std::vector<Grid>{g, Grid(4, 5, 0.0)}), (DenseVector{0.85, 0.0}));
}

TEST(Predict, Examples) {
  TaskHead flat(2, 3);
  flat.biases = {1, 1};
  const auto p = predict(flat, DenseVector{0.2, 0.4, 0.9});
  EXPECT_DOUBLE_EQ(p.probabilities[0], 0.5);
  EXPECT_DOUBLE_EQ(p.probabilities[1], 0.5);
  EXPECT_TRUE(p.indecisive);
  EXPECT_EQ(p.predicted_class, 0u);

  TaskHead biased(2, 3);
  biased.biases = {5, 0};
  const auto q = predict(biased, DenseVector{0.2, 0.4, 0.9});
  EXPECT_EQ(q.predicted_class, 0u);
  EXPECT_FALSE(q.indecisive);
  const double top = std::exp(5.0) / (std::exp(5.0) + 1.0);
  EXPECT_NEAR(q.probabilities[0], top, 1e-15);
  EXPECT_NEAR(q.top_gap(), 2.0 * top - 1.0, 1e-15);
  EXPECT_GT(q.top_gap(), 0.3);
}

TEST(Predict, LengthMismatch) {
  EXPECT_THROW(predict(TaskHead(2, 3), DenseVector{1, 2}), DimensionError);
}

TEST(Predict, ProbabilitiesAndIndecisionByRecomputation) {
  Rng rng(3);
  for (int t = 0; t < 200; ++t) {
    const std::size_t L = 2 + t % 4, MK = 1 + t % 6;
    const auto head = random_head(rng, L, MK);
    const auto s = testing::random_vector(rng, MK);
    const auto p = predict(head, s);
    double sum = 0.0;
    for (double x : p.probabilities) sum += x;
    EXPECT_NEAR(sum, 1.0, 1e-9);
    EXPECT_EQ(p.predicted_class, argmax(p.probabilities));
    auto sorted = p.probabilities;
    std::sort(sorted.rbegin(), sorted.rend());
    EXPECT_EQ(p.indecisive, sorted[0] - sorted[1] < 0.3);
    for (std::size_t l = 0; l < L; ++l) {
      double z = head.biases[l];
      for (std::size_t i = 0; i < MK; ++i) z += head.weight(l, i) * s[i];
      EXPECT_NEAR(p.logits[l], z, 1e-12);
    }
  }
}

TEST(Predict, SimultaneousPermutationLeavesPredictionUnchanged) {
  Rng rng(4);
  for (int t = 0; t < 20; ++t) {
    const std::size_t K = 3, M = 2, D = 4;
    Atlas atlas = random_atlas(rng, K, M, D);
    const auto head = random_head(rng, 3, K * M);
    const auto f = testing::random_features(rng, D, 3, 3);
    const auto base = predict(head, similarity_scores(projected_similarity_maps(f, Projector::identity(D, D), atlas).maps));

    std::vector<std::size_t> perm(K * M);
    std::iota(perm.begin(), perm.end(), 0);
    for (std::size_t i = perm.size() - 1; i > 0; --i) std::swap(perm[i], perm[rng.uniform_int(0, static_cast<std::int64_t>(i))]);
    Atlas permuted = atlas;
    TaskHead permuted_head = head;
    for (std::size_t i = 0; i < perm.size(); ++i) {
      permuted.prototypes[i] = atlas.prototypes[perm[i]];
      for (std::size_t l = 0; l < 3; ++l) permuted_head.weight(l, i) = head.weight(l, perm[i]);
    }
    const auto again = predict(
        permuted_head, similarity_scores(projected_similarity_maps(f, Projector::identity(D, D), permuted).maps));
    for (std::size_t l = 0; l < 3; ++l) EXPECT_NEAR(base.logits[l], again.logits[l], 1e-9);
    EXPECT_EQ(base.predicted_class, again.predicted_class);
  }
}

TEST(TaskHead, GradientMatchesFiniteDifferences) {
  Rng rng(5);
  for (int t = 0; t < 50; ++t) {
    const std::size_t L = 2 + t % 3, MK = 1 + t % 5, N = 1 + t % 6;
    TaskHead head = random_head(rng, L, MK);
    std::vector<DenseVector> scores;
    std::vector<std::size_t> targets;
    for (std::size_t i = 0; i < N; ++i) {
      scores.push_back(testing::random_vector(rng, MK));
      targets.push_back(static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(L - 1))));
    }
    const auto g = task_loss_and_grad(head, scores, targets);
    auto loss = [&] { return task_loss_and_grad(head, scores, targets).loss; };
    double diff = 0.0, na = 0.0, nn = 0.0;
    auto accumulate = [&](double a, double n) {
      diff += (a - n) * (a - n);
      na += a * a;
      nn += n * n;
    };
    for (std::size_t i = 0; i < head.weights.size(); ++i) accumulate(g.weights[i], testing::central_difference(head.weights, i, loss));
    for (std::size_t i = 0; i < head.biases.size(); ++i) accumulate(g.biases[i], testing::central_difference(head.biases, i, loss));
    EXPECT_LT(std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), 1e-12}), 1e-4) << "instance " << t;
  }
}

TEST(TaskHead, LossErrors) {
  const TaskHead head(2, 2);
  const std::vector<DenseVector> scores{{1, 0}};
  EXPECT_THROW(task_loss_and_grad(head, scores, std::vector<std::size_t>{2}), DomainError);
  EXPECT_THROW(task_loss_and_grad(head, scores, std::vector<std::size_t>{0, 1}), DimensionError);
  EXPECT_THROW(train_task_head(std::vector<DenseVector>{}, std::vector<std::size_t>{}, 2, TaskTrainConfig{}),
               DomainError);
}

TEST(TaskHead, ZeroEpochsReturnsSeededInit) {
  const std::vector<DenseVector> scores{{1, 0}, {0, 1}};
  const std::vector<std::size_t> targets{0, 1};
  TaskTrainConfig cfg;
  cfg.epochs = 0;
  cfg.seed = 3;
  const auto a = train_task_head(scores, targets, 2, cfg);
  EXPECT_EQ(a.head, train_task_head(scores, targets, 2, cfg).head);
  EXPECT_EQ(a.loss_history.size(), 1u);
  for (double w : a.head.weights) EXPECT_LE(std::abs(w), cfg.init_scale);
  for (double b : a.head.biases) EXPECT_EQ(b, 0.0);
  cfg.seed = 4;
  EXPECT_NE(a.head, train_task_head(scores, targets, 2, cfg).head);
}

TEST(TaskHead, SeparableScoresReachFullAccuracy) {
  // Class l lights up score entries 2l and 2l+1, the rest is small noise.
  Rng rng(6);
  const std::size_t L = 3, MK = 6;
  std::vector<DenseVector> scores;
  std::vector<std::size_t> targets;
  for (std::size_t i = 0; i < 90; ++i) {
    const std::size_t l = i % L;
    DenseVector s(MK);
    for (auto& x : s) x = rng.uniform(0.0, 0.2);
    s[2 * l] += 0.7;
    s[2 * l + 1] += 0.7;
    scores.push_back(s);
    targets.push_back(l);
  }
  TaskTrainConfig cfg;
  cfg.learning_rate = 0.1;
  cfg.epochs = 500;
  const auto r = train_task_head(scores, targets, L, cfg);
  EXPECT_LE(r.loss_history.back(), r.loss_history.front());
  std::size_t correct = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) correct += predict(r.head, scores[i]).predicted_class == targets[i];
  EXPECT_EQ(correct, scores.size());
}

class ExplainSize : public ::testing::TestWithParam<std::size_t> {};

TEST_P(ExplainSize, OneEntryPerLiveConcept) {
  const std::size_t K = GetParam(), M = 2, D = 8;
  Rng rng(7 + K);
  const Atlas atlas = random_atlas(rng, K, M, D);
  const auto head = random_head(rng, 3, K * M);
  const auto f = testing::random_features(rng, D, 5, 5);
  const auto bundle = explain(f, Projector::identity(D, D), atlas, head);
  EXPECT_EQ(bundle.size(), K);
  EXPECT_TRUE(bundle.warnings.empty());
  for (std::size_t k = 0; k < K; ++k) {
    const auto& c = bundle.concepts[k];
    EXPECT_EQ(c.concept_index, k);
    EXPECT_EQ(c.best_prototype.concept_index, k);
    for (std::size_t m = 0; m < M; ++m) EXPECT_GE(c.score, bundle.scores[atlas.index(k, m)]);
    EXPECT_EQ(c.score, max_value(c.similarity_map));
  }
}

INSTANTIATE_TEST_SUITE_P(Sizes, ExplainSize, ::testing::Values(4u, 14u));

TEST(Explain, FullyDiscardedConceptIsOmittedWithWarning) {
  Rng rng(8);
  const std::size_t K = 5, M = 3, D = 6;
  Atlas atlas = random_atlas(rng, K, M, D);
  for (std::size_t m = 0; m < M; ++m) atlas.discarded[atlas.index(2, m)] = true;
  atlas.discarded[atlas.index(4, 0)] = true;  // partially discarded stays
  const auto bundle = explain(testing::random_features(rng, D, 4, 4), Projector::identity(D, D), atlas,
                              random_head(rng, 2, K * M));
  EXPECT_EQ(bundle.size(), K - 1);
  ASSERT_EQ(bundle.warnings.size(), 1u);
  EXPECT_NE(bundle.warnings[0].find("concept 2"), std::string::npos);
  for (const auto& c : bundle.concepts) {
    EXPECT_NE(c.concept_index, 2u);
    EXPECT_FALSE(atlas.discarded[atlas.index(c.best_prototype)]);
  }
}

TEST(Explain, CarriesProvenance) {
  Atlas atlas(1, 2, 2);
  atlas.prototypes = {{1, 0}, {0, 1}};
  atlas.provenance[1] = {true, "ref", {3, 4}, 0.9, std::string("img/ref.png")};
  FeatureMap f(2, 1, 1, {0.1, 1.0});
  const auto bundle = explain(f, Projector::identity(2, 2), atlas, TaskHead(2, 2));
  ASSERT_EQ(bundle.size(), 1u);
  EXPECT_EQ(bundle.concepts[0].best_prototype, (PrototypeId{0, 1}));
  EXPECT_EQ(bundle.concepts[0].reference_sample_id, "ref");
  EXPECT_EQ(bundle.concepts[0].highlight_cell, (Cell{3, 4}));
  EXPECT_EQ(bundle.concepts[0].image_path, std::optional<std::string>("img/ref.png"));
}

TEST(ImportanceMap, Examples) {
  InteractionSpec none;
  none.alpha = 0.3;
  EXPECT_EQ(build_importance_map(none, 7, 7, kImage), Grid(7, 7, 0.3));

  InteractionSpec whole;
  whole.alpha = 0.3;
  whole.positive = {{0, 0, 224, 224}};
  EXPECT_EQ(build_importance_map(whole, 7, 7, kImage), Grid(7, 7, 1.0));

  InteractionSpec overlap;
  overlap.alpha = 0.5;
  overlap.positive = {{0, 0, 224, 224}};
  overlap.negative = {cell_box(3, 4)};
  const auto a = build_importance_map(overlap, 7, 7, kImage);
  EXPECT_EQ(a.at(3, 4), 0.0);
  EXPECT_EQ(a.at(3, 3), 1.0);
}

TEST(ImportanceMap, CellCenterMembership) {
  InteractionSpec spec;
  spec.alpha = 0.2;
  // Covers pixels [40, 90) x [0, 20): centers at x = 48 and 80 (cells 1, 2), y = 16 (row 0).
  spec.positive = {{40, 0, 90, 20}};
  const auto a = build_importance_map(spec, 7, 7, kImage);
  for (std::size_t h = 0; h < 7; ++h)
    for (std::size_t w = 0; w < 7; ++w) EXPECT_EQ(a.at(h, w), (h == 0 && (w == 1 || w == 2)) ? 1.0 : 0.2) << h << "," << w;
}

TEST(ImportanceMap, EntriesComeFromTheThreeLevels) {
  Rng rng(9);
  for (int t = 0; t < 50; ++t) {
    InteractionSpec spec;
    spec.alpha = rng.uniform(0.0, 0.99);
    for (int b = 0; b < 3; ++b) {
      const auto x1 = static_cast<std::uint32_t>(rng.uniform_int(0, 200));
      const auto y1 = static_cast<std::uint32_t>(rng.uniform_int(0, 200));
      const PixelBox box{x1, y1, x1 + static_cast<std::uint32_t>(rng.uniform_int(1, 224 - x1)),
                         y1 + static_cast<std::uint32_t>(rng.uniform_int(1, 224 - y1))};
      (b % 2 ? spec.negative : spec.positive).push_back(box);
    }
    for (double x : build_importance_map(spec, 7, 7, kImage).values) {
      EXPECT_TRUE(x == 0.0 || x == 1.0 || x == spec.alpha);
    }
  }
}

TEST(InteractionSpec, Validation) {
  InteractionSpec spec;
  spec.alpha = 1.0;
  EXPECT_THROW(spec.validate(kImage), DomainError);
  spec.alpha = -0.1;
  EXPECT_THROW(spec.validate(kImage), DomainError);
  spec.alpha = 0.2;
  spec.positive = {{0, 0, 225, 10}};
  EXPECT_THROW(spec.validate(kImage), DomainError);
  spec.positive = {{10, 10, 10, 20}};  // empty
  EXPECT_THROW(build_importance_map(spec, 7, 7, kImage), DomainError);
}

TEST(Interaction, IdentityWeightingIsClipThenMax) {
  Rng rng(10);
  const Atlas atlas = random_atlas(rng, 3, 2, 4);
  const auto head = random_head(rng, 3, 6);
  const auto maps = random_maps(rng, 6);
  InteractionSpec spec;
  spec.positive = {{0, 0, 224, 224}};
  const auto r = apply_interaction(maps, atlas, spec, head, kImage);
  const auto baseline = similarity_scores(maps);
  for (std::size_t i = 0; i < maps.size(); ++i) {
    EXPECT_EQ(r.scores[i], max_value(clip_nonneg(maps[i])));
    if (baseline[i] >= 0) {
      EXPECT_EQ(r.scores[i], baseline[i]);
      EXPECT_EQ(argmax_cell(clip_nonneg(maps[i])), argmax_cell(maps[i]));
    }
  }
  EXPECT_EQ(r.prediction.logits, predict(head, r.scores).logits);
}

TEST(Interaction, ZeroAlphaMasksOutsideBox) {
  Rng rng(11);
  const Atlas atlas = random_atlas(rng, 2, 2, 4);
  const auto maps = random_maps(rng, 4);
  InteractionSpec spec;
  spec.alpha = 0.0;
  spec.positive = {cell_block_to_box(1, 2, 4, 6, 7, 7, kImage)};
  const auto r = apply_interaction(maps, atlas, spec, random_head(rng, 2, 4), kImage);
  for (std::size_t i = 0; i < maps.size(); ++i) {
    double best = 0.0;
    for (std::size_t h = 1; h < 4; ++h)
      for (std::size_t w = 2; w < 6; ++w) best = std::max(best, std::max(maps[i].at(h, w), 0.0));
    EXPECT_EQ(r.scores[i], best);
  }
}

TEST(Interaction, RejectingEveryConceptLeavesBiases) {
  Rng rng(12);
  const Atlas atlas = random_atlas(rng, 3, 2, 4);
  const auto head = random_head(rng, 4, 6);
  InteractionSpec spec;
  spec.alpha = 0.4;
  spec.rejected = {0, 1, 2};
  const auto r = apply_interaction(random_maps(rng, 6), atlas, spec, head, kImage);
  EXPECT_EQ(r.scores, DenseVector(6, 0.0));
  EXPECT_EQ(r.prediction.logits, head.biases);
}

TEST(Interaction, RejectedConceptsContributeNothing) {
  Rng rng(13);
  for (int t = 0; t < 30; ++t) {
    const Atlas atlas = random_atlas(rng, 4, 2, 4);
    const auto head = random_head(rng, 3, 8);
    InteractionSpec spec;
    spec.alpha = rng.uniform(0.0, 0.9);
    spec.rejected = {static_cast<std::size_t>(t % 4)};
    const auto r = apply_interaction(random_maps(rng, 8), atlas, spec, head, kImage);
    for (std::size_t m = 0; m < 2; ++m) EXPECT_EQ(r.scores[atlas.index(t % 4, m)], 0.0);
    const auto direct = predict(head, r.scores);
    for (std::size_t l = 0; l < 3; ++l) EXPECT_EQ(r.prediction.logits[l], direct.logits[l]);
  }
}

TEST(Interaction, NegativeOnlyNeverRaisesScores) {
  Rng rng(14);
  for (int t = 0; t < 50; ++t) {
    const Atlas atlas = random_atlas(rng, 2, 2, 4);
    const auto maps = random_maps(rng, 4);
    InteractionSpec spec;
    spec.alpha = rng.uniform(0.01, 0.99);
    spec.negative = {cell_block_to_box(t % 5, t % 3, t % 5 + 2, t % 3 + 3, 7, 7, kImage)};
    const auto r = apply_interaction(maps, atlas, spec, random_head(rng, 2, 4), kImage);
    for (std::size_t i = 0; i < maps.size(); ++i) EXPECT_LE(r.scores[i], max_value(clip_nonneg(maps[i])));
  }
}

TEST(Interaction, PositiveBoxOnArgmaxRecoversClippedMax) {
  Rng rng(15);
  for (int t = 0; t < 50; ++t) {
    const Atlas atlas = random_atlas(rng, 1, 1, 4);
    const auto maps = random_maps(rng, 1);
    const auto clipped = clip_nonneg(maps[0]);
    const Cell peak = argmax_cell(clipped);
    for (double alpha : {0.0, 0.2, 0.7}) {
      InteractionSpec spec;
      spec.alpha = alpha;
      spec.positive = {cell_box(peak.h, peak.w)};
      const auto r = apply_interaction(maps, atlas, spec, TaskHead(2, 1), kImage);
      EXPECT_EQ(r.scores[0], max_value(clipped));
    }
  }
}

TEST(Interaction, PermutationOfBoxesDoesNotMatter) {
  Rng rng(16);
  const Atlas atlas = random_atlas(rng, 2, 2, 4);
  const auto maps = random_maps(rng, 4);
  const auto head = random_head(rng, 2, 4);
  InteractionSpec a;
  a.alpha = 0.3;
  a.positive = {cell_box(0, 0), cell_box(3, 3), cell_box(6, 1)};
  a.negative = {cell_box(3, 3), cell_box(2, 5)};
  InteractionSpec b = a;
  std::reverse(b.positive.begin(), b.positive.end());
  std::reverse(b.negative.begin(), b.negative.end());
  EXPECT_EQ(apply_interaction(maps, atlas, a, head, kImage).scores, apply_interaction(maps, atlas, b, head, kImage).scores);
}

TEST(Interaction, Errors) {
  Rng rng(17);
  const Atlas atlas = random_atlas(rng, 2, 1, 4);
  InteractionSpec spec;
  spec.rejected = {2};
  EXPECT_THROW(apply_interaction(random_maps(rng, 2), atlas, spec, TaskHead(2, 2), kImage), DomainError);
  EXPECT_THROW(apply_interaction(random_maps(rng, 3), atlas, InteractionSpec{}, TaskHead(2, 2), kImage), DimensionError);
}

TEST(Refine, DiscardZeroesScore) {
  Rng rng(18);
  const Atlas atlas = random_atlas(rng, 3, 2, 5);
  const std::vector<PrototypeId> ids{{1, 0}};
  const Atlas refined = refine_atlas(atlas, ids);
  EXPECT_TRUE(refined.discarded[atlas.index(1, 0)]);
  for (int t = 0; t < 10; ++t) {
    const auto f = testing::random_features(rng, 5, 3, 3);
    EXPECT_EQ(similarity_scores(projected_similarity_maps(f, Projector::identity(5, 5), refined).maps)[2], 0.0);
  }
}

TEST(Refine, DiscardThenRestoreIsBitIdentical) {
  Rng rng(19);
  const Atlas atlas = random_atlas(rng, 3, 2, 5);
  const auto head = random_head(rng, 3, 6);
  const std::vector<PrototypeId> ids{{0, 1}, {2, 0}};
  const Atlas restored = refine_atlas(refine_atlas(atlas, ids, true), ids, false);
  EXPECT_EQ(restored, atlas);
  for (int t = 0; t < 10; ++t) {
    const auto f = testing::random_features(rng, 5, 3, 3);
    const auto a = predict(head, similarity_scores(projected_similarity_maps(f, Projector::identity(5, 5), atlas).maps));
    const auto b = predict(head, similarity_scores(projected_similarity_maps(f, Projector::identity(5, 5), restored).maps));
    EXPECT_EQ(a.logits, b.logits);
    EXPECT_EQ(a.probabilities, b.probabilities);
  }
}

TEST(Refine, UnknownId) {
  Rng rng(20);
  const Atlas atlas = random_atlas(rng, 2, 2, 3);
  EXPECT_THROW(refine_atlas(atlas, std::vector<PrototypeId>{{2, 0}}), NotFoundError);
  EXPECT_THROW(refine_atlas(atlas, std::vector<PrototypeId>{{0, 2}}), NotFoundError);
}

TEST(ReasoningJson, RoundTrips) {
  Rng rng(21);
  const auto head = random_head(rng, 3, 4);
  EXPECT_EQ(task_head_from_json(task_head_to_json(head)), head);
  const Grid g(2, 3, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(grid_from_json(grid_to_json(g)), g);
  auto bad = task_head_to_json(head);
  bad["L"] = 4;
  EXPECT_THROW(task_head_from_json(bad), FormatError);
}

}  // namespace
}  // namespace csr
