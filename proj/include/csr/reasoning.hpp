#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "csr/data_ingest.hpp"
#include "csr/projector.hpp"
#include "csr/prototype_learning.hpp"
#include "csr/tensor_math.hpp"

namespace csr {

// Linear task head over the k-major score vector.
struct TaskHead {
  std::size_t num_classes = 0;  // L
  std::size_t num_inputs = 0;   // M * K
  std::vector<double> weights;  // L x MK row-major
  std::vector<double> biases;

  TaskHead() = default;
  TaskHead(std::size_t l, std::size_t mk);

  double& weight(std::size_t l, std::size_t i) { return weights[l * num_inputs + i]; }
  double weight(std::size_t l, std::size_t i) const { return weights[l * num_inputs + i]; }

  bool operator==(const TaskHead&) const = default;
};

inline constexpr double kIndecisionThreshold = 0.3;

struct Prediction {
  std::vector<double> logits;
  std::vector<double> probabilities;
  std::size_t predicted_class = 0;
  bool indecisive = false;  // top-1 minus top-2 probability below kIndecisionThreshold

  double top_gap() const;
};

struct SimilarityMaps {
  std::vector<Grid> maps;  // atlas layout
  std::size_t degenerate_cells = 0;
};

// S(h,w) = <p, project(P, f(:,h,w))>. Discarded prototypes get all-zero maps;
// cells whose projection vanishes score 0 and are counted (and logged).
SimilarityMaps projected_similarity_maps(const FeatureMap& f, const Projector& projector, const Atlas& atlas);

// Max cell of each map.
DenseVector similarity_scores(std::span<const Grid> maps);

Prediction predict(const TaskHead& head, std::span<const double> scores);

struct TaskTrainConfig {
  double learning_rate = 5.0;
  std::size_t epochs = 1000;
  std::uint64_t seed = 0;
  double init_scale = 0.01;  // weights ~ U(-scale, scale), biases 0
};

struct TaskHeadGrad {
  double loss = 0.0;
  std::vector<double> weights;
  std::vector<double> biases;
};

// Mean softmax cross-entropy over the batch and its gradient.
TaskHeadGrad task_loss_and_grad(const TaskHead& head, std::span<const DenseVector> scores,
                                std::span<const std::size_t> targets);

struct TaskTrainingResult {
  TaskHead head;
  std::vector<double> loss_history;  // epochs + 1 entries
};

TaskTrainingResult train_task_head(std::span<const DenseVector> scores, std::span<const std::size_t> targets,
                                   std::size_t num_classes, const TaskTrainConfig& cfg);

struct ConceptExplanation {
  std::size_t concept_index = 0;
  PrototypeId best_prototype;
  double score = 0.0;
  Grid similarity_map;
  std::string reference_sample_id;
  Cell highlight_cell;
  std::optional<std::string> image_path;
};

struct ExplanationBundle {
  std::vector<ConceptExplanation> concepts;  // one per concept with a live prototype
  DenseVector scores;
  Prediction prediction;
  std::vector<std::string> warnings;

  std::size_t size() const { return concepts.size(); }
};

ExplanationBundle explain(const FeatureMap& f, const Projector& projector, const Atlas& atlas, const TaskHead& head);

struct InteractionSpec {
  std::vector<PixelBox> positive;
  std::vector<PixelBox> negative;
  double alpha = 0.0;
  std::set<std::size_t> rejected;

  // Throws DomainError on alpha outside [0,1) or a box outside the image.
  void validate(ImageSize image) const;
};

// 1 inside any positive box, 0 inside any negative box (negative wins), alpha elsewhere.
// A cell belongs to a box when its center does.
Grid build_importance_map(const InteractionSpec& spec, std::size_t grid_h, std::size_t grid_w, ImageSize image);

struct InteractionResult {
  DenseVector scores;
  Prediction prediction;
};

// Scores are max(A * clip_nonneg(S)); rejected concepts are then zeroed.
InteractionResult apply_interaction(std::span<const Grid> maps, const Atlas& atlas, const InteractionSpec& spec,
                                    const TaskHead& head, ImageSize image);

// Sets (discard = true) or clears the discarded flag. Throws NotFoundError on unknown ids.
Atlas refine_atlas(Atlas atlas, std::span<const PrototypeId> ids, bool discard = true);

nlohmann::json task_head_to_json(const TaskHead& head);
TaskHead task_head_from_json(const nlohmann::json& j);
nlohmann::json grid_to_json(const Grid& g);
Grid grid_from_json(const nlohmann::json& j);
nlohmann::json prediction_to_json(const Prediction& p);

}  // namespace csr
