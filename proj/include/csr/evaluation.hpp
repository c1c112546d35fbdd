#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "csr/data_ingest.hpp"
#include "csr/projector.hpp"
#include "csr/prototype_learning.hpp"
#include "csr/reasoning.hpp"

namespace csr {

// The trained inference artifacts.
struct Model {
  Projector projector;
  Atlas atlas;
  TaskHead head;
};

struct F1Score {
  double macro = 0.0;
  std::vector<double> per_class;
};

// One-vs-rest F1 per class; a class with no support and no predictions scores 0.
F1Score macro_f1(std::span<const std::size_t> predictions, std::span<const std::size_t> targets, std::size_t num_classes);

// Hit when the map's argmax cell center lies in any box; nullopt when there are no boxes.
std::optional<bool> pointing_game(const Grid& map, std::span<const PixelBox> boxes, ImageSize image);

struct PgSelection {
  std::size_t prototype = 0;  // atlas index
  bool fallback = false;      // every contribution was zero; picked the highest score instead
};

// Live prototype maximizing s * W[predicted, i].
PgSelection select_pg_map(std::span<const double> scores, const Atlas& atlas, const TaskHead& head,
                          const Prediction& prediction);

struct SampleOutcome {
  std::string id;
  std::size_t target = 0;
  std::size_t predicted = 0;
  bool indecisive = false;
  std::optional<bool> pg_hit;
  std::optional<std::size_t> pg_prototype;
  std::optional<std::size_t> interacted_prediction;
};

struct EvalReport {
  std::size_t num_samples = 0;
  double macro_f1 = 0.0;
  std::vector<double> per_class_f1;
  std::optional<double> pg_hit_rate;
  std::size_t pg_evaluated = 0;
  std::size_t explanation_size = 0;
  std::size_t indecisive = 0;
  std::optional<double> interaction_gain;
  std::optional<double> interacted_macro_f1;
  std::size_t interacted = 0;
  std::vector<SampleOutcome> samples;

  nlohmann::json to_json() const;
  std::string to_table(std::span<const std::string> class_names = {}) const;
};

// Baseline predictions, macro F1, pointing game, and explanation size.
EvalReport evaluate(const Model& model, std::span<const LabeledFeatures> samples, std::size_t num_classes);

struct OracleConfig {
  double alpha = 0.2;
  double threshold = kIndecisionThreshold;
};

// Baseline pass, then an interaction with the ground-truth boxes as positive
// boxes on every indecisive sample. Throws DomainError if no sample has boxes.
EvalReport oracle_interaction_eval(const Model& model, std::span<const LabeledFeatures> samples,
                                   std::size_t num_classes, const OracleConfig& cfg = {});

}  // namespace csr
