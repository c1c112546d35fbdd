#pragma once

#include <cstdint>
#include <vector>

#include <nlohmann/json.hpp>

#include "csr/data_ingest.hpp"
#include "csr/tensor_math.hpp"

namespace csr {

// 1x1 convolution from C feature channels to K concept activation maps.
struct ConceptHead {
  std::size_t num_concepts = 0;  // K
  std::size_t channels = 0;      // C
  std::vector<double> weights;   // K x C row-major
  std::vector<double> biases;    // K

  ConceptHead() = default;
  ConceptHead(std::size_t k, std::size_t c);

  double& weight(std::size_t k, std::size_t c) { return weights[k * channels + c]; }
  double weight(std::size_t k, std::size_t c) const { return weights[k * channels + c]; }

  bool operator==(const ConceptHead&) const = default;
};

struct TrainConfig {
  double learning_rate = 5.0;
  std::size_t epochs = 200;
  std::uint64_t seed = 0;
  double weight_init_scale = 0.0;  // <= 0 selects 1/sqrt(C)
};

// Seeded uniform init in [0, scale]; biases start at zero.
ConceptHead init_concept_head(std::size_t k, std::size_t c, std::uint64_t seed, double scale);

std::vector<Grid> cams(const ConceptHead& head, const FeatureMap& f);

// Spatial max of each CAM.
DenseVector concept_logits(const ConceptHead& head, const FeatureMap& f);

struct ConceptHeadGrad {
  double loss = 0.0;
  std::vector<double> weights;
  std::vector<double> biases;
};

// Mean-over-concepts binary cross-entropy of the max-pooled logits, with the
// max subgradient routed through each CAM's argmax cell.
ConceptHeadGrad bce_loss_and_grad(const ConceptHead& head, const FeatureMap& f, std::span<const int> labels);

struct ConceptTrainingExample {
  const FeatureMap* features;
  std::span<const int> labels;
};

struct ConceptTrainingResult {
  ConceptHead head;
  std::vector<double> loss_history;  // mean BCE before each epoch, then the final value
};

// Full-batch gradient descent. Throws DomainError on an empty set.
ConceptTrainingResult train_concept_head(std::span<const ConceptTrainingExample> data, std::size_t num_concepts,
                                         const TrainConfig& cfg);
ConceptTrainingResult train_concept_head(std::span<const LabeledFeatures> train, std::size_t num_concepts,
                                         const TrainConfig& cfg);
// Trains on the manifest's train split.
ConceptHead train_concept_head(const DatasetManifest& train, const TrainConfig& cfg);

double mean_bce(const ConceptHead& head, std::span<const ConceptTrainingExample> data);

nlohmann::json concept_head_to_json(const ConceptHead& head);
ConceptHead concept_head_from_json(const nlohmann::json& j);

}  // namespace csr
