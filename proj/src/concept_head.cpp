#include "csr/concept_head.hpp"

#include <cmath>
#include <string>

#include "csr/errors.hpp"
#include "csr/rng.hpp"

namespace csr {

ConceptHead::ConceptHead(std::size_t k, std::size_t c)
    : num_concepts(k), channels(c), weights(k * c, 0.0), biases(k, 0.0) {}

ConceptHead init_concept_head(std::size_t k, std::size_t c, std::uint64_t seed, double scale) {
  if (scale <= 0) scale = 1.0 / std::sqrt(static_cast<double>(c));
  ConceptHead head(k, c);
  Rng rng(seed);
  // Non-negative so every concept's max-pooled CAM can reach its evidence
  // cells; a unit anti-aligned at init never gets gradient through the max.
  for (double& w : head.weights) w = rng.uniform(0.0, scale);
  return head;
}

namespace {

void check_dims(const ConceptHead& head, const FeatureMap& f) {
  if (f.channels != head.channels) {
    throw DimensionError("concept head expects " + std::to_string(head.channels) + " channels, feature map has " +
                         std::to_string(f.channels));
  }
}

}  // namespace

std::vector<Grid> cams(const ConceptHead& head, const FeatureMap& f) {
  check_dims(head, f);
  const std::size_t cells = f.cells();
  std::vector<Grid> out;
  out.reserve(head.num_concepts);
  for (std::size_t k = 0; k < head.num_concepts; ++k) {
    Grid g(f.height, f.width, head.biases[k]);
    for (std::size_t c = 0; c < head.channels; ++c) {
      const double w = head.weight(k, c);
      const double* plane = f.values.data() + c * cells;
      for (std::size_t i = 0; i < cells; ++i) g.values[i] += w * plane[i];
    }
    out.push_back(std::move(g));
  }
  return out;
}

DenseVector concept_logits(const ConceptHead& head, const FeatureMap& f) {
  const auto maps = cams(head, f);
  DenseVector out;
  out.reserve(maps.size());
  for (const auto& m : maps) out.push_back(max_value(m));
  return out;
}

ConceptHeadGrad bce_loss_and_grad(const ConceptHead& head, const FeatureMap& f, std::span<const int> labels) {
  if (labels.size() != head.num_concepts) {
    throw DimensionError("bce: expected " + std::to_string(head.num_concepts) + " labels, got " +
                         std::to_string(labels.size()));
  }
  const auto maps = cams(head, f);
  const double K = static_cast<double>(head.num_concepts);
  ConceptHeadGrad g;
  g.weights.assign(head.weights.size(), 0.0);
  g.biases.assign(head.biases.size(), 0.0);
  for (std::size_t k = 0; k < head.num_concepts; ++k) {
    const Cell peak = argmax_cell(maps[k]);
    const double z = maps[k].at(peak.h, peak.w);
    const double y = labels[k];
    // -y log s(z) - (1-y) log(1-s(z)), with log(1-s(z)) = log s(-z)
    g.loss += -(y * log_sigmoid(z) + (1.0 - y) * log_sigmoid(-z)) / K;
    const double dz = (sigmoid(z) - y) / K;
    g.biases[k] = dz;
    for (std::size_t c = 0; c < head.channels; ++c) g.weights[k * head.channels + c] = dz * f.at(c, peak.h, peak.w);
  }
  return g;
}

double mean_bce(const ConceptHead& head, std::span<const ConceptTrainingExample> data) {
  double total = 0.0;
  for (const auto& ex : data) total += bce_loss_and_grad(head, *ex.features, ex.labels).loss;
  return total / static_cast<double>(data.size());
}

ConceptTrainingResult train_concept_head(std::span<const ConceptTrainingExample> data, std::size_t num_concepts,
                                         const TrainConfig& cfg) {
  if (data.empty()) throw DomainError("train_concept_head: empty dataset");
  if (!(cfg.learning_rate > 0)) throw DomainError("train_concept_head: learning rate must be positive");
  const std::size_t C = data.front().features->channels;
  ConceptTrainingResult result{init_concept_head(num_concepts, C, cfg.seed, cfg.weight_init_scale), {}};
  ConceptHead& head = result.head;
  const double n = static_cast<double>(data.size());

  for (std::size_t epoch = 0; epoch <= cfg.epochs; ++epoch) {
    std::vector<double> gw(head.weights.size(), 0.0);
    std::vector<double> gb(head.biases.size(), 0.0);
    double loss = 0.0;
    // Fixed sample order keeps the reduction bit-reproducible.
    for (const auto& ex : data) {
      const auto g = bce_loss_and_grad(head, *ex.features, ex.labels);
      loss += g.loss;
      for (std::size_t i = 0; i < gw.size(); ++i) gw[i] += g.weights[i];
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g.biases[i];
    }
    result.loss_history.push_back(loss / n);
    if (epoch == cfg.epochs) break;
    for (std::size_t i = 0; i < gw.size(); ++i) head.weights[i] -= cfg.learning_rate * gw[i] / n;
    for (std::size_t i = 0; i < gb.size(); ++i) head.biases[i] -= cfg.learning_rate * gb[i] / n;
  }
  return result;
}

ConceptTrainingResult train_concept_head(std::span<const LabeledFeatures> train, std::size_t num_concepts,
                                         const TrainConfig& cfg) {
  std::vector<ConceptTrainingExample> data;
  data.reserve(train.size());
  for (const auto& s : train) data.push_back({&s.features, s.concept_labels});
  return train_concept_head(data, num_concepts, cfg);
}

ConceptHead train_concept_head(const DatasetManifest& train, const TrainConfig& cfg) {
  const auto samples = train.load_split(Split::kTrain);
  return train_concept_head(samples, train.num_concepts, cfg).head;
}

nlohmann::json concept_head_to_json(const ConceptHead& head) {
  return {{"K", head.num_concepts}, {"C", head.channels}, {"weights", head.weights}, {"biases", head.biases}};
}

ConceptHead concept_head_from_json(const nlohmann::json& j) {
  ConceptHead head;
  try {
    head.num_concepts = j.at("K").get<std::size_t>();
    head.channels = j.at("C").get<std::size_t>();
    head.weights = j.at("weights").get<std::vector<double>>();
    head.biases = j.at("biases").get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("concept head checkpoint: ") + e.what());
  }
  if (head.weights.size() != head.num_concepts * head.channels || head.biases.size() != head.num_concepts) {
    throw FormatError("concept head checkpoint: weight/bias sizes do not match K, C");
  }
  if (!all_finite(head.weights) || !all_finite(head.biases)) throw FormatError("concept head checkpoint: non-finite entry");
  return head;
}

}  // namespace csr
