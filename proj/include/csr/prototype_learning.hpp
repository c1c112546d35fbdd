#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "csr/concept_vectors.hpp"
#include "csr/data_ingest.hpp"
#include "csr/projector.hpp"
#include "csr/tensor_math.hpp"

namespace csr {

// Training exemplar a prototype is linked to.
struct Provenance {
  bool linked = false;
  std::string source_sample_id;
  Cell source_cell;  // argmax of the prototype's similarity map on the source sample
  double similarity_at_link = 0.0;
  std::optional<std::string> image_path;

  bool operator==(const Provenance&) const = default;
};

struct PrototypeId {
  std::size_t concept_index = 0;
  std::size_t m = 0;
  bool operator==(const PrototypeId&) const = default;
};

// Parses "k:m".
PrototypeId parse_prototype_id(const std::string& text);
std::string to_string(PrototypeId id);

// M prototypes per concept, stored k-major: index = k * M + m.
struct Atlas {
  std::size_t num_concepts = 0;  // K
  std::size_t per_concept = 0;   // M
  std::size_t dim = 0;           // D
  std::vector<DenseVector> prototypes;
  std::vector<Provenance> provenance;
  std::vector<bool> discarded;

  Atlas() = default;
  Atlas(std::size_t k, std::size_t m, std::size_t d);

  std::size_t size() const { return prototypes.size(); }
  std::size_t index(std::size_t k, std::size_t m) const { return k * per_concept + m; }
  std::size_t index(PrototypeId id) const { return index(id.concept_index, id.m); }
  PrototypeId id_of(std::size_t i) const { return {i / per_concept, i % per_concept}; }
  const DenseVector& prototype(std::size_t k, std::size_t m) const { return prototypes[index(k, m)]; }
  // Prototypes of concept k, in m order.
  std::span<const DenseVector> cluster(std::size_t k) const;
  bool live(std::size_t i) const { return !discarded[i]; }
  std::size_t live_concepts() const;

  bool operator==(const Atlas&) const = default;
};

struct ContrastiveConfig {
  double lambda = 10.0;  // softmax sharpening across concepts, > 1
  double gamma = 10.0;   // assignment sharpening within a concept, > 1
  double delta = 0.01;   // margin on the positive concept, >= 0
  std::size_t M = 3;
  std::size_t D = 0;     // 0 selects D = C
  double learning_rate = 0.05;
  std::size_t epochs = 300;
  std::uint64_t seed = 0;

  void validate() const;
};

// Single-prototype contrastive loss: cross-entropy of softmax(lambda * <p^k, v'>) at k = positive.
double loss_single(std::span<const DenseVector> prototypes, std::span<const double> projected, std::size_t positive,
                   double lambda);

// softmax(gamma * cluster_sims) over the M prototypes of one concept.
DenseVector assignment(std::span<const double> cluster_sims, double gamma);

// Assignment-weighted cosine between v' and a concept's prototypes.
double concept_similarity(std::span<const DenseVector> cluster, std::span<const double> projected, double gamma);

// Multi-prototype loss with margin delta added to the positive concept's
// similarity in both numerator and denominator.
double loss_multi(const Atlas& atlas, std::span<const double> projected, std::size_t positive,
                  const ContrastiveConfig& cfg);

struct ContrastiveGrad {
  double loss = 0.0;
  std::vector<DenseVector> prototypes;  // same layout as Atlas::prototypes
  std::vector<double> projector;        // D x C
};

// Gradient of loss_multi(atlas, project(P, raw), positive) with respect to
// every prototype coordinate and every projector entry.
ContrastiveGrad grad_loss_multi(const Atlas& atlas, const Projector& projector, std::span<const double> raw,
                                std::size_t positive, const ContrastiveConfig& cfg);

// One gradient step; prototypes that moved are re-normalized onto the unit sphere.
void apply_gradient_step(Atlas& atlas, Projector& projector, const ContrastiveGrad& grad, double learning_rate);

struct PrototypeInit {
  Projector projector;
  Atlas atlas;
};
// Identity-padded projector plus U(-0.01, 0.01) noise; seeded random unit prototypes.
PrototypeInit init_prototypes(std::size_t num_concepts, std::size_t channels, const ContrastiveConfig& cfg);

struct PrototypeTrainingResult {
  Projector projector;
  Atlas atlas;
  std::vector<double> loss_history;  // mean loss before each epoch, then the final value
};

double mean_loss_multi(const Atlas& atlas, const Projector& projector, std::span<const LocalConceptVector> vectors,
                       const ContrastiveConfig& cfg);

// Full-batch gradient descent on the mean multi-prototype loss, jointly over
// the projector and the prototypes. Throws DomainError naming any concept in
// [0, K) without vectors.
PrototypeTrainingResult train_prototypes(std::span<const LocalConceptVector> vectors, std::size_t num_concepts,
                                         const ContrastiveConfig& cfg);

// Links each prototype to the same-concept training vector with the highest
// projected similarity, and records the prototype's peak cell on that sample.
Atlas link_prototype_images(Atlas atlas, std::span<const LocalConceptVector> vectors, const Projector& projector,
                            std::span<const LabeledFeatures> samples);

nlohmann::json atlas_to_json(const Atlas& atlas);
Atlas atlas_from_json(const nlohmann::json& j);

}  // namespace csr
