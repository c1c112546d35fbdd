#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "csr/concept_head.hpp"
#include "csr/data_ingest.hpp"
#include "csr/projector.hpp"
#include "csr/tensor_math.hpp"

namespace csr {

struct LocalConceptVector {
  DenseVector vector;  // dim C
  std::string sample_id;
  std::size_t concept_index = 0;

  bool operator==(const LocalConceptVector&) const = default;
};

// Sum over cells of spatial_softmax(cam)(h,w) * f(:,h,w).
DenseVector extract_local_vector(const FeatureMap& f, const Grid& cam);

// One vector per ground-truth-positive (sample, concept) pair, in sample
// order then concept order.
std::vector<LocalConceptVector> extract_all(std::span<const LabeledFeatures> samples, const ConceptHead& head);
std::vector<LocalConceptVector> extract_all(const DatasetManifest& train, const ConceptHead& head);

struct SimilarityMap {
  Grid map;
  double score = 0.0;  // max entry
  Cell peak;           // first max in row-major order
};

// Per-cell cosine between v and the patch features; zero-norm cells score 0.
SimilarityMap local_similarity_map(std::span<const double> v, const FeatureMap& f);

struct Quartiles {
  double min = 0, q1 = 0, median = 0, q3 = 0, max = 0, mean = 0;
  std::size_t count = 0;
};
Quartiles quartiles(std::vector<double> values);

struct IntraInterStats {
  Quartiles intra;
  Quartiles inter;
  std::vector<double> intra_scores;
  std::vector<double> inter_scores;

  double gap() const { return intra.mean - inter.mean; }
};

// Scores every local vector v_i^k against every other sample j that carries
// at least one concept: the max cosine over j's cells. Pairs where j is
// positive for k are intra-concept, the rest inter-concept. With a projector,
// both sides are projected first. Throws DomainError when a concept has fewer
// than two samples.
IntraInterStats intra_inter_stats(std::span<const LocalConceptVector> vectors,
                                  std::span<const LabeledFeatures> samples,
                                  const Projector* projector = nullptr);

nlohmann::json local_vector_to_json(const LocalConceptVector& v);
LocalConceptVector local_vector_from_json(const nlohmann::json& j);
// JSON lines {sample_id, concept, vector}.
void write_vectors_jsonl(const std::filesystem::path& path, std::span<const LocalConceptVector> vectors);
std::vector<LocalConceptVector> read_vectors_jsonl(const std::filesystem::path& path);

}  // namespace csr
