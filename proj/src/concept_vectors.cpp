#include "csr/concept_vectors.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>

#include "csr/errors.hpp"

namespace csr {

DenseVector extract_local_vector(const FeatureMap& f, const Grid& cam) {
  if (cam.height != f.height || cam.width != f.width) {
    throw DimensionError("extract_local_vector: CAM is " + std::to_string(cam.height) + "x" +
                         std::to_string(cam.width) + ", features are " + std::to_string(f.height) + "x" +
                         std::to_string(f.width));
  }
  const Grid weights = spatial_softmax(cam);
  const std::size_t cells = f.cells();
  DenseVector v(f.channels, 0.0);
  for (std::size_t c = 0; c < f.channels; ++c) {
    const double* plane = f.values.data() + c * cells;
    double acc = 0.0;
    for (std::size_t i = 0; i < cells; ++i) acc += weights.values[i] * plane[i];
    v[c] = acc;
  }
  return v;
}

std::vector<LocalConceptVector> extract_all(std::span<const LabeledFeatures> samples, const ConceptHead& head) {
  std::vector<LocalConceptVector> out;
  for (const auto& s : samples) {
    if (s.concept_labels.size() != head.num_concepts) {
      throw DimensionError("extract_all: sample " + s.id + " has " + std::to_string(s.concept_labels.size()) +
                           " labels, head has K=" + std::to_string(head.num_concepts));
    }
    bool any = std::any_of(s.concept_labels.begin(), s.concept_labels.end(), [](int y) { return y != 0; });
    if (!any) continue;
    const auto maps = cams(head, s.features);
    for (std::size_t k = 0; k < head.num_concepts; ++k) {
      if (s.concept_labels[k]) out.push_back({extract_local_vector(s.features, maps[k]), s.id, k});
    }
  }
  return out;
}

std::vector<LocalConceptVector> extract_all(const DatasetManifest& train, const ConceptHead& head) {
  const auto samples = train.load_split(Split::kTrain);
  return extract_all(samples, head);
}

SimilarityMap local_similarity_map(std::span<const double> v, const FeatureMap& f) {
  if (v.size() != f.channels) {
    throw DimensionError("local_similarity_map: vector has " + std::to_string(v.size()) + " dims, features have " +
                         std::to_string(f.channels));
  }
  if (norm(v) == 0.0) throw DomainError("local_similarity_map: zero vector");
  SimilarityMap out{Grid(f.height, f.width), 0.0, {}};
  const auto patches = f.patches();
  for (std::size_t i = 0; i < patches.size(); ++i) {
    out.map.values[i] = norm(patches[i]) == 0.0 ? 0.0 : cosine(v, patches[i]);
  }
  out.peak = argmax_cell(out.map);
  out.score = out.map.at(out.peak.h, out.peak.w);
  return out;
}

Quartiles quartiles(std::vector<double> values) {
  Quartiles q;
  q.count = values.size();
  if (values.empty()) return q;
  std::sort(values.begin(), values.end());
  auto at = [&](double p) {
    const double pos = p * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(pos);
    const std::size_t hi = std::min(lo + 1, values.size() - 1);
    return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
  };
  q.min = values.front();
  q.q1 = at(0.25);
  q.median = at(0.5);
  q.q3 = at(0.75);
  q.max = values.back();
  q.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  return q;
}

namespace {

// Unit-normalized cell vectors, raw or projected; nullopt marks zero cells.
std::vector<std::optional<DenseVector>> unit_cells(const FeatureMap& f, const Projector* projector) {
  std::vector<std::optional<DenseVector>> out;
  for (auto& p : f.patches()) {
    DenseVector u = projector ? projector->apply(p) : std::move(p);
    if (norm(u) > 1e-12) {
      out.emplace_back(l2_normalize(u));
    } else {
      out.emplace_back(std::nullopt);
    }
  }
  return out;
}

}  // namespace

IntraInterStats intra_inter_stats(std::span<const LocalConceptVector> vectors,
                                  std::span<const LabeledFeatures> samples, const Projector* projector) {
  std::map<std::string, const LabeledFeatures*> by_id;
  for (const auto& s : samples) by_id[s.id] = &s;

  std::map<std::size_t, std::set<std::string>> samples_per_concept;
  for (const auto& v : vectors) {
    if (!by_id.count(v.sample_id)) throw NotFoundError("intra_inter_stats: unknown sample " + v.sample_id);
    samples_per_concept[v.concept_index].insert(v.sample_id);
  }
  for (const auto& [k, ids] : samples_per_concept) {
    if (ids.size() < 2) {
      throw DomainError("intra_inter_stats: concept " + std::to_string(k) + " needs at least two samples");
    }
  }
  if (samples_per_concept.empty()) throw DomainError("intra_inter_stats: no vectors");

  // Samples that contribute local vectors, in first-appearance order.
  std::vector<const LabeledFeatures*> targets;
  std::set<std::string> seen;
  for (const auto& v : vectors) {
    if (seen.insert(v.sample_id).second) targets.push_back(by_id[v.sample_id]);
  }
  std::vector<std::vector<std::optional<DenseVector>>> cells;
  cells.reserve(targets.size());
  for (const auto* t : targets) cells.push_back(unit_cells(t->features, projector));

  IntraInterStats stats;
  for (const auto& v : vectors) {
    const DenseVector query = projector ? project(*projector, v.vector) : l2_normalize(v.vector);
    for (std::size_t j = 0; j < targets.size(); ++j) {
      if (targets[j]->id == v.sample_id) continue;
      double best = -INFINITY;
      for (const auto& cell : cells[j]) best = std::max(best, cell ? dot(query, *cell) : 0.0);
      if (targets[j]->concept_labels[v.concept_index]) {
        stats.intra_scores.push_back(best);
      } else {
        stats.inter_scores.push_back(best);
      }
    }
  }
  stats.intra = quartiles(stats.intra_scores);
  stats.inter = quartiles(stats.inter_scores);
  return stats;
}

nlohmann::json local_vector_to_json(const LocalConceptVector& v) {
  return {{"sample_id", v.sample_id}, {"concept", v.concept_index}, {"vector", v.vector}};
}

LocalConceptVector local_vector_from_json(const nlohmann::json& j) {
  try {
    return {j.at("vector").get<DenseVector>(), j.at("sample_id").get<std::string>(), j.at("concept").get<std::size_t>()};
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("local vector record: ") + e.what());
  }
}

void write_vectors_jsonl(const std::filesystem::path& path, std::span<const LocalConceptVector> vectors) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw NotFoundError(path.string() + ": cannot write");
  for (const auto& v : vectors) out << local_vector_to_json(v).dump() << '\n';
}

std::vector<LocalConceptVector> read_vectors_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw NotFoundError(path.string() + ": not found");
  std::vector<LocalConceptVector> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      out.push_back(local_vector_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError(path.string() + ": " + e.what());
    }
  }
  return out;
}

}  // namespace csr
