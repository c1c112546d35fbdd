#include "csr/reasoning.hpp"

#include <algorithm>
#include <cmath>

#include <spdlog/spdlog.h>

#include "csr/errors.hpp"
#include "csr/rng.hpp"

namespace csr {

TaskHead::TaskHead(std::size_t l, std::size_t mk)
    : num_classes(l), num_inputs(mk), weights(l * mk, 0.0), biases(l, 0.0) {}

double Prediction::top_gap() const {
  if (probabilities.size() < 2) return 1.0;
  double first = -INFINITY, second = -INFINITY;
  for (double p : probabilities) {
    if (p > first) {
      second = first;
      first = p;
    } else if (p > second) {
      second = p;
    }
  }
  return first - second;
}

SimilarityMaps projected_similarity_maps(const FeatureMap& f, const Projector& projector, const Atlas& atlas) {
  if (projector.out_dim != atlas.dim) {
    throw DimensionError("projected_similarity_maps: projector outputs " + std::to_string(projector.out_dim) +
                         " dims, atlas has D=" + std::to_string(atlas.dim));
  }
  const ProjectedCells cells = project_cells(f, projector);
  if (cells.degenerate > 0) {
    spdlog::warn("{} cell(s) project to zero; their similarity is taken as 0", cells.degenerate);
  }
  SimilarityMaps out;
  out.degenerate_cells = cells.degenerate;
  out.maps.reserve(atlas.size());
  for (std::size_t i = 0; i < atlas.size(); ++i) {
    out.maps.push_back(atlas.live(i) ? similarity_map(atlas.prototypes[i], cells) : Grid(f.height, f.width));
  }
  return out;
}

DenseVector similarity_scores(std::span<const Grid> maps) {
  DenseVector s;
  s.reserve(maps.size());
  for (const auto& m : maps) s.push_back(max_value(m));
  return s;
}

Prediction predict(const TaskHead& head, std::span<const double> scores) {
  if (scores.size() != head.num_inputs) {
    throw DimensionError("predict: score vector has " + std::to_string(scores.size()) + " entries, head expects " +
                         std::to_string(head.num_inputs));
  }
  Prediction p;
  p.logits.resize(head.num_classes);
  for (std::size_t l = 0; l < head.num_classes; ++l) {
    const std::span<const double> row(head.weights.data() + l * head.num_inputs, head.num_inputs);
    p.logits[l] = dot(row, scores) + head.biases[l];
  }
  p.probabilities = softmax(p.logits);
  p.predicted_class = argmax(p.probabilities);
  p.indecisive = p.top_gap() < kIndecisionThreshold;
  return p;
}

// ---------------------------------------------------------------------------
// Task head training

namespace {

void check_batch(const TaskHead& head, std::span<const DenseVector> scores, std::span<const std::size_t> targets) {
  if (scores.empty()) throw DomainError("task head: empty training data");
  if (scores.size() != targets.size()) throw DimensionError("task head: scores and targets differ in length");
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (scores[i].size() != head.num_inputs) throw DimensionError("task head: score vector " + std::to_string(i) + " has wrong length");
    if (targets[i] >= head.num_classes) throw DomainError("task head: target " + std::to_string(targets[i]) + " >= L");
  }
}

}  // namespace

TaskHeadGrad task_loss_and_grad(const TaskHead& head, std::span<const DenseVector> scores,
                                std::span<const std::size_t> targets) {
  check_batch(head, scores, targets);
  TaskHeadGrad g{0.0, std::vector<double>(head.weights.size(), 0.0), std::vector<double>(head.num_classes, 0.0)};
  const double n = static_cast<double>(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const Prediction p = predict(head, scores[i]);
    g.loss += (log_sum_exp(p.logits) - p.logits[targets[i]]) / n;
    for (std::size_t l = 0; l < head.num_classes; ++l) {
      const double dz = (p.probabilities[l] - (l == targets[i] ? 1.0 : 0.0)) / n;
      g.biases[l] += dz;
      for (std::size_t j = 0; j < head.num_inputs; ++j) g.weights[l * head.num_inputs + j] += dz * scores[i][j];
    }
  }
  return g;
}

TaskTrainingResult train_task_head(std::span<const DenseVector> scores, std::span<const std::size_t> targets,
                                   std::size_t num_classes, const TaskTrainConfig& cfg) {
  if (scores.empty()) throw DomainError("train_task_head: empty training data");
  if (num_classes == 0) throw DomainError("train_task_head: L must be positive");
  if (!(cfg.learning_rate >= 0)) throw DomainError("train_task_head: learning rate must be >= 0");
  TaskTrainingResult result{TaskHead(num_classes, scores.front().size()), {}};
  Rng rng(cfg.seed);
  for (double& w : result.head.weights) w = rng.uniform(-cfg.init_scale, cfg.init_scale);

  for (std::size_t epoch = 0; epoch <= cfg.epochs; ++epoch) {
    const TaskHeadGrad g = task_loss_and_grad(result.head, scores, targets);
    result.loss_history.push_back(g.loss);
    if (epoch == cfg.epochs) break;
    for (std::size_t i = 0; i < g.weights.size(); ++i) result.head.weights[i] -= cfg.learning_rate * g.weights[i];
    for (std::size_t l = 0; l < num_classes; ++l) result.head.biases[l] -= cfg.learning_rate * g.biases[l];
  }
  return result;
}

// ---------------------------------------------------------------------------
// Explanations and interaction

ExplanationBundle explain(const FeatureMap& f, const Projector& projector, const Atlas& atlas, const TaskHead& head) {
  SimilarityMaps maps = projected_similarity_maps(f, projector, atlas);
  ExplanationBundle bundle;
  bundle.scores = similarity_scores(maps.maps);
  bundle.prediction = predict(head, bundle.scores);
  if (maps.degenerate_cells > 0) {
    bundle.warnings.push_back(std::to_string(maps.degenerate_cells) + " cell(s) had degenerate projections");
  }
  for (std::size_t k = 0; k < atlas.num_concepts; ++k) {
    std::optional<std::size_t> best;
    for (std::size_t m = 0; m < atlas.per_concept; ++m) {
      const std::size_t i = atlas.index(k, m);
      if (!atlas.live(i)) continue;
      if (!best || bundle.scores[i] > bundle.scores[*best]) best = i;
    }
    if (!best) {
      bundle.warnings.push_back("concept " + std::to_string(k) + " has no live prototypes");
      continue;
    }
    const Provenance& prov = atlas.provenance[*best];
    bundle.concepts.push_back({k, atlas.id_of(*best), bundle.scores[*best], std::move(maps.maps[*best]),
                               prov.source_sample_id, prov.source_cell, prov.image_path});
  }
  return bundle;
}

void InteractionSpec::validate(ImageSize image) const {
  if (!(alpha >= 0.0 && alpha < 1.0)) throw DomainError("alpha must lie in [0, 1)");
  auto check = [&](const std::vector<PixelBox>& boxes, const char* which) {
    for (std::size_t i = 0; i < boxes.size(); ++i) {
      if (!boxes[i].fits(image)) {
        throw DomainError(std::string(which) + " box " + std::to_string(i) + " is empty or outside the " +
                          std::to_string(image.width) + "x" + std::to_string(image.height) + " image");
      }
    }
  };
  check(positive, "positive");
  check(negative, "negative");
}

Grid build_importance_map(const InteractionSpec& spec, std::size_t grid_h, std::size_t grid_w, ImageSize image) {
  spec.validate(image);
  Grid a(grid_h, grid_w, spec.alpha);
  for (std::size_t h = 0; h < grid_h; ++h) {
    for (std::size_t w = 0; w < grid_w; ++w) {
      const PixelPoint c = cell_center({h, w}, grid_h, grid_w, image);
      auto inside = [&](const PixelBox& b) { return b.contains(c.x, c.y); };
      if (std::any_of(spec.negative.begin(), spec.negative.end(), inside)) {
        a.at(h, w) = 0.0;
      } else if (std::any_of(spec.positive.begin(), spec.positive.end(), inside)) {
        a.at(h, w) = 1.0;
      }
    }
  }
  return a;
}

InteractionResult apply_interaction(std::span<const Grid> maps, const Atlas& atlas, const InteractionSpec& spec,
                                    const TaskHead& head, ImageSize image) {
  if (maps.size() != atlas.size()) throw DimensionError("apply_interaction: expected one map per prototype");
  if (maps.empty()) throw DimensionError("apply_interaction: no maps");
  for (std::size_t k : spec.rejected) {
    if (k >= atlas.num_concepts) throw DomainError("rejected concept " + std::to_string(k) + " out of range");
  }
  const Grid a = build_importance_map(spec, maps.front().height, maps.front().width, image);
  InteractionResult out;
  out.scores.resize(maps.size());
  for (std::size_t i = 0; i < maps.size(); ++i) {
    if (maps[i].height != a.height || maps[i].width != a.width) throw DimensionError("apply_interaction: map size mismatch");
    if (spec.rejected.count(atlas.id_of(i).concept_index)) {
      out.scores[i] = 0.0;
      continue;
    }
    double best = -INFINITY;
    for (std::size_t c = 0; c < a.size(); ++c) best = std::max(best, a.values[c] * std::max(0.0, maps[i].values[c]));
    out.scores[i] = best;
  }
  out.prediction = predict(head, out.scores);
  return out;
}

Atlas refine_atlas(Atlas atlas, std::span<const PrototypeId> ids, bool discard) {
  for (const auto& id : ids) {
    if (id.concept_index >= atlas.num_concepts || id.m >= atlas.per_concept) {
      throw NotFoundError("unknown prototype " + to_string(id));
    }
  }
  for (const auto& id : ids) atlas.discarded[atlas.index(id)] = discard;
  return atlas;
}

// ---------------------------------------------------------------------------
// Serialization

nlohmann::json task_head_to_json(const TaskHead& head) {
  return {{"L", head.num_classes}, {"MK", head.num_inputs}, {"weights", head.weights}, {"biases", head.biases}};
}

TaskHead task_head_from_json(const nlohmann::json& j) {
  TaskHead head;
  try {
    head = TaskHead(j.at("L").get<std::size_t>(), j.at("MK").get<std::size_t>());
    head.weights = j.at("weights").get<std::vector<double>>();
    head.biases = j.at("biases").get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("task head checkpoint: ") + e.what());
  }
  if (head.weights.size() != head.num_classes * head.num_inputs || head.biases.size() != head.num_classes) {
    throw FormatError("task head checkpoint: shapes do not match L x MK");
  }
  if (!all_finite(head.weights) || !all_finite(head.biases)) throw FormatError("task head checkpoint: non-finite entry");
  return head;
}

nlohmann::json grid_to_json(const Grid& g) { return {{"h", g.height}, {"w", g.width}, {"values", g.values}}; }

Grid grid_from_json(const nlohmann::json& j) {
  try {
    return Grid(j.at("h").get<std::size_t>(), j.at("w").get<std::size_t>(), j.at("values").get<std::vector<double>>());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("grid: ") + e.what());
  }
}

nlohmann::json prediction_to_json(const Prediction& p) {
  return {{"logits", p.logits},
          {"probabilities", p.probabilities},
          {"predicted_class", p.predicted_class},
          {"indecisive", p.indecisive}};
}

}  // namespace csr
