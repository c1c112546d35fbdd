#include "csr/evaluation.hpp"

#include <cmath>
#include <sstream>

#include <spdlog/fmt/fmt.h>

#include "csr/errors.hpp"

namespace csr {

F1Score macro_f1(std::span<const std::size_t> predictions, std::span<const std::size_t> targets, std::size_t num_classes) {
  if (predictions.empty()) throw DomainError("macro_f1: empty input");
  if (predictions.size() != targets.size()) throw DimensionError("macro_f1: predictions and targets differ in length");
  std::vector<std::size_t> tp(num_classes, 0), fp(num_classes, 0), fn(num_classes, 0);
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    if (predictions[i] >= num_classes || targets[i] >= num_classes) throw DomainError("macro_f1: class out of range");
    if (predictions[i] == targets[i]) {
      ++tp[targets[i]];
    } else {
      ++fp[predictions[i]];
      ++fn[targets[i]];
    }
  }
  F1Score out;
  out.per_class.resize(num_classes);
  double sum = 0.0;
  for (std::size_t l = 0; l < num_classes; ++l) {
    const double denom = static_cast<double>(2 * tp[l] + fp[l] + fn[l]);
    out.per_class[l] = denom == 0.0 ? 0.0 : 2.0 * static_cast<double>(tp[l]) / denom;
    sum += out.per_class[l];
  }
  out.macro = sum / static_cast<double>(num_classes);
  return out;
}

std::optional<bool> pointing_game(const Grid& map, std::span<const PixelBox> boxes, ImageSize image) {
  if (boxes.empty()) return std::nullopt;
  const PixelPoint c = cell_center(argmax_cell(map), map.height, map.width, image);
  for (const auto& b : boxes) {
    if (b.contains(c.x, c.y)) return true;
  }
  return false;
}

PgSelection select_pg_map(std::span<const double> scores, const Atlas& atlas, const TaskHead& head,
                          const Prediction& prediction) {
  if (scores.size() != atlas.size() || head.num_inputs != atlas.size()) {
    throw DimensionError("select_pg_map: scores, atlas and head disagree on M*K");
  }
  std::optional<std::size_t> best, best_score;
  double best_contribution = -INFINITY;
  bool any_nonzero = false;
  for (std::size_t i = 0; i < atlas.size(); ++i) {
    if (!atlas.live(i)) continue;
    const double contribution = scores[i] * head.weight(prediction.predicted_class, i);
    any_nonzero |= contribution != 0.0;
    if (contribution > best_contribution) {
      best_contribution = contribution;
      best = i;
    }
    if (!best_score || scores[i] > scores[*best_score]) best_score = i;
  }
  if (!best) throw DomainError("select_pg_map: every prototype is discarded");
  if (!any_nonzero) return {*best_score, true};
  return {*best, false};
}

EvalReport evaluate(const Model& model, std::span<const LabeledFeatures> samples, std::size_t num_classes) {
  if (samples.empty()) throw DomainError("evaluate: no samples");
  EvalReport report;
  report.num_samples = samples.size();
  report.explanation_size = model.atlas.live_concepts();
  std::vector<std::size_t> preds, targets;
  std::size_t hits = 0;
  for (const auto& s : samples) {
    const SimilarityMaps maps = projected_similarity_maps(s.features, model.projector, model.atlas);
    const DenseVector scores = similarity_scores(maps.maps);
    const Prediction p = predict(model.head, scores);
    SampleOutcome o{s.id, s.target_class, p.predicted_class, p.indecisive, std::nullopt, std::nullopt, std::nullopt};
    const auto boxes = s.boxes();
    if (!boxes.empty()) {
      const PgSelection sel = select_pg_map(scores, model.atlas, model.head, p);
      o.pg_prototype = sel.prototype;
      o.pg_hit = pointing_game(maps.maps[sel.prototype], boxes, s.image_size);
      ++report.pg_evaluated;
      hits += *o.pg_hit ? 1 : 0;
    }
    report.indecisive += p.indecisive ? 1 : 0;
    preds.push_back(p.predicted_class);
    targets.push_back(s.target_class);
    report.samples.push_back(std::move(o));
  }
  const F1Score f1 = macro_f1(preds, targets, num_classes);
  report.macro_f1 = f1.macro;
  report.per_class_f1 = f1.per_class;
  if (report.pg_evaluated > 0) report.pg_hit_rate = static_cast<double>(hits) / static_cast<double>(report.pg_evaluated);
  return report;
}

EvalReport oracle_interaction_eval(const Model& model, std::span<const LabeledFeatures> samples,
                                   std::size_t num_classes, const OracleConfig& cfg) {
  bool any_boxes = false;
  for (const auto& s : samples) any_boxes |= !s.concept_boxes.empty();
  if (!any_boxes) throw DomainError("oracle_interaction_eval: dataset carries no concept boxes");

  EvalReport report = evaluate(model, samples, num_classes);
  std::vector<std::size_t> preds, targets;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    SampleOutcome& o = report.samples[i];
    std::size_t final_pred = o.predicted;
    const auto boxes = s.boxes();
    if (!boxes.empty()) {
      const SimilarityMaps maps = projected_similarity_maps(s.features, model.projector, model.atlas);
      const Prediction p = predict(model.head, similarity_scores(maps.maps));
      if (p.top_gap() < cfg.threshold) {
        InteractionSpec spec;
        spec.positive = boxes;
        spec.alpha = cfg.alpha;
        final_pred = apply_interaction(maps.maps, model.atlas, spec, model.head, s.image_size).prediction.predicted_class;
        o.interacted_prediction = final_pred;
        ++report.interacted;
      }
    }
    preds.push_back(final_pred);
    targets.push_back(s.target_class);
  }
  report.interacted_macro_f1 = macro_f1(preds, targets, num_classes).macro;
  report.interaction_gain = *report.interacted_macro_f1 - report.macro_f1;
  return report;
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json j = {{"num_samples", num_samples},
                      {"macro_f1", macro_f1},
                      {"per_class_f1", per_class_f1},
                      {"pg_hit_rate", pg_hit_rate ? nlohmann::json(*pg_hit_rate) : nlohmann::json(nullptr)},
                      {"pg_evaluated", pg_evaluated},
                      {"explanation_size", explanation_size},
                      {"indecisive", indecisive}};
  if (interaction_gain) {
    j["interaction_gain"] = *interaction_gain;
    j["interacted_macro_f1"] = *interacted_macro_f1;
    j["interacted"] = interacted;
  }
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& o : samples) {
    nlohmann::json r = {{"id", o.id}, {"target", o.target}, {"predicted", o.predicted}, {"indecisive", o.indecisive}};
    if (o.pg_hit) r["pg_hit"] = *o.pg_hit;
    if (o.pg_prototype) r["pg_prototype"] = *o.pg_prototype;
    if (o.interacted_prediction) r["interacted_prediction"] = *o.interacted_prediction;
    rows.push_back(std::move(r));
  }
  j["samples"] = std::move(rows);
  return j;
}

std::string EvalReport::to_table(std::span<const std::string> class_names) const {
  std::ostringstream out;
  out << fmt::format("{:<22}{:>10}\n", "metric", "value");
  out << fmt::format("{:<22}{:>10}\n", "samples", num_samples);
  out << fmt::format("{:<22}{:>10.4f}\n", "macro F1", macro_f1);
  for (std::size_t l = 0; l < per_class_f1.size(); ++l) {
    const std::string name = l < class_names.size() ? class_names[l] : "class " + std::to_string(l);
    out << fmt::format("{:<22}{:>10.4f}\n", "  F1 " + name, per_class_f1[l]);
  }
  if (pg_hit_rate) {
    out << fmt::format("{:<22}{:>10.4f}\n", "PG hit rate", *pg_hit_rate);
    out << fmt::format("{:<22}{:>10}\n", "  PG evaluated", pg_evaluated);
  }
  out << fmt::format("{:<22}{:>10}\n", "explanation size", explanation_size);
  out << fmt::format("{:<22}{:>10}\n", "indecisive", indecisive);
  if (interaction_gain) {
    out << fmt::format("{:<22}{:>10}\n", "interacted", interacted);
    out << fmt::format("{:<22}{:>10.4f}\n", "macro F1 after", *interacted_macro_f1);
    out << fmt::format("{:<22}{:>+10.4f}\n", "interaction gain", *interaction_gain);
  }
  return out.str();
}

}  // namespace csr
