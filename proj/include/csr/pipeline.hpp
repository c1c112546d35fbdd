#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "csr/concept_head.hpp"
#include "csr/data_ingest.hpp"
#include "csr/evaluation.hpp"
#include "csr/prototype_learning.hpp"
#include "csr/reasoning.hpp"

namespace csr {

struct ServiceConfig {
  std::string host = "127.0.0.1";
  int port = 8080;
  double default_alpha = 0.2;
  double indecision_threshold = kIndecisionThreshold;
  double session_ttl_seconds = 3600.0;
  std::optional<std::filesystem::path> static_dir;
  std::optional<std::filesystem::path> image_dir;
};

// Everything a pipeline run needs. Relative paths in the file are resolved
// against the directory holding the config file.
struct PipelineConfig {
  std::filesystem::path data_dir = "data";  // holds manifest.json
  std::filesystem::path work_dir = "work";  // checkpoints and reports
  std::uint64_t seed = 0;                   // applied to every stage
  SyntheticConfig synthetic;
  TrainConfig concept_head;
  ContrastiveConfig prototypes;
  TaskTrainConfig task_head;
  OracleConfig interaction;
  ServiceConfig service;

  std::filesystem::path manifest_path() const { return data_dir / "manifest.json"; }
  std::filesystem::path concept_head_path() const { return work_dir / "concept_head.json"; }
  std::filesystem::path vectors_path() const { return work_dir / "vectors.jsonl"; }
  std::filesystem::path projector_path() const { return work_dir / "projector.json"; }
  std::filesystem::path atlas_path() const { return work_dir / "atlas.json"; }
  std::filesystem::path prototype_report_path() const { return work_dir / "prototype_report.json"; }
  std::filesystem::path task_head_path() const { return work_dir / "task_head.json"; }
  std::filesystem::path atlas_edits_path() const { return work_dir / "atlas_edits.json"; }
  std::filesystem::path default_report_path(const std::string& stage) const { return work_dir / (stage + "_report.json"); }

  // Pushes the pipeline seed into every stage config.
  void apply_seed(std::uint64_t s);
};

// Throws ConfigError on unknown keys, wrong types, or invalid values.
PipelineConfig pipeline_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
nlohmann::json pipeline_config_to_json(const PipelineConfig& c);
PipelineConfig load_pipeline_config(const std::filesystem::path& path);

nlohmann::json read_json_file(const std::filesystem::path& path);
// Writes dump(1) plus a trailing newline; creates parent directories.
void write_json_file(const std::filesystem::path& path, const nlohmann::json& j);

// Loads a stage input, throwing NotFoundError naming the stage that produces it.
DatasetManifest require_manifest(const PipelineConfig& cfg);
ConceptHead require_concept_head(const PipelineConfig& cfg);
std::vector<LocalConceptVector> require_vectors(const PipelineConfig& cfg);
Projector require_projector(const PipelineConfig& cfg);
Atlas require_atlas(const PipelineConfig& cfg);
TaskHead require_task_head(const PipelineConfig& cfg);
Model require_model(const PipelineConfig& cfg);

DatasetManifest stage_gen_synthetic(const PipelineConfig& cfg);
ConceptTrainingResult stage_train_concepts(const PipelineConfig& cfg);
std::vector<LocalConceptVector> stage_extract_vectors(const PipelineConfig& cfg);

struct PrototypeStageResult {
  PrototypeTrainingResult training;
  IntraInterStats raw;
  IntraInterStats projected;
};
PrototypeStageResult stage_learn_prototypes(const PipelineConfig& cfg);

// Score vectors of a split under the given model artifacts.
std::vector<DenseVector> split_scores(std::span<const LabeledFeatures> samples, const Projector& projector,
                                      const Atlas& atlas);

TaskTrainingResult stage_train_head(const PipelineConfig& cfg);
EvalReport stage_eval(const PipelineConfig& cfg);
EvalReport stage_interact_eval(const PipelineConfig& cfg);
// Sets discarded flags in the atlas checkpoint.
Atlas stage_refine(const PipelineConfig& cfg, std::span<const PrototypeId> ids, bool discard = true);

nlohmann::json intra_inter_to_json(const IntraInterStats& s);

}  // namespace csr
