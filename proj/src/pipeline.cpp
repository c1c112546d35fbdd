#include "csr/pipeline.hpp"

#include <fstream>
#include <set>

#include <spdlog/spdlog.h>

#include "csr/errors.hpp"

namespace csr {

using nlohmann::json;

void PipelineConfig::apply_seed(std::uint64_t s) {
  seed = s;
  concept_head.seed = s;
  prototypes.seed = s;
  task_head.seed = s;
}

// ---------------------------------------------------------------------------
// Config schema

namespace {

void check_keys(const json& j, const std::string& section, const std::set<std::string>& allowed) {
  if (!j.is_object()) throw ConfigError(section + ": expected an object");
  for (const auto& [key, value] : j.items()) {
    if (!allowed.count(key)) throw ConfigError(section + ": unknown key '" + key + "'");
  }
}

template <typename T>
void read(const json& j, const std::string& section, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(section + "." + key + ": wrong type");
  }
}

std::filesystem::path resolve(const std::filesystem::path& base, const std::filesystem::path& p) {
  return p.is_absolute() || base.empty() ? p : base / p;
}

void require(bool ok, const std::string& message) {
  if (!ok) throw ConfigError(message);
}

}  // namespace

PipelineConfig pipeline_config_from_json(const json& j, const std::filesystem::path& base_dir) {
  PipelineConfig c;
  check_keys(j, "config",
             {"data_dir", "work_dir", "seed", "synthetic", "concept_head", "prototypes", "task_head", "interaction",
              "service"});
  std::string data_dir = c.data_dir.string(), work_dir = c.work_dir.string();
  read(j, "config", "data_dir", data_dir);
  read(j, "config", "work_dir", work_dir);
  c.data_dir = resolve(base_dir, data_dir);
  c.work_dir = resolve(base_dir, work_dir);
  std::uint64_t seed = 0;
  read(j, "config", "seed", seed);

  if (j.contains("synthetic")) {
    const auto& s = j.at("synthetic");
    check_keys(s, "synthetic",
               {"n_train", "n_test", "K", "L", "feature_dims", "image_size", "blob_min", "blob_max", "sigma",
                "amplitude", "min_concepts", "max_concepts", "concept_class", "priority", "background_class",
                "shortcut", "distractor"});
    if (s.contains("shortcut")) {
      check_keys(s.at("shortcut"), "synthetic.shortcut", {"enabled", "target_class", "channel", "probability", "size"});
    }
    if (s.contains("distractor")) {
      check_keys(s.at("distractor"), "synthetic.distractor", {"enabled", "min_mix", "max_mix", "size"});
    }
    try {
      c.synthetic = synthetic_config_from_json(s);
      SyntheticConfig probe = c.synthetic;
      probe.finalize();
    } catch (const json::exception& e) {
      throw ConfigError(std::string("synthetic: ") + e.what());
    } catch (const std::exception& e) {
      throw ConfigError(std::string("synthetic: ") + e.what());
    }
  }

  if (j.contains("concept_head")) {
    const auto& s = j.at("concept_head");
    check_keys(s, "concept_head", {"learning_rate", "epochs", "weight_init_scale"});
    read(s, "concept_head", "learning_rate", c.concept_head.learning_rate);
    read(s, "concept_head", "epochs", c.concept_head.epochs);
    read(s, "concept_head", "weight_init_scale", c.concept_head.weight_init_scale);
    require(c.concept_head.learning_rate >= 0, "concept_head.learning_rate must be >= 0");
  }

  if (j.contains("prototypes")) {
    const auto& s = j.at("prototypes");
    check_keys(s, "prototypes", {"lambda", "gamma", "delta", "M", "D", "learning_rate", "epochs"});
    read(s, "prototypes", "lambda", c.prototypes.lambda);
    read(s, "prototypes", "gamma", c.prototypes.gamma);
    read(s, "prototypes", "delta", c.prototypes.delta);
    read(s, "prototypes", "M", c.prototypes.M);
    read(s, "prototypes", "D", c.prototypes.D);
    read(s, "prototypes", "learning_rate", c.prototypes.learning_rate);
    read(s, "prototypes", "epochs", c.prototypes.epochs);
    try {
      c.prototypes.validate();
    } catch (const DomainError& e) {
      throw ConfigError(std::string("prototypes: ") + e.what());
    }
  }

  if (j.contains("task_head")) {
    const auto& s = j.at("task_head");
    check_keys(s, "task_head", {"learning_rate", "epochs", "init_scale"});
    read(s, "task_head", "learning_rate", c.task_head.learning_rate);
    read(s, "task_head", "epochs", c.task_head.epochs);
    read(s, "task_head", "init_scale", c.task_head.init_scale);
    require(c.task_head.learning_rate >= 0, "task_head.learning_rate must be >= 0");
  }

  if (j.contains("interaction")) {
    const auto& s = j.at("interaction");
    check_keys(s, "interaction", {"alpha", "threshold"});
    read(s, "interaction", "alpha", c.interaction.alpha);
    read(s, "interaction", "threshold", c.interaction.threshold);
    require(c.interaction.alpha >= 0 && c.interaction.alpha < 1, "interaction.alpha must lie in [0, 1)");
    require(c.interaction.threshold >= 0 && c.interaction.threshold <= 1, "interaction.threshold must lie in [0, 1]");
  }

  if (j.contains("service")) {
    const auto& s = j.at("service");
    check_keys(s, "service",
               {"host", "port", "default_alpha", "indecision_threshold", "session_ttl_seconds", "static_dir",
                "image_dir"});
    read(s, "service", "host", c.service.host);
    read(s, "service", "port", c.service.port);
    read(s, "service", "default_alpha", c.service.default_alpha);
    read(s, "service", "indecision_threshold", c.service.indecision_threshold);
    read(s, "service", "session_ttl_seconds", c.service.session_ttl_seconds);
    std::string dir;
    if (s.contains("static_dir")) {
      read(s, "service", "static_dir", dir);
      c.service.static_dir = resolve(base_dir, dir);
    }
    if (s.contains("image_dir")) {
      read(s, "service", "image_dir", dir);
      c.service.image_dir = resolve(base_dir, dir);
    }
    require(c.service.port >= 0 && c.service.port <= 65535, "service.port must lie in [0, 65535]");
    require(c.service.default_alpha >= 0 && c.service.default_alpha < 1, "service.default_alpha must lie in [0, 1)");
    require(c.service.session_ttl_seconds > 0, "service.session_ttl_seconds must be positive");
  }

  c.apply_seed(seed);
  return c;
}

json pipeline_config_to_json(const PipelineConfig& c) {
  json service = {{"host", c.service.host},
                  {"port", c.service.port},
                  {"default_alpha", c.service.default_alpha},
                  {"indecision_threshold", c.service.indecision_threshold},
                  {"session_ttl_seconds", c.service.session_ttl_seconds}};
  if (c.service.static_dir) service["static_dir"] = c.service.static_dir->string();
  if (c.service.image_dir) service["image_dir"] = c.service.image_dir->string();
  return {{"data_dir", c.data_dir.string()},
          {"work_dir", c.work_dir.string()},
          {"seed", c.seed},
          {"synthetic", synthetic_config_to_json(c.synthetic)},
          {"concept_head",
           {{"learning_rate", c.concept_head.learning_rate},
            {"epochs", c.concept_head.epochs},
            {"weight_init_scale", c.concept_head.weight_init_scale}}},
          {"prototypes",
           {{"lambda", c.prototypes.lambda},
            {"gamma", c.prototypes.gamma},
            {"delta", c.prototypes.delta},
            {"M", c.prototypes.M},
            {"D", c.prototypes.D},
            {"learning_rate", c.prototypes.learning_rate},
            {"epochs", c.prototypes.epochs}}},
          {"task_head",
           {{"learning_rate", c.task_head.learning_rate},
            {"epochs", c.task_head.epochs},
            {"init_scale", c.task_head.init_scale}}},
          {"interaction", {{"alpha", c.interaction.alpha}, {"threshold", c.interaction.threshold}}},
          {"service", service}};
}

PipelineConfig load_pipeline_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw NotFoundError("config " + path.string() + " not found");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return pipeline_config_from_json(j, path.parent_path());
}

// ---------------------------------------------------------------------------
// Checkpoint files

json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw NotFoundError(path.string() + ": not found");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void write_json_file(const std::filesystem::path& path, const json& j) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw NotFoundError(path.string() + ": cannot write");
  out << j.dump(1) << '\n';
}

namespace {

void need(const std::filesystem::path& path, const std::string& what, const std::string& producer) {
  if (!std::filesystem::exists(path)) {
    throw NotFoundError("missing " + what + " checkpoint " + path.string() + " (run '" + producer + "' first)");
  }
}

}  // namespace

DatasetManifest require_manifest(const PipelineConfig& cfg) {
  need(cfg.manifest_path(), "dataset manifest", "gen-synthetic");
  return load_manifest(cfg.manifest_path());
}

ConceptHead require_concept_head(const PipelineConfig& cfg) {
  need(cfg.concept_head_path(), "concept head", "train-concepts");
  return concept_head_from_json(read_json_file(cfg.concept_head_path()));
}

std::vector<LocalConceptVector> require_vectors(const PipelineConfig& cfg) {
  need(cfg.vectors_path(), "local concept vector", "extract-vectors");
  return read_vectors_jsonl(cfg.vectors_path());
}

Projector require_projector(const PipelineConfig& cfg) {
  need(cfg.projector_path(), "projector", "learn-prototypes");
  return projector_from_json(read_json_file(cfg.projector_path()));
}

Atlas require_atlas(const PipelineConfig& cfg) {
  need(cfg.atlas_path(), "atlas", "learn-prototypes");
  return atlas_from_json(read_json_file(cfg.atlas_path()));
}

TaskHead require_task_head(const PipelineConfig& cfg) {
  need(cfg.task_head_path(), "task head", "train-head");
  return task_head_from_json(read_json_file(cfg.task_head_path()));
}

Model require_model(const PipelineConfig& cfg) {
  Model m{require_projector(cfg), require_atlas(cfg), require_task_head(cfg)};
  if (m.head.num_inputs != m.atlas.size()) {
    throw FormatError("task head expects " + std::to_string(m.head.num_inputs) + " scores, atlas has " +
                      std::to_string(m.atlas.size()) + " prototypes");
  }
  return m;
}

// ---------------------------------------------------------------------------
// Stages

DatasetManifest stage_gen_synthetic(const PipelineConfig& cfg) {
  return generate_synthetic(cfg.synthetic, cfg.seed, cfg.data_dir);
}

ConceptTrainingResult stage_train_concepts(const PipelineConfig& cfg) {
  const DatasetManifest m = require_manifest(cfg);
  const auto train = m.load_split(Split::kTrain);
  auto result = train_concept_head(train, m.num_concepts, cfg.concept_head);
  spdlog::info("concept head: mean BCE {:.6f} -> {:.6f}", result.loss_history.front(), result.loss_history.back());
  write_json_file(cfg.concept_head_path(), concept_head_to_json(result.head));
  return result;
}

std::vector<LocalConceptVector> stage_extract_vectors(const PipelineConfig& cfg) {
  const DatasetManifest m = require_manifest(cfg);
  const ConceptHead head = require_concept_head(cfg);
  auto vectors = extract_all(m.load_split(Split::kTrain), head);
  spdlog::info("extracted {} local concept vectors", vectors.size());
  write_vectors_jsonl(cfg.vectors_path(), vectors);
  return vectors;
}

json intra_inter_to_json(const IntraInterStats& s) {
  auto q = [](const Quartiles& x) {
    return json{{"min", x.min}, {"q1", x.q1}, {"median", x.median}, {"q3", x.q3},
                {"max", x.max}, {"mean", x.mean}, {"count", x.count}};
  };
  return {{"intra", q(s.intra)}, {"inter", q(s.inter)}, {"gap", s.gap()}};
}

PrototypeStageResult stage_learn_prototypes(const PipelineConfig& cfg) {
  const DatasetManifest m = require_manifest(cfg);
  const auto vectors = require_vectors(cfg);
  const auto train = m.load_split(Split::kTrain);
  PrototypeStageResult out;
  out.training = train_prototypes(vectors, m.num_concepts, cfg.prototypes);
  out.training.atlas = link_prototype_images(out.training.atlas, vectors, out.training.projector, train);
  spdlog::info("prototypes: mean loss {:.6f} -> {:.6f}", out.training.loss_history.front(),
               out.training.loss_history.back());
  write_json_file(cfg.projector_path(), projector_to_json(out.training.projector));
  write_json_file(cfg.atlas_path(), atlas_to_json(out.training.atlas));

  json report = {{"loss_initial", out.training.loss_history.front()},
                 {"loss_final", out.training.loss_history.back()}};
  try {
    out.raw = intra_inter_stats(vectors, train);
    out.projected = intra_inter_stats(vectors, train, &out.training.projector);
    report["raw"] = intra_inter_to_json(out.raw);
    report["projected"] = intra_inter_to_json(out.projected);
    spdlog::info("intra-inter gap: raw {:.4f}, projected {:.4f}", out.raw.gap(), out.projected.gap());
  } catch (const DomainError& e) {
    spdlog::warn("intra/inter statistics skipped: {}", e.what());
  }
  write_json_file(cfg.prototype_report_path(), report);
  return out;
}

std::vector<DenseVector> split_scores(std::span<const LabeledFeatures> samples, const Projector& projector,
                                      const Atlas& atlas) {
  std::vector<DenseVector> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(similarity_scores(projected_similarity_maps(s.features, projector, atlas).maps));
  return out;
}

TaskTrainingResult stage_train_head(const PipelineConfig& cfg) {
  const DatasetManifest m = require_manifest(cfg);
  const Projector projector = require_projector(cfg);
  const Atlas atlas = require_atlas(cfg);
  const auto train = m.load_split(Split::kTrain);
  const auto scores = split_scores(train, projector, atlas);
  std::vector<std::size_t> targets;
  for (const auto& s : train) targets.push_back(s.target_class);
  auto result = train_task_head(scores, targets, m.num_classes, cfg.task_head);
  spdlog::info("task head: cross-entropy {:.6f} -> {:.6f}", result.loss_history.front(), result.loss_history.back());
  write_json_file(cfg.task_head_path(), task_head_to_json(result.head));
  return result;
}

EvalReport stage_eval(const PipelineConfig& cfg) {
  const DatasetManifest m = require_manifest(cfg);
  const Model model = require_model(cfg);
  return evaluate(model, m.load_split(Split::kTest), m.num_classes);
}

EvalReport stage_interact_eval(const PipelineConfig& cfg) {
  const DatasetManifest m = require_manifest(cfg);
  const Model model = require_model(cfg);
  return oracle_interaction_eval(model, m.load_split(Split::kTest), m.num_classes, cfg.interaction);
}

Atlas stage_refine(const PipelineConfig& cfg, std::span<const PrototypeId> ids, bool discard) {
  Atlas atlas = refine_atlas(require_atlas(cfg), ids, discard);
  write_json_file(cfg.atlas_path(), atlas_to_json(atlas));
  return atlas;
}

}  // namespace csr
