#pragma once

#include <filesystem>

#include "csr/pipeline.hpp"

namespace csr::testing {

// A desk-scale configuration that trains in a few seconds.
inline PipelineConfig small_pipeline_config(const std::filesystem::path& root, std::uint64_t seed = 1) {
  PipelineConfig cfg;
  cfg.data_dir = root / "data";
  cfg.work_dir = root / "work";
  cfg.synthetic.n_train = 240;
  cfg.synthetic.n_test = 60;
  cfg.synthetic.num_concepts = 4;
  cfg.synthetic.num_classes = 3;
  cfg.synthetic.dims = {128, 10, 10};
  cfg.synthetic.blob_min = 2;
  cfg.synthetic.blob_max = 3;
  cfg.prototypes.M = 2;
  cfg.prototypes.epochs = 150;
  cfg.task_head.epochs = 1000;
  cfg.apply_seed(seed);
  return cfg;
}

// Runs every training stage in order.
inline void run_training_stages(const PipelineConfig& cfg) {
  stage_gen_synthetic(cfg);
  stage_train_concepts(cfg);
  stage_extract_vectors(cfg);
  stage_learn_prototypes(cfg);
  stage_train_head(cfg);
}

}  // namespace csr::testing
