#pragma once

#include <memory>
#include <string>

#include "csr/pipeline.hpp"

namespace csr {

// HTTP JSON service over a trained model and its dataset.
//
//   GET  /api/v1/samples
//   POST /api/v1/predict                 {sample_id}
//   POST /api/v1/sessions                {sample_id, idempotency_key?}
//   GET  /api/v1/sessions/{id}
//   POST /api/v1/sessions/{id}/interact  {positive_boxes, negative_boxes, alpha, rejected_concepts}
//   GET  /api/v1/atlas
//   POST /api/v1/atlas/discard           {prototype_ids}
//
// Errors carry {code, message, field?}. A missing model checkpoint is not
// fatal at startup; model-dependent endpoints answer 409 until restart.
class Service {
 public:
  explicit Service(PipelineConfig cfg);
  ~Service();
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  // Returns the bound port; port 0 picks an ephemeral one. Throws on failure.
  int bind(const std::string& host, int port);
  // Blocks until stop().
  void run();
  void stop();
  // Blocks until the server accepts connections.
  void wait_until_ready() const;

  bool model_loaded() const;
  int atlas_version() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace csr
