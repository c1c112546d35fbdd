#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "csr/tensor_math.hpp"

namespace csr {

// Bias-free linear map into the prototype space; outputs are L2-normalized.
struct Projector {
  std::size_t out_dim = 0;  // D
  std::size_t in_dim = 0;   // C
  std::vector<double> matrix;  // D x C row-major

  Projector() = default;
  Projector(std::size_t d, std::size_t c);

  static Projector identity(std::size_t d, std::size_t c);

  double& at(std::size_t r, std::size_t c) { return matrix[r * in_dim + c]; }
  double at(std::size_t r, std::size_t c) const { return matrix[r * in_dim + c]; }

  // matrix * v, unnormalized.
  DenseVector apply(std::span<const double> v) const;

  bool operator==(const Projector&) const = default;
};

// normalize(matrix * v). Throws DomainError when the product is (near) zero.
DenseVector project(const Projector& p, std::span<const double> v);

// Unit-normalized projections of every cell of a feature map, row-major.
// Cells whose projection is (near) zero are flagged invalid.
struct ProjectedCells {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<DenseVector> units;
  std::vector<bool> valid;
  std::size_t degenerate = 0;
};
ProjectedCells project_cells(const FeatureMap& f, const Projector& p);

// <prototype, unit cell> per cell; invalid cells score 0.
Grid similarity_map(std::span<const double> prototype, const ProjectedCells& cells);

nlohmann::json projector_to_json(const Projector& p);
Projector projector_from_json(const nlohmann::json& j);

}  // namespace csr
