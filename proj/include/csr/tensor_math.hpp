#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace csr {

using DenseVector = std::vector<double>;

// A height x width map stored row-major.
struct Grid {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> values;

  Grid() = default;
  Grid(std::size_t h, std::size_t w, double fill = 0.0);
  Grid(std::size_t h, std::size_t w, std::vector<double> data);

  double& at(std::size_t h, std::size_t w) { return values[h * width + w]; }
  double at(std::size_t h, std::size_t w) const { return values[h * width + w]; }
  std::size_t size() const { return values.size(); }

  bool operator==(const Grid&) const = default;
};

// A C x H x W patch-feature grid, stored channel-major.
struct FeatureMap {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> values;

  FeatureMap() = default;
  FeatureMap(std::size_t c, std::size_t h, std::size_t w, double fill = 0.0);
  FeatureMap(std::size_t c, std::size_t h, std::size_t w, std::vector<double> data);

  double& at(std::size_t c, std::size_t h, std::size_t w) {
    return values[(c * height + h) * width + w];
  }
  double at(std::size_t c, std::size_t h, std::size_t w) const {
    return values[(c * height + h) * width + w];
  }
  std::size_t cells() const { return height * width; }

  // The C-dimensional feature vector of cell (h, w).
  DenseVector patch(std::size_t h, std::size_t w) const;
  // All patch vectors in row-major cell order; patches[h * width + w].
  std::vector<DenseVector> patches() const;

  bool operator==(const FeatureMap&) const = default;
};

struct Cell {
  std::size_t h = 0;
  std::size_t w = 0;
  bool operator==(const Cell&) const = default;
};

double dot(std::span<const double> u, std::span<const double> v);
double norm(std::span<const double> v);

// Cosine similarity; throws DomainError naming the zero-norm argument.
double cosine(std::span<const double> u, std::span<const double> v);

// Softmax over all cells of the grid, with max subtraction.
Grid spatial_softmax(const Grid& g);

// softmax(scale * values). Throws DomainError for scale <= 0.
DenseVector scaled_softmax(std::span<const double> values, double scale);
DenseVector softmax(std::span<const double> values);

double log_sum_exp(std::span<const double> values);

// Throws DomainError when the norm is <= 1e-12.
DenseVector l2_normalize(std::span<const double> v);

Grid clip_nonneg(const Grid& g);

// Index of the maximum; ties resolve to the lowest index.
std::size_t argmax(std::span<const double> values);
Cell argmax_cell(const Grid& g);
double max_value(const Grid& g);

double sigmoid(double x);
// log(sigmoid(x)) without overflow for large |x|.
double log_sigmoid(double x);

bool all_finite(std::span<const double> values);

}  // namespace csr
