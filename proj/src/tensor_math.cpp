#include "csr/tensor_math.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "csr/errors.hpp"

namespace csr {

Grid::Grid(std::size_t h, std::size_t w, double fill)
    : height(h), width(w), values(h * w, fill) {}

Grid::Grid(std::size_t h, std::size_t w, std::vector<double> data)
    : height(h), width(w), values(std::move(data)) {
  if (values.size() != h * w) {
    throw DimensionError("grid: expected " + std::to_string(h * w) + " values, got " +
                         std::to_string(values.size()));
  }
  if (!all_finite(values)) throw DomainError("grid: non-finite entry");
}

FeatureMap::FeatureMap(std::size_t c, std::size_t h, std::size_t w, double fill)
    : channels(c), height(h), width(w), values(c * h * w, fill) {}

FeatureMap::FeatureMap(std::size_t c, std::size_t h, std::size_t w, std::vector<double> data)
    : channels(c), height(h), width(w), values(std::move(data)) {
  if (values.size() != c * h * w) {
    throw DimensionError("feature map: expected " + std::to_string(c * h * w) +
                         " values, got " + std::to_string(values.size()));
  }
}

DenseVector FeatureMap::patch(std::size_t h, std::size_t w) const {
  DenseVector out(channels);
  for (std::size_t c = 0; c < channels; ++c) out[c] = at(c, h, w);
  return out;
}

std::vector<DenseVector> FeatureMap::patches() const {
  std::vector<DenseVector> out(cells(), DenseVector(channels));
  for (std::size_t c = 0; c < channels; ++c) {
    const double* plane = values.data() + c * cells();
    for (std::size_t i = 0; i < cells(); ++i) out[i][c] = plane[i];
  }
  return out;
}

double dot(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size()) {
    throw DimensionError("dot: size mismatch " + std::to_string(u.size()) + " vs " +
                         std::to_string(v.size()));
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) acc += u[i] * v[i];
  return acc;
}

double norm(std::span<const double> v) { return std::sqrt(dot(v, v)); }

double cosine(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size()) {
    throw DimensionError("cosine: size mismatch " + std::to_string(u.size()) + " vs " +
                         std::to_string(v.size()));
  }
  const double nu = norm(u);
  const double nv = norm(v);
  if (nu == 0.0) throw DomainError("cosine: first argument has zero norm");
  if (nv == 0.0) throw DomainError("cosine: second argument has zero norm");
  const double c = dot(u, v) / (nu * nv);
  return std::clamp(c, -1.0, 1.0);
}

Grid spatial_softmax(const Grid& g) {
  Grid out(g.height, g.width);
  out.values = softmax(g.values);
  return out;
}

DenseVector scaled_softmax(std::span<const double> values, double scale) {
  if (!(scale > 0.0)) throw DomainError("scaled_softmax: scale must be positive");
  DenseVector out(values.size());
  if (values.empty()) return out;
  const double peak = values[argmax(values)];
  double total = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    out[i] = std::exp(scale * (values[i] - peak));
    total += out[i];
  }
  for (double& x : out) x /= total;
  return out;
}

DenseVector softmax(std::span<const double> values) { return scaled_softmax(values, 1.0); }

double log_sum_exp(std::span<const double> values) {
  if (values.empty()) return -INFINITY;
  const double peak = values[argmax(values)];
  double total = 0.0;
  for (double x : values) total += std::exp(x - peak);
  return peak + std::log(total);
}

DenseVector l2_normalize(std::span<const double> v) {
  const double n = norm(v);
  if (!(n > 1e-12)) throw DomainError("l2_normalize: near-zero norm");
  DenseVector out(v.begin(), v.end());
  for (double& x : out) x /= n;
  return out;
}

Grid clip_nonneg(const Grid& g) {
  Grid out = g;
  for (double& x : out.values) x = std::max(x, 0.0);
  return out;
}

std::size_t argmax(std::span<const double> values) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return best;
}

Cell argmax_cell(const Grid& g) {
  const std::size_t i = argmax(g.values);
  return {i / g.width, i % g.width};
}

double max_value(const Grid& g) { return g.values[argmax(g.values)]; }

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double log_sigmoid(double x) {
  if (x >= 0) return -std::log1p(std::exp(-x));
  return x - std::log1p(std::exp(x));
}

bool all_finite(std::span<const double> values) {
  return std::all_of(values.begin(), values.end(), [](double x) { return std::isfinite(x); });
}

}  // namespace csr
