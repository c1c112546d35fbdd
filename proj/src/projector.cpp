#include "csr/projector.hpp"

#include <algorithm>
#include <string>

#include "csr/errors.hpp"

namespace csr {

Projector::Projector(std::size_t d, std::size_t c) : out_dim(d), in_dim(c), matrix(d * c, 0.0) {}

Projector Projector::identity(std::size_t d, std::size_t c) {
  Projector p(d, c);
  for (std::size_t i = 0; i < std::min(d, c); ++i) p.at(i, i) = 1.0;
  return p;
}

DenseVector Projector::apply(std::span<const double> v) const {
  if (v.size() != in_dim) {
    throw DimensionError("projector expects " + std::to_string(in_dim) + " inputs, got " + std::to_string(v.size()));
  }
  DenseVector out(out_dim, 0.0);
  for (std::size_t r = 0; r < out_dim; ++r) {
    const double* row = matrix.data() + r * in_dim;
    double acc = 0.0;
    for (std::size_t c = 0; c < in_dim; ++c) acc += row[c] * v[c];
    out[r] = acc;
  }
  return out;
}

DenseVector project(const Projector& p, std::span<const double> v) {
  const DenseVector u = p.apply(v);
  if (!(norm(u) > 1e-12)) throw DomainError("project: degenerate projection (zero output)");
  return l2_normalize(u);
}

ProjectedCells project_cells(const FeatureMap& f, const Projector& p) {
  if (f.channels != p.in_dim) {
    throw DimensionError("project_cells: projector expects " + std::to_string(p.in_dim) + " channels, features have " +
                         std::to_string(f.channels));
  }
  ProjectedCells out{f.height, f.width, {}, {}, 0};
  out.units.reserve(f.cells());
  out.valid.reserve(f.cells());
  for (const auto& patch : f.patches()) {
    DenseVector u = p.apply(patch);
    const double n = norm(u);
    if (n > 1e-12) {
      for (double& x : u) x /= n;
      out.valid.push_back(true);
    } else {
      u.assign(p.out_dim, 0.0);
      out.valid.push_back(false);
      ++out.degenerate;
    }
    out.units.push_back(std::move(u));
  }
  return out;
}

Grid similarity_map(std::span<const double> prototype, const ProjectedCells& cells) {
  Grid g(cells.height, cells.width);
  for (std::size_t i = 0; i < cells.units.size(); ++i) {
    g.values[i] = cells.valid[i] ? dot(prototype, cells.units[i]) : 0.0;
  }
  return g;
}

nlohmann::json projector_to_json(const Projector& p) {
  return {{"D", p.out_dim}, {"C", p.in_dim}, {"matrix", p.matrix}};
}

Projector projector_from_json(const nlohmann::json& j) {
  Projector p;
  try {
    p.out_dim = j.at("D").get<std::size_t>();
    p.in_dim = j.at("C").get<std::size_t>();
    p.matrix = j.at("matrix").get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("projector checkpoint: ") + e.what());
  }
  if (p.out_dim == 0 || p.matrix.size() != p.out_dim * p.in_dim) {
    throw FormatError("projector checkpoint: matrix size does not match D x C");
  }
  if (!all_finite(p.matrix)) throw FormatError("projector checkpoint: non-finite entry");
  return p;
}

}  // namespace csr
