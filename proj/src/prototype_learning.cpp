#include "csr/prototype_learning.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "csr/errors.hpp"
#include "csr/rng.hpp"

namespace csr {

PrototypeId parse_prototype_id(const std::string& text) {
  const auto colon = text.find(':');
  const bool digits_only = std::all_of(text.begin(), text.end(), [](char c) { return c == ':' || (c >= '0' && c <= '9'); });
  if (!digits_only || colon == std::string::npos || colon == 0 || colon + 1 == text.size()) {
    throw DomainError("prototype id must be 'k:m', got '" + text + "'");
  }
  try {
    std::size_t used_k = 0, used_m = 0;
    const auto k = std::stoul(text.substr(0, colon), &used_k);
    const auto m = std::stoul(text.substr(colon + 1), &used_m);
    if (used_k != colon || used_m != text.size() - colon - 1) throw std::invalid_argument(text);
    return {k, m};
  } catch (const std::logic_error&) {
    throw DomainError("prototype id must be 'k:m', got '" + text + "'");
  }
}

std::string to_string(PrototypeId id) { return std::to_string(id.concept_index) + ":" + std::to_string(id.m); }

Atlas::Atlas(std::size_t k, std::size_t m, std::size_t d)
    : num_concepts(k),
      per_concept(m),
      dim(d),
      prototypes(k * m, DenseVector(d, 0.0)),
      provenance(k * m),
      discarded(k * m, false) {}

std::span<const DenseVector> Atlas::cluster(std::size_t k) const {
  return std::span<const DenseVector>(prototypes).subspan(k * per_concept, per_concept);
}

std::size_t Atlas::live_concepts() const {
  std::size_t count = 0;
  for (std::size_t k = 0; k < num_concepts; ++k) {
    for (std::size_t m = 0; m < per_concept; ++m) {
      if (live(index(k, m))) {
        ++count;
        break;
      }
    }
  }
  return count;
}

void ContrastiveConfig::validate() const {
  if (!(lambda > 1)) throw DomainError("contrastive config: lambda must be > 1");
  if (!(gamma > 1)) throw DomainError("contrastive config: gamma must be > 1");
  if (!(delta >= 0)) throw DomainError("contrastive config: delta must be >= 0");
  if (M == 0) throw DomainError("contrastive config: M must be positive");
  if (!(learning_rate > 0)) throw DomainError("contrastive config: learning rate must be positive");
}

// ---------------------------------------------------------------------------
// Losses

namespace {

// -log softmax(z)[positive], arranged so a single logit gives exactly 0.
double cross_entropy(std::span<const double> z, std::size_t positive) {
  const double peak = z[argmax(z)];
  double total = 0.0;
  for (double x : z) total += std::exp(x - peak);
  return std::log(total) + (peak - z[positive]);
}

void check_positive(std::size_t positive, std::size_t K) {
  if (positive >= K) {
    throw DomainError("positive concept " + std::to_string(positive) + " out of range for K=" + std::to_string(K));
  }
}

struct MultiForward {
  std::vector<double> cos;   // <p^{k_m}, v'>, atlas layout
  std::vector<double> q;     // per-concept assignments, atlas layout
  std::vector<double> sim;   // per concept, margin not applied
  std::vector<double> z;     // logits lambda * (sim + delta [k == positive])
  double loss = 0.0;
};

MultiForward forward_multi(const Atlas& atlas, std::span<const double> projected, std::size_t positive,
                           const ContrastiveConfig& cfg) {
  check_positive(positive, atlas.num_concepts);
  const std::size_t M = atlas.per_concept;
  MultiForward fw;
  fw.cos.resize(atlas.size());
  fw.q.resize(atlas.size());
  fw.sim.resize(atlas.num_concepts);
  fw.z.resize(atlas.num_concepts);
  for (std::size_t i = 0; i < atlas.size(); ++i) fw.cos[i] = dot(atlas.prototypes[i], projected);
  for (std::size_t k = 0; k < atlas.num_concepts; ++k) {
    const std::span<const double> c(fw.cos.data() + k * M, M);
    const DenseVector q = assignment(c, cfg.gamma);
    double s = 0.0;
    for (std::size_t m = 0; m < M; ++m) {
      fw.q[k * M + m] = q[m];
      s += q[m] * c[m];
    }
    fw.sim[k] = s;
    fw.z[k] = cfg.lambda * (k == positive ? s + cfg.delta : s);
  }
  fw.loss = cross_entropy(fw.z, positive);
  return fw;
}

}  // namespace

double loss_single(std::span<const DenseVector> prototypes, std::span<const double> projected, std::size_t positive,
                   double lambda) {
  check_positive(positive, prototypes.size());
  std::vector<double> z(prototypes.size());
  for (std::size_t k = 0; k < prototypes.size(); ++k) z[k] = lambda * dot(prototypes[k], projected);
  return cross_entropy(z, positive);
}

DenseVector assignment(std::span<const double> cluster_sims, double gamma) { return scaled_softmax(cluster_sims, gamma); }

double concept_similarity(std::span<const DenseVector> cluster, std::span<const double> projected, double gamma) {
  std::vector<double> c(cluster.size());
  for (std::size_t m = 0; m < cluster.size(); ++m) c[m] = dot(cluster[m], projected);
  const DenseVector q = assignment(c, gamma);
  double s = 0.0;
  for (std::size_t m = 0; m < c.size(); ++m) s += q[m] * c[m];
  return s;
}

double loss_multi(const Atlas& atlas, std::span<const double> projected, std::size_t positive,
                  const ContrastiveConfig& cfg) {
  return forward_multi(atlas, projected, positive, cfg).loss;
}

// ---------------------------------------------------------------------------
// Gradients
//
// u = P v, v' = u / |u|, c_km = <p_km, v'>, q_k = softmax_m(gamma c_k),
// sim_k = sum_m q_km c_km, z_k = lambda (sim_k + delta [k = positive]).
//   dL/dz_k     = softmax(z)_k - [k = positive]
//   dsim_k/dc_km = q_km (1 + gamma (c_km - sim_k))
//   dL/dp_km    = dL/dc_km v'
//   dL/dv'      = sum_km dL/dc_km p_km
//   dL/du       = (dL/dv' - <dL/dv', v'> v') / |u|
//   dL/dP       = dL/du v^T

ContrastiveGrad grad_loss_multi(const Atlas& atlas, const Projector& projector, std::span<const double> raw,
                                std::size_t positive, const ContrastiveConfig& cfg) {
  if (projector.out_dim != atlas.dim) {
    throw DimensionError("grad_loss_multi: projector outputs " + std::to_string(projector.out_dim) +
                         " dims, atlas has D=" + std::to_string(atlas.dim));
  }
  const DenseVector u = projector.apply(raw);
  const double unorm = norm(u);
  if (!(unorm > 1e-12)) throw DomainError("grad_loss_multi: degenerate projection (zero output)");
  DenseVector vp = u;
  for (double& x : vp) x /= unorm;

  const MultiForward fw = forward_multi(atlas, vp, positive, cfg);
  const std::size_t M = atlas.per_concept;
  const std::size_t D = atlas.dim;
  const DenseVector pz = softmax(fw.z);

  ContrastiveGrad g;
  g.loss = fw.loss;
  g.prototypes.assign(atlas.size(), DenseVector(D, 0.0));
  DenseVector dvp(D, 0.0);
  for (std::size_t k = 0; k < atlas.num_concepts; ++k) {
    const double dz = pz[k] - (k == positive ? 1.0 : 0.0);
    const double dsim = cfg.lambda * dz;
    for (std::size_t m = 0; m < M; ++m) {
      const std::size_t i = k * M + m;
      const double dc = dsim * fw.q[i] * (1.0 + cfg.gamma * (fw.cos[i] - fw.sim[k]));
      for (std::size_t d = 0; d < D; ++d) {
        g.prototypes[i][d] = dc * vp[d];
        dvp[d] += dc * atlas.prototypes[i][d];
      }
    }
  }
  const double radial = dot(dvp, vp);
  DenseVector du(D);
  for (std::size_t d = 0; d < D; ++d) du[d] = (dvp[d] - radial * vp[d]) / unorm;
  g.projector.assign(projector.matrix.size(), 0.0);
  for (std::size_t r = 0; r < D; ++r) {
    for (std::size_t c = 0; c < projector.in_dim; ++c) g.projector[r * projector.in_dim + c] = du[r] * raw[c];
  }
  return g;
}

void apply_gradient_step(Atlas& atlas, Projector& projector, const ContrastiveGrad& grad, double learning_rate) {
  for (std::size_t i = 0; i < atlas.size(); ++i) {
    DenseVector& p = atlas.prototypes[i];
    bool moved = false;
    for (std::size_t d = 0; d < p.size(); ++d) {
      const double next = p[d] - learning_rate * grad.prototypes[i][d];
      moved |= next != p[d];
      p[d] = next;
    }
    if (moved) p = l2_normalize(p);
  }
  for (std::size_t i = 0; i < projector.matrix.size(); ++i) projector.matrix[i] -= learning_rate * grad.projector[i];
}

// ---------------------------------------------------------------------------
// Training

PrototypeInit init_prototypes(std::size_t num_concepts, std::size_t channels, const ContrastiveConfig& cfg) {
  cfg.validate();
  const std::size_t D = cfg.D == 0 ? channels : cfg.D;
  Rng rng(cfg.seed);
  PrototypeInit init{Projector::identity(D, channels), Atlas(num_concepts, cfg.M, D)};
  for (double& x : init.projector.matrix) x += rng.uniform(-0.01, 0.01);
  for (auto& p : init.atlas.prototypes) {
    for (double& x : p) x = rng.normal();
    p = l2_normalize(p);
  }
  return init;
}

double mean_loss_multi(const Atlas& atlas, const Projector& projector, std::span<const LocalConceptVector> vectors,
                       const ContrastiveConfig& cfg) {
  double total = 0.0;
  for (const auto& v : vectors) total += loss_multi(atlas, project(projector, v.vector), v.concept_index, cfg);
  return total / static_cast<double>(vectors.size());
}

PrototypeTrainingResult train_prototypes(std::span<const LocalConceptVector> vectors, std::size_t num_concepts,
                                         const ContrastiveConfig& cfg) {
  cfg.validate();
  if (vectors.empty()) throw DomainError("train_prototypes: no local concept vectors");
  std::vector<std::size_t> counts(num_concepts, 0);
  const std::size_t C = vectors.front().vector.size();
  for (const auto& v : vectors) {
    if (v.concept_index >= num_concepts) {
      throw DomainError("train_prototypes: vector from " + v.sample_id + " has concept " +
                        std::to_string(v.concept_index) + " >= K");
    }
    if (v.vector.size() != C) throw DimensionError("train_prototypes: inconsistent vector dimensions");
    ++counts[v.concept_index];
  }
  for (std::size_t k = 0; k < num_concepts; ++k) {
    if (counts[k] == 0) throw DomainError("train_prototypes: concept " + std::to_string(k) + " has no vectors");
  }

  auto init = init_prototypes(num_concepts, C, cfg);
  PrototypeTrainingResult result{std::move(init.projector), std::move(init.atlas), {}};
  const double n = static_cast<double>(vectors.size());

  for (std::size_t epoch = 0; epoch <= cfg.epochs; ++epoch) {
    ContrastiveGrad total;
    total.prototypes.assign(result.atlas.size(), DenseVector(result.atlas.dim, 0.0));
    total.projector.assign(result.projector.matrix.size(), 0.0);
    for (const auto& v : vectors) {
      const auto g = grad_loss_multi(result.atlas, result.projector, v.vector, v.concept_index, cfg);
      total.loss += g.loss;
      for (std::size_t i = 0; i < g.prototypes.size(); ++i)
        for (std::size_t d = 0; d < g.prototypes[i].size(); ++d) total.prototypes[i][d] += g.prototypes[i][d];
      for (std::size_t i = 0; i < g.projector.size(); ++i) total.projector[i] += g.projector[i];
    }
    result.loss_history.push_back(total.loss / n);
    if (epoch == cfg.epochs) break;
    for (auto& p : total.prototypes)
      for (double& x : p) x /= n;
    for (double& x : total.projector) x /= n;
    apply_gradient_step(result.atlas, result.projector, total, cfg.learning_rate);
  }
  return result;
}

Atlas link_prototype_images(Atlas atlas, std::span<const LocalConceptVector> vectors, const Projector& projector,
                            std::span<const LabeledFeatures> samples) {
  std::map<std::string, const LabeledFeatures*> by_id;
  for (const auto& s : samples) by_id[s.id] = &s;

  std::vector<std::optional<DenseVector>> projected;
  projected.reserve(vectors.size());
  for (const auto& v : vectors) {
    DenseVector u = projector.apply(v.vector);
    if (norm(u) > 1e-12) {
      projected.emplace_back(l2_normalize(u));
    } else {
      projected.emplace_back(std::nullopt);
    }
  }

  std::map<std::string, ProjectedCells> cell_cache;
  for (std::size_t i = 0; i < atlas.size(); ++i) {
    const PrototypeId id = atlas.id_of(i);
    std::optional<std::size_t> best;
    double best_sim = -INFINITY;
    for (std::size_t j = 0; j < vectors.size(); ++j) {
      if (vectors[j].concept_index != id.concept_index || !projected[j]) continue;
      const double s = dot(*projected[j], atlas.prototypes[i]);
      if (s > best_sim) {
        best_sim = s;
        best = j;
      }
    }
    if (!best) throw DomainError("link_prototype_images: concept " + std::to_string(id.concept_index) + " has no candidates");

    const auto& source = vectors[*best];
    const auto it = by_id.find(source.sample_id);
    if (it == by_id.end()) throw NotFoundError("link_prototype_images: features for " + source.sample_id + " not provided");
    auto cached = cell_cache.find(source.sample_id);
    if (cached == cell_cache.end()) {
      cached = cell_cache.emplace(source.sample_id, project_cells(it->second->features, projector)).first;
    }
    const Grid map = similarity_map(atlas.prototypes[i], cached->second);
    atlas.provenance[i] = {true, source.sample_id, argmax_cell(map), best_sim, it->second->image_path};
  }
  return atlas;
}

// ---------------------------------------------------------------------------
// Checkpoints

nlohmann::json atlas_to_json(const Atlas& atlas) {
  nlohmann::json provenance = nlohmann::json::array();
  for (const auto& p : atlas.provenance) {
    nlohmann::json j = {{"linked", p.linked},
                        {"source_sample_id", p.source_sample_id},
                        {"source_cell", {p.source_cell.h, p.source_cell.w}},
                        {"similarity_at_link", p.similarity_at_link}};
    j["image_path"] = p.image_path ? nlohmann::json(*p.image_path) : nlohmann::json(nullptr);
    provenance.push_back(std::move(j));
  }
  std::vector<bool> discarded(atlas.discarded.begin(), atlas.discarded.end());
  return {{"K", atlas.num_concepts}, {"M", atlas.per_concept},   {"D", atlas.dim},
          {"prototypes", atlas.prototypes}, {"provenance", provenance}, {"discarded", discarded}};
}

Atlas atlas_from_json(const nlohmann::json& j) {
  Atlas atlas;
  try {
    atlas = Atlas(j.at("K").get<std::size_t>(), j.at("M").get<std::size_t>(), j.at("D").get<std::size_t>());
    const auto prototypes = j.at("prototypes").get<std::vector<DenseVector>>();
    const auto discarded = j.at("discarded").get<std::vector<bool>>();
    const auto& provenance = j.at("provenance");
    if (prototypes.size() != atlas.size() || discarded.size() != atlas.size() || provenance.size() != atlas.size()) {
      throw FormatError("atlas checkpoint: expected K*M entries");
    }
    for (std::size_t i = 0; i < atlas.size(); ++i) {
      if (prototypes[i].size() != atlas.dim || !all_finite(prototypes[i])) {
        throw FormatError("atlas checkpoint: prototype " + to_string(atlas.id_of(i)) + " malformed");
      }
      atlas.prototypes[i] = prototypes[i];
      atlas.discarded[i] = discarded[i];
      const auto& p = provenance[i];
      Provenance& out = atlas.provenance[i];
      out.linked = p.at("linked").get<bool>();
      out.source_sample_id = p.at("source_sample_id").get<std::string>();
      const auto cell = p.at("source_cell").get<std::vector<std::size_t>>();
      if (cell.size() != 2) throw FormatError("atlas checkpoint: source_cell must be [h,w]");
      out.source_cell = {cell[0], cell[1]};
      out.similarity_at_link = p.at("similarity_at_link").get<double>();
      if (p.contains("image_path") && !p.at("image_path").is_null()) out.image_path = p.at("image_path").get<std::string>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("atlas checkpoint: ") + e.what());
  }
  return atlas;
}

}  // namespace csr
