#include "csr/service.hpp"

#include <algorithm>
#include <chrono>
#include <map>
#include <mutex>
#include <optional>
#include <random>

#include <httplib.h>
#include <spdlog/spdlog.h>

#include "csr/errors.hpp"

namespace csr {

using nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

// A 4xx answer with the standard error body.
struct ApiError {
  int status;
  std::string code;
  std::string message;
  std::optional<std::string> field;
};

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, const ApiError& e) {
  json body = {{"code", e.code}, {"message", e.message}};
  if (e.field) body["field"] = *e.field;
  send_json(res, e.status, body);
}

json parse_body(const httplib::Request& req) {
  if (req.body.empty()) return json::object();
  try {
    json j = json::parse(req.body);
    if (!j.is_object()) throw ApiError{400, "invalid_request", "request body must be a JSON object", std::nullopt};
    return j;
  } catch (const json::parse_error& e) {
    throw ApiError{400, "invalid_request", std::string("malformed JSON: ") + e.what(), std::nullopt};
  }
}

std::string required_string(const json& body, const char* key) {
  if (!body.contains(key)) throw ApiError{422, "invalid_request", std::string(key) + " is required", key};
  if (!body.at(key).is_string()) throw ApiError{422, "invalid_request", std::string(key) + " must be a string", key};
  return body.at(key).get<std::string>();
}

// Accepts [x1, y1, x2, y2] or {x1, y1, x2, y2}.
PixelBox parse_box(const json& j, const std::string& field) {
  auto bad = [&] { return ApiError{422, "invalid_spec", "box must be [x1, y1, x2, y2] of non-negative integers", field}; };
  std::vector<json> parts;
  if (j.is_array() && j.size() == 4) {
    parts.assign(j.begin(), j.end());
  } else if (j.is_object() && j.contains("x1") && j.contains("y1") && j.contains("x2") && j.contains("y2")) {
    parts = {j.at("x1"), j.at("y1"), j.at("x2"), j.at("y2")};
  } else {
    throw bad();
  }
  std::uint32_t v[4];
  for (int i = 0; i < 4; ++i) {
    if (!parts[i].is_number_integer() || parts[i].get<long long>() < 0) throw bad();
    v[i] = static_cast<std::uint32_t>(parts[i].get<long long>());
  }
  return {v[0], v[1], v[2], v[3]};
}

json box_to_json(const PixelBox& b) { return json::array({b.x1, b.y1, b.x2, b.y2}); }

InteractionSpec parse_spec(const json& body, const Atlas& atlas, ImageSize image, double default_alpha) {
  InteractionSpec spec;
  spec.alpha = default_alpha;
  for (const char* key : {"positive_boxes", "negative_boxes"}) {
    if (!body.contains(key)) continue;
    const auto& list = body.at(key);
    if (!list.is_array()) throw ApiError{422, "invalid_spec", std::string(key) + " must be an array", key};
    auto& target = std::string(key) == "positive_boxes" ? spec.positive : spec.negative;
    for (std::size_t i = 0; i < list.size(); ++i) {
      const std::string field = std::string(key) + "[" + std::to_string(i) + "]";
      const PixelBox b = parse_box(list[i], field);
      if (!b.fits(image)) {
        throw ApiError{422, "invalid_spec",
                       "box is empty or outside the " + std::to_string(image.width) + "x" +
                           std::to_string(image.height) + " image",
                       field};
      }
      target.push_back(b);
    }
  }
  if (body.contains("alpha") && !body.at("alpha").is_null()) {
    if (!body.at("alpha").is_number()) throw ApiError{422, "invalid_spec", "alpha must be a number", "alpha"};
    spec.alpha = body.at("alpha").get<double>();
  }
  if (!(spec.alpha >= 0.0 && spec.alpha < 1.0)) throw ApiError{422, "invalid_spec", "alpha must lie in [0, 1)", "alpha"};
  if (body.contains("rejected_concepts")) {
    const auto& list = body.at("rejected_concepts");
    if (!list.is_array()) throw ApiError{422, "invalid_spec", "rejected_concepts must be an array", "rejected_concepts"};
    for (std::size_t i = 0; i < list.size(); ++i) {
      const std::string field = "rejected_concepts[" + std::to_string(i) + "]";
      if (!list[i].is_number_integer() || list[i].get<long long>() < 0 ||
          static_cast<std::size_t>(list[i].get<long long>()) >= atlas.num_concepts) {
        throw ApiError{422, "invalid_spec", "concept index must lie in [0, " + std::to_string(atlas.num_concepts) + ")",
                       field};
      }
      spec.rejected.insert(static_cast<std::size_t>(list[i].get<long long>()));
    }
  }
  return spec;
}

json spec_to_json(const InteractionSpec& spec) {
  json pos = json::array(), neg = json::array();
  for (const auto& b : spec.positive) pos.push_back(box_to_json(b));
  for (const auto& b : spec.negative) neg.push_back(box_to_json(b));
  return {{"positive_boxes", pos},
          {"negative_boxes", neg},
          {"alpha", spec.alpha},
          {"rejected_concepts", std::vector<std::size_t>(spec.rejected.begin(), spec.rejected.end())}};
}

bool same_spec(const InteractionSpec& a, const InteractionSpec& b) {
  return a.positive == b.positive && a.negative == b.negative && a.alpha == b.alpha && a.rejected == b.rejected;
}

json cell_json(Cell c) { return json::array({c.h, c.w}); }

std::string random_id() {
  static std::mutex mu;
  static std::mt19937_64 gen{std::random_device{}()};
  std::lock_guard lock(mu);
  static const char* hex = "0123456789abcdef";
  std::string id = "s-";
  std::uint64_t x = gen();
  for (int i = 0; i < 16; ++i, x >>= 4) id += hex[x & 0xf];
  return id;
}

std::string iso_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

struct AtlasVersion {
  int version = 0;
  Atlas atlas;
};

struct Session {
  std::string id;
  std::string sample_id;
  std::string created_at;
  std::shared_ptr<const AtlasVersion> atlas;
  std::vector<Grid> maps;  // baseline maps, cached at creation
  ImageSize image;
  Prediction baseline;
  DenseVector baseline_scores;
  std::vector<InteractionSpec> history;
  std::optional<json> last_response;
  Clock::time_point last_access;
  std::mutex mu;
};

}  // namespace

struct Service::Impl {
  PipelineConfig cfg;
  httplib::Server server;
  DatasetManifest manifest;
  std::optional<Projector> projector;
  std::optional<TaskHead> head;

  mutable std::mutex atlas_mu;
  std::shared_ptr<const AtlasVersion> atlas;  // null when no model

  std::mutex sessions_mu;
  std::map<std::string, std::shared_ptr<Session>> sessions;
  std::map<std::string, std::string> idempotency;  // key -> session id

  std::mutex features_mu;
  std::map<std::string, std::shared_ptr<const FeatureMap>> features;

  explicit Impl(PipelineConfig c) : cfg(std::move(c)) {
    if (std::filesystem::exists(cfg.manifest_path())) {
      manifest = load_manifest(cfg.manifest_path());
    } else {
      spdlog::warn("no dataset manifest at {}; serving an empty dataset", cfg.manifest_path().string());
    }
    try {
      Model m = csr::require_model(cfg);
      projector = std::move(m.projector);
      head = std::move(m.head);
      auto v = std::make_shared<AtlasVersion>(AtlasVersion{0, std::move(m.atlas)});
      load_edits(*v);
      atlas = std::move(v);
    } catch (const NotFoundError& e) {
      spdlog::warn("model not loaded: {}", e.what());
    }
    routes();
  }

  std::shared_ptr<const AtlasVersion> current_atlas() const {
    std::lock_guard lock(atlas_mu);
    return atlas;
  }

  // Edits file: {"version": n, "discarded": ["k:m", ...]}, applied over the atlas checkpoint.
  void load_edits(AtlasVersion& v) {
    const auto path = cfg.atlas_edits_path();
    if (!std::filesystem::exists(path)) return;
    const json j = read_json_file(path);
    std::vector<PrototypeId> ids;
    for (const auto& s : j.at("discarded")) ids.push_back(parse_prototype_id(s.get<std::string>()));
    v.atlas = refine_atlas(std::move(v.atlas), ids);
    v.version = j.at("version").get<int>();
    spdlog::info("atlas edits reloaded: version {}, {} discarded", v.version, ids.size());
  }

  void save_edits(const AtlasVersion& v) {
    json discarded = json::array();
    for (std::size_t i = 0; i < v.atlas.size(); ++i) {
      if (v.atlas.discarded[i]) discarded.push_back(to_string(v.atlas.id_of(i)));
    }
    write_json_file(cfg.atlas_edits_path(), {{"version", v.version}, {"discarded", discarded}});
  }

  void require_loaded() const {
    if (!atlas || !projector || !head) throw ApiError{409, "model_not_loaded", "model checkpoints are not loaded", std::nullopt};
  }

  const Sample& find_sample(const std::string& id) const {
    const Sample* s = manifest.find(id);
    if (!s) throw ApiError{404, "not_found", "unknown sample '" + id + "'", "sample_id"};
    return *s;
  }

  std::shared_ptr<const FeatureMap> sample_features(const Sample& s) {
    std::lock_guard lock(features_mu);
    auto it = features.find(s.id);
    if (it == features.end()) it = features.emplace(s.id, std::make_shared<FeatureMap>(manifest.load_features(s))).first;
    return it->second;
  }

  json sample_json(const Sample& s) const {
    return {{"id", s.id},
            {"image_size", json::array({s.image_size.width, s.image_size.height})},
            {"split", s.split == Split::kTrain ? "train" : "test"},
            {"target_class", s.target_class},
            {"has_boxes", !s.concept_boxes.empty()},
            {"image_path", s.image_path ? json(*s.image_path) : json(nullptr)}};
  }

  std::string concept_name(std::size_t k) const {
    return k < manifest.concept_names.size() ? manifest.concept_names[k] : "concept " + std::to_string(k);
  }

  json bundle_json(const ExplanationBundle& b) const {
    json concepts = json::array();
    for (const auto& c : b.concepts) {
      concepts.push_back({{"concept", c.concept_index},
                          {"concept_name", concept_name(c.concept_index)},
                          {"best_prototype", to_string(c.best_prototype)},
                          {"score", c.score},
                          {"similarity_map", grid_to_json(c.similarity_map)},
                          {"reference",
                           {{"sample_id", c.reference_sample_id},
                            {"highlight_cell", cell_json(c.highlight_cell)},
                            {"image_path", c.image_path ? json(*c.image_path) : json(nullptr)}}}});
    }
    return {{"size", b.size()}, {"concepts", concepts}, {"warnings", b.warnings}};
  }

  json session_json(const Session& s) const {
    json history = json::array();
    for (const auto& h : s.history) history.push_back(spec_to_json(h));
    return {{"id", s.id},
            {"sample_id", s.sample_id},
            {"created_at", s.created_at},
            {"atlas_version", s.atlas->version},
            {"baseline_prediction", prediction_to_json(s.baseline)},
            {"baseline_scores", s.baseline_scores},
            {"current_prediction",
             s.last_response ? s.last_response->at("prediction") : prediction_to_json(s.baseline)},
            {"history", history}};
  }

  void purge_expired() {
    const auto ttl = std::chrono::duration<double>(cfg.service.session_ttl_seconds);
    const auto now = Clock::now();
    for (auto it = sessions.begin(); it != sessions.end();) {
      if (now - it->second->last_access > ttl) {
        it = sessions.erase(it);
      } else {
        ++it;
      }
    }
    for (auto it = idempotency.begin(); it != idempotency.end();) {
      if (!sessions.count(it->second)) {
        it = idempotency.erase(it);
      } else {
        ++it;
      }
    }
  }

  std::shared_ptr<Session> find_session(const std::string& id) {
    std::lock_guard lock(sessions_mu);
    purge_expired();
    auto it = sessions.find(id);
    if (it == sessions.end()) throw ApiError{404, "not_found", "unknown or expired session '" + id + "'", std::nullopt};
    it->second->last_access = Clock::now();
    return it->second;
  }

  // Wraps a handler with the error-body contract.
  template <typename F>
  httplib::Server::Handler guarded(F f) {
    return [f](const httplib::Request& req, httplib::Response& res) {
      try {
        f(req, res);
      } catch (const ApiError& e) {
        send_error(res, e);
      } catch (const std::exception& e) {
        spdlog::error("{} {}: {}", req.method, req.path, e.what());
        send_error(res, {500, "internal", e.what(), std::nullopt});
      }
    };
  }

  void routes() {
    server.Get("/api/v1/samples", guarded([this](const httplib::Request&, httplib::Response& res) {
      std::vector<const Sample*> sorted;
      for (const auto& s : manifest.samples) sorted.push_back(&s);
      std::sort(sorted.begin(), sorted.end(), [](const Sample* a, const Sample* b) { return a->id < b->id; });
      json list = json::array();
      for (const auto* s : sorted) list.push_back(sample_json(*s));
      send_json(res, 200, {{"samples", list}, {"count", list.size()}});
    }));

    server.Post("/api/v1/predict", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const json body = parse_body(req);
      const std::string id = required_string(body, "sample_id");
      const Sample& s = find_sample(id);
      require_loaded();
      const auto version = current_atlas();
      const ExplanationBundle bundle = explain(*sample_features(s), *projector, version->atlas, *head);
      send_json(res, 200,
                {{"sample_id", id},
                 {"atlas_version", version->version},
                 {"prediction", prediction_to_json(bundle.prediction)},
                 {"indecisive", bundle.prediction.indecisive},
                 {"scores", bundle.scores},
                 {"explanation", bundle_json(bundle)}});
    }));

    server.Post("/api/v1/sessions", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const json body = parse_body(req);
      const std::string id = required_string(body, "sample_id");
      std::optional<std::string> key;
      if (body.contains("idempotency_key")) key = required_string(body, "idempotency_key");
      if (req.has_header("Idempotency-Key")) key = req.get_header_value("Idempotency-Key");
      const Sample& s = find_sample(id);
      require_loaded();
      {
        std::lock_guard lock(sessions_mu);
        purge_expired();
        if (key) {
          auto it = idempotency.find(*key);
          if (it != idempotency.end()) {
            const auto& existing = sessions.at(it->second);
            if (existing->sample_id != id) {
              throw ApiError{422, "invalid_request", "idempotency key already used for another sample", "idempotency_key"};
            }
            existing->last_access = Clock::now();
            std::lock_guard slock(existing->mu);
            send_json(res, 200, session_json(*existing));
            return;
          }
        }
      }
      auto session = std::make_shared<Session>();
      session->id = random_id();
      session->sample_id = id;
      session->created_at = iso_now();
      session->atlas = current_atlas();
      session->image = s.image_size;
      session->maps = projected_similarity_maps(*sample_features(s), *projector, session->atlas->atlas).maps;
      session->baseline_scores = similarity_scores(session->maps);
      session->baseline = predict(*head, session->baseline_scores);
      session->last_access = Clock::now();
      json out = session_json(*session);
      {
        std::lock_guard lock(sessions_mu);
        if (key) {
          // A concurrent retry may have won the race.
          auto it = idempotency.find(*key);
          if (it != idempotency.end()) {
            std::lock_guard slock(sessions.at(it->second)->mu);
            send_json(res, 200, session_json(*sessions.at(it->second)));
            return;
          }
          idempotency[*key] = session->id;
        }
        sessions[session->id] = session;
      }
      send_json(res, 201, out);
    }));

    server.Get(R"(/api/v1/sessions/([A-Za-z0-9\-]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
      auto session = find_session(req.matches[1]);
      std::lock_guard lock(session->mu);
      send_json(res, 200, session_json(*session));
    }));

    server.Post(R"(/api/v1/sessions/([A-Za-z0-9\-]+)/interact)",
                guarded([this](const httplib::Request& req, httplib::Response& res) {
      auto session = find_session(req.matches[1]);
      const json body = parse_body(req);
      const Atlas& atlas = session->atlas->atlas;
      const InteractionSpec spec = parse_spec(body, atlas, session->image, cfg.service.default_alpha);

      std::lock_guard lock(session->mu);
      const InteractionResult r = apply_interaction(session->maps, atlas, spec, *head, session->image);
      const Grid a = build_importance_map(spec, session->maps.front().height, session->maps.front().width, session->image);
      json maps = json::array();
      for (std::size_t i = 0; i < session->maps.size(); ++i) {
        Grid masked(a.height, a.width);
        const bool rejected = spec.rejected.count(atlas.id_of(i).concept_index) > 0;
        if (!rejected) {
          for (std::size_t c = 0; c < a.size(); ++c) masked.values[c] = a.values[c] * std::max(0.0, session->maps[i].values[c]);
        }
        json m = grid_to_json(masked);
        m["prototype"] = to_string(atlas.id_of(i));
        m["score"] = r.scores[i];
        maps.push_back(std::move(m));
      }
      if (session->history.empty() || !same_spec(session->history.back(), spec)) session->history.push_back(spec);
      json out = {{"session_id", session->id},
                  {"sample_id", session->sample_id},
                  {"atlas_version", session->atlas->version},
                  {"spec", spec_to_json(spec)},
                  {"prediction", prediction_to_json(r.prediction)},
                  {"indecisive", r.prediction.indecisive},
                  {"scores", r.scores},
                  {"importance_map", grid_to_json(a)},
                  {"maps", maps}};
      session->last_response = out;
      out["history_length"] = session->history.size();
      send_json(res, 200, out);
    }));

    server.Get("/api/v1/atlas", guarded([this](const httplib::Request&, httplib::Response& res) {
      require_loaded();
      const auto v = current_atlas();
      json list = json::array();
      for (std::size_t i = 0; i < v->atlas.size(); ++i) {
        const auto id = v->atlas.id_of(i);
        const auto& p = v->atlas.provenance[i];
        list.push_back({{"id", to_string(id)},
                        {"concept", id.concept_index},
                        {"concept_name", concept_name(id.concept_index)},
                        {"m", id.m},
                        {"discarded", static_cast<bool>(v->atlas.discarded[i])},
                        {"provenance",
                         {{"linked", p.linked},
                          {"source_sample_id", p.source_sample_id},
                          {"source_cell", cell_json(p.source_cell)},
                          {"similarity_at_link", p.similarity_at_link},
                          {"image_path", p.image_path ? json(*p.image_path) : json(nullptr)}}}});
      }
      send_json(res, 200,
                {{"version", v->version},
                 {"K", v->atlas.num_concepts},
                 {"M", v->atlas.per_concept},
                 {"D", v->atlas.dim},
                 {"explanation_size", v->atlas.live_concepts()},
                 {"prototypes", list}});
    }));

    server.Post("/api/v1/atlas/discard", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const json body = parse_body(req);
      require_loaded();
      if (!body.contains("prototype_ids") || !body.at("prototype_ids").is_array()) {
        throw ApiError{422, "invalid_request", "prototype_ids must be an array of \"k:m\" strings", "prototype_ids"};
      }
      std::lock_guard lock(atlas_mu);  // single writer
      const auto& list = body.at("prototype_ids");
      std::vector<PrototypeId> ids;
      for (std::size_t i = 0; i < list.size(); ++i) {
        const std::string field = "prototype_ids[" + std::to_string(i) + "]";
        if (!list[i].is_string()) throw ApiError{422, "unknown_prototype", "prototype id must be a \"k:m\" string", field};
        PrototypeId id;
        try {
          id = parse_prototype_id(list[i].get<std::string>());
        } catch (const DomainError& e) {
          throw ApiError{422, "unknown_prototype", e.what(), field};
        }
        if (id.concept_index >= atlas->atlas.num_concepts || id.m >= atlas->atlas.per_concept) {
          throw ApiError{422, "unknown_prototype", "unknown prototype " + to_string(id), field};
        }
        ids.push_back(id);
      }
      const bool changes = std::any_of(ids.begin(), ids.end(), [&](const PrototypeId& id) {
        return !atlas->atlas.discarded[atlas->atlas.index(id)];
      });
      if (changes) {
        auto next = std::make_shared<AtlasVersion>(AtlasVersion{atlas->version + 1, refine_atlas(atlas->atlas, ids)});
        save_edits(*next);
        atlas = std::move(next);
        spdlog::info("atlas version {}", atlas->version);
      }
      json discarded = json::array();
      for (std::size_t i = 0; i < atlas->atlas.size(); ++i) {
        if (atlas->atlas.discarded[i]) discarded.push_back(to_string(atlas->atlas.id_of(i)));
      }
      send_json(res, 200, {{"version", atlas->version}, {"discarded", discarded}, {"changed", changes}});
    }));

    if (cfg.service.static_dir) server.set_mount_point("/", cfg.service.static_dir->string());
    server.set_mount_point("/images", (cfg.service.image_dir ? *cfg.service.image_dir : cfg.data_dir).string());

    server.set_error_handler([](const httplib::Request& req, httplib::Response& res) {
      if (res.status == 404 && res.body.empty()) {
        send_error(res, {404, "not_found", "no route for " + req.method + " " + req.path, std::nullopt});
      }
    });
  }
};

Service::Service(PipelineConfig cfg) : impl_(std::make_unique<Impl>(std::move(cfg))) {}
Service::~Service() { stop(); }

int Service::bind(const std::string& host, int port) {
  if (port == 0) {
    const int bound = impl_->server.bind_to_any_port(host);
    if (bound < 0) throw std::runtime_error("cannot bind " + host);
    return bound;
  }
  if (!impl_->server.bind_to_port(host, port)) throw std::runtime_error("cannot bind " + host + ":" + std::to_string(port));
  return port;
}

void Service::run() { impl_->server.listen_after_bind(); }
void Service::stop() {
  if (impl_->server.is_running()) impl_->server.stop();
}
void Service::wait_until_ready() const { impl_->server.wait_until_ready(); }
bool Service::model_loaded() const { return impl_->current_atlas() != nullptr; }
int Service::atlas_version() const {
  const auto v = impl_->current_atlas();
  return v ? v->version : -1;
}

}  // namespace csr
