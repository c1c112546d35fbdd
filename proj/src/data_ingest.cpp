#include "csr/data_ingest.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <set>

#include "csr/errors.hpp"
#include "csr/rng.hpp"

namespace csr {

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "CSRF I/O assumes a little-endian host");

std::vector<PixelBox> Sample::boxes() const {
  std::vector<PixelBox> out;
  for (const auto& cb : concept_boxes) out.push_back(cb.box);
  return out;
}

std::vector<PixelBox> Sample::boxes_for(std::size_t k) const {
  std::vector<PixelBox> out;
  for (const auto& cb : concept_boxes) {
    if (cb.concept_index == k) out.push_back(cb.box);
  }
  return out;
}

std::vector<const Sample*> DatasetManifest::split(Split which) const {
  std::vector<const Sample*> out;
  for (const auto& s : samples) {
    if (s.split == which) out.push_back(&s);
  }
  return out;
}

const Sample* DatasetManifest::find(const std::string& id) const {
  for (const auto& s : samples) {
    if (s.id == id) return &s;
  }
  return nullptr;
}

fs::path DatasetManifest::feature_file(const Sample& s) const {
  fs::path p(s.feature_path);
  return p.is_absolute() ? p : base_dir / p;
}

FeatureMap DatasetManifest::load_features(const Sample& s) const {
  return load_feature_map(feature_file(s));
}

LabeledFeatures DatasetManifest::load_labeled(const Sample& s) const {
  return {s.id, s.concept_labels, s.target_class, s.image_size, s.image_path, s.concept_boxes, load_features(s)};
}

std::vector<LabeledFeatures> DatasetManifest::load_split(Split which) const {
  std::vector<LabeledFeatures> out;
  for (const auto* s : split(which)) out.push_back(load_labeled(*s));
  return out;
}

std::vector<PixelBox> LabeledFeatures::boxes() const {
  std::vector<PixelBox> out;
  for (const auto& cb : concept_boxes) out.push_back(cb.box);
  return out;
}

// ---------------------------------------------------------------------------
// CSRF binary format

namespace {

constexpr char kMagic[4] = {'C', 'S', 'R', 'F'};
constexpr std::size_t kHeaderBytes = 20;

std::uint32_t read_u32(const unsigned char* p) {
  std::uint32_t v;
  std::memcpy(&v, p, 4);
  return v;
}

void append_u32(std::string& buf, std::uint32_t v) {
  char bytes[4];
  std::memcpy(bytes, &v, 4);
  buf.append(bytes, 4);
}

FeatureDims parse_header(const unsigned char* bytes, std::size_t available, const fs::path& path) {
  if (available < kHeaderBytes) throw FormatError(path.string() + ": truncated header");
  if (std::memcmp(bytes, kMagic, 4) != 0) throw FormatError(path.string() + ": bad magic");
  const std::uint32_t version = read_u32(bytes + 4);
  if (version != kFeatureFormatVersion) {
    throw FormatError(path.string() + ": unsupported version " + std::to_string(version));
  }
  return {read_u32(bytes + 8), read_u32(bytes + 12), read_u32(bytes + 16)};
}

std::string read_all(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw NotFoundError(path.string() + ": cannot open");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

FeatureMap load_feature_map(const fs::path& path) {
  const std::string buf = read_all(path);
  const auto* bytes = reinterpret_cast<const unsigned char*>(buf.data());
  const FeatureDims dims = parse_header(bytes, buf.size(), path);
  const std::size_t count = dims.channels * dims.height * dims.width;
  if (buf.size() - kHeaderBytes < count * 4) {
    throw FormatError(path.string() + ": truncated payload, expected " + std::to_string(count * 4) +
                      " bytes");
  }
  std::vector<double> values(count);
  for (std::size_t i = 0; i < count; ++i) {
    float f;
    std::memcpy(&f, bytes + kHeaderBytes + 4 * i, 4);
    if (!std::isfinite(f)) throw FormatError(path.string() + ": non-finite value at index " + std::to_string(i));
    values[i] = f;
  }
  return FeatureMap(dims.channels, dims.height, dims.width, std::move(values));
}

FeatureDims read_feature_header(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw NotFoundError(path.string() + ": cannot open");
  unsigned char header[kHeaderBytes];
  in.read(reinterpret_cast<char*>(header), kHeaderBytes);
  return parse_header(header, static_cast<std::size_t>(in.gcount()), path);
}

void write_feature_map(const fs::path& path, const FeatureMap& f) {
  std::string buf(kMagic, 4);
  append_u32(buf, kFeatureFormatVersion);
  append_u32(buf, static_cast<std::uint32_t>(f.channels));
  append_u32(buf, static_cast<std::uint32_t>(f.height));
  append_u32(buf, static_cast<std::uint32_t>(f.width));
  buf.reserve(kHeaderBytes + 4 * f.values.size());
  for (double v : f.values) {
    const auto x = static_cast<float>(v);
    char bytes[4];
    std::memcpy(bytes, &x, 4);
    buf.append(bytes, 4);
  }
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw NotFoundError(path.string() + ": cannot write");
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

// ---------------------------------------------------------------------------
// Manifest

namespace {

const char* split_name(Split s) { return s == Split::kTrain ? "train" : "test"; }

PixelBox box_from_json(const json& j, const std::string& sample_id) {
  if (!j.is_array() || j.size() != 4) {
    throw FormatError("sample " + sample_id + ": box must be [x1,y1,x2,y2]");
  }
  return {j[0].get<std::uint32_t>(), j[1].get<std::uint32_t>(), j[2].get<std::uint32_t>(),
          j[3].get<std::uint32_t>()};
}

template <typename T>
T required(const json& j, const char* key, const std::string& where) {
  if (!j.contains(key)) throw FormatError(where + ": missing field '" + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw FormatError(where + ": field '" + key + "': " + e.what());
  }
}

void check_unique(const std::vector<std::string>& names, const char* what) {
  std::set<std::string> seen(names.begin(), names.end());
  if (seen.size() != names.size()) throw FormatError(std::string("manifest: duplicate ") + what);
}

}  // namespace

DatasetManifest manifest_from_json(const json& j) {
  DatasetManifest m;
  m.version = required<int>(j, "version", "manifest");
  m.num_concepts = required<std::size_t>(j, "K", "manifest");
  m.num_classes = required<std::size_t>(j, "L", "manifest");
  m.concept_names = required<std::vector<std::string>>(j, "concept_names", "manifest");
  m.class_names = required<std::vector<std::string>>(j, "class_names", "manifest");
  const auto dims = required<std::vector<std::size_t>>(j, "feature_dims", "manifest");
  if (dims.size() != 3) throw FormatError("manifest: feature_dims must be [C,H,W]");
  m.feature_dims = {dims[0], dims[1], dims[2]};
  if (m.concept_names.size() != m.num_concepts) throw FormatError("manifest: concept_names length != K");
  if (m.class_names.size() != m.num_classes) throw FormatError("manifest: class_names length != L");
  check_unique(m.concept_names, "concept names");
  check_unique(m.class_names, "class names");

  if (!j.contains("samples") || !j.at("samples").is_array()) throw FormatError("manifest: missing samples array");
  std::set<std::string> ids;
  for (const auto& js : j.at("samples")) {
    Sample s;
    s.id = required<std::string>(js, "id", "sample");
    const std::string where = "sample " + s.id;
    if (!ids.insert(s.id).second) throw FormatError(where + ": duplicate id");
    s.feature_path = required<std::string>(js, "feature_path", where);
    s.concept_labels = required<std::vector<int>>(js, "concept_labels", where);
    if (s.concept_labels.size() != m.num_concepts) {
      throw FormatError(where + ": has " + std::to_string(s.concept_labels.size()) +
                        " concept labels, manifest K=" + std::to_string(m.num_concepts));
    }
    for (int v : s.concept_labels) {
      if (v != 0 && v != 1) throw FormatError(where + ": concept labels must be 0/1");
    }
    s.target_class = required<std::size_t>(js, "target_class", where);
    if (s.target_class >= m.num_classes) throw FormatError(where + ": target_class out of range");
    const auto size = required<std::vector<std::uint32_t>>(js, "image_size", where);
    if (size.size() != 2 || size[0] == 0 || size[1] == 0) {
      throw FormatError(where + ": image_size must be [width,height]");
    }
    s.image_size = {size[0], size[1]};
    if (js.contains("image_path") && !js.at("image_path").is_null()) {
      s.image_path = js.at("image_path").get<std::string>();
    }
    if (js.contains("concept_boxes")) {
      for (const auto& jb : js.at("concept_boxes")) {
        ConceptBox cb;
        cb.concept_index = required<std::size_t>(jb, "concept", where);
        if (cb.concept_index >= m.num_concepts) throw FormatError(where + ": box concept out of range");
        if (!jb.contains("box")) throw FormatError(where + ": concept box missing 'box'");
        cb.box = box_from_json(jb.at("box"), s.id);
        if (!cb.box.fits(s.image_size)) throw FormatError(where + ": box outside image bounds");
        s.concept_boxes.push_back(cb);
      }
    }
    const auto split = js.value("split", std::string("train"));
    if (split == "train") {
      s.split = Split::kTrain;
    } else if (split == "test") {
      s.split = Split::kTest;
    } else {
      throw FormatError(where + ": split must be 'train' or 'test'");
    }
    m.samples.push_back(std::move(s));
  }
  return m;
}

json manifest_to_json(const DatasetManifest& m) {
  json samples = json::array();
  for (const auto& s : m.samples) {
    json js = {{"id", s.id},
               {"feature_path", s.feature_path},
               {"concept_labels", s.concept_labels},
               {"target_class", s.target_class},
               {"image_size", {s.image_size.width, s.image_size.height}},
               {"split", split_name(s.split)}};
    if (s.image_path) js["image_path"] = *s.image_path;
    json boxes = json::array();
    for (const auto& cb : s.concept_boxes) {
      boxes.push_back({{"concept", cb.concept_index}, {"box", {cb.box.x1, cb.box.y1, cb.box.x2, cb.box.y2}}});
    }
    js["concept_boxes"] = std::move(boxes);
    samples.push_back(std::move(js));
  }
  return {{"version", m.version},
          {"K", m.num_concepts},
          {"L", m.num_classes},
          {"concept_names", m.concept_names},
          {"class_names", m.class_names},
          {"feature_dims", {m.feature_dims.channels, m.feature_dims.height, m.feature_dims.width}},
          {"samples", std::move(samples)}};
}

DatasetManifest load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw NotFoundError(path.string() + ": manifest not found");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  DatasetManifest m = manifest_from_json(j);
  m.base_dir = path.parent_path();
  for (const auto& s : m.samples) {
    const fs::path file = m.feature_file(s);
    if (!fs::exists(file)) throw NotFoundError("sample " + s.id + ": feature file " + file.string() + " not found");
    FeatureDims dims;
    try {
      dims = read_feature_header(file);
    } catch (const FormatError& e) {
      throw FormatError("sample " + s.id + ": " + e.what());
    }
    if (!(dims == m.feature_dims)) {
      throw DimensionError("sample " + s.id + ": feature header (" + std::to_string(dims.channels) + "," +
                           std::to_string(dims.height) + "," + std::to_string(dims.width) +
                           ") does not match manifest feature_dims");
    }
  }
  return m;
}

void save_manifest(const fs::path& path, const DatasetManifest& m) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw NotFoundError(path.string() + ": cannot write");
  out << manifest_to_json(m).dump(1) << '\n';
}

// ---------------------------------------------------------------------------
// Pixel/grid mapping

PixelPoint cell_center(Cell cell, std::size_t grid_h, std::size_t grid_w, ImageSize image) {
  const double sw = static_cast<double>(image.width) / static_cast<double>(grid_w);
  const double sh = static_cast<double>(image.height) / static_cast<double>(grid_h);
  return {(static_cast<double>(cell.w) + 0.5) * sw, (static_cast<double>(cell.h) + 0.5) * sh};
}

PixelBox cell_block_to_box(std::size_t h0, std::size_t w0, std::size_t h1, std::size_t w1,
                           std::size_t grid_h, std::size_t grid_w, ImageSize image) {
  const double sw = static_cast<double>(image.width) / static_cast<double>(grid_w);
  const double sh = static_cast<double>(image.height) / static_cast<double>(grid_h);
  auto px = [](double v) { return static_cast<std::uint32_t>(std::lround(v)); };
  return {px(static_cast<double>(w0) * sw), px(static_cast<double>(h0) * sh), px(static_cast<double>(w1) * sw),
          px(static_cast<double>(h1) * sh)};
}

// ---------------------------------------------------------------------------
// Synthetic generation

void SyntheticConfig::finalize() {
  const std::size_t K = num_concepts;
  if (K == 0 || num_classes == 0) throw DomainError("synthetic: K and L must be positive");
  if (K > dims.channels) throw DomainError("synthetic: K > C (concepts need their own channel)");
  if (dims.height == 0 || dims.width == 0) throw DomainError("synthetic: grid must be nonempty");
  if (blob_min == 0 || blob_min > blob_max) throw DomainError("synthetic: invalid blob size range");
  if (blob_max > dims.height || blob_max > dims.width) throw DomainError("synthetic: blob larger than grid");
  if (max_concepts > K || min_concepts > max_concepts) throw DomainError("synthetic: invalid concepts-per-sample range");
  if (sigma < 0) throw DomainError("synthetic: sigma must be >= 0");
  if (image.width == 0 || image.height == 0) throw DomainError("synthetic: image size must be positive");
  if (background_class >= num_classes) throw DomainError("synthetic: background class out of range");
  if (concept_class.empty()) {
    if (num_classes < 2) throw DomainError("synthetic: need L >= 2 for the default concept->class map");
    const std::size_t non_background = num_classes - 1;
    for (std::size_t k = 0; k < K; ++k) {
      std::size_t c = (k * non_background) / K;
      concept_class.push_back(c >= background_class ? c + 1 : c);
    }
  }
  if (concept_class.size() != K) throw DomainError("synthetic: concept_class needs K entries");
  for (auto c : concept_class) {
    if (c >= num_classes) throw DomainError("synthetic: concept_class entry out of range");
  }
  if (priority.empty()) {
    priority.resize(K);
    std::iota(priority.begin(), priority.end(), 0);
  }
  {
    std::vector<std::size_t> sorted = priority;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < K; ++i) {
      if (sorted.size() != K || sorted[i] != i) throw DomainError("synthetic: priority must be a permutation of 0..K-1");
    }
  }
  if (shortcut.enabled) {
    if (shortcut.channel < K || shortcut.channel >= dims.channels) {
      throw DomainError("synthetic: shortcut channel must be in [K, C)");
    }
    if (shortcut.target_class >= num_classes) throw DomainError("synthetic: shortcut class out of range");
    if (shortcut.size == 0 || shortcut.size > dims.height || shortcut.size > dims.width) {
      throw DomainError("synthetic: shortcut blob larger than grid");
    }
  }
  if (distractor.enabled) {
    if (dims.channels <= K) throw DomainError("synthetic: distractor needs C > K");
    if (!(distractor.min_mix > 0 && distractor.min_mix <= distractor.max_mix && distractor.max_mix <= 1)) {
      throw DomainError("synthetic: distractor mix range must satisfy 0 < min <= max <= 1");
    }
    if (distractor.size == 0 || distractor.size > dims.height || distractor.size > dims.width) {
      throw DomainError("synthetic: distractor blob larger than grid");
    }
  }
}

json synthetic_config_to_json(const SyntheticConfig& c) {
  return {{"n_train", c.n_train},
          {"n_test", c.n_test},
          {"K", c.num_concepts},
          {"L", c.num_classes},
          {"feature_dims", {c.dims.channels, c.dims.height, c.dims.width}},
          {"image_size", {c.image.width, c.image.height}},
          {"blob_min", c.blob_min},
          {"blob_max", c.blob_max},
          {"sigma", c.sigma},
          {"amplitude", c.amplitude},
          {"min_concepts", c.min_concepts},
          {"max_concepts", c.max_concepts},
          {"concept_class", c.concept_class},
          {"priority", c.priority},
          {"background_class", c.background_class},
          {"shortcut",
           {{"enabled", c.shortcut.enabled},
            {"target_class", c.shortcut.target_class},
            {"channel", c.shortcut.channel},
            {"probability", c.shortcut.probability},
            {"size", c.shortcut.size}}},
          {"distractor",
           {{"enabled", c.distractor.enabled},
            {"min_mix", c.distractor.min_mix},
            {"max_mix", c.distractor.max_mix},
            {"size", c.distractor.size}}}};
}

SyntheticConfig synthetic_config_from_json(const json& j) {
  SyntheticConfig c;
  c.n_train = j.value("n_train", c.n_train);
  c.n_test = j.value("n_test", c.n_test);
  c.num_concepts = j.value("K", c.num_concepts);
  c.num_classes = j.value("L", c.num_classes);
  if (j.contains("feature_dims")) {
    const auto d = j.at("feature_dims").get<std::vector<std::size_t>>();
    if (d.size() != 3) throw FormatError("synthetic: feature_dims must be [C,H,W]");
    c.dims = {d[0], d[1], d[2]};
  }
  if (j.contains("image_size")) {
    const auto s = j.at("image_size").get<std::vector<std::uint32_t>>();
    if (s.size() != 2) throw FormatError("synthetic: image_size must be [width,height]");
    c.image = {s[0], s[1]};
  }
  c.blob_min = j.value("blob_min", c.blob_min);
  c.blob_max = j.value("blob_max", c.blob_max);
  c.sigma = j.value("sigma", c.sigma);
  c.amplitude = j.value("amplitude", c.amplitude);
  c.min_concepts = j.value("min_concepts", c.min_concepts);
  c.max_concepts = j.value("max_concepts", c.max_concepts);
  c.concept_class = j.value("concept_class", c.concept_class);
  c.priority = j.value("priority", c.priority);
  c.background_class = j.value("background_class", c.background_class);
  if (j.contains("shortcut")) {
    const auto& s = j.at("shortcut");
    c.shortcut.enabled = s.value("enabled", c.shortcut.enabled);
    c.shortcut.target_class = s.value("target_class", c.shortcut.target_class);
    c.shortcut.channel = s.value("channel", c.shortcut.channel);
    c.shortcut.probability = s.value("probability", c.shortcut.probability);
    c.shortcut.size = s.value("size", c.shortcut.size);
  }
  if (j.contains("distractor")) {
    const auto& d = j.at("distractor");
    c.distractor.enabled = d.value("enabled", c.distractor.enabled);
    c.distractor.min_mix = d.value("min_mix", c.distractor.min_mix);
    c.distractor.max_mix = d.value("max_mix", c.distractor.max_mix);
    c.distractor.size = d.value("size", c.distractor.size);
  }
  return c;
}

std::size_t synthetic_target(const SyntheticConfig& cfg, const std::vector<int>& labels) {
  for (std::size_t k : cfg.priority) {
    if (labels[k]) return cfg.concept_class[k];
  }
  return cfg.background_class;
}

namespace {

struct Block {
  std::size_t h0, w0, h1, w1;  // half-open
};

class Occupancy {
 public:
  Occupancy(std::size_t h, std::size_t w) : h_(h), w_(w), used_(h * w, false) {}

  // Draws a free size_h x size_w block; nullopt when none found.
  std::optional<Block> place(Rng& rng, std::size_t size_h, std::size_t size_w) {
    for (int attempt = 0; attempt < 1000; ++attempt) {
      const auto h0 = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(h_ - size_h)));
      const auto w0 = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(w_ - size_w)));
      Block b{h0, w0, h0 + size_h, w0 + size_w};
      if (free(b)) {
        mark(b);
        return b;
      }
    }
    return std::nullopt;
  }

 private:
  bool free(const Block& b) const {
    for (std::size_t h = b.h0; h < b.h1; ++h)
      for (std::size_t w = b.w0; w < b.w1; ++w)
        if (used_[h * w_ + w]) return false;
    return true;
  }
  void mark(const Block& b) {
    for (std::size_t h = b.h0; h < b.h1; ++h)
      for (std::size_t w = b.w0; w < b.w1; ++w) used_[h * w_ + w] = true;
  }

  std::size_t h_, w_;
  std::vector<bool> used_;
};

void fill_block(FeatureMap& f, const Block& b, std::span<const double> direction, double sigma, Rng& rng) {
  for (std::size_t c = 0; c < f.channels; ++c)
    for (std::size_t h = b.h0; h < b.h1; ++h)
      for (std::size_t w = b.w0; w < b.w1; ++w) f.at(c, h, w) = direction[c] + (sigma > 0 ? rng.normal(0, sigma) : 0.0);
}

// Concept drawn as distractor: the highest-priority absent concept that would
// change the class, preferring ones that outrank the concepts present.
std::optional<std::size_t> pick_distractor(const SyntheticConfig& cfg, const std::vector<int>& labels,
                                           std::size_t target) {
  for (std::size_t k : cfg.priority) {
    if (labels[k]) break;
    if (cfg.concept_class[k] != target) return k;
  }
  for (std::size_t k : cfg.priority) {
    if (!labels[k] && cfg.concept_class[k] != target) return k;
  }
  return std::nullopt;
}

}  // namespace

DatasetManifest generate_synthetic(SyntheticConfig cfg, std::uint64_t seed, const fs::path& out_dir) {
  cfg.finalize();
  const std::size_t K = cfg.num_concepts;
  const auto& dims = cfg.dims;
  Rng rng(seed);

  DatasetManifest m;
  m.version = 1;
  m.num_concepts = K;
  m.num_classes = cfg.num_classes;
  for (std::size_t k = 0; k < K; ++k) m.concept_names.push_back("concept_" + std::to_string(k));
  for (std::size_t l = 0; l < cfg.num_classes; ++l) {
    m.class_names.push_back(l == cfg.background_class ? "background" : "class_" + std::to_string(l));
  }
  m.feature_dims = dims;
  m.base_dir = out_dir;
  fs::create_directories(out_dir / "features");

  const std::size_t total = cfg.n_train + cfg.n_test;
  for (std::size_t i = 0; i < total; ++i) {
    const bool train = i < cfg.n_train;
    const std::size_t local = train ? i : i - cfg.n_train;
    char name[32];
    std::snprintf(name, sizeof name, "%s_%04zu", train ? "train" : "test", local);

    Sample s;
    s.id = name;
    s.feature_path = "features/" + s.id + ".csrf";
    s.split = train ? Split::kTrain : Split::kTest;
    s.image_size = cfg.image;
    s.concept_labels.assign(K, 0);

    // Concept subset: draw a count, then a partial Fisher-Yates shuffle.
    const auto count = static_cast<std::size_t>(
        rng.uniform_int(static_cast<std::int64_t>(cfg.min_concepts), static_cast<std::int64_t>(cfg.max_concepts)));
    std::vector<std::size_t> order(K);
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t j = 0; j < count; ++j) {
      const auto pick = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(j), static_cast<std::int64_t>(K - 1)));
      std::swap(order[j], order[pick]);
    }
    std::vector<std::size_t> present(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(count));
    std::sort(present.begin(), present.end());
    for (auto k : present) s.concept_labels[k] = 1;
    s.target_class = synthetic_target(cfg, s.concept_labels);

    FeatureMap f(dims.channels, dims.height, dims.width);
    for (double& v : f.values) v = cfg.sigma > 0 ? rng.normal(0, cfg.sigma) : 0.0;

    Occupancy occupancy(dims.height, dims.width);
    for (auto k : present) {
      const auto bh = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(cfg.blob_min), static_cast<std::int64_t>(cfg.blob_max)));
      const auto bw = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(cfg.blob_min), static_cast<std::int64_t>(cfg.blob_max)));
      const auto block = occupancy.place(rng, bh, bw);
      if (!block) throw DomainError("synthetic: could not place non-overlapping blobs; grid too small");
      DenseVector direction(dims.channels, 0.0);
      direction[k] = cfg.amplitude;
      fill_block(f, *block, direction, cfg.sigma, rng);
      s.concept_boxes.push_back(
          {k, cell_block_to_box(block->h0, block->w0, block->h1, block->w1, dims.height, dims.width, cfg.image)});
    }

    if (cfg.shortcut.enabled && s.target_class == cfg.shortcut.target_class &&
        rng.uniform() < cfg.shortcut.probability) {
      const auto block = occupancy.place(rng, cfg.shortcut.size, cfg.shortcut.size);
      if (block) {
        DenseVector direction(dims.channels, 0.0);
        direction[cfg.shortcut.channel] = cfg.amplitude;
        fill_block(f, *block, direction, cfg.sigma, rng);
      }
    }

    if (cfg.distractor.enabled && !train && count > 0) {
      if (auto d = pick_distractor(cfg, s.concept_labels, s.target_class)) {
        const double mix = rng.uniform(cfg.distractor.min_mix, cfg.distractor.max_mix);
        // Unit direction: mix along e_d, the remainder along a random
        // direction in the non-concept channels.
        DenseVector rest(dims.channels, 0.0);
        for (std::size_t c = K; c < dims.channels; ++c) rest[c] = rng.normal();
        rest = l2_normalize(rest);
        DenseVector direction(dims.channels, 0.0);
        for (std::size_t c = 0; c < dims.channels; ++c) {
          direction[c] = cfg.amplitude * std::sqrt(1.0 - mix * mix) * rest[c];
        }
        direction[*d] = cfg.amplitude * mix;
        const auto block = occupancy.place(rng, cfg.distractor.size, cfg.distractor.size);
        if (block) fill_block(f, *block, direction, cfg.sigma, rng);
      }
    }

    write_feature_map(out_dir / s.feature_path, f);
    m.samples.push_back(std::move(s));
  }
  save_manifest(out_dir / "manifest.json", m);
  return m;
}

}  // namespace csr
