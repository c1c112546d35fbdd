#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "csr/tensor_math.hpp"

namespace csr {

struct ImageSize {
  std::uint32_t width = 0;
  std::uint32_t height = 0;
  bool operator==(const ImageSize&) const = default;
};

// Pixel rectangle, inclusive on (x1, y1) and exclusive on (x2, y2).
struct PixelBox {
  std::uint32_t x1 = 0;
  std::uint32_t y1 = 0;
  std::uint32_t x2 = 0;
  std::uint32_t y2 = 0;

  bool contains(double x, double y) const { return x >= x1 && x < x2 && y >= y1 && y < y2; }
  bool fits(ImageSize image) const { return x1 < x2 && x2 <= image.width && y1 < y2 && y2 <= image.height; }
  bool operator==(const PixelBox&) const = default;
};

struct ConceptBox {
  std::size_t concept_index = 0;
  PixelBox box;
  bool operator==(const ConceptBox&) const = default;
};

enum class Split { kTrain, kTest };

struct Sample {
  std::string id;
  std::string feature_path;  // as written in the manifest; resolved against DatasetManifest::base_dir
  std::vector<int> concept_labels;
  std::size_t target_class = 0;
  ImageSize image_size;
  std::optional<std::string> image_path;
  std::vector<ConceptBox> concept_boxes;
  Split split = Split::kTrain;

  std::vector<PixelBox> boxes() const;
  std::vector<PixelBox> boxes_for(std::size_t k) const;
  bool operator==(const Sample&) const = default;
};

struct FeatureDims {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  bool operator==(const FeatureDims&) const = default;
};

// A sample's features held in memory with the annotations the numeric stages need.
struct LabeledFeatures {
  std::string id;
  std::vector<int> concept_labels;
  std::size_t target_class = 0;
  ImageSize image_size;
  std::optional<std::string> image_path;
  std::vector<ConceptBox> concept_boxes;
  FeatureMap features;

  std::vector<PixelBox> boxes() const;
};

struct DatasetManifest {
  int version = 1;
  std::size_t num_concepts = 0;  // K
  std::size_t num_classes = 0;   // L
  std::vector<std::string> concept_names;
  std::vector<std::string> class_names;
  FeatureDims feature_dims;
  std::vector<Sample> samples;
  std::filesystem::path base_dir;  // not serialized

  std::vector<const Sample*> split(Split which) const;
  const Sample* find(const std::string& id) const;
  std::filesystem::path feature_file(const Sample& s) const;
  FeatureMap load_features(const Sample& s) const;
  LabeledFeatures load_labeled(const Sample& s) const;
  std::vector<LabeledFeatures> load_split(Split which) const;
};

// CSRF binary feature format: "CSRF", u32 version, u32 C, H, W, then f32 channel-major.
inline constexpr std::uint32_t kFeatureFormatVersion = 1;

FeatureMap load_feature_map(const std::filesystem::path& path);
FeatureDims read_feature_header(const std::filesystem::path& path);
// Values are narrowed to f32 on write.
void write_feature_map(const std::filesystem::path& path, const FeatureMap& f);

DatasetManifest manifest_from_json(const nlohmann::json& j);
nlohmann::json manifest_to_json(const DatasetManifest& m);
// Validates schema, label/class ranges, boxes, and every feature file header.
DatasetManifest load_manifest(const std::filesystem::path& path);
void save_manifest(const std::filesystem::path& path, const DatasetManifest& m);

// Cell (h, w) covers [w*sw, (w+1)*sw) x [h*sh, (h+1)*sh), sw = width / W, sh = height / H.
struct PixelPoint {
  double x = 0.0;
  double y = 0.0;
};
PixelPoint cell_center(Cell cell, std::size_t grid_h, std::size_t grid_w, ImageSize image);
PixelBox cell_block_to_box(std::size_t h0, std::size_t w0, std::size_t h1, std::size_t w1,
                           std::size_t grid_h, std::size_t grid_w, ImageSize image);

struct ShortcutConfig {
  bool enabled = false;
  std::size_t target_class = 1;  // samples of this class carry the shortcut blob
  std::size_t channel = 0;       // must be >= K so it is not a concept direction
  double probability = 1.0;
  std::size_t size = 2;          // blob side in cells
};

struct DistractorConfig {
  bool enabled = false;
  // Cosine between the planted cell feature and the distractor concept
  // direction is drawn uniformly from [min_mix, max_mix].
  double min_mix = 0.5;
  double max_mix = 0.95;
  std::size_t size = 2;
};

struct SyntheticConfig {
  std::size_t n_train = 200;
  std::size_t n_test = 100;
  std::size_t num_concepts = 6;
  std::size_t num_classes = 4;
  FeatureDims dims{256, 14, 14};
  ImageSize image{224, 224};
  std::size_t blob_min = 3;  // blob side length in cells
  std::size_t blob_max = 4;
  double sigma = 0.1;
  double amplitude = 1.0;
  std::size_t min_concepts = 0;
  std::size_t max_concepts = 2;
  std::vector<std::size_t> concept_class;  // K entries; default: pairs of concepts per class 1..L-1
  std::vector<std::size_t> priority;       // concept indices, highest priority first; default 0..K-1
  std::size_t background_class = 0;
  ShortcutConfig shortcut;
  DistractorConfig distractor;  // applied to the test split only

  // Fills defaulted lists and checks feasibility; throws DomainError.
  void finalize();
};

nlohmann::json synthetic_config_to_json(const SyntheticConfig& c);
SyntheticConfig synthetic_config_from_json(const nlohmann::json& j);

// Target class under the priority rule.
std::size_t synthetic_target(const SyntheticConfig& cfg, const std::vector<int>& labels);

// Writes <out_dir>/manifest.json and <out_dir>/features/*.csrf.
DatasetManifest generate_synthetic(SyntheticConfig cfg, std::uint64_t seed,
                                   const std::filesystem::path& out_dir);

}  // namespace csr
