#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "cause/error.hpp"
#include "cause/tensor_math.hpp"

namespace cause {

inline constexpr std::uint16_t kIgnoreLabel = 65535;

struct LabelMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint16_t> values;

  LabelMap() = default;
  LabelMap(std::size_t h, std::size_t w, std::uint16_t fill = 0) : height(h), width(w), values(h * w, fill) {}

  std::uint16_t& at(std::size_t y, std::size_t x) { return values[y * width + x]; }
  std::uint16_t at(std::size_t y, std::size_t x) const { return values[y * width + x]; }
  friend bool operator==(const LabelMap&, const LabelMap&) = default;
};

/// Interleaved 8-bit RGB.
struct RgbImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> pixels;

  RgbImage() = default;
  RgbImage(std::size_t h, std::size_t w) : height(h), width(w), pixels(h * w * 3, 0) {}

  std::uint8_t& at(std::size_t y, std::size_t x, std::size_t ch) { return pixels[(y * width + x) * 3 + ch]; }
  std::uint8_t at(std::size_t y, std::size_t x, std::size_t ch) const { return pixels[(y * width + x) * 3 + ch]; }
  friend bool operator==(const RgbImage&, const RgbImage&) = default;
};

/// One image's frozen patch features (h*w rows of dimension c), with optional
/// image-resolution RGB and ground truth.
struct FeatureRecord {
  std::string image_id;
  std::size_t h = 0, w = 0, c = 0;
  Matrix features;
  std::optional<RgbImage> rgb;
  std::optional<LabelMap> labels;

  friend bool operator==(const FeatureRecord&, const FeatureRecord&) = default;
};

enum class FormatFault { BadMagic, VersionMismatch, Truncated, DimMismatch };

const char* to_string(FormatFault f);

class FormatError : public Error {
 public:
  FormatError(FormatFault fault, const std::string& what)
      : Error(fault == FormatFault::DimMismatch ? ErrorKind::Validation : ErrorKind::Io,
              std::string(to_string(fault)) + ": " + what),
        fault_(fault) {}
  FormatFault fault() const noexcept { return fault_; }

 private:
  FormatFault fault_;
};

/// Throws FormatError(DimMismatch) when the record breaks its own shape invariants.
void check_record(const FeatureRecord& record);

// .causefeat layout (all little-endian):
//   "CAUF" u32 version=1 u32 h u32 w u32 c u32 id_len id_bytes
//   f32[h*w*c] features
//   u8 has_rgb    [u32 H u32 W u8[H*W*3]]
//   u8 has_labels [u32 H u32 W u16[H*W]]
inline constexpr std::uint32_t kFeatureFileVersion = 1;

void write_feature_file(const FeatureRecord& record, const std::filesystem::path& path);
FeatureRecord read_feature_file(const std::filesystem::path& path);

// Label payload written next to predicted PNGs: "CAUL" u32 version u32 H u32 W u16[H*W].
void write_label_file(const LabelMap& labels, const std::filesystem::path& path);
LabelMap read_label_file(const std::filesystem::path& path);

enum class Split { Train, Val };

struct ManifestEntry {
  std::string path;  ///< relative to the manifest's directory unless absolute
  Split split = Split::Train;
};

struct DatasetManifest {
  std::string name;
  std::size_t classes = 0;
  std::size_t feature_dim = 0;
  std::size_t patch_h = 0, patch_w = 0;
  std::vector<ManifestEntry> records;
  std::filesystem::path base_dir;  ///< not serialized

  std::filesystem::path resolve(const ManifestEntry& e) const;
  std::vector<std::filesystem::path> paths(Split split) const;
};

DatasetManifest load_manifest(const std::filesystem::path& path);
void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);

/// One line per inconsistent record; empty means the dataset is usable.
std::vector<std::string> validate_manifest(const DatasetManifest& manifest);

/// Desk-scale stand-in for backbone features. Sub-concepts of one class
/// share cosine cos^2(subconcept_angle_deg). Sub-concept s of class i and
/// sub-concept s of every class within cross_class_span of i (cyclically) share
/// cross_class_cos; all other pairs are orthogonal. Falls back to rejection sampling at
/// prototype_separation_deg when c is smaller than the prototype count.
struct SynthSpec {
  std::size_t n_classes = 5;
  std::size_t subconcepts_per_class = 3;
  std::size_t c = 64;
  std::size_t grid_h = 16, grid_w = 16;
  std::size_t n_images = 250;
  std::size_t n_val = 50;  ///< the last n_val images are tagged val
  double noise_sigma = 0.05;
  double prototype_separation_deg = 30.0;
  double subconcept_angle_deg = 52.0;
  double cross_class_cos = 0.25;
  std::size_t cross_class_span = 2;  ///< cyclic class distance that still links sub-concepts
  /// Per-image nuisance: every patch of an image gets +-style_strength along
  /// one of style_axes directions orthogonal to all prototypes.
  std::size_t style_axes = 2;
  double style_strength = 0.0;
  std::size_t regions_per_image = 6;  ///< Voronoi seeds per image
  std::size_t pixel_scale = 8;        ///< label/RGB pixels per patch side
  double rgb_noise = 6.0;
  std::uint64_t seed = 0;
  std::string name = "synthetic";
};

void check_synth_spec(const SynthSpec& spec);

struct SynthWorld {
  Matrix prototypes;                          ///< (n_classes*subconcepts) x c, unit rows
  std::vector<std::size_t> prototype_class;   ///< class of each prototype row
  std::vector<std::array<std::uint8_t, 3>> class_colors;
  Matrix style_axes;                          ///< style_axes x c, unit rows
};

SynthWorld make_synth_world(const SynthSpec& spec);

struct SynthImage {
  FeatureRecord record;
  std::vector<std::size_t> patch_class;       ///< h*w
  std::vector<std::size_t> patch_prototype;   ///< h*w, index into SynthWorld::prototypes
  std::size_t style = 0;                      ///< axis * 2 + (sign < 0)
};

/// Image `index` of the dataset described by `spec`; independent of the others.
SynthImage make_synth_image(const SynthSpec& spec, const SynthWorld& world, std::size_t index);

DatasetManifest generate_synthetic_dataset(const SynthSpec& spec, const std::filesystem::path& out_dir);

/// Majority label per pixel_scale x pixel_scale cell (IGNORE when a cell has no labelled pixel;
/// ties go to the lowest class id).
std::vector<std::uint16_t> downsample_labels(const LabelMap& labels, std::size_t h, std::size_t w);

}  // namespace cause
