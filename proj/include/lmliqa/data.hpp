#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "lmliqa/image.hpp"

namespace lmliqa {

// ---- image files --------------------------------------------------------

// Binary PGM (P5) or PPM (P6), maxval 255.
Image read_pnm(const std::string& path);
void write_pnm(const std::string& path, const Image& image);

// Lossless float64 tensor: "LMLQIMG1", then width, height, channels as
// little-endian uint32, then width*height*channels little-endian doubles.
Image read_f64_image(const std::string& path);
void write_f64_image(const std::string& path, const Image& image);

// Dispatches on the extension (.pgm/.ppm/.pnm or .f64).
Image read_image(const std::string& path);
void write_image(const std::string& path, const Image& image);

// ---- synthetic distortions ----------------------------------------------

enum class DistortionKind { gaussian_blur, gaussian_noise };

struct DistortionSpec {
  DistortionKind kind = DistortionKind::gaussian_blur;
  int level = 1;       // 1..L
  double sigma = 0.0;  // blur std in pixels, or noise std in intensity units
};

std::string to_string(DistortionKind kind);
DistortionKind distortion_kind_from_string(const std::string& name);

struct DistortionLevels {
  std::vector<double> blur_sigmas{0.8, 1.3, 2.0, 2.9, 4.2};
  std::vector<double> noise_sigmas{0.03, 0.06, 0.1, 0.15, 0.22};

  int level_count() const { return static_cast<int>(blur_sigmas.size()); }
  DistortionSpec spec(DistortionKind kind, int level) const;
};

// Normalized 1-D Gaussian with radius ceil(3 sigma); a single unit tap when
// sigma is 0.
std::vector<double> gaussian_kernel(double sigma);

// Blur: separable convolution with mirrored borders. Noise: additive
// N(0, sigma^2) then clamp to [0,1]. sigma == 0 leaves the image unchanged.
Image apply_distortion(const Image& image, const DistortionSpec& spec, std::mt19937_64& rng);

// 100 * (1 - level / (L + 1)); level 0 is pristine.
double synth_mos(int level, int level_count);

// Procedural images mixing gradients, low- and high-frequency textures,
// stripes and hard-edged shapes; values in [0,1].
std::vector<Image> generate_pristine(int count, int size, std::uint64_t seed, int channels = 3);

// ---- datasets -----------------------------------------------------------

struct ManifestEntry {
  std::string path;
  double mos = 0.0;
  std::optional<DistortionKind> kind;
  std::optional<int> level;
  std::optional<int> source;  // content group used by the split
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

// CSV with a header containing at least `path,mos`; optional `kind`,
// `level`, `source` columns. Relative paths resolve against the manifest's
// directory.
DatasetManifest load_manifest(const std::string& path);
void save_manifest(const std::string& path, const DatasetManifest& manifest);

// Seeded shuffle of content groups (entries sharing `source`; otherwise each
// entry alone); the first round(ratio * groups) groups form the train split.
DatasetManifest split(const DatasetManifest& manifest, double ratio, std::uint64_t seed);

// In-memory dataset with MOS and content groups.
struct Dataset {
  std::vector<Image> images;
  DatasetManifest manifest;
};

struct SyntheticConfig {
  int pristine_count = 60;
  int image_size = 64;
  int channels = 3;
  DistortionLevels levels;
  std::uint64_t seed = 7;
};

// pristine_count x levels x {blur, noise}; entry paths are synthetic names.
Dataset build_synthetic_dataset(const SyntheticConfig& config);

Dataset load_dataset(const std::string& manifest_path);

// Writes every image (extension picks the format) plus manifest.csv.
void write_dataset(const std::string& dir, const Dataset& dataset,
                   const std::string& extension = ".ppm");

}  // namespace lmliqa
