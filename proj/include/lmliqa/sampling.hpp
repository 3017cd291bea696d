#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "lmliqa/image.hpp"
#include "lmliqa/model.hpp"
#include "lmliqa/saliency.hpp"

namespace lmliqa {

enum class CropRole { random, saliency };

// Indices are zero-based. Crop index H is the positive slot of each image;
// 0..H-1 are the random anchors.
struct CropRecord {
  int image_id = 0;
  int crop_index = 0;
  PixelRect rect;
  CropRole role = CropRole::random;

  bool operator==(const CropRecord&) const = default;
};

struct CropBatch {
  int T = 0;
  int H = 0;
  std::vector<CropRecord> records;  // image-major, crop index minor
  std::vector<Image> pixels;        // aligned with records
  std::vector<double> mos;          // per image

  const CropRecord& record(int t, int h) const { return records[t * (H + 1) + h]; }
  const Image& crop(int t, int h) const { return pixels[t * (H + 1) + h]; }
};

struct CropIndex {
  int t = 0;
  int h = 0;

  bool operator==(const CropIndex&) const = default;
  auto operator<=>(const CropIndex&) const = default;
};

struct PairIndexSets {
  CropIndex anchor;
  CropIndex positive;
  std::vector<CropIndex> intra_negatives;
  std::vector<CropIndex> inter_negatives;
};

// Seed for stream `stream` derived from `master` (splitmix64 finalizer).
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream);

std::vector<CropRecord> random_crops(const Image& image, int h_count, int crop_size,
                                     std::mt19937_64& rng, int image_id = 0);

enum class PositiveSource { saliency, random };

struct BatchParams {
  int h_count = 4;
  int crop_size = 32;
  PositiveSource positive = PositiveSource::saliency;
};

// Assembles crops for `images` given precomputed saliency rects (one per
// image). Image i draws its random crops from derive_seed(seed, i).
CropBatch assemble_batch_from_rects(const std::vector<const Image*>& images,
                                    const std::vector<double>& mos,
                                    const std::vector<PixelRect>& saliency_rects,
                                    const BatchParams& params, std::uint64_t seed);

// Runs the teacher saliency pipeline per image, then assembles the batch.
CropBatch assemble_batch(const std::vector<Image>& images, const std::vector<double>& mos,
                         const Model& teacher_model, const ModelState& teacher,
                         const SaliencyParams& saliency, const BatchParams& params,
                         std::uint64_t seed);

PairIndexSets enumerate_pairs(int T, int H, CropIndex anchor);

// One JSON object per line: image_id, crop_index, role, x, y, width, height.
std::string batch_to_jsonl(const CropBatch& batch);

}  // namespace lmliqa
