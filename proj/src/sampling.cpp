#include "lmliqa/sampling.hpp"

#include <json.hpp>
#include <sstream>

#include "lmliqa/errors.hpp"

namespace lmliqa {

std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream) {
  std::uint64_t z = master + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::vector<CropRecord> random_crops(const Image& image, int h_count, int crop_size,
                                     std::mt19937_64& rng, int image_id) {
  if (crop_size <= 0 || image.width < crop_size || image.height < crop_size) {
    throw ValidationError("image " + std::to_string(image.width) + "x" +
                          std::to_string(image.height) + " too small for crop size " +
                          std::to_string(crop_size));
  }
  if (h_count < 0) throw ValidationError("crop count must be non-negative");
  std::uniform_int_distribution<int> xs(0, image.width - crop_size);
  std::uniform_int_distribution<int> ys(0, image.height - crop_size);
  std::vector<CropRecord> out;
  out.reserve(h_count);
  for (int h = 0; h < h_count; ++h) {
    const int x = xs(rng);
    const int y = ys(rng);
    out.push_back({image_id, h, {x, y, crop_size, crop_size}, CropRole::random});
  }
  return out;
}

CropBatch assemble_batch_from_rects(const std::vector<const Image*>& images,
                                    const std::vector<double>& mos,
                                    const std::vector<PixelRect>& saliency_rects,
                                    const BatchParams& params, std::uint64_t seed) {
  if (images.size() != mos.size() || images.size() != saliency_rects.size()) {
    throw ValidationError("images, mos and saliency rects must be aligned");
  }
  if (params.h_count < 1) throw ValidationError("H must be at least 1");
  CropBatch batch;
  batch.T = static_cast<int>(images.size());
  batch.H = params.h_count;
  batch.mos = mos;
  const std::size_t per_image = static_cast<std::size_t>(params.h_count) + 1;
  batch.records.reserve(images.size() * per_image);
  batch.pixels.reserve(images.size() * per_image);
  for (std::size_t t = 0; t < images.size(); ++t) {
    const Image& img = *images[t];
    const int id = static_cast<int>(t);
    std::mt19937_64 rng(derive_seed(seed, t));
    try {
      auto recs = random_crops(img, params.h_count, params.crop_size, rng, id);
      if (params.positive == PositiveSource::saliency) {
        recs.push_back({id, params.h_count, saliency_rects[t], CropRole::saliency});
      } else {
        auto extra = random_crops(img, 1, params.crop_size, rng, id);
        extra[0].crop_index = params.h_count;
        recs.push_back(extra[0]);
      }
      for (auto& r : recs) {
        batch.pixels.push_back(crop(img, r.rect));
        batch.records.push_back(r);
      }
    } catch (const ValidationError& e) {
      throw ValidationError("image " + std::to_string(t) + ": " + e.what());
    }
  }
  return batch;
}

CropBatch assemble_batch(const std::vector<Image>& images, const std::vector<double>& mos,
                         const Model& teacher_model, const ModelState& teacher,
                         const SaliencyParams& saliency, const BatchParams& params,
                         std::uint64_t seed) {
  std::vector<const Image*> ptrs;
  std::vector<PixelRect> rects;
  for (std::size_t t = 0; t < images.size(); ++t) {
    ptrs.push_back(&images[t]);
    if (params.positive == PositiveSource::saliency) {
      try {
        rects.push_back(saliency_crop(teacher_model, teacher, images[t], saliency).rect);
      } catch (const ValidationError& e) {
        throw ValidationError("image " + std::to_string(t) + ": " + e.what());
      }
    } else {
      rects.push_back({});
    }
  }
  return assemble_batch_from_rects(ptrs, mos, rects, params, seed);
}

PairIndexSets enumerate_pairs(int T, int H, CropIndex anchor) {
  if (T < 1 || H < 1) throw ValidationError("T and H must be positive");
  if (anchor.t < 0 || anchor.t >= T || anchor.h < 0 || anchor.h >= H) {
    throw ValidationError("anchor (" + std::to_string(anchor.t) + "," +
                          std::to_string(anchor.h) + ") outside batch " + std::to_string(T) +
                          "x" + std::to_string(H));
  }
  PairIndexSets out;
  out.anchor = anchor;
  out.positive = {anchor.t, H};
  for (int h = 0; h < H; ++h) {
    if (h != anchor.h) out.intra_negatives.push_back({anchor.t, h});
  }
  for (int t = 0; t < T; ++t) {
    if (t == anchor.t) continue;
    for (int h = 0; h < H; ++h) out.inter_negatives.push_back({t, h});
  }
  return out;
}

std::string batch_to_jsonl(const CropBatch& batch) {
  std::ostringstream os;
  for (const auto& r : batch.records) {
    nlohmann::json j{{"image_id", r.image_id},
                     {"crop_index", r.crop_index},
                     {"role", r.role == CropRole::saliency ? "saliency" : "random"},
                     {"x", r.rect.x},
                     {"y", r.rect.y},
                     {"width", r.rect.width},
                     {"height", r.rect.height}};
    os << j.dump() << '\n';
  }
  return os.str();
}

}  // namespace lmliqa
