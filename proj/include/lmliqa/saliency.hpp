#pragma once

#include <vector>

#include "lmliqa/image.hpp"
#include "lmliqa/model.hpp"

namespace lmliqa {

// Square, row-major, non-negative grid of aggregated class-to-patch attention.
struct AttentionGrid {
  int side = 0;
  int source_layers = 0;
  std::vector<double> values;

  double at(int row, int col) const {
    return values[static_cast<std::size_t>(row) * side + col];
  }
};

struct WindowSelection {
  int a = 0;  // row
  int b = 0;  // column
  int m = 0;  // window side
  double score = 0.0;

  bool operator==(const WindowSelection&) const = default;
};

// Row 0 of the layer's attention matrix, columns 1..S.
std::vector<double> class_to_patch(const AttentionStack& stack, int layer);

// Mean of class_to_patch over the last k layers, reshaped to sqrt(S) x sqrt(S).
AttentionGrid aggregate_last_k(const AttentionStack& stack, int k);

// Exact sum of the m x m window at (a, b), summed row-major.
double window_sum(const AttentionGrid& grid, int a, int b, int m);

// Max-sum m x m window via 2-D prefix sums; ties go to the smallest row, then
// the smallest column. Near-ties are re-resolved with exact window sums so the
// result matches exhaustive enumeration.
WindowSelection find_window(const AttentionGrid& grid, int m);

// Maps the window center from teacher-input pixels to original-image pixels and
// returns the crop_size square centered there, clamped to the image.
PixelRect window_to_pixel_rect(const WindowSelection& sel, int teacher_size, int patch_size,
                               int original_width, int original_height, int crop_size);

struct SaliencyParams {
  int k_layers = 3;
  int window = 2;
  int crop_size = 32;
};

struct SaliencyResult {
  AttentionGrid grid;
  WindowSelection window;
  PixelRect rect;
};

// Full teacher pipeline for one original image: resize to the teacher input
// size, encode, aggregate the last k layers (clamped to the model depth),
// search the window, map back to pixels.
SaliencyResult saliency_crop(const Model& teacher_model, const ModelState& teacher,
                             const Image& original, const SaliencyParams& params);

}  // namespace lmliqa
