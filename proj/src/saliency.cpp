#include "lmliqa/saliency.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "lmliqa/errors.hpp"

namespace lmliqa {

std::vector<double> class_to_patch(const AttentionStack& stack, int layer) {
  if (layer < 0 || layer >= stack.layer_count()) {
    throw ValidationError("attention layer " + std::to_string(layer) + " out of range [0, " +
                          std::to_string(stack.layer_count()) + ")");
  }
  const auto& m = stack.layers[layer];
  return {m.begin() + 1, m.begin() + stack.tokens};
}

AttentionGrid aggregate_last_k(const AttentionStack& stack, int k) {
  if (k < 1 || k > stack.layer_count()) {
    throw ValidationError("k=" + std::to_string(k) + " must lie in [1, " +
                          std::to_string(stack.layer_count()) + "]");
  }
  const int s = stack.tokens - 1;
  const int side = static_cast<int>(std::lround(std::sqrt(static_cast<double>(s))));
  if (side * side != s) throw ShapeError("patch count " + std::to_string(s) + " is not square");

  AttentionGrid grid;
  grid.side = side;
  grid.source_layers = k;
  grid.values.assign(s, 0.0);
  for (int l = stack.layer_count() - k; l < stack.layer_count(); ++l) {
    const auto& m = stack.layers[l];
    for (int j = 0; j < s; ++j) grid.values[j] += m[1 + j];
  }
  for (double& v : grid.values) v /= k;
  return grid;
}

double window_sum(const AttentionGrid& grid, int a, int b, int m) {
  double s = 0.0;
  for (int r = a; r < a + m; ++r) {
    for (int c = b; c < b + m; ++c) s += grid.at(r, c);
  }
  return s;
}

WindowSelection find_window(const AttentionGrid& grid, int m) {
  const int n = grid.side;
  if (m < 1 || m > n) {
    throw ValidationError("window side " + std::to_string(m) + " must lie in [1, " +
                          std::to_string(n) + "]");
  }
  // prefix[(r)(n+1) + c] = sum of grid[0..r)[0..c)
  std::vector<double> prefix(static_cast<std::size_t>(n + 1) * (n + 1), 0.0);
  double total = 0.0;
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < n; ++c) {
      prefix[(r + 1) * (n + 1) + c + 1] = grid.at(r, c) + prefix[r * (n + 1) + c + 1] +
                                          prefix[(r + 1) * (n + 1) + c] -
                                          prefix[r * (n + 1) + c];
      total += std::abs(grid.at(r, c));
    }
  }
  const double tie_tol = 1e-12 * std::max(1.0, total);

  WindowSelection best{0, 0, m, 0.0};
  double best_fast = 0.0;
  bool have = false;
  for (int a = 0; a + m <= n; ++a) {
    for (int b = 0; b + m <= n; ++b) {
      const double fast = prefix[(a + m) * (n + 1) + b + m] - prefix[a * (n + 1) + b + m] -
                          prefix[(a + m) * (n + 1) + b] + prefix[a * (n + 1) + b];
      if (!have) {
        best = {a, b, m, 0.0};
        best_fast = fast;
        have = true;
        continue;
      }
      bool better = fast > best_fast + tie_tol;
      if (!better && std::abs(fast - best_fast) <= tie_tol) {
        better = window_sum(grid, a, b, m) > window_sum(grid, best.a, best.b, m);
      }
      if (better) {
        best = {a, b, m, 0.0};
        best_fast = fast;
      }
    }
  }
  best.score = window_sum(grid, best.a, best.b, m);
  return best;
}

PixelRect window_to_pixel_rect(const WindowSelection& sel, int teacher_size, int patch_size,
                               int original_width, int original_height, int crop_size) {
  if (teacher_size <= 0 || patch_size <= 0 || crop_size <= 0) {
    throw ValidationError("teacher_size, patch_size and crop_size must be positive");
  }
  if (original_width < crop_size || original_height < crop_size) {
    throw ValidationError("original image " + std::to_string(original_width) + "x" +
                          std::to_string(original_height) + " is smaller than crop size " +
                          std::to_string(crop_size));
  }
  const double cx_teacher = (sel.b + sel.m / 2.0) * patch_size;
  const double cy_teacher = (sel.a + sel.m / 2.0) * patch_size;
  const double cx = cx_teacher * original_width / teacher_size;
  const double cy = cy_teacher * original_height / teacher_size;
  int x = static_cast<int>(std::floor(cx - crop_size / 2.0 + 0.5));
  int y = static_cast<int>(std::floor(cy - crop_size / 2.0 + 0.5));
  x = std::clamp(x, 0, original_width - crop_size);
  y = std::clamp(y, 0, original_height - crop_size);
  return {x, y, crop_size, crop_size};
}

SaliencyResult saliency_crop(const Model& teacher_model, const ModelState& teacher,
                             const Image& original, const SaliencyParams& params) {
  const auto& cfg = teacher_model.config();
  const Image resized = resize_bilinear(original, cfg.image_size, cfg.image_size);
  const EncodeOutput enc = teacher_model.encode(teacher, resized);
  const int k = std::clamp(params.k_layers, 1, enc.attention.layer_count());
  SaliencyResult out;
  out.grid = aggregate_last_k(enc.attention, k);
  out.window = find_window(out.grid, std::min(params.window, out.grid.side));
  out.rect = window_to_pixel_rect(out.window, cfg.image_size, cfg.patch_size, original.width,
                                  original.height, params.crop_size);
  return out;
}

}  // namespace lmliqa
