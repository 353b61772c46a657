#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "gazedetr/tensor.hpp"

namespace gazedetr {

// Boxes are (cx, cy, w, h), all relative to the image in [0, 1].
using Box = std::array<double, 4>;
using Point = std::array<double, 2>;

inline std::array<double, 4> box_to_corners(const Box& b) {
  return {b[0] - 0.5 * b[2], b[1] - 0.5 * b[3], b[0] + 0.5 * b[2], b[1] + 0.5 * b[3]};
}

struct GroundTruthInstance {
  Box head_box{};
  // Nonempty. Single point for synthetic/training data; evaluation sets may
  // carry one point per annotator. Out-of-frame instances keep a directional
  // point that never enters distance metrics.
  std::vector<Point> gaze_points;
  bool in_frame = true;

  Point gaze_centroid() const {
    Point c{0.0, 0.0};
    for (const Point& p : gaze_points) {
      c[0] += p[0];
      c[1] += p[1];
    }
    c[0] /= static_cast<double>(gaze_points.size());
    c[1] /= static_cast<double>(gaze_points.size());
    return c;
  }
};

// Per-query prediction record in plain numbers, for export and metrics.
struct DetectionOutput {
  Box box{};
  double head_logit = 0.0;
  Point gaze{};
  double inout_logit = 0.0;
  std::vector<double> heatmap;  // empty unless the model has a heatmap head
  int heatmap_h = 0;
  int heatmap_w = 0;

  double head_score() const { return 1.0 / (1.0 + std::exp(-head_logit)); }
  double inout_score() const { return 1.0 / (1.0 + std::exp(-inout_logit)); }
};

// Differentiable per-image prediction bundle, the loss-side view of the
// model output. All tensors have N_q rows.
struct PredictionSet {
  Tensor boxes;         // [N_q x 4], sigmoid-bounded cxcywh
  Tensor head_logits;   // [N_q]
  Tensor gaze;          // [N_q x 2], sigmoid-bounded
  Tensor inout_logits;  // [N_q]
  Tensor heatmaps;      // [N_q x (H_h*W_h)] when present
  int heatmap_h = 0;
  int heatmap_w = 0;

  int n_queries() const { return boxes.dim(0); }
};

}  // namespace gazedetr
