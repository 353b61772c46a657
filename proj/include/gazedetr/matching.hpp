#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "gazedetr/tensor.hpp"
#include "gazedetr/types.hpp"

namespace gazedetr {

// ---------------------------------------------------------------------------
// Box overlap

// Generalized IoU on corner-format boxes: IoU - (hull - union)/hull, in (-1, 1].
inline double giou(const std::array<double, 4>& a, const std::array<double, 4>& b) {
  check(a[0] < a[2] && a[1] < a[3], "giou: degenerate first box");
  check(b[0] < b[2] && b[1] < b[3], "giou: degenerate second box");
  const double iw = std::max(0.0, std::min(a[2], b[2]) - std::max(a[0], b[0]));
  const double ih = std::max(0.0, std::min(a[3], b[3]) - std::max(a[1], b[1]));
  const double inter = iw * ih;
  const double area_a = (a[2] - a[0]) * (a[3] - a[1]);
  const double area_b = (b[2] - b[0]) * (b[3] - b[1]);
  const double uni = area_a + area_b - inter;
  const double hull =
      (std::max(a[2], b[2]) - std::min(a[0], b[0])) * (std::max(a[3], b[3]) - std::min(a[1], b[1]));
  return inter / uni - (hull - uni) / hull;
}

inline double iou(const std::array<double, 4>& a, const std::array<double, 4>& b) {
  const double iw = std::max(0.0, std::min(a[2], b[2]) - std::max(a[0], b[0]));
  const double ih = std::max(0.0, std::min(a[3], b[3]) - std::max(a[1], b[1]));
  const double inter = iw * ih;
  const double uni = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

// ---------------------------------------------------------------------------
// Focal loss

// -alpha_t (1-p_t)^gamma log(p_t) with p = sigmoid(logit). Stable at extreme
// logits via softplus identities.
inline double focal_loss(double logit, int target, double alpha = 0.25, double gamma = 2.0) {
  check(std::isfinite(logit), "focal_loss: non-finite logit");
  check(target == 0 || target == 1, "focal_loss: target must be 0 or 1");
  const double sp_pos = std::max(logit, 0.0) + std::log1p(std::exp(-std::fabs(logit)));  // softplus(x)
  const double sp_neg = sp_pos - logit;                                                  // softplus(-x)
  // log p = -softplus(-x); log(1-p) = -softplus(x)
  if (target == 1) return alpha * std::exp(-gamma * sp_pos) * sp_neg;
  return (1.0 - alpha) * std::exp(-gamma * sp_neg) * sp_pos;
}

// ---------------------------------------------------------------------------
// Matching configuration (Table-4-style strategies)

enum class MatchStrategy { BM1, BM2, BM3, BM4, BM5, BM6 };

inline const char* to_string(MatchStrategy s) {
  switch (s) {
    case MatchStrategy::BM1: return "BM1";
    case MatchStrategy::BM2: return "BM2";
    case MatchStrategy::BM3: return "BM3";
    case MatchStrategy::BM4: return "BM4";
    case MatchStrategy::BM5: return "BM5";
    case MatchStrategy::BM6: return "BM6";
  }
  return "?";
}

inline MatchStrategy match_strategy_from_string(const std::string& s) {
  for (auto m : {MatchStrategy::BM1, MatchStrategy::BM2, MatchStrategy::BM3, MatchStrategy::BM4,
                 MatchStrategy::BM5, MatchStrategy::BM6})
    if (s == to_string(m)) return m;
  fail("unknown matching strategy: " + s);
}

struct MatchConfig {
  MatchStrategy strategy = MatchStrategy::BM1;
  double cost_class = 2.0;
  double cost_bbox_l1 = 5.0;
  double cost_giou = 2.0;
  double cost_gaze = 5.0;
  double cost_heatmap = 1.0;
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;

  // BM4-BM6 add the gaze prediction terms to the matching cost.
  bool gaze_in_matching() const {
    return strategy == MatchStrategy::BM4 || strategy == MatchStrategy::BM5 ||
           strategy == MatchStrategy::BM6;
  }
  bool outputs_location() const {
    return strategy == MatchStrategy::BM1 || strategy == MatchStrategy::BM3 ||
           strategy == MatchStrategy::BM4 || strategy == MatchStrategy::BM6;
  }
  bool outputs_heatmap() const {
    return strategy == MatchStrategy::BM2 || strategy == MatchStrategy::BM3 ||
           strategy == MatchStrategy::BM5 || strategy == MatchStrategy::BM6;
  }
};

struct LossWeights {
  double box_l1 = 5.0;
  double box_giou = 2.0;
  double cls = 2.0;
  double inout = 1.0;
  double gaze = 5.0;
  double heatmap = 1.0;
};

// ---------------------------------------------------------------------------
// Gaze heatmap target

// Unnormalized Gaussian on an H_h x W_h grid with sigma in cell units,
// rescaled so the nearest cell center peaks at exactly 1. Computed in log
// space so tiny sigmas degrade to a one-hot map instead of underflowing.
inline Tensor render_gaze_heatmap(const Point& gaze, int grid_h, int grid_w, double sigma) {
  check(sigma > 0.0, "render_gaze_heatmap: sigma must be positive");
  check(grid_h > 0 && grid_w > 0, "render_gaze_heatmap: grid extents must be positive");
  check(gaze[0] >= 0.0 && gaze[0] <= 1.0 && gaze[1] >= 0.0 && gaze[1] <= 1.0,
        "render_gaze_heatmap: gaze point outside [0,1]^2");
  const double gx = gaze[0] * grid_w;
  const double gy = gaze[1] * grid_h;
  std::vector<double> d2(static_cast<std::size_t>(grid_h) * grid_w);
  double d2min = std::numeric_limits<double>::infinity();
  for (int i = 0; i < grid_h; ++i)
    for (int j = 0; j < grid_w; ++j) {
      const double dx = (j + 0.5) - gx;
      const double dy = (i + 0.5) - gy;
      const double v = dx * dx + dy * dy;
      d2[static_cast<std::size_t>(i) * grid_w + j] = v;
      d2min = std::min(d2min, v);
    }
  std::vector<double> out(d2.size());
  const double inv = 1.0 / (2.0 * sigma * sigma);
  for (std::size_t i = 0; i < d2.size(); ++i) out[i] = std::exp((d2min - d2[i]) * inv);
  return Tensor::from_values({grid_h, grid_w}, std::move(out));
}

// ---------------------------------------------------------------------------
// Hungarian assignment

struct Assignment {
  std::vector<std::pair<int, int>> pairs;  // (gt index, query index), injective
  double total_cost = 0.0;

  std::vector<int> gt_to_query(int n_gt) const {
    std::vector<int> m(n_gt, -1);
    for (auto [g, q] : pairs) m[g] = q;
    return m;
  }
};

namespace detail {

// Jonker-Volgenant style shortest augmenting path solver, rows <= cols.
// Returns row -> col.
inline std::vector<int> solve_rectangular_assignment(const std::vector<std::vector<double>>& cost) {
  const int n = static_cast<int>(cost.size());
  const int m = static_cast<int>(cost[0].size());
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<int> p(m + 1, 0), way(m + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      int j1 = 0;
      double delta = inf;
      for (int j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }
  std::vector<int> row_to_col(n, -1);
  for (int j = 1; j <= m; ++j)
    if (p[j]) row_to_col[p[j] - 1] = j - 1;
  return row_to_col;
}

inline double assignment_total(const std::vector<std::vector<double>>& cost,
                               const std::vector<int>& row_to_col) {
  double t = 0.0;
  for (std::size_t i = 0; i < row_to_col.size(); ++i) t += cost[i][row_to_col[i]];
  return t;
}

}  // namespace detail

// Minimum-cost injective assignment of rows (ground truths) to columns
// (queries). Ties between optimal assignments are broken toward the
// lexicographically smallest assignment vector, fixing one row at a time and
// re-solving the remainder.
inline Assignment hungarian_assign(const std::vector<std::vector<double>>& cost) {
  check(!cost.empty() && !cost[0].empty(), "hungarian_assign: empty cost matrix");
  const int rows = static_cast<int>(cost.size());
  const int cols = static_cast<int>(cost[0].size());
  check(rows <= cols, "hungarian_assign: needs rows <= columns, got " + std::to_string(rows) +
                          " x " + std::to_string(cols));
  for (const auto& r : cost) {
    check(static_cast<int>(r.size()) == cols, "hungarian_assign: ragged cost matrix");
    for (double c : r)
      check(std::isfinite(c), "hungarian_assign: non-finite cost entry");
  }

  std::vector<int> fixed(rows, -1);
  std::vector<char> col_used(cols, 0);
  double fixed_total = 0.0;
  for (int i = 0; i < rows; ++i) {
    int best_j = -1;
    double best_total = std::numeric_limits<double>::infinity();
    for (int j = 0; j < cols; ++j) {
      if (col_used[j]) continue;
      // candidate: fix i -> j, optimally assign the remaining rows
      double total = fixed_total + cost[i][j];
      const int rem_rows = rows - i - 1;
      if (rem_rows > 0) {
        std::vector<std::vector<double>> sub;
        sub.reserve(rem_rows);
        std::vector<int> col_map;
        for (int c = 0; c < cols; ++c)
          if (!col_used[c] && c != j) col_map.push_back(c);
        for (int r = i + 1; r < rows; ++r) {
          std::vector<double> row;
          row.reserve(col_map.size());
          for (int c : col_map) row.push_back(cost[r][c]);
          sub.push_back(std::move(row));
        }
        auto sub_sol = detail::solve_rectangular_assignment(sub);
        total += detail::assignment_total(sub, sub_sol);
      }
      if (total < best_total) {
        best_total = total;
        best_j = j;
      }
    }
    fixed[i] = best_j;
    col_used[best_j] = 1;
    fixed_total += cost[i][best_j];
  }

  Assignment a;
  for (int i = 0; i < rows; ++i) a.pairs.emplace_back(i, fixed[i]);
  a.total_cost = detail::assignment_total(cost, fixed);
  return a;
}

// ---------------------------------------------------------------------------
// Matching cost matrix

// Entry (i, j): focal-style class cost + weighted box L1 - weighted GIoU,
// plus the gaze prediction terms when the strategy includes them.
inline std::vector<std::vector<double>> matching_cost_matrix(
    const PredictionSet& preds, const std::vector<GroundTruthInstance>& gts,
    const MatchConfig& cfg) {
  check(!gts.empty(), "matching_cost_matrix: need at least one ground truth");
  const int n_gt = static_cast<int>(gts.size());
  const int n_q = preds.n_queries();
  check(n_gt <= n_q, "matching_cost_matrix: " + std::to_string(n_gt) + " ground truths exceed " +
                         std::to_string(n_q) + " queries");

  std::vector<std::vector<double>> cost(n_gt, std::vector<double>(n_q, 0.0));
  for (int j = 0; j < n_q; ++j) {
    const double logit = preds.head_logits.values()[j];
    const double sp_pos = std::max(logit, 0.0) + std::log1p(std::exp(-std::fabs(logit)));
    const double sp_neg = sp_pos - logit;
    // DETR-lineage focal class cost: positive cost minus negative cost
    const double pos_cost = cfg.focal_alpha * std::exp(-cfg.focal_gamma * sp_pos) * sp_neg;
    const double neg_cost = (1.0 - cfg.focal_alpha) * std::exp(-cfg.focal_gamma * sp_neg) * sp_pos;
    const double class_cost = cfg.cost_class * (pos_cost - neg_cost);
    const Box pb{preds.boxes.at(j, 0), preds.boxes.at(j, 1), preds.boxes.at(j, 2),
                 preds.boxes.at(j, 3)};
    const auto pc = box_to_corners(pb);
    for (int i = 0; i < n_gt; ++i) {
      const auto gc = box_to_corners(gts[i].head_box);
      double l1 = 0.0;
      for (int c = 0; c < 4; ++c) l1 += std::fabs(pb[c] - gts[i].head_box[c]);
      double entry = class_cost + cfg.cost_bbox_l1 * l1 - cfg.cost_giou * giou(pc, gc);
      if (cfg.gaze_in_matching() && gts[i].in_frame) {
        if (cfg.outputs_location()) {
          const Point g = gts[i].gaze_centroid();
          entry += cfg.cost_gaze * (std::fabs(preds.gaze.at(j, 0) - g[0]) +
                                    std::fabs(preds.gaze.at(j, 1) - g[1]));
        }
        if (cfg.outputs_heatmap() && preds.heatmaps.defined()) {
          Tensor target =
              render_gaze_heatmap(gts[i].gaze_centroid(), preds.heatmap_h, preds.heatmap_w, 3.0);
          double mse = 0.0;
          const int hw = preds.heatmap_h * preds.heatmap_w;
          for (int c = 0; c < hw; ++c) {
            const double diff = preds.heatmaps.values()[static_cast<std::size_t>(j) * hw + c] -
                                target.values()[c];
            mse += diff * diff;
          }
          entry += cfg.cost_heatmap * mse / hw;
        }
      }
      cost[i][j] = entry;
    }
  }
  return cost;
}

// ---------------------------------------------------------------------------
// Training loss

struct LossResult {
  Tensor total;                         // differentiable scalar
  std::map<std::string, double> terms;  // unweighted per-term values
};

namespace detail {

inline Tensor column(const Tensor& m, int j) { return slice_cols(m, j, 1); }

// Differentiable GIoU column for matched prediction/target corner tensors
// [n x 4] (x1, y1, x2, y2).
inline Tensor giou_tensor(const Tensor& a, const Tensor& b) {
  Tensor ax1 = column(a, 0), ay1 = column(a, 1), ax2 = column(a, 2), ay2 = column(a, 3);
  Tensor bx1 = column(b, 0), by1 = column(b, 1), bx2 = column(b, 2), by2 = column(b, 3);
  Tensor iw = relu(minimum(ax2, bx2) - maximum(ax1, bx1));
  Tensor ih = relu(minimum(ay2, by2) - maximum(ay1, by1));
  Tensor inter = iw * ih;
  Tensor area_a = (ax2 - ax1) * (ay2 - ay1);
  Tensor area_b = (bx2 - bx1) * (by2 - by1);
  Tensor uni = area_a + area_b - inter;
  Tensor hull = (maximum(ax2, bx2) - minimum(ax1, bx1)) * (maximum(ay2, by2) - minimum(ay1, by1));
  return div(inter, uni) - div(hull - uni, hull);
}

inline Tensor corners_tensor(const Tensor& cxcywh) {
  Tensor cx = column(cxcywh, 0), cy = column(cxcywh, 1), w = column(cxcywh, 2),
         h = column(cxcywh, 3);
  Tensor hw = scale(w, 0.5), hh = scale(h, 0.5);
  return concat_cols({cx - hw, cy - hh, cx + hw, cy + hh});
}

// Focal loss over a logit column with {0,1} targets, composed from stable
// primitives so the gradient flows through softplus/exp.
inline Tensor focal_tensor(const Tensor& logits, const std::vector<double>& targets, double alpha,
                           double gamma) {
  Tensor t = Tensor::from_values(logits.shape(), targets);
  Tensor one_minus_t = Tensor::from_values(logits.shape(), [&] {
    std::vector<double> v(targets.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = 1.0 - targets[i];
    return v;
  }());
  Tensor sp_pos = softplus(logits);                 // -log(1-p)
  Tensor sp_neg = softplus(scale(logits, -1.0));    // -log p
  Tensor pos_term = scale(exp(scale(sp_pos, -gamma)) * sp_neg, alpha);
  Tensor neg_term = scale(exp(scale(sp_neg, -gamma)) * sp_pos, 1.0 - alpha);
  return t * pos_term + one_minus_t * neg_term;
}

}  // namespace detail

// Weighted sum of box (L1 + GIoU), class, in/out, gaze, and heatmap terms.
// Class runs over all queries with unmatched slots as background; the other
// terms run over matched pairs, with gaze and heatmap restricted to in-frame
// targets. Matched-term means are per matched instance.
inline LossResult total_loss(const PredictionSet& preds,
                             const std::vector<GroundTruthInstance>& gts,
                             const Assignment& assignment, const LossWeights& w,
                             const MatchConfig& cfg) {
  const int n_q = preds.n_queries();
  std::vector<int> q_idx;
  std::vector<int> gt_idx;
  for (auto [g, q] : assignment.pairs) {
    check(g >= 0 && g < static_cast<int>(gts.size()),
          "total_loss: ground-truth index " + std::to_string(g) + " out of range");
    check(q >= 0 && q < n_q, "total_loss: query index " + std::to_string(q) + " out of range");
    gt_idx.push_back(g);
    q_idx.push_back(q);
  }
  const int n_m = static_cast<int>(q_idx.size());
  check(n_m > 0, "total_loss: empty assignment");
  const double inv_m = 1.0 / n_m;

  LossResult res;

  // class: focal over all queries, matched slots are the positives
  std::vector<double> targets(n_q, 0.0);
  for (int q : q_idx) targets[q] = 1.0;
  Tensor cls_vec = detail::focal_tensor(reshape(preds.head_logits, {n_q, 1}), targets,
                                        cfg.focal_alpha, cfg.focal_gamma);
  Tensor l_class = scale(sum(cls_vec), inv_m);
  res.terms["class"] = l_class.item();

  // box: L1 in cxcywh space, GIoU in corner space
  Tensor pred_boxes = gather_rows(preds.boxes, q_idx);
  std::vector<double> gt_box_values;
  for (int g : gt_idx)
    gt_box_values.insert(gt_box_values.end(), gts[g].head_box.begin(), gts[g].head_box.end());
  Tensor gt_boxes = Tensor::from_values({n_m, 4}, std::move(gt_box_values));
  Tensor l_box_l1 = scale(sum(abs(pred_boxes - gt_boxes)), inv_m);
  Tensor gious = detail::giou_tensor(detail::corners_tensor(pred_boxes),
                                     detail::corners_tensor(gt_boxes));
  Tensor l_box_giou = scale(sum(add_const(scale(gious, -1.0), 1.0)), inv_m);
  res.terms["box_l1"] = l_box_l1.item();
  res.terms["box_giou"] = l_box_giou.item();

  // in/out: binary cross entropy on matched logits
  Tensor matched_inout = gather_rows(reshape(preds.inout_logits, {n_q, 1}), q_idx);
  std::vector<double> inout_targets(n_m);
  for (int i = 0; i < n_m; ++i) inout_targets[i] = gts[gt_idx[i]].in_frame ? 1.0 : 0.0;
  Tensor t_inout = Tensor::from_values({n_m, 1}, inout_targets);
  Tensor l_inout = scale(sum(softplus(matched_inout) - matched_inout * t_inout), inv_m);
  res.terms["inout"] = l_inout.item();

  // gaze / heatmap: matched, in-frame targets only
  std::vector<int> inframe_rows;  // row indices into the matched set
  for (int i = 0; i < n_m; ++i)
    if (gts[gt_idx[i]].in_frame) inframe_rows.push_back(i);

  Tensor l_gaze = Tensor::scalar(0.0);
  Tensor l_heatmap = Tensor::scalar(0.0);
  if (!inframe_rows.empty()) {
    const double inv_f = 1.0 / static_cast<double>(inframe_rows.size());
    if (cfg.outputs_location()) {
      std::vector<int> q_inframe;
      std::vector<double> gaze_targets;
      for (int i : inframe_rows) {
        q_inframe.push_back(q_idx[i]);
        const Point g = gts[gt_idx[i]].gaze_centroid();
        gaze_targets.push_back(g[0]);
        gaze_targets.push_back(g[1]);
      }
      Tensor pred_gaze = gather_rows(preds.gaze, q_inframe);
      Tensor gt_gaze =
          Tensor::from_values({static_cast<int>(q_inframe.size()), 2}, std::move(gaze_targets));
      l_gaze = scale(sum(abs(pred_gaze - gt_gaze)), inv_f);
    }
    if (cfg.outputs_heatmap()) {
      check(preds.heatmaps.defined(), "total_loss: strategy expects heatmaps but none predicted");
      const int hw = preds.heatmap_h * preds.heatmap_w;
      std::vector<int> q_inframe;
      std::vector<double> target_values;
      for (int i : inframe_rows) {
        q_inframe.push_back(q_idx[i]);
        Tensor t = render_gaze_heatmap(gts[gt_idx[i]].gaze_centroid(), preds.heatmap_h,
                                       preds.heatmap_w, 3.0);
        target_values.insert(target_values.end(), t.values().begin(), t.values().end());
      }
      Tensor pred_hm = gather_rows(preds.heatmaps, q_inframe);
      Tensor gt_hm =
          Tensor::from_values({static_cast<int>(q_inframe.size()), hw}, std::move(target_values));
      Tensor diff = pred_hm - gt_hm;
      l_heatmap = scale(sum(diff * diff), inv_f / hw);
    }
  }
  res.terms["gaze"] = l_gaze.item();
  res.terms["heatmap"] = l_heatmap.item();

  res.total = scale(l_box_l1, w.box_l1) + scale(l_box_giou, w.box_giou) + scale(l_class, w.cls) +
              scale(l_inout, w.inout) + scale(l_gaze, w.gaze) + scale(l_heatmap, w.heatmap);
  res.terms["total"] = res.total.item();
  return res;
}

}  // namespace gazedetr
