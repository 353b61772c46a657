#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "gazedetr/image.hpp"
#include "gazedetr/matching.hpp"
#include "gazedetr/types.hpp"

namespace gazedetr {

// Per-image evaluation record: everything the metric suite consumes.
struct EvalRecord {
  std::string id;  // stable key, e.g. the image path
  std::vector<DetectionOutput> predictions;
  std::vector<GroundTruthInstance> ground_truths;
};

struct MetricReport {
  std::optional<double> auc;
  std::optional<double> avg_dist;
  std::optional<double> min_dist;
  std::optional<double> l2_dist;
  std::optional<double> ap_inout;
  std::optional<double> map;
};

// ---------------------------------------------------------------------------
// Heatmap AUC

// ROC AUC over grid cells: positives are the cells containing a ground-truth
// point, scores are the heatmap values. Computed by the rank statistic with
// tied scores averaged, which equals trapezoidal ROC integration. Degenerate
// labelings (all cells positive or none) yield no value.
inline std::optional<double> auc_heatmap(const std::vector<double>& heatmap, int grid_h,
                                         int grid_w, const std::vector<Point>& gt_points) {
  check(static_cast<std::size_t>(grid_h) * grid_w == heatmap.size(),
        "auc_heatmap: heatmap size does not match grid");
  check(!gt_points.empty(), "auc_heatmap: need at least one ground-truth point");
  for (double v : heatmap) check(v >= 0.0, "auc_heatmap: heatmap must be nonnegative");
  std::vector<char> positive(heatmap.size(), 0);
  for (const Point& p : gt_points) {
    check(p[0] >= 0.0 && p[0] <= 1.0 && p[1] >= 0.0 && p[1] <= 1.0,
          "auc_heatmap: ground-truth point outside [0,1]^2");
    const int cx = std::min(static_cast<int>(p[0] * grid_w), grid_w - 1);
    const int cy = std::min(static_cast<int>(p[1] * grid_h), grid_h - 1);
    positive[static_cast<std::size_t>(cy) * grid_w + cx] = 1;
  }
  const std::size_t n = heatmap.size();
  std::size_t n_pos = 0;
  for (char c : positive) n_pos += c;
  if (n_pos == 0 || n_pos == n) return std::nullopt;

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return heatmap[a] < heatmap[b]; });
  // average ranks over tied score groups
  std::vector<double> rank(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && heatmap[order[j + 1]] == heatmap[order[i]]) ++j;
    const double avg = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j + 1));
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = avg;
    i = j + 1;
  }
  double rank_sum = 0.0;
  for (std::size_t k = 0; k < n; ++k)
    if (positive[k]) rank_sum += rank[k];
  const double p = static_cast<double>(n_pos);
  const double q = static_cast<double>(n - n_pos);
  return (rank_sum - p * (p + 1.0) / 2.0) / (p * q);
}

// ---------------------------------------------------------------------------
// Distance metrics

struct DistanceMetrics {
  double avg_dist;               // distance to the centroid of the gt points
  double min_dist;               // min over gt points
  std::optional<double> l2;      // defined only for single-point gt sets
};

inline DistanceMetrics distance_metrics(const Point& pred, const std::vector<Point>& gt_points) {
  check(!gt_points.empty(), "distance_metrics: empty ground-truth point set");
  auto dist = [](const Point& a, const Point& b) {
    return std::hypot(a[0] - b[0], a[1] - b[1]);
  };
  Point centroid{0, 0};
  double mn = std::numeric_limits<double>::infinity();
  for (const Point& p : gt_points) {
    centroid[0] += p[0];
    centroid[1] += p[1];
    mn = std::min(mn, dist(pred, p));
  }
  centroid[0] /= static_cast<double>(gt_points.size());
  centroid[1] /= static_cast<double>(gt_points.size());
  DistanceMetrics m{dist(pred, centroid), mn, std::nullopt};
  if (gt_points.size() == 1) m.l2 = mn;
  return m;
}

// ---------------------------------------------------------------------------
// Average precision

// All-points AP of a ranked list (no interpolation). Ties are ordered by the
// caller-provided sequence, so callers needing determinism must pre-sort
// with a stable tie key.
inline double average_precision_ranked(const std::vector<char>& labels_by_rank,
                                       std::size_t n_positive) {
  double tp = 0.0, ap = 0.0;
  for (std::size_t k = 0; k < labels_by_rank.size(); ++k) {
    if (labels_by_rank[k]) {
      tp += 1.0;
      ap += tp / static_cast<double>(k + 1);
    }
  }
  return n_positive > 0 ? ap / static_cast<double>(n_positive) : 0.0;
}

inline std::optional<double> ap_inout(const std::vector<double>& scores,
                                      const std::vector<char>& labels) {
  check(scores.size() == labels.size(), "ap_inout: score/label length mismatch");
  std::size_t n_pos = 0;
  for (char l : labels) n_pos += (l != 0);
  if (n_pos == 0 || n_pos == labels.size()) return std::nullopt;
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::vector<char> ranked;
  ranked.reserve(order.size());
  for (std::size_t i : order) ranked.push_back(labels[i]);
  return average_precision_ranked(ranked, n_pos);
}

// ---------------------------------------------------------------------------
// Dual-gated detection mAP

// Predictions pool across images and rank by head score. A prediction is a
// true positive iff it claims an unclaimed ground truth with IoU > iou_thresh
// AND gaze L2 < dist_thresh (both strict); the claimed gt is the qualifying
// one with the highest IoU. Out-of-frame instances carry no valid target
// point, so for them the IoU gate alone decides the claim.
inline std::optional<double> map_detection(const std::vector<EvalRecord>& records,
                                           double iou_thresh = 0.5, double dist_thresh = 0.15) {
  struct Pooled {
    double score;
    std::string id;
    int pred_idx;
    int record;
  };
  std::vector<Pooled> pool;
  std::size_t n_gt = 0;
  for (std::size_t r = 0; r < records.size(); ++r) {
    n_gt += records[r].ground_truths.size();
    for (std::size_t p = 0; p < records[r].predictions.size(); ++p)
      pool.push_back({records[r].predictions[p].head_score(), records[r].id,
                      static_cast<int>(p), static_cast<int>(r)});
  }
  if (n_gt == 0) return std::nullopt;
  std::sort(pool.begin(), pool.end(), [](const Pooled& a, const Pooled& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.id != b.id) return a.id < b.id;
    return a.pred_idx < b.pred_idx;
  });

  std::vector<std::vector<char>> claimed(records.size());
  for (std::size_t r = 0; r < records.size(); ++r)
    claimed[r].assign(records[r].ground_truths.size(), 0);

  std::vector<char> ranked_labels;
  ranked_labels.reserve(pool.size());
  for (const Pooled& p : pool) {
    const auto& pred = records[p.record].predictions[p.pred_idx];
    const auto& gts = records[p.record].ground_truths;
    int best = -1;
    double best_iou = iou_thresh;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (claimed[p.record][g]) continue;
      const double ov = iou(box_to_corners(pred.box), box_to_corners(gts[g].head_box));
      if (ov <= iou_thresh) continue;
      if (gts[g].in_frame) {
        double d = std::numeric_limits<double>::infinity();
        for (const Point& q : gts[g].gaze_points)
          d = std::min(d, std::hypot(pred.gaze[0] - q[0], pred.gaze[1] - q[1]));
        if (d >= dist_thresh) continue;
      }
      if (ov > best_iou) {
        best_iou = ov;
        best = static_cast<int>(g);
      }
    }
    if (best >= 0) {
      claimed[p.record][best] = 1;
      ranked_labels.push_back(1);
    } else {
      ranked_labels.push_back(0);
    }
  }
  return average_precision_ranked(ranked_labels, n_gt);
}

// ---------------------------------------------------------------------------
// Full-suite aggregation

struct MetricsOptions {
  int auc_grid = 64;        // AUC evaluation grid
  double auc_sigma = 3.0;   // cells, for heatmaps rendered from a point
  double iou_thresh = 0.5;
  double dist_thresh = 0.15;
};

namespace detail {

// The prediction paired with a ground truth for the per-instance gaze
// metrics: highest box IoU, ties to the higher head score then lower index.
inline int paired_prediction(const std::vector<DetectionOutput>& preds,
                             const GroundTruthInstance& gt) {
  int best = 0;
  double best_iou = -1.0, best_score = -1e300;
  for (std::size_t j = 0; j < preds.size(); ++j) {
    const double ov = iou(box_to_corners(preds[j].box), box_to_corners(gt.head_box));
    const double sc = preds[j].head_score();
    if (ov > best_iou || (ov == best_iou && sc > best_score)) {
      best = static_cast<int>(j);
      best_iou = ov;
      best_score = sc;
    }
  }
  return best;
}

// Evaluation-grid heatmap for a prediction: the model heatmap upsampled when
// present, otherwise a Gaussian rendered at the regressed point.
inline std::vector<double> eval_heatmap(const DetectionOutput& pred, const MetricsOptions& opt) {
  const int g = opt.auc_grid;
  if (!pred.heatmap.empty()) {
    return bilinear_resize_plane(pred.heatmap, pred.heatmap_h, pred.heatmap_w, g, g);
  }
  const Point p{std::clamp(pred.gaze[0], 0.0, 1.0), std::clamp(pred.gaze[1], 0.0, 1.0)};
  return render_gaze_heatmap(p, g, g, opt.auc_sigma).values();
}

}  // namespace detail

// Aggregates the section-4.1 metric suite over a dataset. Per-instance
// contributions are keyed and sorted before reduction, so the report is
// byte-stable under input reordering.
inline MetricReport compute_metrics(const std::vector<EvalRecord>& records,
                                    const MetricsOptions& opt = {}) {
  struct InstanceRow {
    std::string key;
    std::optional<double> auc;
    double avg_dist = 0.0, min_dist = 0.0;
    std::optional<double> l2;
    double inout_score = 0.0;
    char inout_label = 0;
    bool in_frame = false;
  };
  std::vector<InstanceRow> rows;
  for (const auto& rec : records) {
    if (rec.predictions.empty()) continue;
    for (std::size_t g = 0; g < rec.ground_truths.size(); ++g) {
      const auto& gt = rec.ground_truths[g];
      InstanceRow row;
      row.key = rec.id + "#" + std::to_string(g);
      const auto& pred = rec.predictions[detail::paired_prediction(rec.predictions, gt)];
      row.inout_score = pred.inout_score();
      row.inout_label = gt.in_frame ? 1 : 0;
      row.in_frame = gt.in_frame;
      if (gt.in_frame) {
        auto d = distance_metrics(pred.gaze, gt.gaze_points);
        row.avg_dist = d.avg_dist;
        row.min_dist = d.min_dist;
        row.l2 = d.l2;
        row.auc = auc_heatmap(detail::eval_heatmap(pred, opt), opt.auc_grid, opt.auc_grid,
                              gt.gaze_points);
      }
      rows.push_back(std::move(row));
    }
  }
  std::sort(rows.begin(), rows.end(),
            [](const InstanceRow& a, const InstanceRow& b) { return a.key < b.key; });

  MetricReport rep;
  double auc_sum = 0, avg_sum = 0, min_sum = 0, l2_sum = 0;
  std::size_t n_auc = 0, n_dist = 0, n_l2 = 0;
  std::vector<double> io_scores;
  std::vector<char> io_labels;
  for (const auto& r : rows) {
    io_scores.push_back(r.inout_score);
    io_labels.push_back(r.inout_label);
    if (!r.in_frame) continue;
    avg_sum += r.avg_dist;
    min_sum += r.min_dist;
    ++n_dist;
    if (r.l2) {
      l2_sum += *r.l2;
      ++n_l2;
    }
    if (r.auc) {
      auc_sum += *r.auc;
      ++n_auc;
    }
  }
  if (n_dist > 0) {
    rep.avg_dist = avg_sum / static_cast<double>(n_dist);
    rep.min_dist = min_sum / static_cast<double>(n_dist);
  }
  if (n_l2 > 0) rep.l2_dist = l2_sum / static_cast<double>(n_l2);
  if (n_auc > 0) rep.auc = auc_sum / static_cast<double>(n_auc);
  if (!io_scores.empty()) rep.ap_inout = ap_inout(io_scores, io_labels);
  rep.map = map_detection(records, opt.iou_thresh, opt.dist_thresh);
  return rep;
}

// Flat key=value block; absent metrics are omitted.
inline std::string report_to_text(const MetricReport& rep) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(6);
  auto emit = [&](const char* key, const std::optional<double>& v) {
    if (v) os << key << " = " << *v << "\n";
  };
  emit("auc", rep.auc);
  emit("avg_dist", rep.avg_dist);
  emit("min_dist", rep.min_dist);
  emit("l2_dist", rep.l2_dist);
  emit("ap_inout", rep.ap_inout);
  emit("map", rep.map);
  return os.str();
}

}  // namespace gazedetr
