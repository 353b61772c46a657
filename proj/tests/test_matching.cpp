#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "gazedetr/matching.hpp"
#include "gazedetr/rng.hpp"

using namespace gazedetr;

namespace {

// Exhaustive permutation oracle for minimum-cost assignment, rows <= cols.
double brute_force_min_cost(const std::vector<std::vector<double>>& cost) {
  const int rows = static_cast<int>(cost.size());
  const int cols = static_cast<int>(cost[0].size());
  std::vector<int> perm(cols);
  std::iota(perm.begin(), perm.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do {
    double t = 0.0;
    for (int i = 0; i < rows; ++i) t += cost[i][perm[i]];
    best = std::min(best, t);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

PredictionSet make_preds(const std::vector<Box>& boxes, const std::vector<double>& logits,
                         const std::vector<Point>& gaze, const std::vector<double>& inout) {
  PredictionSet p;
  const int n = static_cast<int>(boxes.size());
  std::vector<double> bv, gv;
  for (const Box& b : boxes) bv.insert(bv.end(), b.begin(), b.end());
  for (const Point& g : gaze) {
    gv.push_back(g[0]);
    gv.push_back(g[1]);
  }
  p.boxes = Tensor::from_values({n, 4}, bv);
  p.head_logits = Tensor::from_values({n}, logits);
  p.gaze = Tensor::from_values({n, 2}, gv);
  p.inout_logits = Tensor::from_values({n}, inout);
  return p;
}

}  // namespace

TEST_CASE("giou hand-derived values") {
  auto a = box_to_corners({0.5, 0.5, 1.0, 1.0});  // unit box at origin corner
  CHECK(giou(a, a) == doctest::Approx(1.0).epsilon(1e-15));

  std::array<double, 4> b1{0, 0, 1, 1}, b2{2, 2, 3, 3};
  CHECK(giou(b1, b2) == doctest::Approx(-7.0 / 9.0).epsilon(1e-12));

  std::array<double, 4> big{0, 0, 2, 2}, small{0, 0, 1, 1};
  CHECK(giou(big, small) == doctest::Approx(0.25).epsilon(1e-12));

  CHECK_THROWS_AS(giou({1, 0, 0, 1}, b1), std::invalid_argument);
}

TEST_CASE("giou properties: symmetry and IoU bound") {
  Rng rng(7);
  for (int t = 0; t < 200; ++t) {
    auto rand_box = [&] {
      double x1 = rng.uniform(0, 0.8), y1 = rng.uniform(0, 0.8);
      return std::array<double, 4>{x1, y1, x1 + rng.uniform(0.05, 0.2),
                                   y1 + rng.uniform(0.05, 0.2)};
    };
    auto a = rand_box(), b = rand_box();
    const double g = giou(a, b);
    CHECK(g == doctest::Approx(giou(b, a)).epsilon(1e-14));
    CHECK(g <= iou(a, b) + 1e-14);
    CHECK(g > -1.0);
    CHECK(g <= 1.0);
  }
  // hull == union (nested boxes): giou == iou
  std::array<double, 4> outer{0, 0, 1, 1}, inner{0.2, 0.2, 0.6, 0.6};
  CHECK(giou(outer, inner) == doctest::Approx(iou(outer, inner)).epsilon(1e-14));
}

TEST_CASE("focal loss hand values and limits") {
  // gamma=0, alpha=1 reduces to binary cross-entropy
  const double logit = 0.4;
  const double p = 1.0 / (1.0 + std::exp(-logit));
  CHECK(focal_loss(logit, 1, 1.0, 0.0) == doctest::Approx(-std::log(p)).epsilon(1e-12));
  CHECK(focal_loss(logit, 0, 0.0, 0.0) == doctest::Approx(-std::log(1 - p)).epsilon(1e-12));

  // target=1, p=0.9, alpha=0.25, gamma=2 -> 0.25 * 0.01 * (-ln 0.9)
  const double l9 = std::log(9.0);
  CHECK(focal_loss(l9, 1, 0.25, 2.0) ==
        doctest::Approx(0.25 * 0.01 * (-std::log(0.9))).epsilon(1e-9));

  // p -> target drives the loss to zero, stably at extreme logits
  CHECK(focal_loss(40.0, 1) < 1e-15);
  CHECK(focal_loss(-40.0, 0) < 1e-15);
  CHECK(std::isfinite(focal_loss(700.0, 0)));
  CHECK(std::isfinite(focal_loss(-700.0, 1)));
}

TEST_CASE("hungarian: hand case, identity case, tie-break") {
  auto a = hungarian_assign({{1, 2}, {2, 4}});
  CHECK(a.pairs == std::vector<std::pair<int, int>>{{0, 1}, {1, 0}});
  CHECK(a.total_cost == 4.0);

  auto b = hungarian_assign({{0, 9, 9}, {9, 0, 9}, {9, 9, 0}});
  CHECK(b.pairs == std::vector<std::pair<int, int>>{{0, 0}, {1, 1}, {2, 2}});

  // all entries equal: lexicographically smallest assignment vector
  auto c = hungarian_assign({{1, 1, 1}, {1, 1, 1}});
  CHECK(c.pairs == std::vector<std::pair<int, int>>{{0, 0}, {1, 1}});
}

TEST_CASE("hungarian rejects bad inputs") {
  CHECK_THROWS_AS(hungarian_assign({{1.0, std::numeric_limits<double>::infinity()}}),
                  std::invalid_argument);
  CHECK_THROWS_AS(hungarian_assign({{1.0}, {2.0}}), std::invalid_argument);  // rows > cols
}

TEST_CASE("hungarian equals permutation brute force on random matrices") {
  Rng rng(99);
  for (int trial = 0; trial < 150; ++trial) {
    const int rows = 1 + static_cast<int>(rng.uniform_int(0, 6));
    const int cols = rows + static_cast<int>(rng.uniform_int(0, 7 - rows));
    std::vector<std::vector<double>> cost(rows, std::vector<double>(cols));
    for (auto& r : cost)
      for (double& v : r) v = rng.uniform(-5.0, 5.0);
    auto a = hungarian_assign(cost);
    CHECK(a.total_cost == brute_force_min_cost(cost));
    // injectivity
    std::vector<char> used(cols, 0);
    for (auto [g, q] : a.pairs) {
      CHECK(!used[q]);
      used[q] = 1;
    }
  }
}

TEST_CASE("matching cost: exact prediction is the strict row minimum") {
  std::vector<Box> boxes{{0.5, 0.5, 0.2, 0.2}, {0.2, 0.8, 0.1, 0.1}, {0.7, 0.3, 0.15, 0.2}};
  PredictionSet preds = make_preds(boxes, {4.0, -2.0, -2.0}, {{0.5, 0.5}, {0.1, 0.1}, {0.9, 0.9}},
                                   {0.0, 0.0, 0.0});
  GroundTruthInstance gt;
  gt.head_box = {0.5, 0.5, 0.2, 0.2};
  gt.gaze_points = {{0.3, 0.3}};
  auto cost = matching_cost_matrix(preds, {gt}, MatchConfig{});
  CHECK(cost[0][0] < cost[0][1]);
  CHECK(cost[0][0] < cost[0][2]);
}

TEST_CASE("matching cost: BM1 ignores gaze, BM4 includes it") {
  std::vector<Box> boxes{{0.5, 0.5, 0.2, 0.2}, {0.5, 0.5, 0.2, 0.2}};
  PredictionSet a = make_preds(boxes, {1.0, 1.0}, {{0.1, 0.1}, {0.9, 0.9}}, {0.0, 0.0});
  PredictionSet b = make_preds(boxes, {1.0, 1.0}, {{0.6, 0.6}, {0.2, 0.2}}, {0.0, 0.0});
  GroundTruthInstance gt;
  gt.head_box = {0.5, 0.5, 0.2, 0.2};
  gt.gaze_points = {{0.6, 0.6}};

  MatchConfig bm1;
  bm1.strategy = MatchStrategy::BM1;
  auto c1a = matching_cost_matrix(a, {gt}, bm1);
  auto c1b = matching_cost_matrix(b, {gt}, bm1);
  CHECK(c1a == c1b);

  MatchConfig bm4;
  bm4.strategy = MatchStrategy::BM4;
  auto c4a = matching_cost_matrix(a, {gt}, bm4);
  auto c4b = matching_cost_matrix(b, {gt}, bm4);
  CHECK(c4a != c4b);
}

TEST_CASE("matching cost matches a hand-expanded 2x2 evaluation") {
  std::vector<Box> boxes{{0.4, 0.4, 0.2, 0.2}, {0.7, 0.7, 0.1, 0.1}};
  std::vector<double> logits{0.3, -0.6};
  PredictionSet preds = make_preds(boxes, logits, {{0.5, 0.5}, {0.2, 0.2}}, {0.0, 0.0});
  std::vector<GroundTruthInstance> gts(2);
  gts[0].head_box = {0.45, 0.4, 0.2, 0.2};
  gts[0].gaze_points = {{0.6, 0.6}};
  gts[1].head_box = {0.7, 0.65, 0.12, 0.1};
  gts[1].gaze_points = {{0.1, 0.3}};

  MatchConfig cfg;
  cfg.strategy = MatchStrategy::BM4;
  auto cost = matching_cost_matrix(preds, gts, cfg);

  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) {
      const double p = 1.0 / (1.0 + std::exp(-logits[j]));
      const double pos = cfg.focal_alpha * std::pow(1 - p, cfg.focal_gamma) * (-std::log(p));
      const double neg = (1 - cfg.focal_alpha) * std::pow(p, cfg.focal_gamma) * (-std::log(1 - p));
      double want = cfg.cost_class * (pos - neg);
      double l1 = 0.0;
      for (int c = 0; c < 4; ++c) l1 += std::fabs(boxes[j][c] - gts[i].head_box[c]);
      want += cfg.cost_bbox_l1 * l1;
      want -= cfg.cost_giou * giou(box_to_corners(boxes[j]), box_to_corners(gts[i].head_box));
      const Point pg{preds.gaze.at(j, 0), preds.gaze.at(j, 1)};
      want += cfg.cost_gaze * (std::fabs(pg[0] - gts[i].gaze_points[0][0]) +
                               std::fabs(pg[1] - gts[i].gaze_points[0][1]));
      CHECK(cost[i][j] == doctest::Approx(want).epsilon(1e-12));
    }
}

TEST_CASE("matching cost rejects more ground truths than queries") {
  PredictionSet preds = make_preds({{0.5, 0.5, 0.2, 0.2}}, {0.0}, {{0.5, 0.5}}, {0.0});
  std::vector<GroundTruthInstance> gts(2);
  for (auto& g : gts) {
    g.head_box = {0.5, 0.5, 0.2, 0.2};
    g.gaze_points = {{0.5, 0.5}};
  }
  CHECK_THROWS(matching_cost_matrix(preds, gts, MatchConfig{}));
}

TEST_CASE("BM1 assignments are invariant to gaze-only changes") {
  Rng rng(41);
  for (int trial = 0; trial < 30; ++trial) {
    const int n_q = 5, n_gt = 3;
    std::vector<Box> boxes;
    std::vector<double> logits, inout;
    std::vector<Point> gaze_a, gaze_b;
    for (int j = 0; j < n_q; ++j) {
      boxes.push_back({rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), rng.uniform(0.05, 0.3),
                       rng.uniform(0.05, 0.3)});
      logits.push_back(rng.uniform(-2, 2));
      inout.push_back(0.0);
      gaze_a.push_back({rng.uniform(), rng.uniform()});
      gaze_b.push_back({rng.uniform(), rng.uniform()});
    }
    PredictionSet pa = make_preds(boxes, logits, gaze_a, inout);
    PredictionSet pb = make_preds(boxes, logits, gaze_b, inout);
    std::vector<GroundTruthInstance> gts(n_gt);
    for (auto& g : gts) {
      g.head_box = {rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), rng.uniform(0.05, 0.3),
                    rng.uniform(0.05, 0.3)};
      g.gaze_points = {{rng.uniform(), rng.uniform()}};
    }
    MatchConfig bm1;
    auto a1 = hungarian_assign(matching_cost_matrix(pa, gts, bm1));
    auto a2 = hungarian_assign(matching_cost_matrix(pb, gts, bm1));
    CHECK(a1.pairs == a2.pairs);
  }
}

TEST_CASE("BM4 produces a gaze-driven assignment flip on a constructed batch") {
  // two identical boxes and logits; only the gaze differs
  std::vector<Box> boxes{{0.5, 0.5, 0.2, 0.2}, {0.5, 0.5, 0.2, 0.2}};
  PredictionSet pa = make_preds(boxes, {1.0, 1.0}, {{0.1, 0.1}, {0.9, 0.9}}, {0.0, 0.0});
  PredictionSet pb = make_preds(boxes, {1.0, 1.0}, {{0.9, 0.9}, {0.1, 0.1}}, {0.0, 0.0});
  std::vector<GroundTruthInstance> gts(2);
  gts[0].head_box = {0.5, 0.5, 0.2, 0.2};
  gts[0].gaze_points = {{0.1, 0.1}};
  gts[1].head_box = {0.5, 0.5, 0.2, 0.2};
  gts[1].gaze_points = {{0.9, 0.9}};

  MatchConfig bm4;
  bm4.strategy = MatchStrategy::BM4;
  auto a = hungarian_assign(matching_cost_matrix(pa, gts, bm4));
  auto b = hungarian_assign(matching_cost_matrix(pb, gts, bm4));
  CHECK(a.pairs != b.pairs);

  MatchConfig bm1;
  auto a1 = hungarian_assign(matching_cost_matrix(pa, gts, bm1));
  auto b1 = hungarian_assign(matching_cost_matrix(pb, gts, bm1));
  CHECK(a1.pairs == b1.pairs);
}

TEST_CASE("render_gaze_heatmap: peak location, one-hot limit, oracle sum") {
  Tensor hm = render_gaze_heatmap({0.5, 0.5}, 16, 16, 3.0);
  int argmax = 0;
  for (int i = 1; i < 256; ++i)
    if (hm.values()[i] > hm.values()[argmax]) argmax = i;
  const int ay = argmax / 16, ax = argmax % 16;
  CHECK(ay >= 7);
  CHECK(ay <= 8);
  CHECK(ax >= 7);
  CHECK(ax <= 8);
  CHECK(hm.values()[argmax] == doctest::Approx(1.0).epsilon(1e-15));

  Tensor tiny = render_gaze_heatmap({0.3, 0.7}, 8, 8, 1e-3);
  int ones = 0;
  for (double v : tiny.values()) {
    if (v == 1.0) ++ones;
    else CHECK(v < 1e-100);
  }
  CHECK(ones == 1);

  // direct Gaussian-sum oracle
  const Point g{0.37, 0.62};
  Tensor h2 = render_gaze_heatmap(g, 12, 10, 2.5);
  double got_sum = 0.0;
  for (double v : h2.values()) got_sum += v;
  double d2min = 1e300;
  for (int i = 0; i < 12; ++i)
    for (int j = 0; j < 10; ++j) {
      double dx = (j + 0.5) - g[0] * 10, dy = (i + 0.5) - g[1] * 12;
      d2min = std::min(d2min, dx * dx + dy * dy);
    }
  double want_sum = 0.0;
  for (int i = 0; i < 12; ++i)
    for (int j = 0; j < 10; ++j) {
      double dx = (j + 0.5) - g[0] * 10, dy = (i + 0.5) - g[1] * 12;
      want_sum += std::exp(-(dx * dx + dy * dy) / (2 * 2.5 * 2.5)) /
                  std::exp(-d2min / (2 * 2.5 * 2.5));
    }
  CHECK(got_sum == doctest::Approx(want_sum).epsilon(1e-12));

  CHECK_THROWS_AS(render_gaze_heatmap({1.2, 0.5}, 8, 8, 1.0), std::invalid_argument);
  CHECK_THROWS_AS(render_gaze_heatmap({0.5, 0.5}, 8, 8, 0.0), std::invalid_argument);
}

TEST_CASE("total_loss: weight gating isolates the mean matched gaze L1") {
  PredictionSet preds =
      make_preds({{0.5, 0.5, 0.2, 0.2}, {0.3, 0.3, 0.1, 0.1}}, {1.0, 1.0},
                 {{0.4, 0.4}, {0.8, 0.2}}, {0.5, -0.5});
  std::vector<GroundTruthInstance> gts(2);
  gts[0].head_box = {0.5, 0.5, 0.2, 0.2};
  gts[0].gaze_points = {{0.5, 0.7}};
  gts[1].head_box = {0.3, 0.3, 0.1, 0.1};
  gts[1].gaze_points = {{0.6, 0.1}};
  Assignment a;
  a.pairs = {{0, 0}, {1, 1}};
  LossWeights w{};
  w.box_l1 = w.box_giou = w.cls = w.inout = w.heatmap = 0.0;
  w.gaze = 1.0;
  auto res = total_loss(preds, gts, a, w, MatchConfig{});
  const double want =
      0.5 * ((std::fabs(0.4 - 0.5) + std::fabs(0.4 - 0.7)) +
             (std::fabs(0.8 - 0.6) + std::fabs(0.2 - 0.1)));
  CHECK(res.total.item() == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("total_loss: perfect predictions zero the matched terms") {
  std::vector<Box> boxes{{0.5, 0.5, 0.2, 0.2}};
  GroundTruthInstance gt;
  gt.head_box = boxes[0];
  gt.gaze_points = {{0.25, 0.75}};
  PredictionSet preds = make_preds(boxes, {8.0}, {{0.25, 0.75}}, {8.0});
  Assignment a;
  a.pairs = {{0, 0}};
  auto res = total_loss(preds, {gt}, a, LossWeights{}, MatchConfig{});
  CHECK(res.terms["box_l1"] == doctest::Approx(0.0).epsilon(1e-14));
  CHECK(res.terms["box_giou"] == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(res.terms["gaze"] == doctest::Approx(0.0).epsilon(1e-14));
}

TEST_CASE("total_loss matches a hand summation of the weighted terms") {
  Rng rng(17);
  std::vector<Box> boxes{{0.4, 0.4, 0.2, 0.3}, {0.7, 0.6, 0.15, 0.1}, {0.2, 0.2, 0.1, 0.1}};
  std::vector<double> logits{0.7, -0.3, 0.1}, inout{0.4, -0.8, 0.2};
  std::vector<Point> gaze{{0.3, 0.9}, {0.6, 0.1}, {0.5, 0.5}};
  PredictionSet preds = make_preds(boxes, logits, gaze, inout);
  std::vector<GroundTruthInstance> gts(2);
  gts[0].head_box = {0.42, 0.38, 0.22, 0.28};
  gts[0].gaze_points = {{0.35, 0.8}};
  gts[0].in_frame = true;
  gts[1].head_box = {0.68, 0.61, 0.14, 0.12};
  gts[1].gaze_points = {{0.9, 0.9}};
  gts[1].in_frame = false;
  Assignment a;
  a.pairs = {{0, 0}, {1, 1}};

  LossWeights w;
  MatchConfig cfg;
  auto res = total_loss(preds, gts, a, w, cfg);

  // class: focal over all queries, slots 0 and 1 positive
  double l_class = focal_loss(logits[0], 1) + focal_loss(logits[1], 1) + focal_loss(logits[2], 0);
  l_class /= 2.0;
  // boxes over matched pairs
  double l1 = 0.0, lg = 0.0;
  for (int m = 0; m < 2; ++m)
    for (int c = 0; c < 4; ++c) l1 += std::fabs(boxes[m][c] - gts[m].head_box[c]);
  l1 /= 2.0;
  for (int m = 0; m < 2; ++m)
    lg += 1.0 - giou(box_to_corners(boxes[m]), box_to_corners(gts[m].head_box));
  lg /= 2.0;
  // in/out BCE over matched
  auto bce = [](double x, double t) {
    return std::max(x, 0.0) + std::log1p(std::exp(-std::fabs(x))) - x * t;
  };
  double l_io = (bce(inout[0], 1.0) + bce(inout[1], 0.0)) / 2.0;
  // gaze: only gt 0 is in-frame
  double l_gz = std::fabs(gaze[0][0] - 0.35) + std::fabs(gaze[0][1] - 0.8);

  double want = w.box_l1 * l1 + w.box_giou * lg + w.cls * l_class + w.inout * l_io + w.gaze * l_gz;
  CHECK(res.total.item() == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("total_loss is invariant under ground-truth permutation") {
  Rng rng(23);
  std::vector<Box> boxes;
  std::vector<double> logits, inout;
  std::vector<Point> gaze;
  for (int j = 0; j < 6; ++j) {
    boxes.push_back({rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), rng.uniform(0.05, 0.2),
                     rng.uniform(0.05, 0.2)});
    logits.push_back(rng.uniform(-1, 1));
    inout.push_back(rng.uniform(-1, 1));
    gaze.push_back({rng.uniform(), rng.uniform()});
  }
  PredictionSet preds = make_preds(boxes, logits, gaze, inout);
  std::vector<GroundTruthInstance> gts(3);
  for (auto& g : gts) {
    g.head_box = {rng.uniform(0.3, 0.7), rng.uniform(0.3, 0.7), rng.uniform(0.05, 0.2),
                  rng.uniform(0.05, 0.2)};
    g.gaze_points = {{rng.uniform(), rng.uniform()}};
  }
  MatchConfig cfg;
  LossWeights w;
  auto run = [&](const std::vector<GroundTruthInstance>& order) {
    auto assign = hungarian_assign(matching_cost_matrix(preds, order, cfg));
    return total_loss(preds, order, assign, w, cfg).total.item();
  };
  const double base = run(gts);
  std::vector<GroundTruthInstance> perm{gts[2], gts[0], gts[1]};
  CHECK(run(perm) == doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("total_loss rejects out-of-range assignment indices") {
  PredictionSet preds = make_preds({{0.5, 0.5, 0.2, 0.2}}, {0.0}, {{0.5, 0.5}}, {0.0});
  GroundTruthInstance gt;
  gt.head_box = {0.5, 0.5, 0.2, 0.2};
  gt.gaze_points = {{0.5, 0.5}};
  Assignment bad;
  bad.pairs = {{0, 3}};
  CHECK_THROWS_AS(total_loss(preds, {gt}, bad, LossWeights{}, MatchConfig{}),
                  std::invalid_argument);
}

TEST_CASE("total_loss gradient passes finite differences") {
  std::vector<GroundTruthInstance> gts(2);
  gts[0].head_box = {0.45, 0.4, 0.2, 0.25};
  gts[0].gaze_points = {{0.3, 0.8}};
  gts[1].head_box = {0.7, 0.65, 0.12, 0.1};
  gts[1].gaze_points = {{0.1, 0.3}};
  gts[1].in_frame = false;
  Assignment a;
  a.pairs = {{0, 1}, {1, 0}};
  LossWeights w;
  MatchConfig cfg;

  Rng rng(31);
  Tensor raw = Tensor::from_values({3, 8}, [&] {
    std::vector<double> v(24);
    for (double& x : v) x = rng.uniform(-1.0, 1.0);
    return v;
  }());
  // raw -> sigmoid boxes and gaze keep the box invariants during probing
  auto f = [&](const Tensor& t) {
    PredictionSet p;
    p.boxes = sigmoid(slice_cols(t, 0, 4));
    p.gaze = sigmoid(slice_cols(t, 4, 2));
    p.head_logits = reshape(slice_cols(t, 6, 1), {3});
    p.inout_logits = reshape(slice_cols(t, 7, 1), {3});
    return total_loss(p, gts, a, w, cfg).total;
  };
  CHECK(grad_check(f, raw) < 1e-4);
}
