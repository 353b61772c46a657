#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "gazedetr/image.hpp"
#include "gazedetr/rng.hpp"
#include "gazedetr/types.hpp"

namespace gazedetr {

// Placement geometry kept alongside a synthetic sample so tests can audit
// the rendered pupil direction against the annotation. Pixel coordinates.
struct InstanceGeometry {
  double head_cx, head_cy;
  double radius;
  double pupil_cx, pupil_cy;
};

struct SceneSample {
  Tensor image;  // [3 x H x W], values in [0, 1]
  std::vector<GroundTruthInstance> instances;
  std::uint64_t seed = 0;
  std::vector<std::string> augmentation_trail;
  std::vector<InstanceGeometry> geometry;  // synthetic samples only

  int height() const { return image.dim(1); }
  int width() const { return image.dim(2); }
};

struct SynthConfig {
  int image_h = 64;
  int image_w = 64;
  int head_count_min = 1;
  int head_count_max = 3;
  double head_radius_min = 5.0;  // pixels
  double head_radius_max = 9.0;
  double out_of_frame_prob = 0.2;
  int distractor_count = 3;
  std::uint64_t seed = 0;

  void validate() const {
    check(image_h >= 32 && image_w >= 32, "synth: image extents must be at least 32");
    check(head_count_min >= 1 && head_count_max >= head_count_min, "synth: bad head-count range");
    check(head_radius_min > 1.0 && head_radius_max >= head_radius_min,
          "synth: bad head-radius range");
    check(out_of_frame_prob >= 0.0 && out_of_frame_prob <= 1.0,
          "synth: out-of-frame probability outside [0,1]");
    check(distractor_count >= 0, "synth: negative distractor count");
  }
};

// ---------------------------------------------------------------------------
// Synthetic scene generation

// Renders heads as filled discs with a dark pupil marker offset from the
// head center toward the gaze target, a small bright square at each in-frame
// target, and muted rectangle distractors. The pupil offset direction equals
// the annotated gaze direction exactly, so gaze is recoverable from pixels.
// Deterministic in (config, index).
inline SceneSample synth_generate(const SynthConfig& cfg, int index) {
  cfg.validate();
  check(index >= 0, "synth: negative sample index");
  Rng rng(Rng::mix(cfg.seed, static_cast<std::uint64_t>(index)));
  const int H = cfg.image_h, W = cfg.image_w;

  SceneSample s;
  s.seed = cfg.seed;
  s.image = Tensor::zeros({3, H, W});

  // background gradient between two muted colors
  const Color bg0{rng.uniform(0.08, 0.3), rng.uniform(0.08, 0.3), rng.uniform(0.08, 0.35)};
  const Color bg1{rng.uniform(0.15, 0.45), rng.uniform(0.15, 0.45), rng.uniform(0.15, 0.45)};
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const double t = static_cast<double>(x + y) / (W + H - 2);
      put_pixel(s.image, x, y, {bg0.r + (bg1.r - bg0.r) * t, bg0.g + (bg1.g - bg0.g) * t,
                                bg0.b + (bg1.b - bg0.b) * t});
    }

  for (int i = 0; i < cfg.distractor_count; ++i) {
    const int dw = static_cast<int>(rng.uniform_int(3, 9));
    const int dh = static_cast<int>(rng.uniform_int(3, 9));
    const int x0 = static_cast<int>(rng.uniform_int(0, W - dw - 1));
    const int y0 = static_cast<int>(rng.uniform_int(0, H - dh - 1));
    const Color c{rng.uniform(0.1, 0.55), rng.uniform(0.1, 0.55), rng.uniform(0.1, 0.55)};
    draw_filled_rect(s.image, x0, y0, x0 + dw, y0 + dh, c);
  }

  const int n_heads = static_cast<int>(rng.uniform_int(cfg.head_count_min, cfg.head_count_max));
  struct Placed {
    double cx, cy, r;
  };
  std::vector<Placed> placed;
  for (int i = 0; i < n_heads; ++i) {
    const double r = rng.uniform(cfg.head_radius_min, cfg.head_radius_max);
    bool ok = false;
    double cx = 0, cy = 0;
    for (int attempt = 0; attempt < 64 && !ok; ++attempt) {
      cx = rng.uniform(r + 2.0, W - r - 2.0);
      cy = rng.uniform(r + 2.0, H - r - 2.0);
      ok = true;
      for (const Placed& p : placed)
        if (std::hypot(cx - p.cx, cy - p.cy) < r + p.r + 3.0) ok = false;
    }
    if (!ok)
      throw DataError("synth: could not place head " + std::to_string(i) + " of " +
                      std::to_string(n_heads) + " after 64 attempts (image " +
                      std::to_string(W) + "x" + std::to_string(H) + ", radius " +
                      std::to_string(r) + ")");
    placed.push_back({cx, cy, r});

    GroundTruthInstance gt;
    gt.head_box = {cx / W, cy / H, 2.0 * r / W, 2.0 * r / H};
    gt.in_frame = !rng.bernoulli(cfg.out_of_frame_prob);

    Point target{};  // continuous pixel coords of the (possibly virtual) target
    if (gt.in_frame) {
      bool placed_target = false;
      for (int attempt = 0; attempt < 64 && !placed_target; ++attempt) {
        target = {rng.uniform(0.06 * W, 0.94 * W), rng.uniform(0.06 * H, 0.94 * H)};
        placed_target = std::hypot(target[0] - cx, target[1] - cy) >= r + 6.0;
      }
      if (!placed_target)
        throw DataError("synth: could not place gaze target for head " + std::to_string(i));
    } else {
      const double theta = rng.uniform(0.0, 6.283185307179586);
      const double dx = std::cos(theta), dy = std::sin(theta);
      // walk out to 1.25x the frame-exit distance
      double t_exit = 1e18;
      if (dx > 1e-12) t_exit = std::min(t_exit, (W - cx) / dx);
      if (dx < -1e-12) t_exit = std::min(t_exit, -cx / dx);
      if (dy > 1e-12) t_exit = std::min(t_exit, (H - cy) / dy);
      if (dy < -1e-12) t_exit = std::min(t_exit, -cy / dy);
      const double t = 1.25 * t_exit;
      target = {cx + dx * t, cy + dy * t};
    }
    gt.gaze_points = {{target[0] / W, target[1] / H}};

    const double norm = std::hypot(target[0] - cx, target[1] - cy);
    const double ux = (target[0] - cx) / norm, uy = (target[1] - cy) / norm;
    const double pupil_r = std::max(1.2, 0.28 * r);
    const double px = cx + ux * 0.55 * r, py = cy + uy * 0.55 * r;

    const Color head_color{rng.uniform(0.72, 0.95), rng.uniform(0.55, 0.78),
                           rng.uniform(0.38, 0.6)};
    draw_disc(s.image, cx, cy, r, head_color);
    draw_disc(s.image, px, py, pupil_r, {0.02, 0.02, 0.05});

    s.instances.push_back(std::move(gt));
    s.geometry.push_back({cx, cy, r, px, py});
  }

  // target markers last so they stay visible
  for (std::size_t i = 0; i < s.instances.size(); ++i) {
    if (!s.instances[i].in_frame) continue;
    const Point& g = s.instances[i].gaze_points[0];
    const int mx = static_cast<int>(std::lround(g[0] * W));
    const int my = static_cast<int>(std::lround(g[1] * H));
    draw_filled_rect(s.image, mx - 2, my - 2, mx + 2, my + 2, {1.0, 0.85, 0.1});
  }
  return s;
}

// ---------------------------------------------------------------------------
// Augmentation

inline SceneSample flip_horizontal(const SceneSample& in) {
  SceneSample out = in;
  const int H = in.height(), W = in.width();
  std::vector<double> pix(in.image.values().size());
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x)
        pix[(static_cast<std::size_t>(c) * H + y) * W + x] =
            in.image.values()[(static_cast<std::size_t>(c) * H + y) * W + (W - 1 - x)];
  out.image = Tensor::from_values({3, H, W}, std::move(pix));
  for (auto& inst : out.instances) {
    inst.head_box[0] = 1.0 - inst.head_box[0];
    for (auto& g : inst.gaze_points) g[0] = 1.0 - g[0];
  }
  for (auto& geo : out.geometry) {
    geo.head_cx = W - geo.head_cx;
    geo.pupil_cx = W - geo.pupil_cx;
  }
  out.augmentation_trail.push_back("flip");
  return out;
}

// Crops a pixel rectangle, re-normalizes annotations to the crop, and
// bilinearly resizes to the target extents. Instances whose head center
// leaves the crop are dropped; in-frame targets leaving the crop flip the
// instance to out-of-frame. Returns nothing when the crop orphans every head
// so the caller can resample.
inline std::optional<SceneSample> crop_resize(const SceneSample& in, int crop_x, int crop_y,
                                              int crop_w, int crop_h, int out_h, int out_w) {
  const int H = in.height(), W = in.width();
  check(crop_x >= 0 && crop_y >= 0 && crop_w > 0 && crop_h > 0 && crop_x + crop_w <= W &&
            crop_y + crop_h <= H,
        "crop_resize: crop rectangle outside the image");
  check(out_h > 0 && out_w > 0, "crop_resize: target extents must be positive");

  SceneSample out;
  out.seed = in.seed;
  out.augmentation_trail = in.augmentation_trail;
  {
    std::ostringstream os;
    os << "crop " << crop_x << "," << crop_y << "," << crop_w << "," << crop_h << " -> " << out_w
       << "x" << out_h;
    out.augmentation_trail.push_back(os.str());
  }

  for (std::size_t i = 0; i < in.instances.size(); ++i) {
    const auto& inst = in.instances[i];
    const double cx_px = inst.head_box[0] * W, cy_px = inst.head_box[1] * H;
    if (cx_px < crop_x || cx_px > crop_x + crop_w || cy_px < crop_y || cy_px > crop_y + crop_h)
      continue;  // head center left the crop
    GroundTruthInstance ni;
    const double ncx = (cx_px - crop_x) / crop_w;
    const double ncy = (cy_px - crop_y) / crop_h;
    const double nw = inst.head_box[2] * W / crop_w;
    const double nh = inst.head_box[3] * H / crop_h;
    // clip the box to the crop while keeping the center inside
    const double x1 = std::max(0.0, ncx - nw / 2), x2 = std::min(1.0, ncx + nw / 2);
    const double y1 = std::max(0.0, ncy - nh / 2), y2 = std::min(1.0, ncy + nh / 2);
    ni.head_box = {(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1};
    ni.in_frame = inst.in_frame;
    for (const auto& g : inst.gaze_points) {
      const double gx = (g[0] * W - crop_x) / crop_w;
      const double gy = (g[1] * H - crop_y) / crop_h;
      ni.gaze_points.push_back({gx, gy});
      if (ni.in_frame && (gx < 0.0 || gx > 1.0 || gy < 0.0 || gy > 1.0)) ni.in_frame = false;
    }
    out.instances.push_back(std::move(ni));
    if (i < in.geometry.size()) {
      const auto& geo = in.geometry[i];
      const double sx = static_cast<double>(out_w) / crop_w;
      const double sy = static_cast<double>(out_h) / crop_h;
      out.geometry.push_back({(geo.head_cx - crop_x) * sx, (geo.head_cy - crop_y) * sy,
                              geo.radius * sx, (geo.pupil_cx - crop_x) * sx,
                              (geo.pupil_cy - crop_y) * sy});
    }
  }
  if (out.instances.empty()) return std::nullopt;

  // crop the pixel planes, then resample
  std::vector<double> cropped(static_cast<std::size_t>(3) * crop_h * crop_w);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < crop_h; ++y)
      for (int x = 0; x < crop_w; ++x)
        cropped[(static_cast<std::size_t>(c) * crop_h + y) * crop_w + x] =
            in.image.values()[(static_cast<std::size_t>(c) * H + crop_y + y) * W + crop_x + x];
  out.image = bilinear_resize(Tensor::from_values({3, crop_h, crop_w}, std::move(cropped)), out_h,
                              out_w);
  return out;
}

struct AugmentConfig {
  double flip_prob = 0.5;
  double crop_prob = 0.5;
  double crop_scale_min = 0.6;
  int resize_min = 0;  // 0 disables the random resize band
  int resize_max = 0;
};

// Random flip, crop, and resize per the training recipe; crops that orphan
// every head are resampled up to 8 times and then skipped.
inline SceneSample augment_sample(const SceneSample& in, const AugmentConfig& cfg, Rng& rng) {
  SceneSample s = in;
  if (rng.bernoulli(cfg.flip_prob)) s = flip_horizontal(s);
  if (rng.bernoulli(cfg.crop_prob)) {
    for (int attempt = 0; attempt < 8; ++attempt) {
      const double scale = rng.uniform(cfg.crop_scale_min, 1.0);
      const int cw = std::max(32, static_cast<int>(std::lround(s.width() * scale)));
      const int ch = std::max(32, static_cast<int>(std::lround(s.height() * scale)));
      const int cx = static_cast<int>(rng.uniform_int(0, s.width() - cw));
      const int cy = static_cast<int>(rng.uniform_int(0, s.height() - ch));
      auto cropped = crop_resize(s, cx, cy, cw, ch, ch, cw);
      if (cropped) {
        s = std::move(*cropped);
        break;
      }
    }
  }
  if (cfg.resize_min > 0 && cfg.resize_max >= cfg.resize_min) {
    const int target = static_cast<int>(rng.uniform_int(cfg.resize_min, cfg.resize_max));
    if (target != s.height() || target != s.width()) {
      auto resized = crop_resize(s, 0, 0, s.width(), s.height(), target, target);
      if (resized) s = std::move(*resized);
    }
  }
  return s;
}

// ---------------------------------------------------------------------------
// Zero-padded batching

struct PaddedBatch {
  Tensor images;                                 // [N x 3 x H_max x W_max]
  std::vector<std::array<int, 2>> valid_extents; // per-sample (h, w)

  // Pixel-level validity mask for one sample.
  std::vector<char> pixel_mask(int i) const {
    const int H = images.dim(2), W = images.dim(3);
    std::vector<char> m(static_cast<std::size_t>(H) * W, 0);
    for (int y = 0; y < valid_extents[i][0]; ++y)
      for (int x = 0; x < valid_extents[i][1]; ++x) m[static_cast<std::size_t>(y) * W + x] = 1;
    return m;
  }
};

// Batch extents are the per-dimension maxima; shorter sides are appended
// with zeros.
inline PaddedBatch batch_pad(const std::vector<SceneSample>& samples) {
  check(!samples.empty(), "batch_pad: empty batch");
  int hm = 0, wm = 0;
  for (const auto& s : samples) {
    check(s.image.ndim() == 3 && s.image.dim(0) == 3,
          "batch_pad: samples must be [3xHxW], got " + shape_str(s.image.shape()));
    hm = std::max(hm, s.height());
    wm = std::max(wm, s.width());
  }
  const int n = static_cast<int>(samples.size());
  std::vector<double> out(static_cast<std::size_t>(n) * 3 * hm * wm, 0.0);
  PaddedBatch batch;
  for (int i = 0; i < n; ++i) {
    const auto& img = samples[i].image;
    const int h = img.dim(1), w = img.dim(2);
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < h; ++y)
        std::copy_n(img.values().data() + (static_cast<std::size_t>(c) * h + y) * w, w,
                    out.data() + ((static_cast<std::size_t>(i) * 3 + c) * hm + y) * wm);
    batch.valid_extents.push_back({h, w});
  }
  batch.images = Tensor::from_values({n, 3, hm, wm}, std::move(out));
  return batch;
}

// View of one batch slice as a [3 x H x W] tensor (copy).
inline Tensor batch_slice(const PaddedBatch& batch, int i) {
  const int hm = batch.images.dim(2), wm = batch.images.dim(3);
  const std::size_t plane = static_cast<std::size_t>(3) * hm * wm;
  std::vector<double> v(batch.images.values().begin() + i * plane,
                        batch.images.values().begin() + (i + 1) * plane);
  return Tensor::from_values({3, hm, wm}, std::move(v));
}

// ---------------------------------------------------------------------------
// Dataset I/O

// Annotation schema: one instance line per gaze point,
//   image_path cx cy w h gx gy in_frame group_id
// with coordinates at 6 decimals and '#' comments. Lines sharing an image
// path and group id form one instance with a multi-annotator gaze set.
inline void write_dataset(const std::string& dir, const std::vector<SceneSample>& samples) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(fs::path(dir) / "images", ec);
  if (ec) throw DataError("cannot create dataset directory: " + dir);
  std::ofstream ann(fs::path(dir) / "annotations.txt");
  if (!ann) throw DataError("cannot write annotations in " + dir);
  ann << "# image_path cx cy w h gx gy in_frame group_id\n";
  ann << std::fixed << std::setprecision(6);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    std::ostringstream name;
    name << "images/scene_" << std::setw(5) << std::setfill('0') << i << ".ppm";
    write_ppm((fs::path(dir) / name.str()).string(), samples[i].image);
    for (std::size_t g = 0; g < samples[i].instances.size(); ++g) {
      const auto& inst = samples[i].instances[g];
      for (const auto& p : inst.gaze_points)
        ann << name.str() << " " << inst.head_box[0] << " " << inst.head_box[1] << " "
            << inst.head_box[2] << " " << inst.head_box[3] << " " << p[0] << " " << p[1] << " "
            << (inst.in_frame ? 1 : 0) << " " << g << "\n";
    }
  }
  if (!ann) throw DataError("short annotation write in " + dir);
}

inline std::vector<SceneSample> read_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  const fs::path ann_path = fs::path(dir) / "annotations.txt";
  std::ifstream ann(ann_path);
  if (!ann) throw DataError("cannot open annotations: " + ann_path.string());

  struct Key {
    std::string image;
    std::string group;
    bool operator<(const Key& o) const {
      return image != o.image ? image < o.image : group < o.group;
    }
  };
  std::vector<std::string> image_order;
  std::map<std::string, std::vector<std::pair<std::string, GroundTruthInstance>>> by_image;

  std::string line;
  int line_no = 0;
  while (std::getline(ann, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream is(line);
    std::string path, group;
    double cx, cy, w, h, gx, gy;
    int in_frame;
    if (!(is >> path >> cx >> cy >> w >> h >> gx >> gy >> in_frame >> group))
      throw DataError("malformed annotation at line " + std::to_string(line_no) + " of " +
                      ann_path.string());
    if (in_frame != 0 && in_frame != 1)
      throw DataError("in_frame flag must be 0 or 1 at line " + std::to_string(line_no));
    auto it = by_image.find(path);
    if (it == by_image.end()) {
      image_order.push_back(path);
      it = by_image.emplace(path, std::vector<std::pair<std::string, GroundTruthInstance>>{}).first;
    }
    auto& groups = it->second;
    auto git = std::find_if(groups.begin(), groups.end(),
                            [&](const auto& g) { return g.first == group; });
    if (git == groups.end()) {
      GroundTruthInstance inst;
      inst.head_box = {cx, cy, w, h};
      inst.in_frame = in_frame == 1;
      inst.gaze_points.push_back({gx, gy});
      groups.emplace_back(group, std::move(inst));
    } else {
      git->second.gaze_points.push_back({gx, gy});
    }
  }

  std::vector<SceneSample> samples;
  for (const std::string& img_rel : image_order) {
    SceneSample s;
    const fs::path img_path = fs::path(dir) / img_rel;
    if (!fs::exists(img_path)) throw DataError("missing image file: " + img_path.string());
    s.image = read_ppm(img_path.string());
    for (auto& [group, inst] : by_image[img_rel]) s.instances.push_back(std::move(inst));
    s.augmentation_trail.push_back("loaded " + img_rel);
    samples.push_back(std::move(s));
  }
  return samples;
}

}  // namespace gazedetr
