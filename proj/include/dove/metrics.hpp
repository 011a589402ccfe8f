#pragma once
// Fidelity and temporal-consistency metrics: PSNR, windowed SSIM, and a
// flow-warping error that scores each frame by how well its flow-warped
// predecessor reconstructs it. All metrics are pure functions of their inputs.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dove/common.hpp"
#include "dove/flow.hpp"
#include "dove/media.hpp"
#include "dove/media_io.hpp"
#include "dove/tensor.hpp"

namespace dove {

inline double mse_frames(const Frame& x, const Frame& y) {
  if (x.pixels.shape() != y.pixels.shape())
    throw ShapeError("psnr/mse: shape mismatch " + shape_str(x.pixels.shape()) + " vs " +
                     shape_str(y.pixels.shape()));
  double acc = 0.0;
  for (int64_t i = 0; i < x.pixels.numel(); ++i) {
    double d = static_cast<double>(x.pixels[i]) - static_cast<double>(y.pixels[i]);
    acc += d * d;
  }
  return acc / static_cast<double>(x.pixels.numel());
}

inline double psnr_from_mse(double mse, double peak) {
  if (mse <= 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(peak * peak / mse);
}

inline double psnr(const Frame& x, const Frame& y, double peak = 1.0) {
  return psnr_from_mse(mse_frames(x, y), peak);
}

// Clip PSNR pools squared error over all frames (one MSE for the whole clip),
// so a single perfect frame cannot dominate the score.
inline double psnr(const VideoClip& x, const VideoClip& y, double peak = 1.0) {
  if (x.frame_count() != y.frame_count())
    throw ShapeError("psnr: clips have different frame counts");
  if (x.frame_count() == 0) throw ArgumentError("psnr: empty clip");
  double acc = 0.0;
  for (int64_t t = 0; t < x.frame_count(); ++t) acc += mse_frames(x.frames[t], y.frames[t]);
  return psnr_from_mse(acc / static_cast<double>(x.frame_count()), peak);
}

namespace detail {

inline const std::vector<double>& ssim_window() {
  static const std::vector<double> w = [] {
    std::vector<double> k(11);
    double sum = 0.0;
    for (int i = 0; i < 11; ++i) {
      double d = static_cast<double>(i - 5);
      k[i] = std::exp(-d * d / (2.0 * 1.5 * 1.5));
      sum += k[i];
    }
    for (double& v : k) v /= sum;
    return k;
  }();
  return w;
}

// Valid-mode separable Gaussian filtering: output (H-10, W-10).
inline Tensor<double> gauss_valid(const Tensor<double>& img) {
  const auto& k = ssim_window();
  int64_t h = img.dim(0), w = img.dim(1);
  Tensor<double> tmp(Shape{h, w - 10});
  for (int64_t i = 0; i < h; ++i)
    for (int64_t j = 0; j + 10 < w; ++j) {
      double acc = 0.0;
      for (int t = 0; t < 11; ++t) acc += k[t] * img.at(i, j + t);
      tmp.at(i, j) = acc;
    }
  Tensor<double> out(Shape{h - 10, w - 10});
  for (int64_t i = 0; i + 10 < h; ++i)
    for (int64_t j = 0; j < w - 10; ++j) {
      double acc = 0.0;
      for (int t = 0; t < 11; ++t) acc += k[t] * tmp.at(i + t, j);
      out.at(i, j) = acc;
    }
  return out;
}

inline double ssim_channel(const Tensor<double>& x, const Tensor<double>& y, double c1,
                           double c2) {
  int64_t h = x.dim(0), w = x.dim(1);
  Tensor<double> xx(Shape{h, w}), yy(Shape{h, w}), xy(Shape{h, w});
  for (int64_t i = 0; i < x.numel(); ++i) {
    xx[i] = x[i] * x[i];
    yy[i] = y[i] * y[i];
    xy[i] = x[i] * y[i];
  }
  Tensor<double> mx = gauss_valid(x), my = gauss_valid(y);
  Tensor<double> mxx = gauss_valid(xx), myy = gauss_valid(yy), mxy = gauss_valid(xy);
  double acc = 0.0;
  for (int64_t i = 0; i < mx.numel(); ++i) {
    double vx = mxx[i] - mx[i] * mx[i];
    double vy = myy[i] - my[i] * my[i];
    double cov = mxy[i] - mx[i] * my[i];
    acc += ((2.0 * mx[i] * my[i] + c1) * (2.0 * cov + c2)) /
           ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
  }
  return acc / static_cast<double>(mx.numel());
}

}  // namespace detail

inline double ssim(const Frame& x, const Frame& y, double peak = 1.0) {
  if (x.pixels.shape() != y.pixels.shape())
    throw ShapeError("ssim: shape mismatch");
  if (x.height() < 11 || x.width() < 11)
    throw ArgumentError("ssim: image smaller than the 11x11 window");
  double c1 = (0.01 * peak) * (0.01 * peak);
  double c2 = (0.03 * peak) * (0.03 * peak);
  double acc = 0.0;
  for (int64_t c = 0; c < 3; ++c) {
    Tensor<double> xd(Shape{x.height(), x.width()}), yd(xd.shape());
    for (int64_t i = 0; i < x.height(); ++i)
      for (int64_t j = 0; j < x.width(); ++j) {
        xd.at(i, j) = static_cast<double>(x.pixels.at(c, i, j));
        yd.at(i, j) = static_cast<double>(y.pixels.at(c, i, j));
      }
    acc += detail::ssim_channel(xd, yd, c1, c2);
  }
  return acc / 3.0;
}

inline double ssim(const VideoClip& x, const VideoClip& y, double peak = 1.0) {
  if (x.frame_count() != y.frame_count())
    throw ShapeError("ssim: clips have different frame counts");
  if (x.frame_count() == 0) throw ArgumentError("ssim: empty clip");
  double acc = 0.0;
  for (int64_t t = 0; t < x.frame_count(); ++t) acc += ssim(x.frames[t], y.frames[t], peak);
  return acc / static_cast<double>(x.frame_count());
}

// Temporal-consistency score: for each consecutive pair, warp frame t-1 onto
// frame t along estimated flow, mask out pixels that fail forward-backward
// flow consistency (occlusions), whose source position falls outside the
// previous frame (content not visible there), or that sit within one flow
// window of the frame edge (where the truncated estimator window corrupts
// both flow directions identically, defeating the consistency check), then
// average the masked squared residual. Reported as the raw mean scaled by 1e3.
inline double warping_error(const VideoClip& clip, double mask_threshold_px = 1.0) {
  if (clip.frame_count() < 2)
    throw ArgumentError("warping_error: need at least 2 frames");
  validate_clip(clip);
  int64_t border = std::min<int64_t>(FlowConfig{}.window,
                                     std::min(clip.height(), clip.width()) / 4);
  double total = 0.0;
  for (int64_t t = 1; t < clip.frame_count(); ++t) {
    const Frame& prev = clip.frames[t - 1];
    const Frame& cur = clip.frames[t];
    FlowField back = compute_flow(cur, prev);   // on cur's grid, into prev
    FlowField fwd = compute_flow(prev, cur);    // on prev's grid, into cur
    Frame warped = warp_frame(prev, back);
    double acc = 0.0;
    int64_t kept = 0;
    for (int64_t i = border; i < cur.height() - border; ++i) {
      for (int64_t j = border; j < cur.width() - border; ++j) {
        double by = back.dy.at(i, j), bx = back.dx.at(i, j);
        double sy = static_cast<double>(i) + by, sx = static_cast<double>(j) + bx;
        if (sy < 0 || sy > static_cast<double>(cur.height() - 1) || sx < 0 ||
            sx > static_cast<double>(cur.width() - 1))
          continue;
        double ry = by + detail::sample_bilinear(fwd.dy, sy, sx);
        double rx = bx + detail::sample_bilinear(fwd.dx, sy, sx);
        if (std::hypot(ry, rx) > mask_threshold_px) continue;
        for (int64_t c = 0; c < 3; ++c) {
          double d = static_cast<double>(warped.pixels.at(c, i, j)) -
                     static_cast<double>(cur.pixels.at(c, i, j));
          acc += d * d;
        }
        ++kept;
      }
    }
    if (kept > 0) total += acc / static_cast<double>(3 * kept);
  }
  return total / static_cast<double>(clip.frame_count() - 1) * 1e3;
}

struct ClipScores {
  std::string name;
  std::map<std::string, double> values;  // metric name -> value
};

struct MetricReport {
  std::vector<std::string> metrics;
  std::vector<ClipScores> clips;
  std::map<std::string, double> means;
  std::string pred_dir;
  std::string ref_dir;  // empty when no reference was used

  nlohmann::ordered_json to_json() const {
    auto num = [](double v) -> nlohmann::ordered_json {
      if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
      return v;
    };
    nlohmann::ordered_json j;
    j["metrics"] = metrics;
    j["pred"] = pred_dir;
    j["ref"] = ref_dir;
    j["clips"] = nlohmann::ordered_json::array();
    for (const ClipScores& c : clips) {
      nlohmann::ordered_json cj;
      cj["name"] = c.name;
      for (const auto& [k, v] : c.values) cj[k] = num(v);
      j["clips"].push_back(cj);
    }
    for (const auto& [k, v] : means) j["mean"][k] = num(v);
    return j;
  }
};

inline bool metric_needs_reference(const std::string& name) {
  return name == "psnr" || name == "ssim";
}

inline void validate_metric_names(const std::vector<std::string>& metrics) {
  if (metrics.empty()) throw ArgumentError("eval: no metrics requested");
  for (const std::string& m : metrics)
    if (m != "psnr" && m != "ssim" && m != "warp")
      throw ArgumentError("eval: unknown metric '" + m + "'");
}

// Scores every clip directory under pred_dir. Reference clips are matched by
// directory name; full-reference metrics require ref_dir.
inline MetricReport evaluate(const fs::path& pred_dir,
                             const std::optional<fs::path>& ref_dir,
                             const std::vector<std::string>& metrics) {
  validate_metric_names(metrics);
  bool needs_ref = false;
  for (const std::string& m : metrics) needs_ref = needs_ref || metric_needs_reference(m);
  if (needs_ref && !ref_dir)
    throw ArgumentError("eval: psnr/ssim need a reference directory");
  std::vector<fs::path> clip_dirs = list_clip_dirs(pred_dir);
  if (clip_dirs.empty()) throw DataError("eval: no clips under " + pred_dir.string());

  MetricReport report;
  report.metrics = metrics;
  report.pred_dir = pred_dir.string();
  if (ref_dir) report.ref_dir = ref_dir->string();
  std::map<std::string, double> sums;
  for (const fs::path& dir : clip_dirs) {
    VideoClip pred = read_clip(dir);
    std::optional<VideoClip> ref;
    if (needs_ref) {
      fs::path rdir = *ref_dir / dir.filename();
      if (!fs::exists(rdir / "meta.json"))
        throw DataError("eval: missing reference clip " + rdir.string());
      ref = read_clip(rdir);
    }
    ClipScores cs;
    cs.name = dir.filename().string();
    for (const std::string& m : metrics) {
      double v;
      if (m == "psnr") v = psnr(pred, *ref);
      else if (m == "ssim") v = ssim(pred, *ref);
      else v = warping_error(pred);
      cs.values[m] = v;
      sums[m] += v;
    }
    report.clips.push_back(std::move(cs));
  }
  for (const std::string& m : metrics)
    report.means[m] = sums[m] / static_cast<double>(report.clips.size());
  return report;
}

}  // namespace dove
