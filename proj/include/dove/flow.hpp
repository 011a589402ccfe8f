#pragma once
// Dense optical flow via coarse-to-fine pyramidal Lucas-Kanade on luminance.
// Fixed window, fixed iteration count, no randomness: identical inputs give
// identical fields across runs. compute_flow(a, b) returns, on a's pixel grid,
// the displacement d with b(x + d(x)) ~= a(x) (where a's content moved).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "dove/common.hpp"
#include "dove/media.hpp"
#include "dove/tensor.hpp"

namespace dove {

struct FlowField {
  Tensor<double> dy;  // vertical displacement per pixel, [H,W]
  Tensor<double> dx;  // horizontal displacement per pixel, [H,W]

  int64_t height() const { return dy.dim(0); }
  int64_t width() const { return dy.dim(1); }
  double magnitude(int64_t i, int64_t j) const {
    return std::hypot(dy.at(i, j), dx.at(i, j));
  }
};

struct FlowConfig {
  int window = 7;      // odd patch side for the local least-squares fit
  int iters = 3;       // refinement iterations per pyramid level
  int max_levels = 4;  // pyramid depth cap; effective depth also respects size
  int min_level_size = 16;
  double regularization = 1e-4;  // Tikhonov term for near-singular patches
};

namespace detail {

// 5-tap Gaussian smoothing + 2x decimation, replicate borders.
inline Tensor<double> pyramid_down(const Tensor<double>& src) {
  static const double k[5] = {1.0 / 16, 4.0 / 16, 6.0 / 16, 4.0 / 16, 1.0 / 16};
  int64_t h = src.dim(0), w = src.dim(1);
  Tensor<double> tmp(Shape{h, w});
  for (int64_t i = 0; i < h; ++i)
    for (int64_t j = 0; j < w; ++j) {
      double acc = 0.0;
      for (int t = -2; t <= 2; ++t)
        acc += k[t + 2] * src.at(i, std::clamp<int64_t>(j + t, 0, w - 1));
      tmp.at(i, j) = acc;
    }
  int64_t nh = (h + 1) / 2, nw = (w + 1) / 2;
  Tensor<double> out(Shape{nh, nw});
  for (int64_t i = 0; i < nh; ++i)
    for (int64_t j = 0; j < nw; ++j) {
      double acc = 0.0;
      for (int t = -2; t <= 2; ++t)
        acc += k[t + 2] * tmp.at(std::clamp<int64_t>(2 * i + t, 0, h - 1), 2 * j);
      out.at(i, j) = acc;
    }
  return out;
}

inline double sample_bilinear(const Tensor<double>& img, double y, double x) {
  int64_t h = img.dim(0), w = img.dim(1);
  y = std::clamp(y, 0.0, static_cast<double>(h - 1));
  x = std::clamp(x, 0.0, static_cast<double>(w - 1));
  int64_t i0 = static_cast<int64_t>(std::floor(y));
  int64_t j0 = static_cast<int64_t>(std::floor(x));
  int64_t i1 = std::min(i0 + 1, h - 1), j1 = std::min(j0 + 1, w - 1);
  double fy = y - static_cast<double>(i0), fx = x - static_cast<double>(j0);
  return (1 - fy) * ((1 - fx) * img.at(i0, j0) + fx * img.at(i0, j1)) +
         fy * ((1 - fx) * img.at(i1, j0) + fx * img.at(i1, j1));
}

// Bilinearly upsample a flow component to (nh, nw) and double its magnitude
// (one pyramid step doubles pixel units).
inline Tensor<double> upsample_flow(const Tensor<double>& f, int64_t nh, int64_t nw) {
  int64_t h = f.dim(0), w = f.dim(1);
  Tensor<double> out(Shape{nh, nw});
  for (int64_t i = 0; i < nh; ++i)
    for (int64_t j = 0; j < nw; ++j) {
      double sy = (static_cast<double>(i) + 0.5) * h / nh - 0.5;
      double sx = (static_cast<double>(j) + 0.5) * w / nw - 0.5;
      out.at(i, j) = 2.0 * sample_bilinear(f, sy, sx);
    }
  return out;
}

// One pyramid level of iterative Lucas-Kanade. Gradients of `prev` are fixed
// across iterations; only the temporal residual is recomputed at the warped
// position.
inline void lk_refine(const Tensor<double>& prev, const Tensor<double>& next,
                      Tensor<double>& dy, Tensor<double>& dx, const FlowConfig& cfg) {
  int64_t h = prev.dim(0), w = prev.dim(1);
  int64_t r = cfg.window / 2;
  Tensor<double> gx(Shape{h, w}), gy(Shape{h, w});
  for (int64_t i = 0; i < h; ++i)
    for (int64_t j = 0; j < w; ++j) {
      int64_t jm = std::max<int64_t>(j - 1, 0), jp = std::min<int64_t>(j + 1, w - 1);
      int64_t im = std::max<int64_t>(i - 1, 0), ip = std::min<int64_t>(i + 1, h - 1);
      gx.at(i, j) = 0.5 * (prev.at(i, jp) - prev.at(i, jm));
      gy.at(i, j) = 0.5 * (prev.at(ip, j) - prev.at(im, j));
    }
  for (int iter = 0; iter < cfg.iters; ++iter) {
    for (int64_t i = 0; i < h; ++i) {
      for (int64_t j = 0; j < w; ++j) {
        double gxx = 0, gxy = 0, gyy = 0, bx = 0, by = 0;
        for (int64_t wi = std::max<int64_t>(i - r, 0);
             wi <= std::min<int64_t>(i + r, h - 1); ++wi) {
          for (int64_t wj = std::max<int64_t>(j - r, 0);
               wj <= std::min<int64_t>(j + r, w - 1); ++wj) {
            double ix = gx.at(wi, wj), iy = gy.at(wi, wj);
            double it = sample_bilinear(next, wi + dy.at(i, j), wj + dx.at(i, j)) -
                        prev.at(wi, wj);
            gxx += ix * ix;
            gxy += ix * iy;
            gyy += iy * iy;
            bx += ix * it;
            by += iy * it;
          }
        }
        double a00 = gxx + cfg.regularization, a11 = gyy + cfg.regularization;
        double det = a00 * a11 - gxy * gxy;
        dx.at(i, j) += (-bx * a11 + by * gxy) / det;
        dy.at(i, j) += (-by * a00 + bx * gxy) / det;
      }
    }
  }
}

}  // namespace detail

inline FlowField compute_flow(const Frame& prev, const Frame& next,
                              const FlowConfig& cfg = {}) {
  if (prev.height() != next.height() || prev.width() != next.width())
    throw ArgumentError("compute_flow: frame dims must match");
  if (cfg.window < 3 || cfg.window % 2 == 0)
    throw ArgumentError("compute_flow: window must be odd and >= 3");
  std::vector<Tensor<double>> pa{luma(prev)}, pb{luma(next)};
  while (static_cast<int>(pa.size()) < cfg.max_levels &&
         std::min(pa.back().dim(0), pa.back().dim(1)) >= 2 * cfg.min_level_size) {
    pa.push_back(detail::pyramid_down(pa.back()));
    pb.push_back(detail::pyramid_down(pb.back()));
  }
  Tensor<double> dy(Shape{pa.back().dim(0), pa.back().dim(1)});
  Tensor<double> dx = dy;
  for (int level = static_cast<int>(pa.size()) - 1; level >= 0; --level) {
    if (level != static_cast<int>(pa.size()) - 1) {
      dy = detail::upsample_flow(dy, pa[level].dim(0), pa[level].dim(1));
      dx = detail::upsample_flow(dx, pa[level].dim(0), pa[level].dim(1));
    }
    detail::lk_refine(pa[level], pb[level], dy, dx, cfg);
  }
  for (int64_t i = 0; i < dy.numel(); ++i)
    if (!std::isfinite(dy[i]) || !std::isfinite(dx[i]))
      throw DataError("compute_flow: non-finite flow value");
  return FlowField{std::move(dy), std::move(dx)};
}

// Reconstructs the target frame from `source` using flow computed on the
// target's grid: out(x) = source(x + d(x)). Used by the warping-error metric
// with d = compute_flow(target, source).
inline Frame warp_frame(const Frame& source, const FlowField& flow) {
  if (source.height() != flow.height() || source.width() != flow.width())
    throw ArgumentError("warp_frame: flow dims must match frame");
  int64_t h = source.height(), w = source.width();
  Frame out(h, w);
  for (int64_t c = 0; c < 3; ++c) {
    Tensor<double> chan(Shape{h, w});
    for (int64_t i = 0; i < h; ++i)
      for (int64_t j = 0; j < w; ++j)
        chan.at(i, j) = static_cast<double>(source.pixels.at(c, i, j));
    for (int64_t i = 0; i < h; ++i)
      for (int64_t j = 0; j < w; ++j)
        out.pixels.at(c, i, j) = static_cast<float>(detail::sample_bilinear(
            chan, i + flow.dy.at(i, j), j + flow.dx.at(i, j)));
  }
  return out;
}

}  // namespace dove
