#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "dove/common.hpp"
#include "dove/tensor.hpp"

namespace dove {

// One RGB frame, channel-major [3, H, W], values in [0, 1].
struct Frame {
  Tensor<float> pixels;

  Frame() = default;
  explicit Frame(Tensor<float> p) : pixels(std::move(p)) {}
  Frame(int64_t h, int64_t w, float fill = 0.0f) : pixels(Shape{3, h, w}, fill) {}

  int64_t height() const { return pixels.dim(1); }
  int64_t width() const { return pixels.dim(2); }
  float& at(int64_t c, int64_t i, int64_t j) { return pixels.at(c, i, j); }
  float at(int64_t c, int64_t i, int64_t j) const { return pixels.at(c, i, j); }
};

// An image is a single frame; it participates in training as a 1-frame video.
using ImageSample = Frame;

struct VideoClip {
  std::vector<Frame> frames;
  double fps = 24.0;

  int64_t frame_count() const { return static_cast<int64_t>(frames.size()); }
  int64_t height() const { return frames.front().height(); }
  int64_t width() const { return frames.front().width(); }
};

inline void validate_frame(const Frame& f, const char* what = "frame") {
  if (f.pixels.rank() != 3 || f.pixels.dim(0) != 3)
    throw ShapeError(std::string(what) + ": expected [3,H,W], got " + shape_str(f.pixels.shape()));
  if (f.height() < 1 || f.width() < 1)
    throw ShapeError(std::string(what) + ": empty spatial dims");
  for (int64_t i = 0; i < f.pixels.numel(); ++i) {
    float v = f.pixels[i];
    if (!std::isfinite(v) || v < 0.0f || v > 1.0f)
      throw DataError(std::string(what) + ": pixel value out of [0,1] or non-finite");
  }
}

inline void validate_clip(const VideoClip& clip) {
  if (clip.frames.empty()) throw DataError("clip: no frames");
  if (clip.fps <= 0.0) throw DataError("clip: fps must be positive");
  int64_t h = clip.height(), w = clip.width();
  for (const Frame& f : clip.frames) {
    validate_frame(f);
    if (f.height() != h || f.width() != w) throw ShapeError("clip: inconsistent frame shapes");
  }
}

namespace detail {

// Half-pixel-center source coordinate for output index `o` when resampling a
// length-`src` axis to length `dst`.
inline double half_pixel_coord(int64_t o, int64_t src, int64_t dst) {
  return (static_cast<double>(o) + 0.5) * static_cast<double>(src) / static_cast<double>(dst) - 0.5;
}

inline int64_t clamp_index(int64_t i, int64_t n) { return i < 0 ? 0 : (i >= n ? n - 1 : i); }

// Catmull-Rom cubic kernel (a = -0.5). Taps sum to 1.
inline double cubic_weight(double x) {
  constexpr double a = -0.5;
  x = std::abs(x);
  if (x <= 1.0) return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
  if (x < 2.0) return (((x - 5.0) * x + 8.0) * x - 4.0) * a;
  return 0.0;
}

}  // namespace detail

// Bilinear resample with half-pixel centers and edge clamping. Applies to a
// [C,H,W] tensor; constant inputs map to the same constant.
template <typename T>
Tensor<T> resize_bilinear_chw(const Tensor<T>& src, int64_t new_h, int64_t new_w) {
  if (new_h < 1 || new_w < 1) throw ArgumentError("resize_bilinear: target dims must be >= 1");
  if (src.rank() != 3) throw ShapeError("resize_bilinear: expected [C,H,W]");
  const int64_t ch = src.dim(0), h = src.dim(1), w = src.dim(2);
  Tensor<T> dst(Shape{ch, new_h, new_w});
  std::vector<int64_t> x0(new_w), x1(new_w);
  std::vector<double> wx(new_w);
  for (int64_t ox = 0; ox < new_w; ++ox) {
    double sx = detail::half_pixel_coord(ox, w, new_w);
    int64_t f = static_cast<int64_t>(std::floor(sx));
    wx[ox] = sx - static_cast<double>(f);
    x0[ox] = detail::clamp_index(f, w);
    x1[ox] = detail::clamp_index(f + 1, w);
  }
  for (int64_t oy = 0; oy < new_h; ++oy) {
    double sy = detail::half_pixel_coord(oy, h, new_h);
    int64_t f = static_cast<int64_t>(std::floor(sy));
    double wy = sy - static_cast<double>(f);
    int64_t y0 = detail::clamp_index(f, h);
    int64_t y1 = detail::clamp_index(f + 1, h);
    for (int64_t c = 0; c < ch; ++c) {
      for (int64_t ox = 0; ox < new_w; ++ox) {
        double top = (1.0 - wx[ox]) * src.at(c, y0, x0[ox]) + wx[ox] * src.at(c, y0, x1[ox]);
        double bot = (1.0 - wx[ox]) * src.at(c, y1, x0[ox]) + wx[ox] * src.at(c, y1, x1[ox]);
        dst.at(c, oy, ox) = static_cast<T>((1.0 - wy) * top + wy * bot);
      }
    }
  }
  return dst;
}

// Bicubic (Catmull-Rom) resample, same coordinate conventions as bilinear.
template <typename T>
Tensor<T> resize_bicubic_chw(const Tensor<T>& src, int64_t new_h, int64_t new_w) {
  if (new_h < 1 || new_w < 1) throw ArgumentError("resize_bicubic: target dims must be >= 1");
  if (src.rank() != 3) throw ShapeError("resize_bicubic: expected [C,H,W]");
  const int64_t ch = src.dim(0), h = src.dim(1), w = src.dim(2);
  Tensor<T> dst(Shape{ch, new_h, new_w});
  std::vector<std::array<int64_t, 4>> xi(new_w);
  std::vector<std::array<double, 4>> xw(new_w);
  for (int64_t ox = 0; ox < new_w; ++ox) {
    double sx = detail::half_pixel_coord(ox, w, new_w);
    int64_t f = static_cast<int64_t>(std::floor(sx));
    double t = sx - static_cast<double>(f);
    for (int k = 0; k < 4; ++k) {
      xi[ox][k] = detail::clamp_index(f - 1 + k, w);
      xw[ox][k] = detail::cubic_weight(t - static_cast<double>(k - 1));
    }
  }
  std::array<int64_t, 4> yi;
  std::array<double, 4> yw;
  for (int64_t oy = 0; oy < new_h; ++oy) {
    double sy = detail::half_pixel_coord(oy, h, new_h);
    int64_t f = static_cast<int64_t>(std::floor(sy));
    double t = sy - static_cast<double>(f);
    for (int k = 0; k < 4; ++k) {
      yi[k] = detail::clamp_index(f - 1 + k, h);
      yw[k] = detail::cubic_weight(t - static_cast<double>(k - 1));
    }
    for (int64_t c = 0; c < ch; ++c) {
      for (int64_t ox = 0; ox < new_w; ++ox) {
        double acc = 0.0;
        for (int ky = 0; ky < 4; ++ky) {
          double row = 0.0;
          for (int kx = 0; kx < 4; ++kx) row += xw[ox][kx] * src.at(c, yi[ky], xi[ox][kx]);
          acc += yw[ky] * row;
        }
        dst.at(c, oy, ox) = static_cast<T>(acc);
      }
    }
  }
  return dst;
}

inline Frame resize_bilinear(const Frame& f, int64_t new_h, int64_t new_w) {
  return Frame(resize_bilinear_chw(f.pixels, new_h, new_w));
}

inline Frame resize_bicubic(const Frame& f, int64_t new_h, int64_t new_w) {
  return Frame(resize_bicubic_chw(f.pixels, new_h, new_w));
}

// Rec.601 luma, double precision; shared by flow, scene detection, metrics.
inline Tensor<double> luma(const Frame& f) {
  Tensor<double> out(Shape{f.height(), f.width()});
  const int64_t n = f.height() * f.width();
  const float* r = f.pixels.data();
  const float* g = r + n;
  const float* b = g + n;
  for (int64_t i = 0; i < n; ++i)
    out[i] = 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i];
  return out;
}

inline Frame crop(const Frame& f, int64_t top, int64_t left, int64_t ch, int64_t cw) {
  if (top < 0 || left < 0 || ch < 1 || cw < 1 || top + ch > f.height() || left + cw > f.width())
    throw ArgumentError("crop: window out of bounds");
  Frame out(ch, cw);
  for (int64_t c = 0; c < 3; ++c)
    for (int64_t i = 0; i < ch; ++i)
      for (int64_t j = 0; j < cw; ++j) out.at(c, i, j) = f.at(c, top + i, left + j);
  return out;
}

inline VideoClip crop(const VideoClip& clip, int64_t top, int64_t left, int64_t ch, int64_t cw) {
  VideoClip out;
  out.fps = clip.fps;
  out.frames.reserve(clip.frames.size());
  for (const Frame& f : clip.frames) out.frames.push_back(crop(f, top, left, ch, cw));
  return out;
}

// Frame-to-frame delta x^(t) - x^(t-1), t in [1, n).
inline Tensor<float> frame_delta(const VideoClip& clip, int64_t t) {
  if (t < 1 || t >= clip.frame_count()) throw IndexError("frame_delta: t out of range");
  return clip.frames[t].pixels - clip.frames[t - 1].pixels;
}

inline float clamp01(float v) { return v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v); }

inline void clamp_frame(Frame& f) {
  for (int64_t i = 0; i < f.pixels.numel(); ++i) f.pixels[i] = clamp01(f.pixels[i]);
}

}  // namespace dove
