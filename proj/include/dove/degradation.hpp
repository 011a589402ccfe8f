#pragma once
// Seeded two-stage degradation chain for synthesizing paired LQ/HQ media.
// Each stage applies blur -> resize -> noise -> block-DCT compression, and a
// final downscale brings the result to 1/scale of the input resolution. Every
// random draw is resolved when the recipe is made, so (input, recipe) fully
// determines the output and reruns are bit-identical.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dove/common.hpp"
#include "dove/config.hpp"
#include "dove/media.hpp"
#include "dove/rng.hpp"
#include "dove/tensor.hpp"

namespace dove {

enum class ResizeMode { Bilinear, Bicubic };

inline const char* resize_mode_name(ResizeMode m) {
  return m == ResizeMode::Bilinear ? "bilinear" : "bicubic";
}

inline ResizeMode resize_mode_from_name(const std::string& name) {
  if (name == "bilinear") return ResizeMode::Bilinear;
  if (name == "bicubic") return ResizeMode::Bicubic;
  throw ArgumentError("recipe: unknown resize mode '" + name + "'");
}

struct BlurSpec {
  bool aniso = false;
  double sigma_x = 0.0;  // std-dev along the first principal axis; 0 = no blur
  double sigma_y = 0.0;  // second axis (equals sigma_x for isotropic kernels)
  double theta = 0.0;    // principal-axis rotation in radians
};

struct StageRecipe {
  BlurSpec blur;
  double resize_factor = 1.0;
  ResizeMode resize_mode = ResizeMode::Bicubic;
  double noise_sigma = 0.0;
  bool signal_dependent = false;  // scale noise by sqrt(intensity)
  double quality = 100.0;         // compression strength; 100 bypasses exactly
};

struct DegradationRecipe {
  int64_t seed = 0;
  StageRecipe s1;
  StageRecipe s2;
  int64_t scale = 4;

  void validate() const {
    for (const StageRecipe* st : {&s1, &s2}) {
      if (st->blur.sigma_x < 0 || st->blur.sigma_y < 0)
        throw ArgumentError("recipe: blur sigma must be >= 0");
      if (st->resize_factor <= 0)
        throw ArgumentError("recipe: resize factor must be > 0");
      if (st->noise_sigma < 0)
        throw ArgumentError("recipe: noise sigma must be >= 0");
      if (st->quality < 1 || st->quality > 100)
        throw ArgumentError("recipe: quality must be in [1,100]");
    }
    if (scale < 1) throw ArgumentError("recipe: scale must be >= 1");
  }

  nlohmann::ordered_json to_json() const {
    auto stage = [](const StageRecipe& st) {
      nlohmann::ordered_json j;
      j["blur"] = {{"aniso", st.blur.aniso},
                   {"sigma_x", st.blur.sigma_x},
                   {"sigma_y", st.blur.sigma_y},
                   {"theta", st.blur.theta}};
      j["resize_factor"] = st.resize_factor;
      j["resize_mode"] = resize_mode_name(st.resize_mode);
      j["noise_sigma"] = st.noise_sigma;
      j["signal_dependent"] = st.signal_dependent;
      j["quality"] = st.quality;
      return j;
    };
    nlohmann::ordered_json j;
    j["seed"] = seed;
    j["scale"] = scale;
    j["stages"] = nlohmann::ordered_json::array({stage(s1), stage(s2)});
    return j;
  }

  static DegradationRecipe from_json(const nlohmann::json& j) {
    auto stage = [](const nlohmann::json& sj) {
      StageRecipe st;
      const auto& bj = sj.at("blur");
      st.blur.aniso = bj.at("aniso").get<bool>();
      st.blur.sigma_x = bj.at("sigma_x").get<double>();
      st.blur.sigma_y = bj.at("sigma_y").get<double>();
      st.blur.theta = bj.at("theta").get<double>();
      st.resize_factor = sj.at("resize_factor").get<double>();
      st.resize_mode = resize_mode_from_name(sj.at("resize_mode").get<std::string>());
      st.noise_sigma = sj.at("noise_sigma").get<double>();
      st.signal_dependent = sj.at("signal_dependent").get<bool>();
      st.quality = sj.at("quality").get<double>();
      return st;
    };
    DegradationRecipe r;
    r.seed = j.at("seed").get<int64_t>();
    r.scale = j.at("scale").get<int64_t>();
    const auto& stages = j.at("stages");
    if (!stages.is_array() || stages.size() != 2)
      throw ArgumentError("recipe: expected exactly two stages");
    r.s1 = stage(stages[0]);
    r.s2 = stage(stages[1]);
    r.validate();
    return r;
  }
};

// Resolves every random draw of the degradation chain from (cfg, seed).
inline DegradationRecipe make_recipe(const DegradeSection& cfg, int64_t seed) {
  auto check_range = [](const char* what, double lo, double hi) {
    if (lo > hi) throw ArgumentError(std::string("degrade: ") + what + " range has min > max");
  };
  if (cfg.blur_sigma_min < 0 || cfg.blur2_sigma_min < 0)
    throw ArgumentError("degrade: blur sigma must be >= 0");
  if (cfg.resize_min <= 0 || cfg.resize2_min <= 0)
    throw ArgumentError("degrade: resize factor must be > 0");
  if (cfg.noise_sigma_min < 0 || cfg.noise2_sigma_min < 0)
    throw ArgumentError("degrade: noise sigma must be >= 0");
  if (cfg.quality_min < 1 || cfg.quality_max > 100 || cfg.quality2_min < 1 ||
      cfg.quality2_max > 100)
    throw ArgumentError("degrade: quality must be in [1,100]");
  if (cfg.aniso_prob < 0 || cfg.aniso_prob > 1 || cfg.signal_dependent_prob < 0 ||
      cfg.signal_dependent_prob > 1)
    throw ArgumentError("degrade: probabilities must be in [0,1]");
  if (cfg.scale < 1) throw ArgumentError("degrade: scale must be >= 1");
  check_range("blur sigma", cfg.blur_sigma_min, cfg.blur_sigma_max);
  check_range("second blur sigma", cfg.blur2_sigma_min, cfg.blur2_sigma_max);
  check_range("resize", cfg.resize_min, cfg.resize_max);
  check_range("second resize", cfg.resize2_min, cfg.resize2_max);
  check_range("noise sigma", cfg.noise_sigma_min, cfg.noise_sigma_max);
  check_range("second noise sigma", cfg.noise2_sigma_min, cfg.noise2_sigma_max);
  check_range("quality", cfg.quality_min, cfg.quality_max);
  check_range("second quality", cfg.quality2_min, cfg.quality2_max);

  auto sample_stage = [](Rng& rng, double smin, double smax, double aniso_prob,
                         double rmin, double rmax, double nmin, double nmax,
                         double sd_prob, double qmin, double qmax) {
    StageRecipe st;
    st.blur.aniso = rng.bernoulli(aniso_prob);
    st.blur.sigma_x = rng.uniform(smin, smax);
    if (st.blur.aniso) {
      st.blur.sigma_y = rng.uniform(smin, smax);
      st.blur.theta = rng.uniform(0.0, 3.14159265358979323846);
    } else {
      st.blur.sigma_y = st.blur.sigma_x;
      st.blur.theta = 0.0;
    }
    st.resize_factor = rng.uniform(rmin, rmax);
    st.resize_mode = rng.bernoulli(0.5) ? ResizeMode::Bilinear : ResizeMode::Bicubic;
    st.noise_sigma = rng.uniform(nmin, nmax);
    st.signal_dependent = rng.bernoulli(sd_prob);
    st.quality = rng.uniform(qmin, qmax);
    return st;
  };

  DegradationRecipe r;
  r.seed = seed;
  r.scale = cfg.scale;
  Rng rng = Rng::derive(static_cast<uint64_t>(seed), "degrade");
  r.s1 = sample_stage(rng, cfg.blur_sigma_min, cfg.blur_sigma_max, cfg.aniso_prob,
                      cfg.resize_min, cfg.resize_max, cfg.noise_sigma_min,
                      cfg.noise_sigma_max, cfg.signal_dependent_prob, cfg.quality_min,
                      cfg.quality_max);
  r.s2 = sample_stage(rng, cfg.blur2_sigma_min, cfg.blur2_sigma_max, cfg.aniso_prob,
                      cfg.resize2_min, cfg.resize2_max, cfg.noise2_sigma_min,
                      cfg.noise2_sigma_max, cfg.signal_dependent_prob, cfg.quality2_min,
                      cfg.quality2_max);
  r.validate();
  return r;
}

// A recipe whose chain degenerates to a single bicubic downscale.
inline DegradationRecipe identity_recipe(int64_t scale = 4) {
  DegradationRecipe r;
  r.scale = scale;
  return r;  // defaults: no blur, factor 1, no noise, quality 100
}

namespace detail {

// Normalized 2-D Gaussian, optionally anisotropic via rotated covariance.
inline Tensor<double> gaussian_kernel(const BlurSpec& b) {
  double smax = std::max(b.sigma_x, b.sigma_y);
  int64_t radius = std::min<int64_t>(10, static_cast<int64_t>(std::ceil(3.0 * smax)));
  int64_t k = 2 * radius + 1;
  Tensor<double> kern(Shape{k, k});
  // Inverse covariance of R diag(sx^2, sy^2) R^T.
  double c = std::cos(b.theta), s = std::sin(b.theta);
  double ix = 1.0 / (b.sigma_x * b.sigma_x);
  double iy = 1.0 / (b.sigma_y * b.sigma_y);
  double a00 = c * c * ix + s * s * iy;
  double a01 = c * s * (ix - iy);
  double a11 = s * s * ix + c * c * iy;
  double sum = 0.0;
  for (int64_t i = 0; i < k; ++i) {
    for (int64_t j = 0; j < k; ++j) {
      double dy = static_cast<double>(i - radius);
      double dx = static_cast<double>(j - radius);
      double q = a00 * dx * dx + 2.0 * a01 * dx * dy + a11 * dy * dy;
      double v = std::exp(-0.5 * q);
      kern.at(i, j) = v;
      sum += v;
    }
  }
  for (auto& v : kern.vec()) v = static_cast<double>(v / sum);
  return kern;
}

// Per-channel 2-D convolution with replicate padding; kernel sums to 1, so
// interior brightness is preserved.
inline Frame blur_frame(const Frame& f, const Tensor<double>& kern) {
  int64_t h = f.height(), w = f.width();
  int64_t k = kern.shape()[0], radius = k / 2;
  Frame out(h, w);
  for (int64_t ch = 0; ch < 3; ++ch) {
    for (int64_t i = 0; i < h; ++i) {
      for (int64_t j = 0; j < w; ++j) {
        double acc = 0.0;
        for (int64_t di = -radius; di <= radius; ++di) {
          int64_t si = std::clamp<int64_t>(i + di, 0, h - 1);
          for (int64_t dj = -radius; dj <= radius; ++dj) {
            int64_t sj = std::clamp<int64_t>(j + dj, 0, w - 1);
            acc += kern.at(di + radius, dj + radius) *
                   static_cast<double>(f.pixels.at(ch, si, sj));
          }
        }
        out.pixels.at(ch, i, j) = static_cast<float>(acc);
      }
    }
  }
  return out;
}

inline Frame resize_by_mode(const Frame& f, int64_t nh, int64_t nw, ResizeMode mode) {
  return mode == ResizeMode::Bilinear ? resize_bilinear(f, nh, nw)
                                      : resize_bicubic(f, nh, nw);
}

// Additive Gaussian noise drawn from the clip's shared stream so the field
// evolves across frames instead of repeating. Signal-dependent mode scales the
// deviation by sqrt(intensity), mimicking shot noise.
inline void add_noise(Frame& f, double sigma, bool signal_dependent, Rng& stream) {
  if (sigma <= 0) return;
  for (auto& px : f.pixels.vec()) {
    double n = stream.normal();
    double s = sigma;
    if (signal_dependent) s *= std::sqrt(std::clamp(static_cast<double>(px), 0.0, 1.0));
    px = static_cast<float>(px + s * n);
  }
  clamp_frame(f);
}

// Standard luminance quantization table used by the block-DCT surrogate.
inline const std::array<int, 64>& quant_base() {
  static const std::array<int, 64> base = {
      16, 11, 10, 16, 24,  40,  51,  61,   // row 0
      12, 12, 14, 19, 26,  58,  60,  55,   //
      14, 13, 16, 24, 40,  57,  69,  56,   //
      14, 17, 22, 29, 51,  87,  80,  62,   //
      18, 22, 37, 56, 68,  109, 103, 77,   //
      24, 35, 55, 64, 81,  104, 113, 92,   //
      49, 64, 78, 87, 103, 121, 120, 101,  //
      72, 92, 95, 98, 112, 100, 103, 99};
  return base;
}

// quality in [1,100) -> per-coefficient quantization steps (quality 100 is
// handled by the caller as an exact bypass).
inline std::array<double, 64> quant_table(double quality) {
  double q = std::clamp(quality, 1.0, 100.0);
  double scale = q < 50.0 ? 5000.0 / q : 200.0 - 2.0 * q;
  std::array<double, 64> t{};
  for (int i = 0; i < 64; ++i) {
    double v = std::floor((quant_base()[i] * scale + 50.0) / 100.0);
    t[i] = std::clamp(v, 1.0, 255.0);
  }
  return t;
}

// Orthonormal 8-point DCT-II basis.
inline const std::array<double, 64>& dct_basis() {
  static const std::array<double, 64> basis = [] {
    std::array<double, 64> b{};
    for (int u = 0; u < 8; ++u) {
      double a = u == 0 ? std::sqrt(1.0 / 8.0) : std::sqrt(2.0 / 8.0);
      for (int x = 0; x < 8; ++x)
        b[u * 8 + x] = a * std::cos((2 * x + 1) * u * 3.14159265358979323846 / 16.0);
    }
    return b;
  }();
  return basis;
}

// JPEG-style degradation without a codec: per 8x8 block, DCT-II -> divide by
// the scaled quantization table -> round -> reconstruct. Frames whose sides
// are not multiples of 8 are replicate-padded, then cropped back.
inline Frame compress_frame(const Frame& f, double quality) {
  int64_t h = f.height(), w = f.width();
  int64_t ph = (h + 7) / 8 * 8, pw = (w + 7) / 8 * 8;
  auto table = quant_table(quality);
  const auto& basis = dct_basis();
  Frame out(h, w);
  std::array<double, 64> block{}, coef{};
  for (int64_t ch = 0; ch < 3; ++ch) {
    for (int64_t bi = 0; bi < ph; bi += 8) {
      for (int64_t bj = 0; bj < pw; bj += 8) {
        for (int x = 0; x < 8; ++x) {
          int64_t si = std::min<int64_t>(bi + x, h - 1);
          for (int y = 0; y < 8; ++y) {
            int64_t sj = std::min<int64_t>(bj + y, w - 1);
            block[x * 8 + y] =
                static_cast<double>(f.pixels.at(ch, si, sj)) * 255.0 - 128.0;
          }
        }
        // coef = B * block * B^T, quantize, block = B^T * coef * B.
        std::array<double, 64> tmp{};
        for (int u = 0; u < 8; ++u)
          for (int y = 0; y < 8; ++y) {
            double acc = 0.0;
            for (int x = 0; x < 8; ++x) acc += basis[u * 8 + x] * block[x * 8 + y];
            tmp[u * 8 + y] = acc;
          }
        for (int u = 0; u < 8; ++u)
          for (int v = 0; v < 8; ++v) {
            double acc = 0.0;
            for (int y = 0; y < 8; ++y) acc += tmp[u * 8 + y] * basis[v * 8 + y];
            coef[u * 8 + v] = std::round(acc / table[u * 8 + v]) * table[u * 8 + v];
          }
        for (int x = 0; x < 8; ++x)
          for (int v = 0; v < 8; ++v) {
            double acc = 0.0;
            for (int u = 0; u < 8; ++u) acc += basis[u * 8 + x] * coef[u * 8 + v];
            tmp[x * 8 + v] = acc;
          }
        for (int x = 0; x < 8; ++x) {
          int64_t oi = bi + x;
          if (oi >= h) continue;
          for (int y = 0; y < 8; ++y) {
            int64_t oj = bj + y;
            if (oj >= w) continue;
            double acc = 0.0;
            for (int v = 0; v < 8; ++v) acc += tmp[x * 8 + v] * basis[v * 8 + y];
            out.pixels.at(ch, oi, oj) = static_cast<float>((acc + 128.0) / 255.0);
          }
        }
      }
    }
  }
  clamp_frame(out);
  return out;
}

inline Frame apply_stage(Frame f, const StageRecipe& st, Rng& noise_stream) {
  if (st.blur.sigma_x > 0 || st.blur.sigma_y > 0)
    f = blur_frame(f, gaussian_kernel(st.blur));
  if (st.resize_factor != 1.0) {
    int64_t nh = std::max<int64_t>(1, std::llround(f.height() * st.resize_factor));
    int64_t nw = std::max<int64_t>(1, std::llround(f.width() * st.resize_factor));
    f = resize_by_mode(f, nh, nw, st.resize_mode);
  }
  add_noise(f, st.noise_sigma, st.signal_dependent, noise_stream);
  if (st.quality < 100.0) f = compress_frame(f, st.quality);
  return f;
}

}  // namespace detail

// Runs the full chain on one clip. The blur kernels and noise deviations are
// fixed per clip by the recipe; the noise field itself evolves frame to frame
// through two per-clip streams, keeping degradation temporally consistent.
inline VideoClip apply_degradation(const VideoClip& clip, const DegradationRecipe& recipe) {
  recipe.validate();
  validate_clip(clip);
  int64_t h = clip.frames.front().height();
  int64_t w = clip.frames.front().width();
  if (h % recipe.scale != 0 || w % recipe.scale != 0)
    throw ShapeError("degrade: frame dims must be divisible by scale");
  Rng noise1 = Rng::derive(static_cast<uint64_t>(recipe.seed), "degrade.noise", 1);
  Rng noise2 = Rng::derive(static_cast<uint64_t>(recipe.seed), "degrade.noise", 2);
  VideoClip out;
  out.frames.reserve(clip.frames.size());
  for (const Frame& src : clip.frames) {
    Frame f = detail::apply_stage(src, recipe.s1, noise1);
    f = detail::apply_stage(std::move(f), recipe.s2, noise2);
    f = resize_bicubic(f, h / recipe.scale, w / recipe.scale);
    clamp_frame(f);
    out.frames.push_back(std::move(f));
  }
  return out;
}

inline ImageSample apply_degradation(const ImageSample& image,
                                     const DegradationRecipe& recipe) {
  VideoClip clip;
  clip.frames.push_back(image);
  return apply_degradation(clip, recipe).frames.front();
}

}  // namespace dove
