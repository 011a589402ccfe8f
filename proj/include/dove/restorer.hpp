#pragma once

#include <cmath>
#include <vector>

#include "dove/autodiff.hpp"
#include "dove/common.hpp"
#include "dove/denoiser.hpp"
#include "dove/media.hpp"
#include "dove/params.hpp"
#include "dove/schedule.hpp"
#include "dove/vae.hpp"

namespace dove {

struct RestoreStats {
  int64_t encodes = 0;
  int64_t decodes = 0;
  int64_t denoises = 0;
};

// The full one-step pipeline: bilinear upscale, frame-wise encode, a single
// v-prediction denoise over the whole latent clip, frame-wise decode.
template <typename T>
struct Restorer {
  Vae<T> vae;
  Denoiser<T> den;
  NoiseSchedule schedule;
  int t_star = 399;
  int64_t scale = 4;
  int64_t chunk_frames = 16;  // temporal chunk when a clip exceeds the token budget

  void validate() const {
    if (scale < 1) throw ArgumentError("restorer: scale must be >= 1");
    if (chunk_frames < 1) throw ArgumentError("restorer: chunk_frames must be >= 1");
    (void)Timestep{t_star};
    if (t_star > schedule.total_steps)
      throw ArgumentError("restorer: t_star beyond schedule length");
  }
};

// Differentiable core over one chunk of already-upscaled frames. The encode
// side runs on constants (the input does not depend on trainable parameters);
// gradients flow through decode and the denoiser.
template <typename T>
struct RestoreGraph {
  ad::Var<T> z_lr;                 // [n, c, h, w]
  ad::Var<T> z_sr;                 // [n, c, h, w]
  std::vector<ad::Var<T>> frames;  // decoded [3, H, W], one per input frame
};

template <typename T>
RestoreGraph<T> restore_graph(ad::Tape<T>& tape, const VaeConfig& vcfg,
                              const BoundParams<T>& vae_p, const Denoiser<T>& den,
                              const BoundParams<T>& den_p, const NoiseSchedule& schedule,
                              Timestep t_star, const std::vector<Tensor<T>>& upscaled,
                              RestoreStats* stats = nullptr) {
  if (upscaled.empty()) throw ArgumentError("restore: empty clip");
  const int64_t n = static_cast<int64_t>(upscaled.size());

  std::vector<ad::Var<T>> latents;
  latents.reserve(n);
  for (const auto& f : upscaled) {
    latents.push_back(vae_encode(vcfg, vae_p, tape.constant(f)));
    if (stats) ++stats->encodes;
  }
  const Shape& ls = latents[0].val().shape();
  const int64_t c = ls[0], lh = ls[1], lw = ls[2];
  ad::Var<T> z_lr = ad::concat_flat(latents, {n, c, lh, lw});

  ad::Var<T> v = denoiser_forward(den, den_p, z_lr, t_star);
  if (stats) ++stats->denoises;
  const double abar = alpha_bar(schedule, t_star);
  ad::Var<T> z_sr = ad::sub(ad::scalar_mul(z_lr, static_cast<T>(std::sqrt(abar))),
                            ad::scalar_mul(v, static_cast<T>(std::sqrt(1.0 - abar))));

  RestoreGraph<T> g{z_lr, z_sr, {}};
  ad::Var<T> flat = ad::reshape(z_sr, {n, c * lh * lw});
  for (int64_t i = 0; i < n; ++i) {
    ad::Var<T> zi = ad::reshape(ad::slice_rows(flat, i, 1), {c, lh, lw});
    g.frames.push_back(vae_decode(vcfg, vae_p, zi));
    if (stats) ++stats->decodes;
  }
  return g;
}

namespace detail {

template <typename T>
std::vector<Frame> restore_chunk(const Restorer<T>& r, const std::vector<const Frame*>& lr,
                                 RestoreStats* stats) {
  std::vector<Tensor<T>> upscaled;
  upscaled.reserve(lr.size());
  for (const Frame* f : lr) {
    Frame up = resize_bilinear(*f, f->height() * r.scale, f->width() * r.scale);
    if constexpr (std::is_same_v<T, float>)
      upscaled.push_back(up.pixels);
    else
      upscaled.push_back(up.pixels.template cast<T>());
  }
  const int64_t f = r.vae.cfg.downsample_factor;
  if (upscaled[0].shape()[1] % f != 0 || upscaled[0].shape()[2] % f != 0)
    throw ShapeError("restore: upscaled frame dims " + shape_str(upscaled[0].shape()) +
                     " not divisible by VAE factor " + std::to_string(f));

  ad::Tape<T> tape;
  BoundParams<T> vp(tape, r.vae.params, false);
  BoundParams<T> dp(tape, r.den.params, false);
  RestoreGraph<T> g = restore_graph(tape, r.vae.cfg, vp, r.den, dp, r.schedule,
                                    Timestep{r.t_star}, upscaled, stats);
  std::vector<Frame> out;
  out.reserve(g.frames.size());
  for (auto& fv : g.frames) {
    Frame frame;
    if constexpr (std::is_same_v<T, float>)
      frame.pixels = fv.val();
    else
      frame.pixels = fv.val().template cast<float>();
    clamp_frame(frame);
    out.push_back(std::move(frame));
  }
  return out;
}

}  // namespace detail

template <typename T>
VideoClip restore(const Restorer<T>& r, const VideoClip& lr, RestoreStats* stats = nullptr) {
  r.validate();
  validate_clip(lr);
  const int64_t n = lr.frame_count();
  const int64_t lh = lr.height() * r.scale / r.vae.cfg.downsample_factor / r.den.cfg.patch;
  const int64_t lw = lr.width() * r.scale / r.vae.cfg.downsample_factor / r.den.cfg.patch;
  const int64_t tokens_per_frame = lh * lw;

  // Whole clip in one pass when it fits the token budget; otherwise fixed
  // non-overlapping temporal chunks.
  int64_t chunk = n;
  if (n * tokens_per_frame > r.den.cfg.max_tokens) chunk = r.chunk_frames;

  VideoClip out;
  out.fps = lr.fps;
  for (int64_t start = 0; start < n; start += chunk) {
    std::vector<const Frame*> part;
    for (int64_t i = start; i < std::min(n, start + chunk); ++i) part.push_back(&lr.frames[i]);
    std::vector<Frame> restored = detail::restore_chunk(r, part, stats);
    for (auto& f : restored) out.frames.push_back(std::move(f));
  }
  return out;
}

template <typename T>
ImageSample restore_image(const Restorer<T>& r, const ImageSample& img,
                          RestoreStats* stats = nullptr) {
  VideoClip clip;
  clip.frames.push_back(img);
  return restore(r, clip, stats).frames[0];
}

}  // namespace dove
