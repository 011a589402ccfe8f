#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "dove/autodiff.hpp"
#include "dove/common.hpp"
#include "dove/media.hpp"
#include "dove/params.hpp"

namespace dove {

// Per-frame deterministic convolutional autoencoder. Spatial compression is
// factor f (power of two) via stride-2 blocks; no sampling, so encode is a
// plain function and frame-wise processing of a clip is exact.
struct VaeConfig {
  int64_t latent_channels = 8;
  int64_t downsample_factor = 4;
  int64_t base_width = 16;
  int64_t max_width = 64;

  int64_t num_downs() const {
    int64_t f = downsample_factor, n = 0;
    while (f > 1 && f % 2 == 0) {
      f /= 2;
      ++n;
    }
    if (f != 1 || n < 1) throw ConfigError("model.vae_f", "downsample factor must be 2^k >= 2");
    return n;
  }

  int64_t width_at(int64_t level) const {
    int64_t w = base_width;
    for (int64_t i = 0; i < level; ++i) w = std::min(w * 2, max_width);
    return w;
  }

  void validate() const {
    if (latent_channels < 1) throw ConfigError("model.vae_c", "latent channels must be >= 1");
    if (base_width < 1) throw ConfigError("model.vae_base_width", "base width must be >= 1");
    (void)num_downs();
  }
};

template <typename T>
struct Vae {
  VaeConfig cfg;
  ParamSet<T> params;
};

template <typename T>
ParamSet<T> make_vae_params(const VaeConfig& cfg, uint64_t seed) {
  cfg.validate();
  ParamSet<T> p;
  auto conv = [&](const std::string& name, int64_t ci, int64_t co) {
    p.add(name + ".w", init::conv_weight<T>(co, ci, 3, seed, name + ".w"));
    p.add(name + ".b", Tensor<T>::zeros({co}));
  };
  const int64_t nd = cfg.num_downs();
  conv("vae.enc.in", 3, cfg.width_at(0));
  for (int64_t k = 0; k < nd; ++k) {
    conv("vae.enc.down" + std::to_string(k), cfg.width_at(k), cfg.width_at(k + 1));
    conv("vae.enc.ref" + std::to_string(k), cfg.width_at(k + 1), cfg.width_at(k + 1));
  }
  conv("vae.enc.out", cfg.width_at(nd), cfg.latent_channels);
  conv("vae.dec.in", cfg.latent_channels, cfg.width_at(nd));
  for (int64_t k = nd - 1; k >= 0; --k) {
    conv("vae.dec.ref" + std::to_string(k), cfg.width_at(k + 1), cfg.width_at(k + 1));
    conv("vae.dec.up" + std::to_string(k), cfg.width_at(k + 1), cfg.width_at(k));
  }
  conv("vae.dec.out", cfg.width_at(0), 3);
  return p;
}

template <typename T>
Vae<T> make_vae(const VaeConfig& cfg, uint64_t seed) {
  return Vae<T>{cfg, make_vae_params<T>(cfg, seed)};
}

// Graph builder: x is [3, H, W] with H, W divisible by f; returns latent
// [c, H/f, W/f].
template <typename T>
ad::Var<T> vae_encode(const VaeConfig& cfg, const BoundParams<T>& p, ad::Var<T> x) {
  const Shape& s = x.val().shape();
  if (s.size() != 3 || s[0] != 3)
    throw ShapeError("vae_encode: expected [3,H,W], got " + shape_str(s));
  const int64_t f = cfg.downsample_factor;
  if (s[1] % f != 0 || s[2] % f != 0)
    throw ShapeError("vae_encode: frame dims " + shape_str(s) + " not divisible by factor " +
                     std::to_string(f));
  auto conv = [&](ad::Var<T> h, const std::string& name, int64_t stride) {
    return ad::conv2d(h, p[name + ".w"], p[name + ".b"], stride, 1);
  };
  ad::Var<T> h = ad::silu(conv(x, "vae.enc.in", 1));
  for (int64_t k = 0; k < cfg.num_downs(); ++k) {
    h = ad::silu(conv(h, "vae.enc.down" + std::to_string(k), 2));
    h = ad::silu(conv(h, "vae.enc.ref" + std::to_string(k), 1));
  }
  return conv(h, "vae.enc.out", 1);
}

// Graph builder: latent [c, h, w] -> frame [3, h*f, w*f] in (0,1) via a
// sigmoid output stage, so the pixel-range contract holds by construction.
template <typename T>
ad::Var<T> vae_decode(const VaeConfig& cfg, const BoundParams<T>& p, ad::Var<T> z) {
  const Shape& s = z.val().shape();
  if (s.size() != 3 || s[0] != cfg.latent_channels)
    throw ShapeError("vae_decode: expected [" + std::to_string(cfg.latent_channels) +
                     ",h,w], got " + shape_str(s));
  auto conv = [&](ad::Var<T> h, const std::string& name) {
    return ad::conv2d(h, p[name + ".w"], p[name + ".b"], 1, 1);
  };
  ad::Var<T> h = ad::silu(conv(z, "vae.dec.in"));
  for (int64_t k = cfg.num_downs() - 1; k >= 0; --k) {
    h = ad::silu(conv(h, "vae.dec.ref" + std::to_string(k)));
    h = ad::upsample_nearest2(h);
    h = ad::silu(conv(h, "vae.dec.up" + std::to_string(k)));
  }
  return ad::sigmoid(conv(h, "vae.dec.out"));
}

// Inference conveniences over plain tensors (scratch tape, no gradients).
template <typename T>
Tensor<T> encode_frame(const Vae<T>& vae, const Tensor<T>& x) {
  ad::Tape<T> tape;
  BoundParams<T> p(tape, vae.params, false);
  return vae_encode(vae.cfg, p, tape.constant(x)).val();
}

template <typename T>
Tensor<T> decode_frame(const Vae<T>& vae, const Tensor<T>& z) {
  ad::Tape<T> tape;
  BoundParams<T> p(tape, vae.params, false);
  return vae_decode(vae.cfg, p, tape.constant(z)).val();
}

// Frame-wise encode of a whole clip: [n, c, h/f, w/f].
template <typename T>
Tensor<T> encode_clip(const Vae<T>& vae, const std::vector<Tensor<T>>& frames) {
  if (frames.empty()) throw ArgumentError("encode_clip: empty clip");
  std::vector<Tensor<T>> latents;
  latents.reserve(frames.size());
  for (const auto& f : frames) latents.push_back(encode_frame(vae, f));
  const Shape& ls = latents[0].shape();
  Tensor<T> out({static_cast<int64_t>(frames.size()), ls[0], ls[1], ls[2]});
  int64_t per = latents[0].numel();
  for (size_t i = 0; i < latents.size(); ++i)
    std::copy(latents[i].data(), latents[i].data() + per, out.data() + i * per);
  return out;
}

}  // namespace dove
