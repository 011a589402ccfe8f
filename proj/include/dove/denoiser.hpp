#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "dove/autodiff.hpp"
#include "dove/common.hpp"
#include "dove/params.hpp"
#include "dove/schedule.hpp"

namespace dove {

// Factorized spatial/temporal transformer over patchified latents,
// predicting v for the one-step denoise. Conditioning is a learned null
// vector (empty-prompt stand-in) plus a learned timestep embedding row.
struct DenoiserConfig {
  int64_t width = 128;
  int64_t blocks = 2;
  int64_t heads = 4;
  int64_t patch = 2;
  int64_t mlp_ratio = 4;
  int64_t latent_channels = 8;
  int64_t timesteps = 1000;  // embedding table rows; must cover the schedule
  int64_t max_tokens = 8192;
  bool temporal_attention = true;  // ablation switch, not an architecture key

  void validate() const {
    if (width < 2 || heads < 1 || width % heads != 0)
      throw ConfigError("model.width", "width must be positive and divisible by heads");
    if (blocks < 1) throw ConfigError("model.blocks", "need at least one block");
    if (patch < 1) throw ConfigError("model.patch", "patch must be >= 1");
    if (mlp_ratio < 1) throw ConfigError("model.mlp_ratio", "mlp ratio must be >= 1");
    if (latent_channels < 1) throw ConfigError("model.vae_c", "latent channels must be >= 1");
    if (timesteps < 1) throw ConfigError("diffusion.T", "timestep table needs >= 1 row");
    if (max_tokens < 1) throw ConfigError("model.max_tokens", "token budget must be >= 1");
  }

  int64_t token_dim() const { return latent_channels * patch * patch; }
};

namespace detail {

// Precomputed index maps and positional tables for one latent shape.
template <typename T>
struct TokenPlan {
  int64_t frames = 0, tokens_per_frame = 0;
  std::shared_ptr<const std::vector<int64_t>> patchify;
  std::shared_ptr<const std::vector<int64_t>> unpatchify;
  std::shared_ptr<const std::vector<int64_t>> to_position_major;
  std::shared_ptr<const std::vector<int64_t>> to_frame_major;
  Tensor<T> spatial_pos;   // [n*s, width], same per frame
  Tensor<T> temporal_pos;  // [s*n, width] in position-major order
};

inline void fill_sinusoidal(double* dst, int64_t pos, int64_t dim) {
  for (int64_t i = 0; 2 * i < dim; ++i) {
    double freq = std::exp(-std::log(10000.0) * double(2 * i) / double(dim));
    dst[2 * i] = std::sin(double(pos) * freq);
    if (2 * i + 1 < dim) dst[2 * i + 1] = std::cos(double(pos) * freq);
  }
}

template <typename T>
std::shared_ptr<const TokenPlan<T>> build_token_plan(const DenoiserConfig& cfg, int64_t n,
                                                     int64_t c, int64_t h, int64_t w) {
  auto plan = std::make_shared<TokenPlan<T>>();
  const int64_t p = cfg.patch, th = h / p, tw = w / p, s = th * tw, big = n * s;
  const int64_t cpp = cfg.token_dim(), width = cfg.width;
  plan->frames = n;
  plan->tokens_per_frame = s;

  auto patch_idx = std::make_shared<std::vector<int64_t>>(big * cpp);
  auto unpatch_idx = std::make_shared<std::vector<int64_t>>(n * c * h * w);
  for (int64_t f = 0; f < n; ++f)
    for (int64_t ty = 0; ty < th; ++ty)
      for (int64_t tx = 0; tx < tw; ++tx) {
        const int64_t row = f * s + ty * tw + tx;
        for (int64_t ch = 0; ch < c; ++ch)
          for (int64_t py = 0; py < p; ++py)
            for (int64_t px = 0; px < p; ++px) {
              const int64_t src = ((f * c + ch) * h + ty * p + py) * w + tx * p + px;
              const int64_t dst = row * cpp + (ch * p + py) * p + px;
              (*patch_idx)[dst] = src;
              (*unpatch_idx)[src] = dst;
            }
      }
  plan->patchify = patch_idx;
  plan->unpatchify = unpatch_idx;

  auto to_pos = std::make_shared<std::vector<int64_t>>(big * width);
  auto to_frame = std::make_shared<std::vector<int64_t>>(big * width);
  for (int64_t q = 0; q < s; ++q)
    for (int64_t f = 0; f < n; ++f) {
      const int64_t pos_row = q * n + f, frame_row = f * s + q;
      for (int64_t j = 0; j < width; ++j) {
        (*to_pos)[pos_row * width + j] = frame_row * width + j;
        (*to_frame)[frame_row * width + j] = pos_row * width + j;
      }
    }
  plan->to_position_major = to_pos;
  plan->to_frame_major = to_frame;

  std::vector<double> buf(width);
  plan->spatial_pos = Tensor<T>({big, width});
  for (int64_t ty = 0; ty < th; ++ty)
    for (int64_t tx = 0; tx < tw; ++tx) {
      const int64_t half = width / 2;
      fill_sinusoidal(buf.data(), ty, half);
      fill_sinusoidal(buf.data() + half, tx, width - half);
      for (int64_t f = 0; f < n; ++f) {
        T* dst = plan->spatial_pos.data() + ((f * s) + ty * tw + tx) * width;
        for (int64_t j = 0; j < width; ++j) dst[j] = static_cast<T>(buf[j]);
      }
    }

  plan->temporal_pos = Tensor<T>({big, width});
  for (int64_t f = 0; f < n; ++f) {
    fill_sinusoidal(buf.data(), f, width);
    for (int64_t q = 0; q < s; ++q) {
      T* dst = plan->temporal_pos.data() + (q * n + f) * width;
      for (int64_t j = 0; j < width; ++j) dst[j] = static_cast<T>(buf[j]);
    }
  }
  return plan;
}

}  // namespace detail

template <typename T>
struct Denoiser {
  DenoiserConfig cfg;
  ParamSet<T> params;
  // Keyed by "n:h:w"; plans are immutable once built.
  mutable std::unordered_map<std::string, std::shared_ptr<const detail::TokenPlan<T>>> plans;
};

template <typename T>
ParamSet<T> make_denoiser_params(const DenoiserConfig& cfg, uint64_t seed) {
  cfg.validate();
  ParamSet<T> p;
  const int64_t w = cfg.width, cpp = cfg.token_dim(), mlp = cfg.width * cfg.mlp_ratio;
  auto lin = [&](const std::string& name, int64_t din, int64_t dout) {
    p.add(name + ".w", init::linear_weight<T>(din, dout, seed, name + ".w"));
    p.add(name + ".b", Tensor<T>::zeros({1, dout}));
  };
  auto ln = [&](const std::string& name) {
    p.add(name + ".g", Tensor<T>::full({1, w}, T(1)));
    p.add(name + ".b", Tensor<T>::zeros({1, w}));
  };
  p.add("den.null_cond", init::embedding<T>(1, w, seed, "den.null_cond"));
  p.add("den.temb.table", init::embedding<T>(cfg.timesteps, w, seed, "den.temb.table"));
  lin("den.in", cpp, w);
  for (int64_t i = 0; i < cfg.blocks; ++i) {
    const std::string b = "den.blk" + std::to_string(i);
    ln(b + ".ln1");
    lin(b + ".attn.qkv", w, 3 * w);
    lin(b + ".attn.proj", w, w);
    ln(b + ".ln2");
    lin(b + ".tattn.qkv", w, 3 * w);
    lin(b + ".tattn.proj", w, w);
    ln(b + ".ln3");
    lin(b + ".mlp.fc1", w, mlp);
    lin(b + ".mlp.fc2", mlp, w);
  }
  ln("den.ln_f");
  lin("den.head", w, cpp);
  return p;
}

template <typename T>
Denoiser<T> make_denoiser(const DenoiserConfig& cfg, uint64_t seed) {
  return Denoiser<T>{cfg, make_denoiser_params<T>(cfg, seed), {}};
}

// Graph builder. z is a latent clip [n, c, h, w]; returns the v-prediction
// with the same shape.
template <typename T>
ad::Var<T> denoiser_forward(const Denoiser<T>& den, const BoundParams<T>& p, ad::Var<T> z,
                            Timestep t) {
  const DenoiserConfig& cfg = den.cfg;
  ad::Tape<T>& tape = *z.tape;
  const Shape& s = z.val().shape();
  if (s.size() != 4) throw ShapeError("denoiser: latent clip must be [n,c,h,w]");
  const int64_t n = s[0], c = s[1], h = s[2], w = s[3];
  if (c != cfg.latent_channels)
    throw ShapeError("denoiser: expected " + std::to_string(cfg.latent_channels) +
                     " latent channels, got " + std::to_string(c));
  if (h % cfg.patch != 0 || w % cfg.patch != 0)
    throw ShapeError("denoiser: latent dims " + shape_str(s) + " not divisible by patch " +
                     std::to_string(cfg.patch));
  if (t.t > cfg.timesteps)
    throw IndexError("denoiser: timestep " + std::to_string(t.t) +
                     " beyond embedding table of " + std::to_string(cfg.timesteps));
  const int64_t tokens = n * (h / cfg.patch) * (w / cfg.patch);
  if (tokens > cfg.max_tokens)
    throw CapacityError("denoiser: clip needs " + std::to_string(tokens) +
                        " tokens, budget is " + std::to_string(cfg.max_tokens));

  const std::string key =
      std::to_string(n) + ":" + std::to_string(h) + ":" + std::to_string(w);
  auto it = den.plans.find(key);
  if (it == den.plans.end())
    it = den.plans.emplace(key, detail::build_token_plan<T>(cfg, n, c, h, w)).first;
  const auto& plan = *it->second;
  const int64_t sf = plan.tokens_per_frame;

  auto lin = [&](ad::Var<T> x, const std::string& name) {
    return ad::linear(x, p[name + ".w"], p[name + ".b"]);
  };
  auto norm = [&](ad::Var<T> x, const std::string& name) {
    return ad::layer_norm(x, p[name + ".g"], p[name + ".b"]);
  };
  auto attn = [&](ad::Var<T> x, const std::string& name, int64_t group) {
    ad::Var<T> qkv = lin(x, name + ".qkv");
    ad::Var<T> q = ad::slice_cols(qkv, 0, cfg.width);
    ad::Var<T> k = ad::slice_cols(qkv, cfg.width, cfg.width);
    ad::Var<T> v = ad::slice_cols(qkv, 2 * cfg.width, cfg.width);
    return lin(ad::grouped_attention(q, k, v, group, cfg.heads), name + ".proj");
  };

  ad::Var<T> x = ad::gather_elems(z, plan.patchify, {tokens, cfg.token_dim()});
  x = lin(x, "den.in");
  x = ad::add_row_vector(x, p["den.null_cond"]);
  x = ad::add_row_vector(x, ad::gather_row(p["den.temb.table"], t.t - 1));
  x = ad::add(x, tape.constant(plan.spatial_pos));

  for (int64_t i = 0; i < cfg.blocks; ++i) {
    const std::string b = "den.blk" + std::to_string(i);
    x = ad::add(x, attn(norm(x, b + ".ln1"), b + ".attn", sf));
    if (cfg.temporal_attention && n > 1) {
      ad::Var<T> xp = ad::gather_elems(x, plan.to_position_major, {tokens, cfg.width});
      xp = ad::add(xp, tape.constant(plan.temporal_pos));
      ad::Var<T> o = attn(norm(xp, b + ".ln2"), b + ".tattn", n);
      x = ad::add(x, ad::gather_elems(o, plan.to_frame_major, {tokens, cfg.width}));
    }
    ad::Var<T> m = lin(ad::gelu(lin(norm(x, b + ".ln3"), b + ".mlp.fc1")), b + ".mlp.fc2");
    x = ad::add(x, m);
  }
  x = norm(x, "den.ln_f");
  x = lin(x, "den.head");
  return ad::gather_elems(x, plan.unpatchify, {n, c, h, w});
}

// Inference convenience over plain tensors.
template <typename T>
Tensor<T> denoiser_forward(const Denoiser<T>& den, const Tensor<T>& z, Timestep t) {
  ad::Tape<T> tape;
  BoundParams<T> p(tape, den.params, false);
  return denoiser_forward(den, p, tape.constant(z), t).val();
}

}  // namespace dove
