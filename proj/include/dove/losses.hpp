#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "dove/autodiff.hpp"
#include "dove/common.hpp"
#include "dove/media.hpp"
#include "dove/params.hpp"

namespace dove {

struct LossWeights {
  double lambda1 = 1.0;  // perceptual scaler
  double lambda2 = 1.0;  // frame-difference scaler

  void validate() const {
    if (lambda1 < 0) throw ConfigError("loss.lambda1", "must be >= 0");
    if (lambda2 < 0) throw ConfigError("loss.lambda2", "must be >= 0");
  }
};

// Frozen random multi-scale conv pyramid standing in for a pretrained
// perceptual backbone. Stage 0 is the raw image; each further stage is a
// stride-2 5x5 convolution with ReLU.
template <typename T>
struct PerceptualExtractor {
  uint64_t seed = 0;
  int64_t scales = 3;
  std::vector<int64_t> channels;  // per conv stage
  ParamSet<T> params;
};

template <typename T>
PerceptualExtractor<T> make_extractor(uint64_t seed, int64_t scales = 3,
                                      int64_t base_channels = 8) {
  if (scales < 1) throw ArgumentError("extractor: need at least one scale");
  PerceptualExtractor<T> ext;
  ext.seed = seed;
  ext.scales = scales;
  int64_t ci = 3;
  for (int64_t s = 0; s < scales; ++s) {
    int64_t co = base_channels << s;
    std::string name = "ext.stage" + std::to_string(s) + ".w";
    ext.params.add(name, init::conv_weight<T>(co, ci, 5, Rng::mix(seed, 0x1d15), name));
    ext.channels.push_back(co);
    ci = co;
  }
  return ext;
}

namespace detail {

template <typename T>
ad::Var<T> clamp01(ad::Var<T> v) {
  // 1 - relu(1 - relu(v)) pins v into [0,1] with identity inside.
  auto one_minus = [](ad::Var<T> x) { return ad::scalar_add(ad::scalar_mul(x, T(-1)), T(1)); };
  return one_minus(ad::relu(one_minus(ad::relu(v))));
}

// Per-(stage, channel) texture/structure similarity accumulated over the
// pyramid; returns the scalar distance node.
template <typename T>
ad::Var<T> dists_graph(ad::Tape<T>& tape, const PerceptualExtractor<T>& ext, ad::Var<T> x,
                       ad::Var<T> y) {
  if (!x.val().same_shape(y.val()))
    throw ArgumentError("dists_like: shape mismatch " + shape_str(x.val().shape()) + " vs " +
                        shape_str(y.val().shape()));
  if (x.val().rank() != 3 || x.val().shape()[0] != 3)
    throw ArgumentError("dists_like: expected [3,H,W] inputs");
  constexpr T c1 = T(1e-6), c2 = T(1e-6);

  ad::Var<T> total;
  int64_t total_channels = 0;
  ad::Var<T> fx = x, fy = y;
  for (int64_t s = 0; s <= ext.scales; ++s) {
    if (s > 0) {
      ad::Var<T> w = tape.constant(ext.params.at("ext.stage" + std::to_string(s - 1) + ".w"));
      ad::Var<T> b = tape.constant(Tensor<T>::zeros({ext.channels[s - 1]}));
      fx = ad::relu(ad::conv2d(fx, w, b, 2, 2));
      fy = ad::relu(ad::conv2d(fy, w, b, 2, 2));
    }
    ad::Var<T> mx = ad::mean_hw(fx);
    ad::Var<T> my = ad::mean_hw(fy);
    ad::Var<T> mxx = ad::mean_hw(ad::square(fx));
    ad::Var<T> myy = ad::mean_hw(ad::square(fy));
    ad::Var<T> mxy = ad::mean_hw(ad::mul(fx, fy));
    ad::Var<T> vx = ad::sub(mxx, ad::square(mx));
    ad::Var<T> vy = ad::sub(myy, ad::square(my));
    ad::Var<T> cxy = ad::sub(mxy, ad::mul(mx, my));

    ad::Var<T> texture = ad::divide(
        ad::scalar_add(ad::scalar_mul(ad::mul(mx, my), T(2)), c1),
        ad::scalar_add(ad::add(ad::square(mx), ad::square(my)), c1));
    ad::Var<T> structure = ad::divide(ad::scalar_add(ad::scalar_mul(cxy, T(2)), c2),
                                      ad::scalar_add(ad::add(vx, vy), c2));
    ad::Var<T> sim = ad::scalar_mul(ad::add(texture, structure), T(0.5));
    const int64_t c = sim.val().numel();
    ad::Var<T> stage_sum = ad::scalar_mul(ad::mean_all(sim), static_cast<T>(c));
    total = total.valid() ? ad::add(total, stage_sum) : stage_sum;
    total_channels += c;
  }
  ad::Var<T> mean_sim = ad::scalar_mul(total, T(1) / static_cast<T>(total_channels));
  return clamp01(ad::scalar_add(ad::scalar_mul(mean_sim, T(-1)), T(1)));
}

}  // namespace detail

// ---- graph-mode losses (sr side differentiable) ----

template <typename T>
ad::Var<T> dists_like(ad::Tape<T>& tape, const PerceptualExtractor<T>& ext, ad::Var<T> x,
                      ad::Var<T> y) {
  return detail::dists_graph(tape, ext, x, y);
}

template <typename T>
ad::Var<T> stage1_loss(ad::Var<T> z_sr, ad::Var<T> z_hr) {
  if (!z_sr.val().same_shape(z_hr.val()))
    throw ArgumentError("stage1_loss: shape mismatch " + shape_str(z_sr.val().shape()) + " vs " +
                        shape_str(z_hr.val().shape()));
  return ad::mse(z_sr, z_hr);
}

template <typename T>
struct Stage2ImageTerms {
  ad::Var<T> pixel;       // MSE
  ad::Var<T> perceptual;  // invalid when lambda1 == 0
  ad::Var<T> total;
};

template <typename T>
Stage2ImageTerms<T> stage2_image_terms(ad::Tape<T>& tape, const PerceptualExtractor<T>& ext,
                                       ad::Var<T> sr, ad::Var<T> hr, const LossWeights& w) {
  w.validate();
  Stage2ImageTerms<T> out;
  out.pixel = ad::mse(sr, hr);
  out.total = out.pixel;
  if (w.lambda1 > 0) {
    out.perceptual = dists_like(tape, ext, sr, hr);
    out.total = ad::add(out.total, ad::scalar_mul(out.perceptual, static_cast<T>(w.lambda1)));
  }
  return out;
}

template <typename T>
ad::Var<T> stage2_image_loss(ad::Tape<T>& tape, const PerceptualExtractor<T>& ext,
                             ad::Var<T> sr, ad::Var<T> hr, const LossWeights& w) {
  return stage2_image_terms(tape, ext, sr, hr, w).total;
}

// Mean absolute difference between consecutive-frame deltas of the two clips.
template <typename T>
ad::Var<T> frame_diff_loss(const std::vector<ad::Var<T>>& sr,
                           const std::vector<ad::Var<T>>& hr) {
  if (sr.size() != hr.size()) throw ArgumentError("frame_diff_loss: clip lengths differ");
  const int64_t n = static_cast<int64_t>(sr.size());
  if (n < 2) throw ArgumentError("frame_diff_loss: need at least 2 frames");
  ad::Var<T> total;
  for (int64_t t = 1; t < n; ++t) {
    ad::Var<T> d_sr = ad::sub(sr[t], sr[t - 1]);
    ad::Var<T> d_hr = ad::sub(hr[t], hr[t - 1]);
    ad::Var<T> term = ad::mean_all(ad::abs_val(ad::sub(d_sr, d_hr)));
    total = total.valid() ? ad::add(total, term) : term;
  }
  return ad::scalar_mul(total, T(1) / static_cast<T>(n - 1));
}

template <typename T>
struct Stage2VideoTerms {
  ad::Var<T> pixel;       // clip MSE
  ad::Var<T> perceptual;  // frame-averaged; invalid when lambda1 == 0
  ad::Var<T> frame_diff;  // invalid when lambda2 == 0
  ad::Var<T> total;
};

template <typename T>
Stage2VideoTerms<T> stage2_video_terms(ad::Tape<T>& tape, const PerceptualExtractor<T>& ext,
                                       const std::vector<ad::Var<T>>& sr,
                                       const std::vector<ad::Var<T>>& hr,
                                       const LossWeights& w) {
  w.validate();
  if (sr.size() != hr.size()) throw ArgumentError("stage2_video_loss: clip lengths differ");
  const int64_t n = static_cast<int64_t>(sr.size());
  if (n < 2) throw ArgumentError("stage2_video_loss: need at least 2 frames");

  Stage2VideoTerms<T> out;
  ad::Var<T> pixel, perceptual;
  for (int64_t t = 0; t < n; ++t) {
    ad::Var<T> m = ad::mse(sr[t], hr[t]);
    pixel = pixel.valid() ? ad::add(pixel, m) : m;
    if (w.lambda1 > 0) {
      ad::Var<T> d = dists_like(tape, ext, sr[t], hr[t]);
      perceptual = perceptual.valid() ? ad::add(perceptual, d) : d;
    }
  }
  out.pixel = ad::scalar_mul(pixel, T(1) / static_cast<T>(n));
  out.total = out.pixel;
  if (w.lambda1 > 0) {
    out.perceptual = ad::scalar_mul(perceptual, T(1) / static_cast<T>(n));
    out.total = ad::add(out.total, ad::scalar_mul(out.perceptual, static_cast<T>(w.lambda1)));
  }
  if (w.lambda2 > 0) {
    out.frame_diff = frame_diff_loss(sr, hr);
    out.total = ad::add(out.total, ad::scalar_mul(out.frame_diff, static_cast<T>(w.lambda2)));
  }
  return out;
}

template <typename T>
ad::Var<T> stage2_video_loss(ad::Tape<T>& tape, const PerceptualExtractor<T>& ext,
                             const std::vector<ad::Var<T>>& sr,
                             const std::vector<ad::Var<T>>& hr, const LossWeights& w) {
  return stage2_video_terms(tape, ext, sr, hr, w).total;
}

// ---- plain-tensor conveniences ----

template <typename T>
double mse(const Tensor<T>& a, const Tensor<T>& b) {
  if (!a.same_shape(b))
    throw ArgumentError("mse: shape mismatch " + shape_str(a.shape()) + " vs " +
                        shape_str(b.shape()));
  double acc = 0;
  for (int64_t i = 0; i < a.numel(); ++i) {
    double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    acc += d * d;
  }
  return acc / static_cast<double>(a.numel());
}

template <typename T>
double dists_like(const PerceptualExtractor<T>& ext, const Tensor<T>& x, const Tensor<T>& y) {
  ad::Tape<T> tape;
  return static_cast<double>(
      detail::dists_graph(tape, ext, tape.constant(x), tape.constant(y)).val()[0]);
}

inline double frame_diff_loss(const VideoClip& sr, const VideoClip& hr) {
  if (sr.frame_count() != hr.frame_count())
    throw ArgumentError("frame_diff_loss: clip lengths differ");
  if (sr.frame_count() < 2) throw ArgumentError("frame_diff_loss: need at least 2 frames");
  ad::Tape<float> tape;
  std::vector<ad::Var<float>> a, b;
  for (const auto& f : sr.frames) a.push_back(tape.constant(f.pixels));
  for (const auto& f : hr.frames) b.push_back(tape.constant(f.pixels));
  return static_cast<double>(frame_diff_loss(a, b).val()[0]);
}

}  // namespace dove
