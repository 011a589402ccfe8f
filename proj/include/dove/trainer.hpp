#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "dove/autodiff.hpp"
#include "dove/checkpoint.hpp"
#include "dove/config.hpp"
#include "dove/denoiser.hpp"
#include "dove/losses.hpp"
#include "dove/media.hpp"
#include "dove/optimizer.hpp"
#include "dove/restorer.hpp"
#include "dove/schedule.hpp"
#include "dove/vae.hpp"

namespace dove {

enum class Branch { Image, Video };

inline const char* branch_name(Branch b) { return b == Branch::Image ? "image" : "video"; }

// Picks the stage-2 branch for a step; pure in (seed, step, phi).
inline Branch sample_branch(int64_t seed, int64_t step, double phi) {
  if (!(phi >= 0.0 && phi <= 1.0)) throw ArgumentError("sample_branch: phi must be in [0,1]");
  Rng r = Rng::derive(static_cast<uint64_t>(seed), "branch", static_cast<uint64_t>(step));
  return r.bernoulli(phi) ? Branch::Image : Branch::Video;
}

struct TrainSample {
  VideoClip lr;
  VideoClip hr;
};
using Dataset = std::vector<TrainSample>;

struct StepRecord {
  int64_t step = 0;
  std::string branch;
  double loss = 0;
  std::vector<std::pair<std::string, double>> terms;
  RestoreStats stats;
  double grad_norm = 0;
};

namespace detail {

inline int64_t pair_scale(const Frame& lr, const Frame& hr) {
  if (lr.height() < 1 || lr.width() < 1) throw DataError("train: empty frame");
  if (hr.height() % lr.height() != 0 || hr.width() % lr.width() != 0)
    throw DataError("train: HR dims not an integer multiple of LR dims");
  int64_t sh = hr.height() / lr.height();
  int64_t sw = hr.width() / lr.width();
  if (sh != sw || sh < 1)
    throw DataError("train: inconsistent LR->HR scale (" + std::to_string(sh) + " vs " +
                    std::to_string(sw) + ")");
  return sh;
}

template <typename T>
ParamSet<T> zeros_like(const ParamSet<T>& p) {
  ParamSet<T> out;
  for (size_t i = 0; i < p.size(); ++i)
    out.add(p.item(i).first, Tensor<T>::zeros(p.item(i).second.shape()));
  return out;
}

template <typename T>
void accumulate_grads(ad::Tape<T>& tape, const BoundParams<T>& bp, ParamSet<T>& grads) {
  for (size_t i = 0; i < bp.size(); ++i) {
    const auto& [name, var] = bp.item(i);
    if (Tensor<T>* g = tape.grad_buffer(var)) grads.at(name) += *g;
  }
}

}  // namespace detail

// Orchestrates VAE pretraining and the two training stages. All randomness
// (batch picks, branch picks, crops) is a pure function of (seed, step), so a
// resumed run replays the uninterrupted one bit-for-bit.
class Trainer {
 public:
  explicit Trainer(RunConfig cfg)
      : cfg_(std::move(cfg)),
        vae_{cfg_.vae_config(), {}},
        den_{cfg_.denoiser_config(), {}},
        schedule_(cfg_.schedule()),
        extractor_(make_extractor<float>(static_cast<uint64_t>(cfg_.loss.extractor_seed))),
        opt_(cfg_.adamw_config()) {
    cfg_.validate();
    uint64_t s = static_cast<uint64_t>(cfg_.seed);
    vae_.params = make_vae_params<float>(vae_.cfg, Rng::mix(s, Rng::hash_tag("init.vae")));
    den_.params = make_denoiser_params<float>(den_.cfg, Rng::mix(s, Rng::hash_tag("init.den")));
  }

  const RunConfig& config() const { return cfg_; }
  Vae<float>& vae() { return vae_; }
  Denoiser<float>& denoiser() { return den_; }
  const NoiseSchedule& schedule() const { return schedule_; }
  const PerceptualExtractor<float>& extractor() const { return extractor_; }
  int64_t step() const { return step_; }
  const std::vector<StepRecord>& records() const { return records_; }

  void set_log(std::ostream* os) { log_ = os; }
  void set_checkpoint_sink(std::function<void(const CheckpointData&)> fn) {
    on_checkpoint_ = std::move(fn);
  }

  CheckpointData make_checkpoint(const std::string& stage, bool with_optimizer) const {
    CheckpointData c;
    c.step = static_cast<uint64_t>(step_);
    c.fingerprint = cfg_.model_fingerprint();
    c.model = cfg_.model_json();
    c.model["stage"] = stage;
    for (size_t i = 0; i < vae_.params.size(); ++i)
      c.tensors.add(vae_.params.item(i).first, vae_.params.item(i).second);
    if (stage != "vae")
      for (size_t i = 0; i < den_.params.size(); ++i)
        c.tensors.add(den_.params.item(i).first, den_.params.item(i).second);
    if (with_optimizer && opt_.m.size() > 0) {
      for (size_t i = 0; i < opt_.m.size(); ++i)
        c.tensors.add("opt.m." + opt_.m.item(i).first, opt_.m.item(i).second);
      for (size_t i = 0; i < opt_.v.size(); ++i)
        c.tensors.add("opt.v." + opt_.v.item(i).first, opt_.v.item(i).second);
    }
    return c;
  }

  // Warm-starts parameters from a checkpoint. Same-stage checkpoints also
  // restore the optimizer state and step counter so training continues where
  // it stopped; earlier-stage checkpoints only seed the weights.
  void load_resume(const CheckpointData& ckpt, const std::string& target_stage) {
    if (ckpt.fingerprint != cfg_.model_fingerprint())
      throw IncompatibilityError("checkpoint fingerprint " + ckpt.fingerprint +
                                 " does not match configured model " + cfg_.model_fingerprint());
    apply_checkpoint(ckpt, vae_.params);
    std::string from_stage = ckpt.model.value("stage", std::string("?"));
    if (from_stage != "vae") apply_checkpoint(ckpt, den_.params);
    if (from_stage == target_stage) {
      init_optimizer(target_stage == "vae" ? vae_.params : den_.params);
      restore_moments(ckpt);
      step_ = static_cast<int64_t>(ckpt.step);
      opt_.step_count = step_;
      resume_stage_ = target_stage;
    } else {
      step_ = 0;
      resume_stage_.clear();
    }
  }

  // Autoencoder pretraining of the VAE on HR frames (random aligned crops).
  CheckpointData run_vae_stage(const Dataset& data, int64_t iters) {
    check_dataset(data, 1);
    begin_stage("vae", vae_.params);
    std::vector<std::pair<int64_t, int64_t>> pool = frame_pool(data);
    const int64_t f = vae_.cfg.downsample_factor;

    for (; step_ < iters;) {
      Rng r = Rng::derive(static_cast<uint64_t>(cfg_.seed), "vaebatch",
                          static_cast<uint64_t>(step_));
      ParamSet<float> grads = detail::zeros_like(vae_.params);
      double loss_acc = 0;
      for (int64_t b = 0; b < cfg_.train.batch_size; ++b) {
        auto [ci, fi] = pool[r.uniform_int(0, static_cast<int64_t>(pool.size()) - 1)];
        const Frame& hr = data[ci].hr.frames[fi];
        Frame patch = random_crop(hr, r, 64, f);

        ad::Tape<float> tape;
        BoundParams<float> vp(tape, vae_.params, true);
        ad::Var<float> x = tape.constant(patch.pixels);
        ad::Var<float> rec = vae_decode(vae_.cfg, vp, vae_encode(vae_.cfg, vp, x));
        ad::Var<float> loss = ad::mse(rec, x);
        ad::Var<float> scaled =
            ad::scalar_mul(loss, 1.0f / static_cast<float>(cfg_.train.batch_size));
        tape.backward(scaled);
        detail::accumulate_grads(tape, vp, grads);
        loss_acc += loss.val()[0];
      }
      finish_step(vae_.params, grads, loss_acc / cfg_.train.batch_size, "vae",
                  {{"mse", loss_acc / cfg_.train.batch_size}}, {}, "vae");
    }
    return final_checkpoint("vae");
  }

  // Latent-space adaptation: frozen VAE, latent MSE on the one-step output.
  CheckpointData train_stage1(const Dataset& data, int64_t iters) {
    check_dataset(data, 1);
    begin_stage("stage1", den_.params);
    vae_fingerprint_guard_ = param_checksum(vae_.params);

    // The VAE is frozen, so clip latents are encoded once and cached.
    std::vector<std::array<Tensor<float>, 2>> cache(data.size());
    std::vector<bool> cached(data.size(), false);

    for (; step_ < iters;) {
      Rng r =
          Rng::derive(static_cast<uint64_t>(cfg_.seed), "batch", static_cast<uint64_t>(step_));
      ParamSet<float> grads = detail::zeros_like(den_.params);
      double loss_acc = 0;
      for (int64_t b = 0; b < cfg_.train.batch_size; ++b) {
        int64_t idx = r.uniform_int(0, static_cast<int64_t>(data.size()) - 1);
        if (!cached[idx]) {
          cache[idx] = encode_pair(data[idx]);
          cached[idx] = true;
        }
        auto [z_lr_full, z_hr_full] = cache[idx];
        auto [z_lr, z_hr] = latent_window(z_lr_full, z_hr_full, r);

        ad::Tape<float> tape;
        BoundParams<float> dp(tape, den_.params, true);
        ad::Var<float> zl = tape.constant(z_lr);
        ad::Var<float> v = denoiser_forward(den_, dp, zl, t_star());
        const double abar = alpha_bar(schedule_, t_star());
        ad::Var<float> z_sr =
            ad::sub(ad::scalar_mul(zl, static_cast<float>(std::sqrt(abar))),
                    ad::scalar_mul(v, static_cast<float>(std::sqrt(1.0 - abar))));
        ad::Var<float> loss = stage1_loss(z_sr, tape.constant(z_hr));
        ad::Var<float> scaled =
            ad::scalar_mul(loss, 1.0f / static_cast<float>(cfg_.train.batch_size));
        tape.backward(scaled);
        detail::accumulate_grads(tape, dp, grads);
        loss_acc += loss.val()[0];
      }
      finish_step(den_.params, grads, loss_acc / cfg_.train.batch_size, "video",
                  {{"mse", loss_acc / cfg_.train.batch_size}}, {}, "stage1");
    }
    check_vae_frozen();
    return final_checkpoint("stage1");
  }

  // Pixel-space refinement with mixed image/video branches.
  CheckpointData train_stage2(const Dataset& videos, const Dataset* images, int64_t iters) {
    check_dataset(videos, 2);
    if (images) check_dataset(*images, 1);
    const Dataset& image_pool_set = images ? *images : videos;
    begin_stage("stage2", den_.params);
    vae_fingerprint_guard_ = param_checksum(vae_.params);
    std::vector<std::pair<int64_t, int64_t>> img_pool = frame_pool(image_pool_set);

    for (; step_ < iters;) {
      Branch branch = sample_branch(cfg_.seed, step_, cfg_.train.phi);
      ParamSet<float> grads = detail::zeros_like(den_.params);
      double loss_acc = 0, pix_acc = 0, per_acc = 0, fd_acc = 0;
      RestoreStats step_stats;

      for (int64_t b = 0; b < cfg_.train.batch_size; ++b) {
        RestoreStats stats;
        ad::Tape<float> tape;
        BoundParams<float> vp(tape, vae_.params, false);
        BoundParams<float> dp(tape, den_.params, true);

        ad::Var<float> total;
        if (branch == Branch::Image) {
          Rng r = Rng::derive(static_cast<uint64_t>(cfg_.seed), "imgbatch",
                              static_cast<uint64_t>(step_), static_cast<uint64_t>(b));
          auto [ci, fi] = img_pool[r.uniform_int(0, static_cast<int64_t>(img_pool.size()) - 1)];
          const Frame& lr = image_pool_set[ci].lr.frames[fi];
          const Frame& hr = image_pool_set[ci].hr.frames[fi];
          int64_t scale = detail::pair_scale(lr, hr);
          std::vector<Tensor<float>> up{
              resize_bilinear(lr, lr.height() * scale, lr.width() * scale).pixels};
          RestoreGraph<float> g =
              restore_graph(tape, vae_.cfg, vp, den_, dp, schedule_,
                            t_star(), up, &stats);
          auto terms = stage2_image_terms(tape, extractor_, g.frames[0],
                                          tape.constant(hr.pixels), cfg_.loss_weights());
          total = terms.total;
          pix_acc += terms.pixel.val()[0];
          if (terms.perceptual.valid()) per_acc += terms.perceptual.val()[0];
        } else {
          Rng r = Rng::derive(static_cast<uint64_t>(cfg_.seed), "batch",
                              static_cast<uint64_t>(step_), static_cast<uint64_t>(b));
          int64_t idx = r.uniform_int(0, static_cast<int64_t>(videos.size()) - 1);
          const TrainSample& s = videos[idx];
          auto [lo, n] = clip_window(s, r);
          if (n < 2) throw DataError("train: stage-2 video sample needs >= 2 frames");
          int64_t scale = detail::pair_scale(s.lr.frames[0], s.hr.frames[0]);

          std::vector<Tensor<float>> up;
          std::vector<ad::Var<float>> hr_vars;
          for (int64_t i = lo; i < lo + n; ++i) {
            const Frame& lf = s.lr.frames[i];
            up.push_back(resize_bilinear(lf, lf.height() * scale, lf.width() * scale).pixels);
            hr_vars.push_back(tape.constant(s.hr.frames[i].pixels));
          }
          RestoreGraph<float> g =
              restore_graph(tape, vae_.cfg, vp, den_, dp, schedule_,
                            t_star(), up, &stats);
          if (stats.encodes != n || stats.decodes != n)
            throw Error("stage-2 video branch must run the VAE exactly n times each way");
          auto terms =
              stage2_video_terms(tape, extractor_, g.frames, hr_vars, cfg_.loss_weights());
          total = terms.total;
          pix_acc += terms.pixel.val()[0];
          if (terms.perceptual.valid()) per_acc += terms.perceptual.val()[0];
          if (terms.frame_diff.valid()) fd_acc += terms.frame_diff.val()[0];
        }

        ad::Var<float> scaled =
            ad::scalar_mul(total, 1.0f / static_cast<float>(cfg_.train.batch_size));
        tape.backward(scaled);
        detail::accumulate_grads(tape, dp, grads);
        loss_acc += total.val()[0];
        step_stats.encodes += stats.encodes;
        step_stats.decodes += stats.decodes;
        step_stats.denoises += stats.denoises;
      }

      const double bs = static_cast<double>(cfg_.train.batch_size);
      std::vector<std::pair<std::string, double>> terms{{"mse", pix_acc / bs}};
      if (cfg_.loss.lambda1 > 0) terms.emplace_back("dists", per_acc / bs);
      if (branch == Branch::Video && cfg_.loss.lambda2 > 0)
        terms.emplace_back("frame_diff", fd_acc / bs);
      finish_step(den_.params, grads, loss_acc / bs, branch_name(branch), terms, step_stats,
                  "stage2");
    }
    check_vae_frozen();
    return final_checkpoint("stage2");
  }

  // Mean stage-1 latent loss over a dataset at the current parameters.
  double eval_stage1_loss(const Dataset& data) {
    check_dataset(data, 1);
    double acc = 0;
    for (const auto& s : data) {
      auto [z_lr, z_hr] = encode_pair(s);
      ad::Tape<float> tape;
      BoundParams<float> dp(tape, den_.params, false);
      ad::Var<float> zl = tape.constant(z_lr);
      ad::Var<float> v = denoiser_forward(den_, dp, zl, t_star());
      const double abar = alpha_bar(schedule_, t_star());
      ad::Var<float> z_sr = ad::sub(ad::scalar_mul(zl, static_cast<float>(std::sqrt(abar))),
                                    ad::scalar_mul(v, static_cast<float>(std::sqrt(1.0 - abar))));
      acc += stage1_loss(z_sr, tape.constant(z_hr)).val()[0];
    }
    return acc / static_cast<double>(data.size());
  }

  Restorer<float> make_restorer(int64_t scale) const {
    Restorer<float> r{vae_, den_, schedule_, static_cast<int>(cfg_.diffusion.t_star), scale, 16};
    r.validate();
    return r;
  }

 private:
  Timestep t_star() const { return Timestep{static_cast<int>(cfg_.diffusion.t_star)}; }

  void check_dataset(const Dataset& data, int64_t min_frames) const {
    if (data.empty()) throw DataError("train: empty sample stream");
    for (const auto& s : data) {
      if (s.lr.frame_count() != s.hr.frame_count())
        throw DataError("train: LR/HR frame counts differ");
      if (s.lr.frame_count() < min_frames) throw DataError("train: clip too short");
      detail::pair_scale(s.lr.frames[0], s.hr.frames[0]);
    }
  }

  static std::vector<std::pair<int64_t, int64_t>> frame_pool(const Dataset& data) {
    std::vector<std::pair<int64_t, int64_t>> pool;
    for (int64_t c = 0; c < static_cast<int64_t>(data.size()); ++c)
      for (int64_t f = 0; f < data[c].hr.frame_count(); ++f) pool.emplace_back(c, f);
    return pool;
  }

  static Frame random_crop(const Frame& src, Rng& r, int64_t target, int64_t multiple) {
    int64_t h = std::min<int64_t>(target, src.height());
    int64_t w = std::min<int64_t>(target, src.width());
    h -= h % multiple;
    w -= w % multiple;
    if (h < multiple || w < multiple)
      throw DataError("train: frame too small for VAE pretraining crop");
    int64_t i0 = src.height() == h ? 0 : r.uniform_int(0, src.height() - h);
    int64_t j0 = src.width() == w ? 0 : r.uniform_int(0, src.width() - w);
    return crop(src, i0, j0, h, w);
  }

  std::array<Tensor<float>, 2> encode_pair(const TrainSample& s) {
    int64_t scale = detail::pair_scale(s.lr.frames[0], s.hr.frames[0]);
    std::vector<Tensor<float>> up, hr;
    for (int64_t i = 0; i < s.lr.frame_count(); ++i) {
      const Frame& lf = s.lr.frames[i];
      up.push_back(resize_bilinear(lf, lf.height() * scale, lf.width() * scale).pixels);
      hr.push_back(s.hr.frames[i].pixels);
    }
    return {encode_clip(vae_, up), encode_clip(vae_, hr)};
  }

  // Picks a clip_frames-long temporal window (whole clip when short enough).
  std::pair<int64_t, int64_t> clip_window(const TrainSample& s, Rng& r) const {
    int64_t n = s.lr.frame_count();
    int64_t len = std::min<int64_t>(cfg_.train.clip_frames, n);
    int64_t lo = n == len ? 0 : r.uniform_int(0, n - len);
    return {lo, len};
  }

  std::pair<Tensor<float>, Tensor<float>> latent_window(const Tensor<float>& z_lr,
                                                        const Tensor<float>& z_hr, Rng& r) const {
    int64_t n = z_lr.shape()[0];
    int64_t len = std::min<int64_t>(cfg_.train.clip_frames, n);
    if (len == n) return {z_lr, z_hr};
    int64_t lo = r.uniform_int(0, n - len);
    Shape ws{len, z_lr.shape()[1], z_lr.shape()[2], z_lr.shape()[3]};
    int64_t stride = z_lr.numel() / n;
    Tensor<float> a(ws), b(ws);
    std::copy_n(z_lr.data() + lo * stride, len * stride, a.data());
    std::copy_n(z_hr.data() + lo * stride, len * stride, b.data());
    return {a, b};
  }

  void begin_stage(const std::string& stage, const ParamSet<float>& trainable) {
    records_.clear();
    if (resume_stage_ == stage && !resume_stage_.empty()) {
      resume_stage_.clear();  // optimizer/state already primed by load_resume
      return;
    }
    init_optimizer(trainable);
    step_ = 0;
  }
  void init_optimizer(const ParamSet<float>& trainable) {
    opt_ = AdamW<float>(cfg_.adamw_config());
    opt_.init(trainable);
  }

  void restore_moments(const CheckpointData& ckpt) {
    for (size_t i = 0; i < opt_.m.size(); ++i) {
      const std::string& name = opt_.m.item(i).first;
      if (!ckpt.tensors.has("opt.m." + name) || !ckpt.tensors.has("opt.v." + name))
        throw IncompatibilityError("checkpoint lacks optimizer state for '" + name +
                                   "'; cannot resume mid-stage");
      opt_.m.item(i).second = ckpt.tensors.at("opt.m." + name);
      opt_.v.item(i).second = ckpt.tensors.at("opt.v." + name);
    }
  }

  void finish_step(ParamSet<float>& params, const ParamSet<float>& grads, double loss,
                   const std::string& branch, std::vector<std::pair<std::string, double>> terms,
                   RestoreStats stats, const std::string& stage) {
    if (!std::isfinite(loss))
      throw TrainingError("non-finite loss " + std::to_string(loss) + " at step " +
                          std::to_string(step_) + " (branch " + branch + ", stage " + stage +
                          ")");
    double gn = opt_.step(params, grads);
    ++step_;

    StepRecord rec{step_, branch, loss, std::move(terms), stats, gn};
    if (log_ && step_ % cfg_.train.log_every == 0) {
      json terms_json;
      for (const auto& [k, v] : rec.terms) terms_json[k] = v;
      json line = {{"step", rec.step},
                   {"branch", rec.branch},
                   {"loss", rec.loss},
                   {"loss_terms", terms_json}};
      (*log_) << line.dump() << "\n";
      log_->flush();
    }
    records_.push_back(std::move(rec));

    if (on_checkpoint_ && cfg_.train.checkpoint_every > 0 &&
        step_ % cfg_.train.checkpoint_every == 0)
      on_checkpoint_(make_checkpoint(stage, true));
  }

  CheckpointData final_checkpoint(const std::string& stage) {
    CheckpointData c = make_checkpoint(stage, true);
    if (on_checkpoint_) on_checkpoint_(c);
    return c;
  }

  static uint64_t param_checksum(const ParamSet<float>& p) {
    uint64_t h = 1469598103934665603ull;
    for (size_t i = 0; i < p.size(); ++i) {
      const Tensor<float>& t = p.item(i).second;
      const auto* bytes = reinterpret_cast<const unsigned char*>(t.data());
      for (int64_t b = 0; b < t.numel() * static_cast<int64_t>(sizeof(float)); ++b) {
        h ^= bytes[b];
        h *= 1099511628211ull;
      }
    }
    return h;
  }
  void check_vae_frozen() const {
    if (param_checksum(vae_.params) != vae_fingerprint_guard_)
      throw Error("frozen VAE parameters changed during denoiser training");
  }

  RunConfig cfg_;
  Vae<float> vae_;
  Denoiser<float> den_;
  NoiseSchedule schedule_;
  PerceptualExtractor<float> extractor_;
  AdamW<float> opt_;
  std::string resume_stage_;
  int64_t step_ = 0;
  uint64_t vae_fingerprint_guard_ = 0;
  std::vector<StepRecord> records_;
  std::ostream* log_ = nullptr;
  std::function<void(const CheckpointData&)> on_checkpoint_;
};

}  // namespace dove
