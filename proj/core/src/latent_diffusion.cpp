#include "neuro3d/latent_diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

#include "internal/jsonl.hpp"
#include "neuro3d/serialize.hpp"

namespace neuro3d::diffusion {

using ag::Value;

double NoiseSchedule::alpha_bar_at(int t) const {
  check_t(t);
  return alpha_bar[static_cast<std::size_t>(t - 1)];
}

void NoiseSchedule::check_t(int t) const {
  if (t < 1 || t > T)
    throw ValidationError("schedule: t " + std::to_string(t) + " outside [1," +
                          std::to_string(T) + "]");
}

NoiseSchedule make_schedule(int T, double beta_start, double beta_end) {
  if (T < 2) throw ValidationError("make_schedule: T must be >= 2");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
    throw ValidationError("make_schedule: need 0 < beta_start <= beta_end < 1");
  NoiseSchedule s;
  s.T = T;
  s.beta.resize(static_cast<std::size_t>(T));
  s.alpha.resize(static_cast<std::size_t>(T));
  s.alpha_bar.resize(static_cast<std::size_t>(T));
  double prod = 1.0;
  for (int i = 0; i < T; ++i) {
    const double b = beta_start + (beta_end - beta_start) * i / (T - 1);
    s.beta[static_cast<std::size_t>(i)] = b;
    s.alpha[static_cast<std::size_t>(i)] = 1.0 - b;
    prod *= 1.0 - b;
    s.alpha_bar[static_cast<std::size_t>(i)] = prod;
  }
  return s;
}

Tensor q_sample(const NoiseSchedule& s, const Tensor& z0, int t, const Tensor& eps) {
  s.check_t(t);
  if (!z0.same_shape(eps)) throw ValidationError("q_sample: eps shape mismatch");
  const double ab = s.alpha_bar_at(t);
  const double c0 = std::sqrt(ab), c1 = std::sqrt(1.0 - ab);
  Tensor out(z0.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = c0 * z0[i] + c1 * eps[i];
  return out;
}

// ---------------------------------------------------------------- autoencoder

ImageAutoencoder::ImageAutoencoder(const AutoencoderConfig& cfg, Rng& rng) : cfg_(cfg) {
  const int w = cfg.width, lc = cfg.latent_channels;
  e1_ = nn::Conv2d(params_, "enc1", 3, w, 3, 2, 1, rng);
  e2_ = nn::Conv2d(params_, "enc2", w, 2 * w, 3, 2, 1, rng);
  e3_ = nn::Conv2d(params_, "enc3", 2 * w, lc, 3, 1, 1, rng);
  d1_ = nn::Conv2d(params_, "dec1", lc, 2 * w, 3, 1, 1, rng);
  d2_ = nn::Conv2d(params_, "dec2", 2 * w, w, 3, 1, 1, rng);
  d3_ = nn::Conv2d(params_, "dec3", w, 3, 3, 1, 1, rng);
}

Value ImageAutoencoder::encode_value(const Value& image_chw) const {
  auto x = ag::silu_(e1_.forward(image_chw));
  x = ag::silu_(e2_.forward(x));
  return e3_.forward(x);
}

Value ImageAutoencoder::decode_value(const Value& z) const {
  auto x = ag::silu_(d1_.forward(z));
  x = ag::silu_(d2_.forward(ag::upsample2x(x)));
  return ag::sigmoid_(d3_.forward(ag::upsample2x(x)));
}

Tensor ImageAutoencoder::encode(const Image& img) const {
  return encode_value(ag::constant(img.to_chw()))->val;
}

Image ImageAutoencoder::decode(const Tensor& z) const {
  Image img = Image::from_chw(decode_value(ag::constant(z))->val);
  img.clamp01();
  return img;
}

void ImageAutoencoder::save(const std::string& path, const std::string& config_hash) const {
  ArchiveHeader h;
  h.config_hash = config_hash;
  save_archive(path, h, params_.state());
}

ImageAutoencoder ImageAutoencoder::load(const std::string& path, const AutoencoderConfig& cfg) {
  Rng rng(0);
  ImageAutoencoder ae(cfg, rng);
  ae.params_.load_state(load_archive(path).tensors);
  return ae;
}

AePretrainResult pretrain_autoencoder(ImageAutoencoder& ae, const std::vector<Image>& images,
                                      int epochs, int batch, double lr, Rng& rng) {
  if (images.empty()) throw ValidationError("pretrain_autoencoder: no images");
  nn::AdamOptimizer opt(lr);
  AePretrainResult res;
  std::vector<Tensor> chw;
  for (const auto& img : images) chw.push_back(img.to_chw());

  for (int epoch = 0; epoch < epochs; ++epoch) {
    std::vector<int> order(images.size());
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1],
                order[static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(i)))]);
    for (std::size_t b0 = 0; b0 < order.size(); b0 += static_cast<std::size_t>(batch)) {
      const std::size_t b1 = std::min(order.size(), b0 + static_cast<std::size_t>(batch));
      std::vector<Value> terms;
      for (std::size_t i = b0; i < b1; ++i) {
        auto x = ag::constant(chw[static_cast<std::size_t>(order[i])]);
        auto rec = ae.decode_value(ae.encode_value(x));
        terms.push_back(ag::mse(rec, x));
      }
      auto loss = ag::scale(ag::add_n(terms), 1.0 / static_cast<double>(terms.size()));
      if (!std::isfinite(loss->val[0]))
        throw NumericalError("pretrain_autoencoder: loss diverged");
      ag::zero_grad(ae.params().params());
      ag::backward(loss);
      opt.step(ae.params().params());
      res.loss_curve.push_back(loss->val[0]);
    }
  }

  double acc = 0.0;
  for (const auto& img : images) acc += psnr(img, ae.decode(ae.encode(img)));
  res.train_psnr = acc / static_cast<double>(images.size());
  return res;
}

// ------------------------------------------------------------------ denoiser

Denoiser::ResBlock Denoiser::make_res(const std::string& name, int ch, Rng& rng) {
  ResBlock blk;
  blk.n1g = params_.add(name + ".n1.gamma", Tensor::full({ch}, 1.0));
  blk.n1b = params_.add(name + ".n1.beta", Tensor::zeros({ch}));
  blk.c1 = nn::Conv2d(params_, name + ".c1", ch, ch, 3, 1, 1, rng);
  blk.t_proj = nn::Linear(params_, name + ".t_proj", cfg_.width, ch, rng);
  blk.n2g = params_.add(name + ".n2.gamma", Tensor::full({ch}, 1.0));
  blk.n2b = params_.add(name + ".n2.beta", Tensor::zeros({ch}));
  blk.c2 = nn::Conv2d(params_, name + ".c2", ch, ch, 3, 1, 1, rng);
  return blk;
}

Denoiser::Denoiser(const DenoiserConfig& cfg, Rng& rng) : cfg_(cfg) {
  const int c = cfg.width, lc = cfg.latent_channels;
  t1_ = nn::Linear(params_, "time1", cfg.time_dim, c, rng);
  t2_ = nn::Linear(params_, "time2", c, c, rng);
  conv_in_ = nn::Conv2d(params_, "conv_in", lc, c, 3, 1, 1, rng);
  res1_ = make_res("res1", c, rng);
  attn1_ = nn::MultiheadAttention(params_, "xattn1", c, cfg.context_dim, cfg.heads, rng, false);
  down_ = nn::Conv2d(params_, "down", c, 2 * c, 3, 2, 1, rng);
  res2_ = make_res("res2", 2 * c, rng);
  attn2_ = nn::MultiheadAttention(params_, "xattn2", 2 * c, cfg.context_dim, cfg.heads, rng, false);
  mid_ = make_res("mid", 2 * c, rng);
  up_ = nn::Conv2d(params_, "up", 2 * c, c, 3, 1, 1, rng);
  skip_merge_ = nn::Conv2d(params_, "skip_merge", 2 * c, c, 3, 1, 1, rng);
  res3_ = make_res("res3", c, rng);
  attn3_ = nn::MultiheadAttention(params_, "xattn3", c, cfg.context_dim, cfg.heads, rng, false);
  out_ng_ = params_.add("out_norm.gamma", Tensor::full({c}, 1.0));
  out_nb_ = params_.add("out_norm.beta", Tensor::zeros({c}));
  conv_out_ = nn::Conv2d(params_, "conv_out", c, lc, 3, 1, 1, rng);
  conv_out_.w->val.fill(0.0);  // eps-prediction starts at zero
  conv_out_.b->val.fill(0.0);
}

Value Denoiser::res_forward(const ResBlock& blk, const Value& x, const Value& t_emb) const {
  auto h = blk.c1.forward(ag::silu_(ag::channel_norm(x, blk.n1g, blk.n1b)));
  h = ag::add_channel_bias(h, blk.t_proj.forward_vec(t_emb));
  h = blk.c2.forward(ag::silu_(ag::channel_norm(h, blk.n2g, blk.n2b)));
  return ag::add(x, h);
}

Value Denoiser::attn_forward(const nn::MultiheadAttention& attn, const Value& x,
                             const std::optional<Value>& context) const {
  if (!context) return x;
  const int c = x->val.dim(0), h = x->val.dim(1), w = x->val.dim(2);
  auto tokens = ag::transpose(ag::reshape(x, {c, h * w}));  // [hw x c]
  auto out = attn.forward(tokens, *context);
  return ag::add(x, ag::reshape(ag::transpose(out), {c, h, w}));
}

Value Denoiser::predict_value(const Value& z_t, int t,
                              const std::optional<Value>& context) const {
  auto t_emb = t2_.forward_vec(
      ag::silu_(t1_.forward_vec(ag::constant(nn::sinusoidal_embedding(t, cfg_.time_dim)))));

  auto x = conv_in_.forward(z_t);
  auto s1 = attn_forward(attn1_, res_forward(res1_, x, t_emb), context);
  auto d = down_.forward(s1);
  auto m = attn_forward(attn2_, res_forward(res2_, d, t_emb), context);
  m = res_forward(mid_, m, t_emb);
  auto u = up_.forward(ag::upsample2x(m));

  // channel concat via flattened rows
  const int c = u->val.dim(0), hh = u->val.dim(1), ww = u->val.dim(2);
  auto cat = ag::reshape(ag::concat_rows(ag::reshape(u, {c, hh * ww}),
                                         ag::reshape(s1, {c, hh * ww})),
                         {2 * c, hh, ww});
  auto h = skip_merge_.forward(cat);
  h = attn_forward(attn3_, res_forward(res3_, h, t_emb), context);
  h = ag::silu_(ag::channel_norm(h, out_ng_, out_nb_));
  return conv_out_.forward(h);
}

Tensor Denoiser::predict(const Tensor& z_t, int t, const std::optional<Tensor>& context) const {
  std::optional<Value> ctx;
  if (context) ctx = ag::constant(*context);
  return predict_value(ag::constant(z_t), t, ctx)->val;
}

void Denoiser::save(const std::string& path, std::int64_t step,
                    const std::string& config_hash) const {
  ArchiveHeader h;
  h.step = step;
  h.config_hash = config_hash;
  save_archive(path, h, params_.state());
}

Denoiser Denoiser::load(const std::string& path, const DenoiserConfig& cfg) {
  Rng rng(0);
  Denoiser d(cfg, rng);
  d.params_.load_state(load_archive(path).tensors);
  return d;
}

// -------------------------------------------------------------------- losses

Value ldm_loss_value(const Denoiser& model, const NoiseSchedule& s, const Tensor& z0,
                     const std::optional<Tensor>& context, Rng& rng, LdmLossDraw* draw) {
  const int t = 1 + static_cast<int>(rng.uniform_int(s.T));
  Tensor eps(z0.shape());
  rng.fill_gaussian(eps.data(), eps.numel());
  Tensor z_t = q_sample(s, z0, t, eps);
  if (draw) {
    draw->t = t;
    draw->eps = eps;
    draw->z_t = z_t;
  }
  std::optional<Value> ctx;
  if (context) ctx = ag::constant(*context);
  auto pred = model.predict_value(ag::constant(z_t), t, ctx);
  return ag::mse(pred, ag::constant(eps));
}

double ldm_loss(const Denoiser& model, const NoiseSchedule& s, const Tensor& z0,
                const std::optional<Tensor>& context, Rng& rng) {
  return ldm_loss_value(model, s, z0, context, rng)->val[0];
}

double ldm_loss_with(const std::function<Tensor(const Tensor&, int)>& eps_model,
                     const NoiseSchedule& s, const Tensor& z0, Rng& rng) {
  const int t = 1 + static_cast<int>(rng.uniform_int(s.T));
  Tensor eps(z0.shape());
  rng.fill_gaussian(eps.data(), eps.numel());
  Tensor z_t = q_sample(s, z0, t, eps);
  Tensor pred = eps_model(z_t, t);
  if (!pred.same_shape(eps)) throw ValidationError("ldm_loss: eps model shape mismatch");
  double acc = 0.0;
  for (std::int64_t i = 0; i < eps.numel(); ++i) {
    const double d = eps[i] - pred[i];
    acc += d * d;
  }
  return acc / static_cast<double>(eps.numel());
}

// ---------------------------------------------------------------- segmenters

LabelMap Segmenter::segment(const Image& img) const {
  Tensor p = probs(img);
  const int m = p.dim(0), h = p.dim(1), w = p.dim(2);
  LabelMap out(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      int arg = 0;
      for (int k = 1; k < m; ++k)
        if (p.at(k, y, x) > p.at(arg, y, x)) arg = k;
      out.at(y, x) = static_cast<std::uint8_t>(arg);
    }
  return out;
}

Tensor OracleShapeSegmenter::probs(const Image& img) const {
  Tensor p({2, img.height, img.width});
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      const double d = std::max({std::abs(img.at(y, x, 0) - 1.0),
                                 std::abs(img.at(y, x, 1) - 1.0),
                                 std::abs(img.at(y, x, 2) - 1.0)});
      const bool object = d > threshold_;
      p.at(0, y, x) = object ? 0.0 : 1.0;
      p.at(1, y, x) = object ? 1.0 : 0.0;
    }
  return p;
}

TrainedSegmenter::TrainedSegmenter(int num_classes, Rng& rng) : num_classes_(num_classes) {
  c1_ = nn::Conv2d(params_, "seg1", 3, 16, 3, 1, 1, rng);
  c2_ = nn::Conv2d(params_, "seg2", 16, 16, 3, 1, 1, rng);
  c3_ = nn::Conv2d(params_, "seg3", 16, num_classes, 1, 1, 0, rng);
}

Value TrainedSegmenter::logits_hw_value(const Value& image_chw) const {
  auto x = ag::silu_(c1_.forward(image_chw));
  x = ag::silu_(c2_.forward(x));
  auto logits = c3_.forward(x);  // [M x H x W]
  const int m = logits->val.dim(0), h = logits->val.dim(1), w = logits->val.dim(2);
  return ag::transpose(ag::reshape(logits, {m, h * w}));  // [HW x M]
}

Value TrainedSegmenter::probs_value(const Value& image_chw) const {
  const int h = image_chw->val.dim(1), w = image_chw->val.dim(2);
  auto probs_hw = ag::softmax_rows(logits_hw_value(image_chw));  // [HW x M]
  return ag::reshape(ag::transpose(probs_hw), {num_classes_, h, w});
}

Tensor TrainedSegmenter::probs(const Image& img) const {
  return probs_value(ag::constant(img.to_chw()))->val;
}

void TrainedSegmenter::save(const std::string& path) const {
  save_archive(path, ArchiveHeader{}, params_.state());
}

TrainedSegmenter TrainedSegmenter::load(const std::string& path, int num_classes) {
  Rng rng(0);
  TrainedSegmenter seg(num_classes, rng);
  seg.params_.load_state(load_archive(path).tensors);
  return seg;
}

double train_segmenter(TrainedSegmenter& seg, const std::vector<Image>& images,
                       const std::vector<LabelMap>& labels, int epochs, double lr, Rng& rng) {
  if (images.size() != labels.size() || images.empty())
    throw ValidationError("train_segmenter: bad training set");
  nn::AdamOptimizer opt(lr);
  double last = 0.0;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    std::vector<int> order(images.size());
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1],
                order[static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(i)))]);
    for (int idx : order) {
      const auto& img = images[static_cast<std::size_t>(idx)];
      const auto& lab = labels[static_cast<std::size_t>(idx)];
      auto logits = seg.logits_hw_value(ag::constant(img.to_chw()));
      std::vector<int> flat(static_cast<std::size_t>(lab.height) * lab.width);
      for (std::size_t i = 0; i < flat.size(); ++i) flat[i] = lab.labels[i];
      auto loss = ag::cross_entropy(logits, flat);
      ag::zero_grad(seg.params().params());
      ag::backward(loss);
      opt.step(seg.params().params());
      last = loss->val[0];
    }
  }
  return last;
}

double region_loss(const Segmenter& segmenter, const Image& s, const Image& s_prime) {
  if (s.height != s_prime.height || s.width != s_prime.width)
    throw ValidationError("region_loss: image size mismatch");
  Tensor pa = segmenter.probs(s);
  Tensor pb = segmenter.probs(s_prime);
  if (pa.dim(0) != pb.dim(0))
    throw ValidationError("region_loss: segmenter class-count mismatch (" +
                          std::to_string(pa.dim(0)) + " vs " + std::to_string(pb.dim(0)) + ")");
  const int m = pa.dim(0), h = pa.dim(1), w = pa.dim(2);
  double acc = 0.0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      int label = 0;
      for (int k = 1; k < m; ++k)
        if (pa.at(k, y, x) > pa.at(label, y, x)) label = k;
      acc -= std::log(std::max(pb.at(label, y, x), 1e-12));
    }
  return acc / (static_cast<double>(h) * w);
}

Value region_loss_value(const TrainedSegmenter& segmenter, const LabelMap& target,
                        const Value& s_prime_chw) {
  if (target.height != s_prime_chw->val.dim(1) || target.width != s_prime_chw->val.dim(2))
    throw ValidationError("region_loss: label map size mismatch");
  auto logits = segmenter.logits_hw_value(s_prime_chw);
  std::vector<int> flat(static_cast<std::size_t>(target.height) * target.width);
  for (std::size_t i = 0; i < flat.size(); ++i) flat[i] = target.labels[i];
  return ag::cross_entropy(logits, flat);
}

double total_finetune_loss(double l_ldm, double l_region, double lambda_ldm,
                           double lambda_region) {
  if (lambda_ldm < 0.0 || lambda_region < 0.0)
    throw ValidationError("total_finetune_loss: lambdas must be >= 0");
  return lambda_ldm * l_ldm + lambda_region * l_region;
}

Value total_finetune_loss_value(const Value& l_ldm, const Value& l_region, double lambda_ldm,
                                double lambda_region) {
  if (lambda_ldm < 0.0 || lambda_region < 0.0)
    throw ValidationError("total_finetune_loss: lambdas must be >= 0");
  return ag::add(ag::scale(l_ldm, lambda_ldm), ag::scale(l_region, lambda_region));
}

// ------------------------------------------------------------------ sampling

namespace {

std::vector<int> ddim_taus(int T, int steps) {
  if (steps < 1 || steps > T) throw ValidationError("sample: steps must be in [1, T]");
  std::vector<int> taus;
  if (steps == 1) {
    taus.push_back(T);
    return taus;
  }
  for (int i = 0; i < steps; ++i)
    taus.push_back(1 + static_cast<int>(std::lround(static_cast<double>(i) * (T - 1) /
                                                    (steps - 1))));
  taus.erase(std::unique(taus.begin(), taus.end()), taus.end());
  return taus;
}

Tensor cfg_predict(const Denoiser& model, const Tensor& z, int t,
                   const std::optional<Tensor>& context, const std::optional<double>& guidance) {
  if (!context) return model.predict(z, t, std::nullopt);
  if (!guidance) return model.predict(z, t, context);
  Tensor eps_c = model.predict(z, t, context);
  Tensor eps_u = model.predict(z, t, std::nullopt);
  Tensor out(eps_c.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i)
    out[i] = eps_u[i] + *guidance * (eps_c[i] - eps_u[i]);
  return out;
}

}  // namespace

Tensor sample_latent(const Denoiser& model, const NoiseSchedule& s,
                     const std::optional<Tensor>& context, const SampleOptions& opt, Rng& rng) {
  const auto& cfg = model.config();
  Tensor z({cfg.latent_channels, cfg.latent_size, cfg.latent_size});
  rng.fill_gaussian(z.data(), z.numel());

  const auto taus = ddim_taus(s.T, opt.steps);
  for (int i = static_cast<int>(taus.size()) - 1; i >= 0; --i) {
    const int t = taus[static_cast<std::size_t>(i)];
    const double ab = s.alpha_bar_at(t);
    const double ab_prev = i > 0 ? s.alpha_bar_at(taus[static_cast<std::size_t>(i - 1)]) : 1.0;
    Tensor eps_hat = cfg_predict(model, z, t, context, opt.guidance);
    const double c0 = std::sqrt(ab), c1 = std::sqrt(1.0 - ab);
    const double p0 = std::sqrt(ab_prev), p1 = std::sqrt(1.0 - ab_prev);
    for (std::int64_t j = 0; j < z.numel(); ++j) {
      const double z0_hat = (z[j] - c1 * eps_hat[j]) / c0;
      z[j] = p0 * z0_hat + p1 * eps_hat[j];
    }
    if (!z.all_finite()) throw NumericalError("sample: non-finite latent at t=" + std::to_string(t));
  }
  return z;
}

Image sample(const Denoiser& model, const ImageAutoencoder& ae, const NoiseSchedule& s,
             const std::optional<Tensor>& context, const SampleOptions& opt, Rng& rng) {
  return ae.decode(sample_latent(model, s, context, opt, rng));
}

// ------------------------------------------------------------------ training

LdmTrainResult finetune_ldm(const eeg::Dataset& data, const PipelineConfig& cfg,
                            const encoder::EEGEncoder& eeg_encoder, ImageAutoencoder& ae,
                            Denoiser& model, const Segmenter* segmenter,
                            const std::string& log_path, const std::string& checkpoint_dir) {
  const auto& lc = cfg.ldm;
  internal::JsonlWriter log(log_path);

  eeg::PreprocessConfig pp;
  if (cfg.dataset.normalize == "per_channel_z")
    pp.normalize = eeg::PreprocessConfig::Normalize::per_channel_z;
  else if (cfg.dataset.normalize == "global_z")
    pp.normalize = eeg::PreprocessConfig::Normalize::global_z;
  else
    pp.normalize = eeg::PreprocessConfig::Normalize::none;

  struct Sample {
    Tensor context;   // frozen-encoder EEG code context
    Tensor z0;        // AE latent of the paired stimulus
    Image stimulus;
    LabelMap region_target;
    eeg::EEGSegment segment;  // kept for the un-frozen path
  };
  std::vector<Sample> train;
  {
    auto it = data.segments_in_split("train");
    while (auto seg = it.next()) {
      Sample smp;
      smp.segment = eeg::preprocess(*seg, pp);
      auto img = data.image_for_segment(seg->segment_id, false);
      smp.stimulus = img.pixels;
      smp.z0 = ae.encode(img.pixels);
      if (lc.freeze_encoder) smp.context = eeg_encoder.encode(smp.segment).context;
      if (segmenter) smp.region_target = segmenter->segment(img.pixels);
      train.push_back(std::move(smp));
    }
  }
  if (train.empty()) throw ValidationError("finetune_ldm: empty train split");

  const bool region_active = lc.region_enabled && lc.lambda_region > 0.0 && segmenter != nullptr;
  const auto* trained_seg = dynamic_cast<const TrainedSegmenter*>(segmenter);
  const bool region_differentiable = region_active && trained_seg != nullptr;

  NoiseSchedule schedule = make_schedule(lc.timesteps, lc.beta_start, lc.beta_end);
  Rng shuffle_rng(derive_seed(cfg.seed, "ldm/shuffle"));
  Rng draw_rng(derive_seed(cfg.seed, "ldm/draw"));
  nn::AdamOptimizer opt(lc.lr);
  const std::string config_hash = cfg.hash();

  std::vector<Value> train_params = model.params().params();
  if (!lc.freeze_encoder)
    for (const auto& p : eeg_encoder.params().params()) train_params.push_back(p);

  LdmTrainResult res;
  std::int64_t step = 0;

  for (int epoch = 0; epoch < lc.epochs; ++epoch) {
    std::vector<int> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[static_cast<std::size_t>(shuffle_rng.uniform_int(
                                  static_cast<std::int64_t>(i)))]);

    double ep_ldm = 0.0;
    int ep_batches = 0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += static_cast<std::size_t>(lc.batch)) {
      const std::size_t b1 = std::min(order.size(), b0 + static_cast<std::size_t>(lc.batch));
      std::vector<Value> terms;
      // first-sample pieces reused by the region term
      Value first_pred;
      const Sample* first_sample = nullptr;
      int first_t = 0;
      Tensor first_zt;

      for (std::size_t i = b0; i < b1; ++i) {
        const Sample& smp = train[static_cast<std::size_t>(order[i])];
        const int t = 1 + static_cast<int>(draw_rng.uniform_int(schedule.T));
        Tensor eps(smp.z0.shape());
        draw_rng.fill_gaussian(eps.data(), eps.numel());
        const bool drop = draw_rng.uniform() < lc.cond_dropout;
        Tensor z_t = q_sample(schedule, smp.z0, t, eps);

        std::optional<Value> ctx;
        if (!drop) {
          if (lc.freeze_encoder) {
            ctx = ag::constant(smp.context);
          } else {
            std::vector<int> all(static_cast<std::size_t>(eeg_encoder.config().n_tokens()));
            std::iota(all.begin(), all.end(), 0);
            auto tokens = eeg_encoder.tokens_value(smp.segment);
            auto latents = eeg_encoder.encode_visible(tokens, all);
            auto [logits, pooled] = eeg_encoder.classify_value(latents);
            ctx = eeg_encoder.fuse_value(latents, pooled);
          }
        }
        auto pred = model.predict_value(ag::constant(z_t), t, ctx);
        terms.push_back(ag::mse(pred, ag::constant(eps)));
        if (i == b0) {
          first_pred = pred;
          first_sample = &smp;
          first_t = t;
          first_zt = z_t;
        }
      }
      auto l_ldm = ag::scale(ag::add_n(terms), 1.0 / static_cast<double>(terms.size()));

      Value total;
      double region_value = 0.0;
      bool have_region = false;
      if (region_differentiable && first_sample) {
        // one-step denoised estimate of the first sample, decoded
        const double ab = schedule.alpha_bar_at(first_t);
        auto z0_hat = ag::scale(
            ag::sub(ag::constant(first_zt), ag::scale(first_pred, std::sqrt(1.0 - ab))),
            1.0 / std::sqrt(ab));
        auto s_prime = ae.decode_value(z0_hat);
        auto l_region = region_loss_value(*trained_seg, first_sample->region_target, s_prime);
        region_value = l_region->val[0];
        have_region = true;
        total = total_finetune_loss_value(l_ldm, l_region, lc.lambda_ldm, lc.lambda_region);
      } else {
        total = ag::scale(l_ldm, lc.lambda_ldm);
        if (region_active && first_sample) {
          // evaluation-only segmenter: report the region metric, no gradient
          const double ab = schedule.alpha_bar_at(first_t);
          Tensor z0_hat(first_zt.shape());
          for (std::int64_t j = 0; j < z0_hat.numel(); ++j)
            z0_hat[j] = (first_zt[j] - std::sqrt(1.0 - ab) * first_pred->val[j]) / std::sqrt(ab);
          region_value = region_loss(*segmenter, first_sample->stimulus, ae.decode(z0_hat));
          have_region = true;
        }
      }

      if (!std::isfinite(total->val[0]))
        throw NumericalError("finetune_ldm: loss diverged (non-finite) at step " +
                             std::to_string(step));

      ag::zero_grad(train_params);
      ag::backward(total);
      opt.step(train_params);

      ++step;
      res.ldm_curve.push_back(l_ldm->val[0]);
      if (have_region) res.region_curve.push_back(region_value);
      ep_ldm += l_ldm->val[0];
      ++ep_batches;
      nlohmann::json rec = {{"step", step},
                            {"ldm_loss", l_ldm->val[0]},
                            {"total", total->val[0]},
                            {"lr", lc.lr}};
      if (have_region) rec["region_loss"] = region_value;
      log.write(rec);
    }
    res.epoch_ldm.push_back(ep_ldm / std::max(1, ep_batches));
  }

  if (!checkpoint_dir.empty()) {
    namespace fs = std::filesystem;
    model.save((fs::path(checkpoint_dir) / "denoiser.n3a").string(), step, config_hash);
    ae.save((fs::path(checkpoint_dir) / "autoencoder.n3a").string(), config_hash);
  }
  log.flush();
  return res;
}

}  // namespace neuro3d::diffusion
