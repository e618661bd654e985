#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "neuro3d/autodiff.hpp"
#include "neuro3d/config.hpp"
#include "neuro3d/eeg_data.hpp"
#include "neuro3d/eeg_encoder.hpp"
#include "neuro3d/image.hpp"
#include "neuro3d/nn.hpp"
#include "neuro3d/rng.hpp"

namespace neuro3d::diffusion {

// Discrete-time coefficients shared by training, sampling and score
// distillation. Linear beta schedule.
struct NoiseSchedule {
  int T = 0;
  std::vector<double> beta;       // [T], strictly positive, nondecreasing
  std::vector<double> alpha;      // 1 - beta
  std::vector<double> alpha_bar;  // running product, strictly decreasing

  // t is 1-based (1..T).
  double alpha_bar_at(int t) const;
  void check_t(int t) const;
};

NoiseSchedule make_schedule(int T, double beta_start, double beta_end);

// Forward process closed form: sqrt(abar_t) z0 + sqrt(1 - abar_t) eps.
Tensor q_sample(const NoiseSchedule& s, const Tensor& z0, int t, const Tensor& eps);

// ------------------------------------------------------------- autoencoder

struct AutoencoderConfig {
  int image_size = 32;
  int width = 32;
  int latent_channels = 4;
  int latent_size() const { return image_size / 4; }
};

class ImageAutoencoder {
public:
  ImageAutoencoder(const AutoencoderConfig& cfg, Rng& rng);

  const AutoencoderConfig& config() const { return cfg_; }
  nn::ParamSet& params() { return params_; }
  const nn::ParamSet& params() const { return params_; }

  ag::Value encode_value(const ag::Value& image_chw) const;
  ag::Value decode_value(const ag::Value& z) const;
  Tensor encode(const Image& img) const;
  Image decode(const Tensor& z) const;  // output clamped to [0,1]

  void save(const std::string& path, const std::string& config_hash = "") const;
  static ImageAutoencoder load(const std::string& path, const AutoencoderConfig& cfg);

private:
  AutoencoderConfig cfg_;
  nn::ParamSet params_;
  nn::Conv2d e1_, e2_, e3_;
  nn::Conv2d d1_, d2_, d3_;
};

struct AePretrainResult {
  double train_psnr = 0.0;
  std::vector<double> loss_curve;
};

AePretrainResult pretrain_autoencoder(ImageAutoencoder& ae, const std::vector<Image>& images,
                                      int epochs, int batch, double lr, Rng& rng);

// ---------------------------------------------------------------- denoiser

struct DenoiserConfig {
  int latent_channels = 4;
  int latent_size = 8;
  int width = 48;
  int context_dim = 128;  // D of the latent EEG code
  int time_dim = 32;
  int heads = 2;
};

// UNet-style eps-predictor. Conditioning enters only through bias-free
// cross-attention over the code context (set semantics, no positional
// encoding), so predictions with a zero context equal the unconditional path.
class Denoiser {
public:
  Denoiser(const DenoiserConfig& cfg, Rng& rng);

  const DenoiserConfig& config() const { return cfg_; }
  nn::ParamSet& params() { return params_; }
  const nn::ParamSet& params() const { return params_; }

  // context absent = unconditional branch (cross-attention skipped).
  ag::Value predict_value(const ag::Value& z_t, int t, const std::optional<ag::Value>& context) const;
  Tensor predict(const Tensor& z_t, int t, const std::optional<Tensor>& context) const;

  void save(const std::string& path, std::int64_t step, const std::string& config_hash) const;
  static Denoiser load(const std::string& path, const DenoiserConfig& cfg);

private:
  struct ResBlock {
    nn::Conv2d c1, c2;
    ag::Value n1g, n1b, n2g, n2b;
    nn::Linear t_proj;
  };
  ResBlock make_res(const std::string& name, int ch, Rng& rng);
  ag::Value res_forward(const ResBlock& blk, const ag::Value& x, const ag::Value& t_emb) const;
  ag::Value attn_forward(const nn::MultiheadAttention& attn, const ag::Value& x,
                         const std::optional<ag::Value>& context) const;

  DenoiserConfig cfg_;
  nn::ParamSet params_;
  nn::Linear t1_, t2_;
  nn::Conv2d conv_in_;
  ResBlock res1_;
  nn::MultiheadAttention attn1_;
  nn::Conv2d down_;
  ResBlock res2_;
  nn::MultiheadAttention attn2_;
  ResBlock mid_;
  nn::Conv2d up_;
  nn::Conv2d skip_merge_;
  ResBlock res3_;
  nn::MultiheadAttention attn3_;
  ag::Value out_ng_, out_nb_;
  nn::Conv2d conv_out_;
};

// Eq. 1: E_{t, eps}[ ||eps - eps_theta(z_t, t, tau(y))||^2 ], single draw.
struct LdmLossDraw {
  int t = 0;
  Tensor eps;
  Tensor z_t;
};

ag::Value ldm_loss_value(const Denoiser& model, const NoiseSchedule& s, const Tensor& z0,
                         const std::optional<Tensor>& context, Rng& rng,
                         LdmLossDraw* draw = nullptr);
double ldm_loss(const Denoiser& model, const NoiseSchedule& s, const Tensor& z0,
                const std::optional<Tensor>& context, Rng& rng);
// Mock-friendly variant for oracle tests: eps_model(z_t, t) -> eps_hat.
double ldm_loss_with(const std::function<Tensor(const Tensor&, int)>& eps_model,
                     const NoiseSchedule& s, const Tensor& z0, Rng& rng);

// -------------------------------------------------------------- segmenters

// Behavioral stand-in for the pretrained region-map model: per-pixel class
// probabilities over M classes, summing to 1.
class Segmenter {
public:
  virtual ~Segmenter() = default;
  virtual Tensor probs(const Image& img) const = 0;  // [M x H x W]
  LabelMap segment(const Image& img) const;          // argmax over classes
  virtual bool differentiable() const { return false; }
};

// Labels by geometry: pixels that differ from the white background are the
// object. Exact one-hot probabilities; evaluation-only (not differentiable).
class OracleShapeSegmenter final : public Segmenter {
public:
  explicit OracleShapeSegmenter(double threshold = 0.1) : threshold_(threshold) {}
  Tensor probs(const Image& img) const override;

private:
  double threshold_;
};

class TrainedSegmenter final : public Segmenter {
public:
  TrainedSegmenter(int num_classes, Rng& rng);

  Tensor probs(const Image& img) const override;
  bool differentiable() const override { return true; }
  ag::Value probs_value(const ag::Value& image_chw) const;  // [M x H x W]
  ag::Value logits_hw_value(const ag::Value& image_chw) const;  // [H*W x M]

  int num_classes() const { return num_classes_; }
  nn::ParamSet& params() { return params_; }
  const nn::ParamSet& params() const { return params_; }

  void save(const std::string& path) const;
  static TrainedSegmenter load(const std::string& path, int num_classes);

private:
  int num_classes_;
  nn::ParamSet params_;
  nn::Conv2d c1_, c2_, c3_;
};

double train_segmenter(TrainedSegmenter& seg, const std::vector<Image>& images,
                       const std::vector<LabelMap>& labels, int epochs, double lr, Rng& rng);

// Eq. 2: -(1/N) sum_i sum_k p_{i,k} log(p_hat_{i,k}), p one-hot from the
// segmentation of S, p_hat the probabilities on S'; log clamped at 1e-12.
double region_loss(const Segmenter& segmenter, const Image& s, const Image& s_prime);
// Differentiable variant against fixed target labels.
ag::Value region_loss_value(const TrainedSegmenter& segmenter, const LabelMap& target,
                            const ag::Value& s_prime_chw);

// Eq. 3.
double total_finetune_loss(double l_ldm, double l_region, double lambda_ldm,
                           double lambda_region);
ag::Value total_finetune_loss_value(const ag::Value& l_ldm, const ag::Value& l_region,
                                    double lambda_ldm, double lambda_region);

// ---------------------------------------------------------------- sampling

struct SampleOptions {
  int steps = 50;
  std::optional<double> guidance;  // classifier-free guidance scale
};

// Deterministic DDIM loop from z_T ~ N(0, I); returns the final latent.
Tensor sample_latent(const Denoiser& model, const NoiseSchedule& s,
                     const std::optional<Tensor>& context, const SampleOptions& opt, Rng& rng);
Image sample(const Denoiser& model, const ImageAutoencoder& ae, const NoiseSchedule& s,
             const std::optional<Tensor>& context, const SampleOptions& opt, Rng& rng);

// ---------------------------------------------------------------- training

struct LdmTrainResult {
  std::vector<double> ldm_curve;     // per step
  std::vector<double> region_curve;  // per step where computed
  std::vector<double> epoch_ldm;     // per epoch means
};

// Optimizes Eq. 3 over the train split with EEG codes from the (frozen by
// default) Stage-A encoder. The region term reuses the current batch draw via
// the one-step denoised estimate and backpropagates through decode when the
// segmenter is differentiable; with a non-differentiable segmenter it is
// logged as a validation metric only.
LdmTrainResult finetune_ldm(const eeg::Dataset& data, const PipelineConfig& cfg,
                            const encoder::EEGEncoder& eeg_encoder, ImageAutoencoder& ae,
                            Denoiser& model, const Segmenter* segmenter,
                            const std::string& log_path = "",
                            const std::string& checkpoint_dir = "");

}  // namespace neuro3d::diffusion
