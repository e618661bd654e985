#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "neuro3d/autodiff.hpp"
#include "neuro3d/config.hpp"
#include "neuro3d/eeg_data.hpp"
#include "neuro3d/nn.hpp"
#include "neuro3d/rng.hpp"

namespace neuro3d::encoder {

struct TokenSequence {
  Tensor tokens;  // [n_tokens x token_dim]
  int patch_len = 0;
  std::string source_segment;

  int n_tokens() const { return tokens.dim(0); }
  int token_dim() const { return tokens.dim(1); }
};

struct MaskPlan {
  std::vector<char> masked;  // length n_tokens
  double ratio = 0.0;

  int n_tokens() const { return static_cast<int>(masked.size()); }
  int count_masked() const;
  std::vector<int> masked_indices() const;
  std::vector<int> visible_indices() const;
};

// Exactly round(ratio * n_tokens) positions drawn uniformly without
// replacement; throws if the rounded count degenerates to 0 or n_tokens.
MaskPlan sample_mask(int n_tokens, double ratio, Rng& rng);

struct LatentEEGCode {
  Tensor context;      // [L x D]
  Tensor class_token;  // [D]
  Tensor logits;       // [num_classes]
};

struct EncoderConfig {
  int channels = 8;
  int timesteps = 128;
  int num_classes = 4;
  int patch_len = 8;
  int token_dim = 64;
  int d_model = 64;
  int heads = 4;
  int enc_layers = 2;
  int dec_layers = 2;
  int cls_layers = 2;
  int fusion_dim = 128;
  double mask_ratio = 0.75;

  int n_tokens() const { return timesteps / patch_len; }
  static EncoderConfig from_pipeline(const PipelineConfig& cfg, int num_classes);
};

// Stage A model: masked token reconstruction + temporal-transformer
// classification, fused into latent EEG codes.
class EEGEncoder {
public:
  EEGEncoder(const EncoderConfig& cfg, Rng& init_rng);

  const EncoderConfig& config() const { return cfg_; }
  nn::ParamSet& params() { return params_; }
  const nn::ParamSet& params() const { return params_; }

  // Time-patch tokenization: token i is the flattened [channels x patch_len]
  // slice starting at i*patch_len (tail truncated), linearly projected.
  TokenSequence tokenize(const eeg::EEGSegment& segment, int patch_len) const;
  TokenSequence tokenize(const eeg::EEGSegment& segment) const {
    return tokenize(segment, cfg_.patch_len);
  }

  // Encoder sees only visible tokens (with their positional encodings);
  // decoder predicts every position in token space.
  Tensor mae_reconstruct(const TokenSequence& tokens, const MaskPlan& plan) const;

  std::pair<Tensor /*logits*/, Tensor /*class_token*/> classify(const TokenSequence& tokens) const;

  LatentEEGCode fuse_codes(const Tensor& encoder_latents, const Tensor& class_token) const;

  // Full inference path: segment -> latent EEG code.
  LatentEEGCode encode(const eeg::EEGSegment& segment) const;

  // --- autodiff graph builders (used by training and the gradient suite) ---
  ag::Value tokens_value(const eeg::EEGSegment& segment) const;
  ag::Value encode_visible(const ag::Value& tokens, const std::vector<int>& visible) const;
  ag::Value decode_full(const ag::Value& encoded_visible, const MaskPlan& plan) const;
  std::pair<ag::Value, ag::Value> classify_value(const ag::Value& encoder_latents) const;
  ag::Value fuse_value(const ag::Value& encoder_latents, const ag::Value& class_token) const;

  ag::Value joint_loss(const eeg::EEGSegment& segment, const MaskPlan& plan, double w_mae,
                       double w_cls) const;

  void save(const std::string& path, std::int64_t step, const std::string& config_hash) const;
  static EEGEncoder load(const std::string& path, const EncoderConfig& cfg);

private:
  Tensor raw_patches(const eeg::EEGSegment& segment, int patch_len) const;

  EncoderConfig cfg_;
  nn::ParamSet params_;
  nn::Linear embed_;
  nn::Linear enc_in_;
  std::vector<nn::TransformerBlock> enc_blocks_;
  nn::LayerNorm enc_norm_;
  ag::Value mask_token_;
  nn::Linear dec_in_;
  std::vector<nn::TransformerBlock> dec_blocks_;
  nn::LayerNorm dec_norm_;
  nn::Linear dec_head_;
  ag::Value cls_token_;
  std::vector<nn::TransformerBlock> cls_blocks_;
  nn::LayerNorm cls_norm_;
  nn::Linear cls_head_;
  nn::Linear fuse_;
  nn::Linear fuse_cls_;
  Tensor posenc_;  // [n_tokens x d_model]
};

// MSE restricted to masked positions; invariant to reconstructed values at
// unmasked positions.
double mae_loss(const Tensor& reconstructed, const Tensor& target, const MaskPlan& plan);
ag::Value mae_loss_value(const ag::Value& reconstructed, const ag::Value& target,
                         const MaskPlan& plan);

struct StageATrainResult {
  std::vector<double> mae_curve;   // per step
  std::vector<double> cls_curve;   // per step
  std::vector<double> epoch_mae;   // per epoch means
  std::vector<double> epoch_cls;
  std::vector<double> val_accuracy;  // per epoch
  double masked_mse_val = 0.0;       // final masked-token MSE on the val split
  double val_token_variance = 0.0;   // variance of val tokens, the MAE baseline
};

// Joint optimization of w_mae * mae_loss + w_cls * cross_entropy over the
// train split; logs one JSONL record per step; checkpoints periodically when
// checkpoint_dir is nonempty. Throws NumericalError on divergence.
StageATrainResult train_stage_a(const eeg::Dataset& data, const PipelineConfig& cfg,
                                EEGEncoder& model, const std::string& log_path = "",
                                const std::string& checkpoint_dir = "");

double validation_accuracy(const eeg::Dataset& data, const PipelineConfig& cfg,
                           const EEGEncoder& model, const std::string& split);

}  // namespace neuro3d::encoder
