#include "neuro3d/eeg_encoder.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

#include "internal/jsonl.hpp"
#include "neuro3d/serialize.hpp"

namespace neuro3d::encoder {

using ag::Value;

int MaskPlan::count_masked() const {
  return static_cast<int>(std::count(masked.begin(), masked.end(), 1));
}

std::vector<int> MaskPlan::masked_indices() const {
  std::vector<int> out;
  for (std::size_t i = 0; i < masked.size(); ++i)
    if (masked[i]) out.push_back(static_cast<int>(i));
  return out;
}

std::vector<int> MaskPlan::visible_indices() const {
  std::vector<int> out;
  for (std::size_t i = 0; i < masked.size(); ++i)
    if (!masked[i]) out.push_back(static_cast<int>(i));
  return out;
}

MaskPlan sample_mask(int n_tokens, double ratio, Rng& rng) {
  if (n_tokens < 2) throw ValidationError("sample_mask: n_tokens must be >= 2");
  if (!(ratio > 0.0 && ratio < 1.0)) throw ValidationError("sample_mask: ratio must be in (0,1)");
  const int k = static_cast<int>(std::lround(ratio * n_tokens));
  if (k <= 0 || k >= n_tokens)
    throw ValidationError("sample_mask: ratio " + std::to_string(ratio) + " over " +
                          std::to_string(n_tokens) + " tokens yields a degenerate mask");
  MaskPlan plan;
  plan.ratio = ratio;
  plan.masked.assign(static_cast<std::size_t>(n_tokens), 0);
  for (int idx : rng.sample_without_replacement(n_tokens, k))
    plan.masked[static_cast<std::size_t>(idx)] = 1;
  return plan;
}

EncoderConfig EncoderConfig::from_pipeline(const PipelineConfig& cfg, int num_classes) {
  EncoderConfig e;
  e.channels = cfg.dataset.channels;
  e.timesteps = cfg.dataset.timesteps;
  e.num_classes = num_classes;
  e.patch_len = cfg.stage_a.patch_len;
  e.token_dim = cfg.stage_a.token_dim;
  e.d_model = cfg.stage_a.d_model;
  e.heads = cfg.stage_a.heads;
  e.enc_layers = cfg.stage_a.enc_layers;
  e.dec_layers = cfg.stage_a.dec_layers;
  e.cls_layers = cfg.stage_a.cls_layers;
  e.fusion_dim = cfg.stage_a.fusion_dim;
  e.mask_ratio = cfg.stage_a.mask_ratio;
  return e;
}

EEGEncoder::EEGEncoder(const EncoderConfig& cfg, Rng& rng) : cfg_(cfg) {
  const int d = cfg.d_model;
  embed_ = nn::Linear(params_, "embed", cfg.channels * cfg.patch_len, cfg.token_dim, rng);
  enc_in_ = nn::Linear(params_, "enc_in", cfg.token_dim, d, rng);
  for (int i = 0; i < cfg.enc_layers; ++i)
    enc_blocks_.emplace_back(params_, "enc." + std::to_string(i), d, cfg.heads, 2 * d, rng);
  enc_norm_ = nn::LayerNorm(params_, "enc_norm", d);
  mask_token_ = params_.add("mask_token", nn::gaussian_init(rng, {d}, 0.02));
  dec_in_ = nn::Linear(params_, "dec_in", d, d, rng);
  for (int i = 0; i < cfg.dec_layers; ++i)
    dec_blocks_.emplace_back(params_, "dec." + std::to_string(i), d, cfg.heads, 2 * d, rng);
  dec_norm_ = nn::LayerNorm(params_, "dec_norm", d);
  dec_head_ = nn::Linear(params_, "dec_head", d, cfg.token_dim, rng);
  cls_token_ = params_.add("cls_token", nn::gaussian_init(rng, {d}, 0.02));
  for (int i = 0; i < cfg.cls_layers; ++i)
    cls_blocks_.emplace_back(params_, "cls." + std::to_string(i), d, cfg.heads, 2 * d, rng);
  cls_norm_ = nn::LayerNorm(params_, "cls_norm", d);
  cls_head_ = nn::Linear(params_, "cls_head", d, cfg.num_classes, rng);
  fuse_ = nn::Linear(params_, "fuse", 2 * d, cfg.fusion_dim, rng);
  fuse_cls_ = nn::Linear(params_, "fuse_cls", d, cfg.fusion_dim, rng);
  posenc_ = nn::positional_encoding_rows(cfg.n_tokens(), d);
}

TokenSequence EEGEncoder::tokenize(const eeg::EEGSegment& segment, int patch_len) const {
  if (patch_len < 1 || patch_len > segment.timesteps())
    throw ValidationError("tokenize: patch_len " + std::to_string(patch_len) +
                          " out of range for " + std::to_string(segment.timesteps()) +
                          " timesteps");
  auto v = raw_patches(segment, patch_len);
  auto tokens = embed_.forward(ag::constant(std::move(v)));
  TokenSequence out;
  out.tokens = tokens->val;
  out.patch_len = patch_len;
  out.source_segment = segment.segment_id;
  return out;
}

Tensor EEGEncoder::raw_patches(const eeg::EEGSegment& segment, int patch_len) const {
  const int n = segment.timesteps() / patch_len;
  const int ch = segment.channels();
  Tensor patches({n, ch * patch_len});
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < ch; ++c)
      for (int t = 0; t < patch_len; ++t)
        patches.at(i, c * patch_len + t) = segment.data.at(c, i * patch_len + t);
  return patches;
}

Value EEGEncoder::tokens_value(const eeg::EEGSegment& segment) const {
  return embed_.forward(ag::constant(raw_patches(segment, cfg_.patch_len)));
}

Value EEGEncoder::encode_visible(const Value& tokens, const std::vector<int>& visible) const {
  auto x = enc_in_.forward(tokens);
  x = ag::gather_rows(x, visible);
  Tensor pe({static_cast<int>(visible.size()), cfg_.d_model});
  for (std::size_t i = 0; i < visible.size(); ++i)
    for (int j = 0; j < cfg_.d_model; ++j)
      pe.at(static_cast<int>(i), j) = posenc_.at(visible[i], j);
  x = ag::add(x, ag::constant(std::move(pe)));
  for (const auto& blk : enc_blocks_) x = blk.forward(x);
  return enc_norm_.forward(x);
}

Value EEGEncoder::decode_full(const Value& encoded_visible, const MaskPlan& plan) const {
  const int n = plan.n_tokens();
  auto x = ag::row_scatter(n, plan.visible_indices(), dec_in_.forward(encoded_visible),
                           mask_token_);
  x = ag::add(x, ag::constant(posenc_));
  for (const auto& blk : dec_blocks_) x = blk.forward(x);
  return dec_head_.forward(dec_norm_.forward(x));
}

Tensor EEGEncoder::mae_reconstruct(const TokenSequence& tokens, const MaskPlan& plan) const {
  if (plan.n_tokens() != tokens.n_tokens())
    throw ValidationError("mae_reconstruct: plan length does not match token count");
  auto t = ag::constant(tokens.tokens);
  auto enc = encode_visible(t, plan.visible_indices());
  return decode_full(enc, plan)->val;
}

std::pair<Value, Value> EEGEncoder::classify_value(const Value& encoder_latents) const {
  auto seq = ag::concat_rows(ag::reshape(cls_token_, {1, cfg_.d_model}), encoder_latents);
  for (const auto& blk : cls_blocks_) seq = blk.forward(seq);
  seq = cls_norm_.forward(seq);
  auto pooled = ag::slice_rows(seq, 0, 1);  // [1 x d]
  auto logits = cls_head_.forward(pooled);  // [1 x K]
  return {ag::reshape(logits, {cfg_.num_classes}), ag::reshape(pooled, {cfg_.d_model})};
}

std::pair<Tensor, Tensor> EEGEncoder::classify(const TokenSequence& tokens) const {
  std::vector<int> all(static_cast<std::size_t>(tokens.n_tokens()));
  std::iota(all.begin(), all.end(), 0);
  auto latents = encode_visible(ag::constant(tokens.tokens), all);
  auto [logits, pooled] = classify_value(latents);
  return {logits->val, pooled->val};
}

Value EEGEncoder::fuse_value(const Value& encoder_latents, const Value& class_token) const {
  const int n = encoder_latents->val.dim(0);
  auto ctx_in = ag::concat_cols(encoder_latents, ag::broadcast_row(class_token, n));
  return fuse_.forward(ctx_in);
}

LatentEEGCode EEGEncoder::fuse_codes(const Tensor& encoder_latents,
                                     const Tensor& class_token) const {
  LatentEEGCode code;
  code.context = fuse_value(ag::constant(encoder_latents), ag::constant(class_token))->val;
  code.class_token = fuse_cls_.forward_vec(ag::constant(class_token))->val;
  return code;
}

LatentEEGCode EEGEncoder::encode(const eeg::EEGSegment& segment) const {
  std::vector<int> all(static_cast<std::size_t>(cfg_.n_tokens()));
  std::iota(all.begin(), all.end(), 0);
  auto tokens = tokens_value(segment);
  auto latents = encode_visible(tokens, all);
  auto [logits, pooled] = classify_value(latents);
  LatentEEGCode code;
  code.context = fuse_value(latents, pooled)->val;
  code.class_token = fuse_cls_.forward_vec(pooled)->val;
  code.logits = logits->val;
  return code;
}

double mae_loss(const Tensor& reconstructed, const Tensor& target, const MaskPlan& plan) {
  if (!reconstructed.same_shape(target))
    throw ValidationError("mae_loss: shape mismatch");
  if (plan.n_tokens() != reconstructed.dim(0))
    throw ValidationError("mae_loss: plan length mismatch");
  const auto masked = plan.masked_indices();
  if (masked.empty()) return 0.0;
  const int d = reconstructed.dim(1);
  double acc = 0.0;
  for (int i : masked)
    for (int j = 0; j < d; ++j) {
      const double e = reconstructed.at(i, j) - target.at(i, j);
      acc += e * e;
    }
  return acc / (static_cast<double>(masked.size()) * d);
}

Value mae_loss_value(const Value& reconstructed, const Value& target, const MaskPlan& plan) {
  const auto masked = plan.masked_indices();
  return ag::mse(ag::gather_rows(reconstructed, masked), ag::gather_rows(target, masked));
}

Value EEGEncoder::joint_loss(const eeg::EEGSegment& segment, const MaskPlan& plan, double w_mae,
                             double w_cls) const {
  auto tokens = tokens_value(segment);
  auto target = ag::stop_grad(tokens);
  auto enc_vis = encode_visible(tokens, plan.visible_indices());
  auto recon = decode_full(enc_vis, plan);
  auto l_mae = mae_loss_value(recon, target, plan);

  std::vector<int> all(static_cast<std::size_t>(plan.n_tokens()));
  std::iota(all.begin(), all.end(), 0);
  auto latents = encode_visible(tokens, all);
  auto [logits, pooled] = classify_value(latents);
  auto l_cls = ag::cross_entropy(ag::reshape(logits, {1, cfg_.num_classes}), {segment.label});
  return ag::add(ag::scale(l_mae, w_mae), ag::scale(l_cls, w_cls));
}

void EEGEncoder::save(const std::string& path, std::int64_t step,
                      const std::string& config_hash) const {
  ArchiveHeader h;
  h.step = step;
  h.config_hash = config_hash;
  save_archive(path, h, params_.state());
}

EEGEncoder EEGEncoder::load(const std::string& path, const EncoderConfig& cfg) {
  Rng rng(0);
  EEGEncoder model(cfg, rng);
  model.params_.load_state(load_archive(path).tensors);
  return model;
}

namespace {

std::vector<eeg::EEGSegment> load_split(const eeg::Dataset& data, const PipelineConfig& cfg,
                                        const std::string& split) {
  eeg::PreprocessConfig pp;
  if (cfg.dataset.normalize == "per_channel_z")
    pp.normalize = eeg::PreprocessConfig::Normalize::per_channel_z;
  else if (cfg.dataset.normalize == "global_z")
    pp.normalize = eeg::PreprocessConfig::Normalize::global_z;
  else
    pp.normalize = eeg::PreprocessConfig::Normalize::none;

  std::vector<eeg::EEGSegment> out;
  auto it = data.segments_in_split(split);
  while (auto seg = it.next()) out.push_back(eeg::preprocess(*seg, pp));
  return out;
}

}  // namespace

double validation_accuracy(const eeg::Dataset& data, const PipelineConfig& cfg,
                           const EEGEncoder& model, const std::string& split) {
  const auto segs = load_split(data, cfg, split);
  if (segs.empty()) return 0.0;
  int correct = 0;
  for (const auto& seg : segs) {
    auto [logits, pooled] = model.classify(model.tokenize(seg));
    int arg = 0;
    for (int k = 1; k < logits.dim(0); ++k)
      if (logits[k] > logits[arg]) arg = k;
    if (arg == seg.label) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(segs.size());
}

StageATrainResult train_stage_a(const eeg::Dataset& data, const PipelineConfig& cfg,
                                EEGEncoder& model, const std::string& log_path,
                                const std::string& checkpoint_dir) {
  const auto& sa = cfg.stage_a;
  auto train = load_split(data, cfg, "train");
  auto val = load_split(data, cfg, "val");
  if (train.empty()) throw ValidationError("train_stage_a: empty train split");

  internal::JsonlWriter log(log_path);
  Rng shuffle_rng(derive_seed(cfg.seed, "stage_a/shuffle"));
  Rng mask_rng(derive_seed(cfg.seed, "stage_a/mask"));
  nn::AdamOptimizer opt(sa.lr);
  const std::string config_hash = cfg.hash();

  StageATrainResult res;
  const int n_tokens = model.config().n_tokens();
  std::int64_t step = 0;

  for (int epoch = 0; epoch < sa.epochs; ++epoch) {
    std::vector<int> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[static_cast<std::size_t>(shuffle_rng.uniform_int(
                                  static_cast<std::int64_t>(i)))]);

    double ep_mae = 0.0, ep_cls = 0.0;
    int ep_batches = 0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += static_cast<std::size_t>(sa.batch)) {
      const std::size_t b1 = std::min(order.size(), b0 + static_cast<std::size_t>(sa.batch));
      std::vector<Value> mae_terms, cls_terms;
      for (std::size_t i = b0; i < b1; ++i) {
        const auto& seg = train[static_cast<std::size_t>(order[i])];
        MaskPlan plan = sample_mask(n_tokens, sa.mask_ratio, mask_rng);
        auto tokens = model.tokens_value(seg);
        auto target = ag::stop_grad(tokens);
        auto enc_vis = model.encode_visible(tokens, plan.visible_indices());
        auto recon = model.decode_full(enc_vis, plan);
        mae_terms.push_back(mae_loss_value(recon, target, plan));

        std::vector<int> all(static_cast<std::size_t>(n_tokens));
        std::iota(all.begin(), all.end(), 0);
        auto latents = model.encode_visible(tokens, all);
        auto [logits, pooled] = model.classify_value(latents);
        cls_terms.push_back(
            ag::cross_entropy(ag::reshape(logits, {1, model.config().num_classes}), {seg.label}));
      }
      const double inv = 1.0 / static_cast<double>(mae_terms.size());
      auto mean_mae = ag::scale(ag::add_n(mae_terms), inv);
      auto mean_cls = ag::scale(ag::add_n(cls_terms), inv);
      auto total = ag::add(ag::scale(mean_mae, sa.w_mae), ag::scale(mean_cls, sa.w_cls));

      if (!std::isfinite(total->val[0]))
        throw NumericalError("train_stage_a: loss diverged (non-finite) at step " +
                             std::to_string(step));

      ag::zero_grad(model.params().params());
      ag::backward(total);
      opt.step(model.params().params());

      ++step;
      res.mae_curve.push_back(mean_mae->val[0]);
      res.cls_curve.push_back(mean_cls->val[0]);
      ep_mae += mean_mae->val[0];
      ep_cls += mean_cls->val[0];
      ++ep_batches;
      log.write({{"step", step},
                 {"mae_loss", mean_mae->val[0]},
                 {"cls_loss", mean_cls->val[0]},
                 {"total", total->val[0]},
                 {"lr", sa.lr}});
      if (!checkpoint_dir.empty() && sa.checkpoint_every > 0 &&
          step % sa.checkpoint_every == 0) {
        char name[64];
        std::snprintf(name, sizeof(name), "stage_a_step_%06lld.n3a",
                      static_cast<long long>(step));
        model.save((std::filesystem::path(checkpoint_dir) / name).string(), step, config_hash);
      }
    }
    res.epoch_mae.push_back(ep_mae / std::max(1, ep_batches));
    res.epoch_cls.push_back(ep_cls / std::max(1, ep_batches));
    res.val_accuracy.push_back(validation_accuracy(data, cfg, model, "val"));
  }

  // final masked-token MSE on val vs the token-variance baseline
  if (!val.empty()) {
    Rng eval_rng(derive_seed(cfg.seed, "stage_a/eval_mask"));
    double mse_acc = 0.0, mean_acc = 0.0, sq_acc = 0.0;
    std::int64_t count = 0;
    for (const auto& seg : val) {
      auto tokens = model.tokenize(seg);
      MaskPlan plan = sample_mask(n_tokens, sa.mask_ratio, eval_rng);
      Tensor recon = model.mae_reconstruct(tokens, plan);
      mse_acc += mae_loss(recon, tokens.tokens, plan);
      for (std::int64_t i = 0; i < tokens.tokens.numel(); ++i) {
        mean_acc += tokens.tokens[i];
        sq_acc += tokens.tokens[i] * tokens.tokens[i];
        ++count;
      }
    }
    res.masked_mse_val = mse_acc / static_cast<double>(val.size());
    const double mu = mean_acc / static_cast<double>(count);
    res.val_token_variance = sq_acc / static_cast<double>(count) - mu * mu;
  }

  if (!checkpoint_dir.empty())
    model.save((std::filesystem::path(checkpoint_dir) / "stage_a.n3a").string(), step,
               config_hash);
  log.flush();
  return res;
}

}  // namespace neuro3d::encoder
