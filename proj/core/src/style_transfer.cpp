#include "neuro3d/style_transfer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "neuro3d/errors.hpp"
#include "neuro3d/serialize.hpp"

namespace neuro3d::style {

using ag::Value;

FeatureExtractor::FeatureExtractor(const ExtractorConfig& cfg, Rng& rng) : cfg_(cfg) {
  int in = 3;
  for (std::size_t i = 0; i < cfg.widths.size(); ++i) {
    blocks_.emplace_back(params_, "block" + std::to_string(i), in, cfg.widths[i], 3, 2, 1, rng);
    in = cfg.widths[i];
  }
  head_ = nn::Linear(params_, "head", in, cfg.num_classes, rng);
  stamp_version();
}

void FeatureExtractor::stamp_version() {
  std::string bytes;
  for (const auto& p : params_.params())
    bytes.append(reinterpret_cast<const char*>(p->val.data()),
                 static_cast<std::size_t>(p->val.numel()) * sizeof(double));
  version_ = "fx-" + content_hash(bytes);
}

std::vector<Value> FeatureExtractor::features_value(const Value& image_chw) const {
  std::vector<Value> feats;
  Value x = image_chw;
  for (const auto& blk : blocks_) {
    x = ag::silu_(blk.forward(x));
    feats.push_back(x);
  }
  return feats;
}

FeatureStack FeatureExtractor::extract(const Image& img) const {
  FeatureStack stack;
  stack.extractor_version = version_;
  for (const auto& f : features_value(ag::constant(img.to_chw()))) stack.layers.push_back(f->val);
  return stack;
}

Value FeatureExtractor::logits_value(const Value& image_chw) const {
  auto feats = features_value(image_chw);
  auto pooled = ag::mean_hw(feats.back());
  return head_.forward_vec(pooled);
}

Tensor FeatureExtractor::class_probs(const Image& img) const {
  auto logits = logits_value(ag::constant(img.to_chw()));
  auto probs = ag::softmax_rows(ag::reshape(logits, {1, cfg_.num_classes}));
  return probs->val.reshaped({cfg_.num_classes});
}

int FeatureExtractor::classify(const Image& img) const {
  Tensor p = class_probs(img);
  int arg = 0;
  for (int k = 1; k < p.dim(0); ++k)
    if (p[k] > p[arg]) arg = k;
  return arg;
}

void FeatureExtractor::save(const std::string& path) const {
  ArchiveHeader h;
  h.version = version_;
  save_archive(path, h, params_.state());
}

FeatureExtractor FeatureExtractor::load(const std::string& path, const ExtractorConfig& cfg) {
  Rng rng(0);
  FeatureExtractor fx(cfg, rng);
  Archive a = load_archive(path);
  fx.params_.load_state(a.tensors);
  fx.version_ = a.header.version;
  return fx;
}

namespace {

void check_versions(const FeatureStack& a, const FeatureStack& b, const char* what) {
  if (a.extractor_version != b.extractor_version)
    throw ValidationError(std::string(what) + ": mixed extractor versions " +
                          a.extractor_version + " vs " + b.extractor_version);
  if (a.layers.size() != b.layers.size())
    throw ValidationError(std::string(what) + ": layer count mismatch");
}

// Gram matrix of a [c x h x w] map: (1/(h*w)) * F_flat * F_flat^T.
Value gram(const Value& f) {
  const int c = f->val.dim(0), h = f->val.dim(1), w = f->val.dim(2);
  auto flat = ag::reshape(f, {c, h * w});
  return ag::scale(ag::matmul(flat, ag::transpose(flat)), 1.0 / (static_cast<double>(h) * w));
}

constexpr double kStyleLayerWeight = 0.25;  // equal weight over the four blocks

}  // namespace

Value content_loss_value(const std::vector<Value>& fo, const FeatureStack& fc,
                         int content_layer) {
  if (content_layer < 0 || content_layer >= static_cast<int>(fo.size()) ||
      content_layer >= static_cast<int>(fc.layers.size()))
    throw ValidationError("content_loss: content layer out of range");
  return ag::mse(fo[static_cast<std::size_t>(content_layer)],
                 ag::constant(fc.layers[static_cast<std::size_t>(content_layer)]));
}

double content_loss(const FeatureStack& a, const FeatureStack& b, int content_layer) {
  check_versions(a, b, "content_loss");
  std::vector<Value> fo;
  for (const auto& l : a.layers) fo.push_back(ag::constant(l));
  return content_loss_value(fo, b, content_layer)->val[0];
}

Value style_loss_value(const std::vector<Value>& fo, const FeatureStack& fs) {
  if (fo.size() != fs.layers.size())
    throw ValidationError("style_loss: layer count mismatch");
  std::vector<Value> terms;
  for (std::size_t l = 0; l < fo.size(); ++l) {
    auto g_o = gram(fo[l]);
    auto g_s = gram(ag::constant(fs.layers[l]));
    terms.push_back(ag::scale(ag::sum(ag::square(ag::sub(g_o, g_s))), kStyleLayerWeight));
  }
  return ag::add_n(terms);
}

double style_loss(const FeatureStack& a, const FeatureStack& b) {
  check_versions(a, b, "style_loss");
  std::vector<Value> fo;
  for (const auto& l : a.layers) fo.push_back(ag::constant(l));
  return style_loss_value(fo, b)->val[0];
}

Value color_loss_value(const FeatureExtractor& extractor, const Value& render_chw,
                       const FeatureStack& content_ref, const FeatureStack& style_ref,
                       double lambda) {
  if (lambda < 0.0) throw ValidationError("color_loss: lambda must be >= 0");
  check_versions(content_ref, style_ref, "color_loss");
  if (content_ref.extractor_version != extractor.version())
    throw ValidationError("color_loss: reference stack from a different extractor version");
  auto fo = extractor.features_value(render_chw);
  auto content = content_loss_value(fo, content_ref, extractor.config().content_layer);
  auto style = style_loss_value(fo, style_ref);
  return ag::add(content, ag::scale(style, lambda));
}

double color_loss(const FeatureExtractor& extractor, const Image& render,
                  const Image& content_ref, const Image& style_ref, double lambda) {
  auto fc = extractor.extract(content_ref);
  auto fs = extractor.extract(style_ref);
  return color_loss_value(extractor, ag::constant(render.to_chw()), fc, fs, lambda)->val[0];
}

ExtractorTrainResult train_extractor(FeatureExtractor& extractor,
                                     const std::vector<Image>& images,
                                     const std::vector<int>& labels, int epochs, int batch,
                                     double lr, Rng& rng) {
  if (images.size() != labels.size() || images.empty())
    throw ValidationError("train_extractor: bad training set");
  nn::AdamOptimizer opt(lr);
  ExtractorTrainResult res;

  std::vector<Tensor> chw;
  chw.reserve(images.size());
  for (const auto& img : images) chw.push_back(img.to_chw());

  for (int epoch = 0; epoch < epochs; ++epoch) {
    std::vector<int> order(images.size());
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1],
                order[static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(i)))]);
    for (std::size_t b0 = 0; b0 < order.size(); b0 += static_cast<std::size_t>(batch)) {
      const std::size_t b1 = std::min(order.size(), b0 + static_cast<std::size_t>(batch));
      std::vector<Value> logit_rows;
      std::vector<int> batch_labels;
      for (std::size_t i = b0; i < b1; ++i) {
        const int idx = order[i];
        logit_rows.push_back(
            extractor.logits_value(ag::constant(chw[static_cast<std::size_t>(idx)])));
        batch_labels.push_back(labels[static_cast<std::size_t>(idx)]);
      }
      auto loss = ag::cross_entropy(ag::stack_rows(logit_rows), batch_labels);
      if (!std::isfinite(loss->val[0]))
        throw NumericalError("train_extractor: loss diverged");
      ag::zero_grad(extractor.params().params());
      ag::backward(loss);
      opt.step(extractor.params().params());
      res.loss_curve.push_back(loss->val[0]);
    }
  }

  int correct = 0;
  for (std::size_t i = 0; i < images.size(); ++i)
    if (extractor.classify(images[i]) == labels[i]) ++correct;
  res.train_accuracy = static_cast<double>(correct) / static_cast<double>(images.size());
  extractor.stamp_version();
  return res;
}

}  // namespace neuro3d::style
