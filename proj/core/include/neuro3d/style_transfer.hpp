#pragma once

#include <string>
#include <vector>

#include "neuro3d/autodiff.hpp"
#include "neuro3d/eeg_data.hpp"
#include "neuro3d/image.hpp"
#include "neuro3d/nn.hpp"
#include "neuro3d/rng.hpp"

namespace neuro3d::style {

struct FeatureStack {
  std::vector<Tensor> layers;  // per-block [c_l x h_l x w_l]
  std::string extractor_version;
};

struct ExtractorConfig {
  int image_size = 32;
  int num_classes = 4;
  std::vector<int> widths = {16, 32, 48, 64};
  int content_layer = 2;  // block index used by the content loss
};

// Small fixed convolutional feature pyramid, pretrained once on the synthetic
// image classification task and then frozen. The version stamp is a hash of
// the weights; losses refuse to mix stacks from different versions.
class FeatureExtractor {
public:
  FeatureExtractor(const ExtractorConfig& cfg, Rng& rng);

  const ExtractorConfig& config() const { return cfg_; }
  const std::string& version() const { return version_; }
  nn::ParamSet& params() { return params_; }
  const nn::ParamSet& params() const { return params_; }
  void stamp_version();

  std::vector<ag::Value> features_value(const ag::Value& image_chw) const;
  FeatureStack extract(const Image& img) const;

  // Classifier head kept from pretraining; doubles as the oracle image
  // classifier for the conditioning tests and the inception-score inputs.
  ag::Value logits_value(const ag::Value& image_chw) const;
  Tensor class_probs(const Image& img) const;
  int classify(const Image& img) const;

  void save(const std::string& path) const;
  static FeatureExtractor load(const std::string& path, const ExtractorConfig& cfg);

private:
  ExtractorConfig cfg_;
  nn::ParamSet params_;
  std::vector<nn::Conv2d> blocks_;
  nn::Linear head_;
  std::string version_;
};

// MSE over the designated content layer(s); zero iff the features agree.
double content_loss(const FeatureStack& a, const FeatureStack& b, int content_layer = 2);
ag::Value content_loss_value(const std::vector<ag::Value>& fo, const FeatureStack& fc,
                             int content_layer = 2);

// Gram-matrix Frobenius distance summed over blocks with equal weights.
double style_loss(const FeatureStack& a, const FeatureStack& b);
ag::Value style_loss_value(const std::vector<ag::Value>& fo, const FeatureStack& fs);

// content_loss(phi(render), phi(content_ref)) + lambda * style_loss(phi(render), phi(style_ref))
double color_loss(const FeatureExtractor& extractor, const Image& render,
                  const Image& content_ref, const Image& style_ref, double lambda);
ag::Value color_loss_value(const FeatureExtractor& extractor, const ag::Value& render_chw,
                           const FeatureStack& content_ref, const FeatureStack& style_ref,
                           double lambda);

// Supervised pretraining on (image, category) pairs; stamps the version.
struct ExtractorTrainResult {
  double train_accuracy = 0.0;
  std::vector<double> loss_curve;
};
ExtractorTrainResult train_extractor(FeatureExtractor& extractor,
                                     const std::vector<Image>& images,
                                     const std::vector<int>& labels, int epochs, int batch,
                                     double lr, Rng& rng);

}  // namespace neuro3d::style
