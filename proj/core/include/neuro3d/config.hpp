#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "neuro3d/errors.hpp"

namespace neuro3d {

// Just enough TOML for the pipeline config: [section] headers, scalar
// key = value pairs (string, int, float, bool) and flat arrays.
class TomlTable {
public:
  using Scalar = std::variant<std::string, std::int64_t, double, bool>;
  using Array = std::vector<Scalar>;

  static TomlTable parse(const std::string& text);
  static TomlTable parse_file(const std::string& path);

  bool has(const std::string& section, const std::string& key) const;
  std::string get_str(const std::string& section, const std::string& key,
                      const std::string& fallback) const;
  std::int64_t get_int(const std::string& section, const std::string& key,
                       std::int64_t fallback) const;
  double get_double(const std::string& section, const std::string& key, double fallback) const;
  bool get_bool(const std::string& section, const std::string& key, bool fallback) const;
  std::vector<double> get_double_array(const std::string& section, const std::string& key,
                                       std::vector<double> fallback) const;

private:
  const Scalar* find(const std::string& section, const std::string& key) const;
  std::map<std::string, std::map<std::string, Scalar>> scalars_;
  std::map<std::string, std::map<std::string, Array>> arrays_;
};

struct DatasetConfig {
  std::string layout = "synthetic";  // synthetic | eeg_imagenet | things_eeg2
  std::string root = "data/synthetic";
  std::string band = "synthetic";    // band_14_70 | band_5_95 | band_55_95 | synthetic
  int num_classes = 4;
  int segments_per_class = 20;
  int channels = 8;
  int timesteps = 128;
  int image_size = 32;
  std::string normalize = "per_channel_z";  // per_channel_z | global_z | none
};

struct StageAConfig {
  int patch_len = 8;
  int token_dim = 64;
  int d_model = 64;
  int heads = 4;
  int enc_layers = 2;
  int dec_layers = 2;
  int cls_layers = 2;
  int fusion_dim = 128;  // D of the latent EEG code
  double mask_ratio = 0.75;
  int epochs = 5;
  int batch = 16;
  double lr = 1e-3;
  double w_mae = 1.0;
  double w_cls = 1.0;
  int checkpoint_every = 50;
};

struct LdmConfig {
  int timesteps = 100;        // T
  double beta_start = 1e-4;
  double beta_end = 2e-2;
  int latent_channels = 4;
  int latent_size = 8;
  int base_width = 48;
  int ae_width = 32;
  int ae_epochs = 60;
  double ae_lr = 2e-3;
  int epochs = 30;
  int batch = 16;
  double lr = 1e-3;
  double lambda_ldm = 1.0;
  double lambda_region = 1.0;
  bool region_enabled = true;
  std::string segmenter = "trained";  // trained | oracle
  bool freeze_encoder = true;
  double cond_dropout = 0.1;
  double guidance = 3.0;
  int sample_steps = 50;
};

struct StageBConfig {
  int steps = 2000;
  double lr = 1e-3;
  std::string omega_rule = "sigma_sq";  // one | sigma_sq
  double guidance = 3.0;
  double t_min_frac = 0.02;
  double t_max_frac = 0.98;
  std::string field_backend = "dense";  // dense | hash
  int field_resolution = 32;
  int render_size = 32;
  int ray_samples = 48;
  double w_sds = 1.0;
  double w_align = 0.1;
  double w_color = 1.0;
  double w_ref = 1.0;
  int k_align = 1;
  int k_color = 1;
  bool color_enabled = true;
  bool align_enabled = true;
  double style_lambda = 10.0;
  double azimuth_min_deg = 0.0, azimuth_max_deg = 360.0;
  double elevation_min_deg = -30.0, elevation_max_deg = 45.0;
  double radius_min = 1.8, radius_max = 2.2;
  double fov_deg = 40.0;
};

struct EmbedderConfig {
  int embed_dim = 32;
  int epochs = 40;
  int batch = 16;
  double lr = 2e-3;
  double temperature = 0.1;
  int extractor_epochs = 25;
  int segmenter_epochs = 8;
};

struct MetricsConfig {
  int n_way = 4;
  int trials = 200;
  int ssim_window = 11;
  int hist_bins = 32;
  double contextual_bandwidth = 0.5;
};

struct PipelineConfig {
  std::uint64_t seed = 7;
  DatasetConfig dataset;
  StageAConfig stage_a;
  LdmConfig ldm;
  StageBConfig stage_b;
  EmbedderConfig embedder;
  MetricsConfig metrics;

  static PipelineConfig from_toml(const TomlTable& t);
  static PipelineConfig from_file(const std::string& path);
  // Canonical serialization; every field written, fixed order. The snapshot
  // and the config hash both come from this.
  std::string to_toml() const;
  std::string hash() const;
  void validate() const;  // throws ConfigError
};

}  // namespace neuro3d
