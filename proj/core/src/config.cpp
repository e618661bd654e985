#include "neuro3d/config.hpp"

#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "neuro3d/serialize.hpp"

namespace neuro3d {

namespace {

std::string trim(const std::string& s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

TomlTable::Scalar parse_scalar(const std::string& raw, int line_no) {
  const std::string v = trim(raw);
  if (v.empty()) throw ConfigError("config line " + std::to_string(line_no) + ": empty value");
  if (v.front() == '"') {
    if (v.size() < 2 || v.back() != '"')
      throw ConfigError("config line " + std::to_string(line_no) + ": unterminated string");
    return v.substr(1, v.size() - 2);
  }
  if (v == "true") return true;
  if (v == "false") return false;
  const bool looks_float = v.find_first_of(".eE") != std::string::npos &&
                           v.find_first_not_of("+-0123456789.eE") == std::string::npos;
  try {
    std::size_t used = 0;
    if (!looks_float) {
      const std::int64_t i = std::stoll(v, &used);
      if (used == v.size()) return i;
    }
    const double d = std::stod(v, &used);
    if (used == v.size()) return d;
  } catch (const std::exception&) {
  }
  throw ConfigError("config line " + std::to_string(line_no) + ": cannot parse value '" + v + "'");
}

}  // namespace

TomlTable TomlTable::parse(const std::string& text) {
  TomlTable t;
  std::istringstream in(text);
  std::string line, section;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    // strip comments outside of strings
    bool in_str = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
      if (line[i] == '"') in_str = !in_str;
      if (line[i] == '#' && !in_str) {
        line = line.substr(0, i);
        break;
      }
    }
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw ConfigError("config line " + std::to_string(line_no) + ": bad section header");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));
    if (key.empty())
      throw ConfigError("config line " + std::to_string(line_no) + ": empty key");
    if (!val.empty() && val.front() == '[') {
      if (val.back() != ']')
        throw ConfigError("config line " + std::to_string(line_no) + ": unterminated array");
      Array arr;
      std::string inner = val.substr(1, val.size() - 2);
      std::string item;
      std::istringstream items(inner);
      while (std::getline(items, item, ',')) {
        if (trim(item).empty()) continue;
        arr.push_back(parse_scalar(item, line_no));
      }
      t.arrays_[section][key] = std::move(arr);
    } else {
      t.scalars_[section][key] = parse_scalar(val, line_no);
    }
  }
  return t;
}

TomlTable TomlTable::parse_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file: " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse(ss.str());
}

const TomlTable::Scalar* TomlTable::find(const std::string& section, const std::string& key) const {
  auto s = scalars_.find(section);
  if (s == scalars_.end()) return nullptr;
  auto k = s->second.find(key);
  return k == s->second.end() ? nullptr : &k->second;
}

bool TomlTable::has(const std::string& section, const std::string& key) const {
  if (find(section, key)) return true;
  auto s = arrays_.find(section);
  return s != arrays_.end() && s->second.count(key) > 0;
}

std::string TomlTable::get_str(const std::string& section, const std::string& key,
                               const std::string& fallback) const {
  const Scalar* v = find(section, key);
  if (!v) return fallback;
  if (const auto* s = std::get_if<std::string>(v)) return *s;
  throw ConfigError("config: " + section + "." + key + " must be a string");
}

std::int64_t TomlTable::get_int(const std::string& section, const std::string& key,
                                std::int64_t fallback) const {
  const Scalar* v = find(section, key);
  if (!v) return fallback;
  if (const auto* i = std::get_if<std::int64_t>(v)) return *i;
  throw ConfigError("config: " + section + "." + key + " must be an integer");
}

double TomlTable::get_double(const std::string& section, const std::string& key,
                             double fallback) const {
  const Scalar* v = find(section, key);
  if (!v) return fallback;
  if (const auto* d = std::get_if<double>(v)) return *d;
  if (const auto* i = std::get_if<std::int64_t>(v)) return static_cast<double>(*i);
  throw ConfigError("config: " + section + "." + key + " must be a number");
}

bool TomlTable::get_bool(const std::string& section, const std::string& key, bool fallback) const {
  const Scalar* v = find(section, key);
  if (!v) return fallback;
  if (const auto* b = std::get_if<bool>(v)) return *b;
  throw ConfigError("config: " + section + "." + key + " must be a boolean");
}

std::vector<double> TomlTable::get_double_array(const std::string& section, const std::string& key,
                                                std::vector<double> fallback) const {
  auto s = arrays_.find(section);
  if (s == arrays_.end()) return fallback;
  auto k = s->second.find(key);
  if (k == s->second.end()) return fallback;
  std::vector<double> out;
  for (const auto& item : k->second) {
    if (const auto* d = std::get_if<double>(&item))
      out.push_back(*d);
    else if (const auto* i = std::get_if<std::int64_t>(&item))
      out.push_back(static_cast<double>(*i));
    else
      throw ConfigError("config: " + section + "." + key + " must be a numeric array");
  }
  return out;
}

PipelineConfig PipelineConfig::from_toml(const TomlTable& t) {
  PipelineConfig c;
  c.seed = static_cast<std::uint64_t>(t.get_int("", "seed", static_cast<std::int64_t>(c.seed)));

  auto& d = c.dataset;
  d.layout = t.get_str("dataset", "layout", d.layout);
  d.root = t.get_str("dataset", "root", d.root);
  d.band = t.get_str("dataset", "band", d.band);
  d.num_classes = static_cast<int>(t.get_int("dataset", "num_classes", d.num_classes));
  d.segments_per_class =
      static_cast<int>(t.get_int("dataset", "segments_per_class", d.segments_per_class));
  d.channels = static_cast<int>(t.get_int("dataset", "channels", d.channels));
  d.timesteps = static_cast<int>(t.get_int("dataset", "timesteps", d.timesteps));
  d.image_size = static_cast<int>(t.get_int("dataset", "image_size", d.image_size));
  d.normalize = t.get_str("dataset", "normalize", d.normalize);

  auto& a = c.stage_a;
  a.patch_len = static_cast<int>(t.get_int("stage_a", "patch_len", a.patch_len));
  a.token_dim = static_cast<int>(t.get_int("stage_a", "token_dim", a.token_dim));
  a.d_model = static_cast<int>(t.get_int("stage_a", "d_model", a.d_model));
  a.heads = static_cast<int>(t.get_int("stage_a", "heads", a.heads));
  a.enc_layers = static_cast<int>(t.get_int("stage_a", "enc_layers", a.enc_layers));
  a.dec_layers = static_cast<int>(t.get_int("stage_a", "dec_layers", a.dec_layers));
  a.cls_layers = static_cast<int>(t.get_int("stage_a", "cls_layers", a.cls_layers));
  a.fusion_dim = static_cast<int>(t.get_int("stage_a", "fusion_dim", a.fusion_dim));
  a.mask_ratio = t.get_double("stage_a", "mask_ratio", a.mask_ratio);
  a.epochs = static_cast<int>(t.get_int("stage_a", "epochs", a.epochs));
  a.batch = static_cast<int>(t.get_int("stage_a", "batch", a.batch));
  a.lr = t.get_double("stage_a", "lr", a.lr);
  a.w_mae = t.get_double("stage_a", "w_mae", a.w_mae);
  a.w_cls = t.get_double("stage_a", "w_cls", a.w_cls);
  a.checkpoint_every = static_cast<int>(t.get_int("stage_a", "checkpoint_every", a.checkpoint_every));

  auto& l = c.ldm;
  l.timesteps = static_cast<int>(t.get_int("ldm", "timesteps", l.timesteps));
  l.beta_start = t.get_double("ldm", "beta_start", l.beta_start);
  l.beta_end = t.get_double("ldm", "beta_end", l.beta_end);
  l.latent_channels = static_cast<int>(t.get_int("ldm", "latent_channels", l.latent_channels));
  l.latent_size = static_cast<int>(t.get_int("ldm", "latent_size", l.latent_size));
  l.base_width = static_cast<int>(t.get_int("ldm", "base_width", l.base_width));
  l.ae_width = static_cast<int>(t.get_int("ldm", "ae_width", l.ae_width));
  l.ae_epochs = static_cast<int>(t.get_int("ldm", "ae_epochs", l.ae_epochs));
  l.ae_lr = t.get_double("ldm", "ae_lr", l.ae_lr);
  l.epochs = static_cast<int>(t.get_int("ldm", "epochs", l.epochs));
  l.batch = static_cast<int>(t.get_int("ldm", "batch", l.batch));
  l.lr = t.get_double("ldm", "lr", l.lr);
  l.lambda_ldm = t.get_double("ldm", "lambda_ldm", l.lambda_ldm);
  l.lambda_region = t.get_double("ldm", "lambda_region", l.lambda_region);
  l.region_enabled = t.get_bool("ldm", "region_enabled", l.region_enabled);
  l.segmenter = t.get_str("ldm", "segmenter", l.segmenter);
  l.freeze_encoder = t.get_bool("ldm", "freeze_encoder", l.freeze_encoder);
  l.cond_dropout = t.get_double("ldm", "cond_dropout", l.cond_dropout);
  l.guidance = t.get_double("ldm", "guidance", l.guidance);
  l.sample_steps = static_cast<int>(t.get_int("ldm", "sample_steps", l.sample_steps));

  auto& b = c.stage_b;
  b.steps = static_cast<int>(t.get_int("stage_b", "steps", b.steps));
  b.lr = t.get_double("stage_b", "lr", b.lr);
  b.omega_rule = t.get_str("stage_b", "omega_rule", b.omega_rule);
  b.guidance = t.get_double("stage_b", "guidance", b.guidance);
  b.t_min_frac = t.get_double("stage_b", "t_min_frac", b.t_min_frac);
  b.t_max_frac = t.get_double("stage_b", "t_max_frac", b.t_max_frac);
  b.field_backend = t.get_str("stage_b", "field_backend", b.field_backend);
  b.field_resolution = static_cast<int>(t.get_int("stage_b", "field_resolution", b.field_resolution));
  b.render_size = static_cast<int>(t.get_int("stage_b", "render_size", b.render_size));
  b.ray_samples = static_cast<int>(t.get_int("stage_b", "ray_samples", b.ray_samples));
  b.w_sds = t.get_double("stage_b", "w_sds", b.w_sds);
  b.w_align = t.get_double("stage_b", "w_align", b.w_align);
  b.w_color = t.get_double("stage_b", "w_color", b.w_color);
  b.w_ref = t.get_double("stage_b", "w_ref", b.w_ref);
  b.k_align = static_cast<int>(t.get_int("stage_b", "k_align", b.k_align));
  b.k_color = static_cast<int>(t.get_int("stage_b", "k_color", b.k_color));
  b.color_enabled = t.get_bool("stage_b", "color_enabled", b.color_enabled);
  b.align_enabled = t.get_bool("stage_b", "align_enabled", b.align_enabled);
  b.style_lambda = t.get_double("stage_b", "style_lambda", b.style_lambda);
  b.azimuth_min_deg = t.get_double("stage_b", "azimuth_min_deg", b.azimuth_min_deg);
  b.azimuth_max_deg = t.get_double("stage_b", "azimuth_max_deg", b.azimuth_max_deg);
  b.elevation_min_deg = t.get_double("stage_b", "elevation_min_deg", b.elevation_min_deg);
  b.elevation_max_deg = t.get_double("stage_b", "elevation_max_deg", b.elevation_max_deg);
  b.radius_min = t.get_double("stage_b", "radius_min", b.radius_min);
  b.radius_max = t.get_double("stage_b", "radius_max", b.radius_max);
  b.fov_deg = t.get_double("stage_b", "fov_deg", b.fov_deg);

  auto& e = c.embedder;
  e.embed_dim = static_cast<int>(t.get_int("embedder", "embed_dim", e.embed_dim));
  e.epochs = static_cast<int>(t.get_int("embedder", "epochs", e.epochs));
  e.batch = static_cast<int>(t.get_int("embedder", "batch", e.batch));
  e.lr = t.get_double("embedder", "lr", e.lr);
  e.temperature = t.get_double("embedder", "temperature", e.temperature);
  e.extractor_epochs = static_cast<int>(t.get_int("embedder", "extractor_epochs", e.extractor_epochs));
  e.segmenter_epochs = static_cast<int>(t.get_int("embedder", "segmenter_epochs", e.segmenter_epochs));

  auto& m = c.metrics;
  m.n_way = static_cast<int>(t.get_int("metrics", "n_way", m.n_way));
  m.trials = static_cast<int>(t.get_int("metrics", "trials", m.trials));
  m.ssim_window = static_cast<int>(t.get_int("metrics", "ssim_window", m.ssim_window));
  m.hist_bins = static_cast<int>(t.get_int("metrics", "hist_bins", m.hist_bins));
  m.contextual_bandwidth = t.get_double("metrics", "contextual_bandwidth", m.contextual_bandwidth);

  c.validate();
  return c;
}

PipelineConfig PipelineConfig::from_file(const std::string& path) {
  return from_toml(TomlTable::parse_file(path));
}

namespace {
std::string fmt_double(double v) {
  if (v == std::floor(v) && std::abs(v) < 1e15) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.1f", v);
    return buf;
  }
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}
}  // namespace

std::string PipelineConfig::to_toml() const {
  std::ostringstream o;
  o << "seed = " << seed << "\n\n";
  o << "[dataset]\n";
  o << "layout = \"" << dataset.layout << "\"\n";
  o << "root = \"" << dataset.root << "\"\n";
  o << "band = \"" << dataset.band << "\"\n";
  o << "num_classes = " << dataset.num_classes << "\n";
  o << "segments_per_class = " << dataset.segments_per_class << "\n";
  o << "channels = " << dataset.channels << "\n";
  o << "timesteps = " << dataset.timesteps << "\n";
  o << "image_size = " << dataset.image_size << "\n";
  o << "normalize = \"" << dataset.normalize << "\"\n\n";

  o << "[stage_a]\n";
  o << "patch_len = " << stage_a.patch_len << "\n";
  o << "token_dim = " << stage_a.token_dim << "\n";
  o << "d_model = " << stage_a.d_model << "\n";
  o << "heads = " << stage_a.heads << "\n";
  o << "enc_layers = " << stage_a.enc_layers << "\n";
  o << "dec_layers = " << stage_a.dec_layers << "\n";
  o << "cls_layers = " << stage_a.cls_layers << "\n";
  o << "fusion_dim = " << stage_a.fusion_dim << "\n";
  o << "mask_ratio = " << fmt_double(stage_a.mask_ratio) << "\n";
  o << "epochs = " << stage_a.epochs << "\n";
  o << "batch = " << stage_a.batch << "\n";
  o << "lr = " << fmt_double(stage_a.lr) << "\n";
  o << "w_mae = " << fmt_double(stage_a.w_mae) << "\n";
  o << "w_cls = " << fmt_double(stage_a.w_cls) << "\n";
  o << "checkpoint_every = " << stage_a.checkpoint_every << "\n\n";

  o << "[ldm]\n";
  o << "timesteps = " << ldm.timesteps << "\n";
  o << "beta_start = " << fmt_double(ldm.beta_start) << "\n";
  o << "beta_end = " << fmt_double(ldm.beta_end) << "\n";
  o << "latent_channels = " << ldm.latent_channels << "\n";
  o << "latent_size = " << ldm.latent_size << "\n";
  o << "base_width = " << ldm.base_width << "\n";
  o << "ae_width = " << ldm.ae_width << "\n";
  o << "ae_epochs = " << ldm.ae_epochs << "\n";
  o << "ae_lr = " << fmt_double(ldm.ae_lr) << "\n";
  o << "epochs = " << ldm.epochs << "\n";
  o << "batch = " << ldm.batch << "\n";
  o << "lr = " << fmt_double(ldm.lr) << "\n";
  o << "lambda_ldm = " << fmt_double(ldm.lambda_ldm) << "\n";
  o << "lambda_region = " << fmt_double(ldm.lambda_region) << "\n";
  o << "region_enabled = " << (ldm.region_enabled ? "true" : "false") << "\n";
  o << "segmenter = \"" << ldm.segmenter << "\"\n";
  o << "freeze_encoder = " << (ldm.freeze_encoder ? "true" : "false") << "\n";
  o << "cond_dropout = " << fmt_double(ldm.cond_dropout) << "\n";
  o << "guidance = " << fmt_double(ldm.guidance) << "\n";
  o << "sample_steps = " << ldm.sample_steps << "\n\n";

  o << "[stage_b]\n";
  o << "steps = " << stage_b.steps << "\n";
  o << "lr = " << fmt_double(stage_b.lr) << "\n";
  o << "omega_rule = \"" << stage_b.omega_rule << "\"\n";
  o << "guidance = " << fmt_double(stage_b.guidance) << "\n";
  o << "t_min_frac = " << fmt_double(stage_b.t_min_frac) << "\n";
  o << "t_max_frac = " << fmt_double(stage_b.t_max_frac) << "\n";
  o << "field_backend = \"" << stage_b.field_backend << "\"\n";
  o << "field_resolution = " << stage_b.field_resolution << "\n";
  o << "render_size = " << stage_b.render_size << "\n";
  o << "ray_samples = " << stage_b.ray_samples << "\n";
  o << "w_sds = " << fmt_double(stage_b.w_sds) << "\n";
  o << "w_align = " << fmt_double(stage_b.w_align) << "\n";
  o << "w_color = " << fmt_double(stage_b.w_color) << "\n";
  o << "w_ref = " << fmt_double(stage_b.w_ref) << "\n";
  o << "k_align = " << stage_b.k_align << "\n";
  o << "k_color = " << stage_b.k_color << "\n";
  o << "color_enabled = " << (stage_b.color_enabled ? "true" : "false") << "\n";
  o << "align_enabled = " << (stage_b.align_enabled ? "true" : "false") << "\n";
  o << "style_lambda = " << fmt_double(stage_b.style_lambda) << "\n";
  o << "azimuth_min_deg = " << fmt_double(stage_b.azimuth_min_deg) << "\n";
  o << "azimuth_max_deg = " << fmt_double(stage_b.azimuth_max_deg) << "\n";
  o << "elevation_min_deg = " << fmt_double(stage_b.elevation_min_deg) << "\n";
  o << "elevation_max_deg = " << fmt_double(stage_b.elevation_max_deg) << "\n";
  o << "radius_min = " << fmt_double(stage_b.radius_min) << "\n";
  o << "radius_max = " << fmt_double(stage_b.radius_max) << "\n";
  o << "fov_deg = " << fmt_double(stage_b.fov_deg) << "\n\n";

  o << "[embedder]\n";
  o << "embed_dim = " << embedder.embed_dim << "\n";
  o << "epochs = " << embedder.epochs << "\n";
  o << "batch = " << embedder.batch << "\n";
  o << "lr = " << fmt_double(embedder.lr) << "\n";
  o << "temperature = " << fmt_double(embedder.temperature) << "\n";
  o << "extractor_epochs = " << embedder.extractor_epochs << "\n";
  o << "segmenter_epochs = " << embedder.segmenter_epochs << "\n\n";

  o << "[metrics]\n";
  o << "n_way = " << metrics.n_way << "\n";
  o << "trials = " << metrics.trials << "\n";
  o << "ssim_window = " << metrics.ssim_window << "\n";
  o << "hist_bins = " << metrics.hist_bins << "\n";
  o << "contextual_bandwidth = " << fmt_double(metrics.contextual_bandwidth) << "\n";
  return o.str();
}

std::string PipelineConfig::hash() const { return content_hash(to_toml()); }

void PipelineConfig::validate() const {
  auto require = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError("config: " + msg);
  };
  require(dataset.layout == "synthetic" || dataset.layout == "eeg_imagenet" ||
              dataset.layout == "things_eeg2",
          "dataset.layout must be synthetic|eeg_imagenet|things_eeg2");
  require(!dataset.root.empty(), "dataset.root must be set");
  require(dataset.num_classes >= 1 && dataset.segments_per_class >= 1 && dataset.channels >= 1 &&
              dataset.timesteps >= 1,
          "dataset counts must be >= 1");
  require(dataset.image_size >= 16, "dataset.image_size must be >= 16");
  require(dataset.normalize == "per_channel_z" || dataset.normalize == "global_z" ||
              dataset.normalize == "none",
          "dataset.normalize must be per_channel_z|global_z|none");
  require(stage_a.patch_len >= 1, "stage_a.patch_len must be >= 1");
  require(stage_a.mask_ratio > 0.0 && stage_a.mask_ratio < 1.0,
          "stage_a.mask_ratio must be in (0,1)");
  require(stage_a.w_mae >= 0.0 && stage_a.w_cls >= 0.0, "stage_a loss weights must be >= 0");
  require(stage_a.d_model % stage_a.heads == 0, "stage_a.d_model must be divisible by heads");
  require(ldm.timesteps >= 2, "ldm.timesteps must be >= 2");
  require(ldm.beta_start > 0.0 && ldm.beta_start <= ldm.beta_end && ldm.beta_end < 1.0,
          "ldm betas must satisfy 0 < beta_start <= beta_end < 1");
  require(ldm.lambda_ldm >= 0.0 && ldm.lambda_region >= 0.0, "ldm lambdas must be >= 0");
  require(ldm.sample_steps >= 1 && ldm.sample_steps <= ldm.timesteps,
          "ldm.sample_steps must be in [1, T]");
  require(ldm.segmenter == "trained" || ldm.segmenter == "oracle",
          "ldm.segmenter must be trained|oracle");
  require(stage_b.omega_rule == "one" || stage_b.omega_rule == "sigma_sq",
          "stage_b.omega_rule must be one|sigma_sq");
  require(stage_b.field_backend == "dense" || stage_b.field_backend == "hash",
          "stage_b.field_backend must be dense|hash");
  require(stage_b.w_sds >= 0.0 && stage_b.w_align >= 0.0 && stage_b.w_color >= 0.0 &&
              stage_b.w_ref >= 0.0,
          "stage_b loss weights must be >= 0");
  require(stage_b.t_min_frac > 0.0 && stage_b.t_min_frac < stage_b.t_max_frac &&
              stage_b.t_max_frac <= 1.0,
          "stage_b t range must satisfy 0 < t_min < t_max <= 1");
  require(stage_b.radius_min > 0.0 && stage_b.radius_min <= stage_b.radius_max,
          "stage_b radius range invalid");
  require(stage_b.fov_deg > 0.0 && stage_b.fov_deg < 180.0, "stage_b.fov_deg must be in (0,180)");
  require(metrics.n_way >= 1, "metrics.n_way must be >= 1");
  require(metrics.ssim_window % 2 == 1, "metrics.ssim_window must be odd");
}

}  // namespace neuro3d
