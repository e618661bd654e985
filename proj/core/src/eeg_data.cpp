#include "neuro3d/eeg_data.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "neuro3d/rng.hpp"

namespace fs = std::filesystem;

namespace neuro3d::eeg {

std::string band_name(Band b) {
  switch (b) {
    case Band::band_14_70: return "band_14_70";
    case Band::band_5_95: return "band_5_95";
    case Band::band_55_95: return "band_55_95";
    case Band::synthetic: return "synthetic";
  }
  return "synthetic";
}

Band band_from_name(const std::string& s) {
  if (s == "band_14_70") return Band::band_14_70;
  if (s == "band_5_95") return Band::band_5_95;
  if (s == "band_55_95") return Band::band_55_95;
  if (s == "synthetic") return Band::synthetic;
  throw ValidationError("unknown band name: " + s);
}

const ManifestSegment& DatasetManifest::segment(const std::string& id) const {
  for (const auto& s : segments)
    if (s.segment_id == id) return s;
  throw ArtifactError("unknown segment_id: " + id);
}

const ManifestImage& DatasetManifest::image(const std::string& id) const {
  for (const auto& s : images)
    if (s.image_id == id) return s;
  throw ArtifactError("unknown image_id: " + id);
}

std::vector<std::string> DatasetManifest::split_ids(const std::string& split) const {
  auto it = splits.find(split);
  if (it == splits.end()) throw ArtifactError("unknown split: " + split);
  return it->second;
}

void DatasetManifest::validate() const {
  if (num_classes < 1) throw ValidationError("manifest: num_classes must be >= 1");
  if (channels < 1 || timesteps < 1)
    throw ValidationError("manifest: channels and timesteps must be >= 1");

  std::set<std::string> seg_ids;
  for (const auto& s : segments) {
    if (!seg_ids.insert(s.segment_id).second)
      throw ValidationError("manifest: duplicated segment_id " + s.segment_id);
    if (s.label < 0 || s.label >= num_classes)
      throw ValidationError("manifest: segment " + s.segment_id + " label " +
                            std::to_string(s.label) + " out of range [0," +
                            std::to_string(num_classes) + ")");
    if (s.subject_id < 0)
      throw ValidationError("manifest: segment " + s.segment_id + " negative subject_id");
  }

  std::set<std::string> img_ids;
  for (const auto& im : images) {
    if (!img_ids.insert(im.image_id).second)
      throw ValidationError("manifest: duplicated image_id " + im.image_id);
    if (im.category < 0 || im.category >= num_classes)
      throw ValidationError("manifest: image " + im.image_id + " category out of range");
  }
  for (const auto& s : segments)
    if (!img_ids.count(s.image_id))
      throw ValidationError("manifest: segment " + s.segment_id + " pairs with unknown image " +
                            s.image_id);

  // splits disjoint and covering
  std::set<std::string> seen;
  for (const char* name : {"train", "val", "test"}) {
    auto it = splits.find(name);
    if (it == splits.end()) throw ValidationError(std::string("manifest: missing split ") + name);
    for (const auto& id : it->second) {
      if (!seg_ids.count(id))
        throw ValidationError("manifest: split " + std::string(name) + " references unknown " + id);
      if (!seen.insert(id).second)
        throw ValidationError("manifest: segment " + id + " appears in more than one split");
    }
  }
  if (seen.size() != seg_ids.size())
    throw ValidationError("manifest: splits do not cover all segments");
}

std::string DatasetManifest::to_json() const {
  nlohmann::json j;
  j["schema_version"] = schema_version;
  j["num_classes"] = num_classes;
  j["channels"] = channels;
  j["timesteps"] = timesteps;
  j["segments"] = nlohmann::json::array();
  for (const auto& s : segments)
    j["segments"].push_back({{"segment_id", s.segment_id},
                             {"subject_id", s.subject_id},
                             {"label", s.label},
                             {"band", band_name(s.band)},
                             {"image_id", s.image_id}});
  j["images"] = nlohmann::json::array();
  for (const auto& im : images)
    j["images"].push_back(
        {{"image_id", im.image_id}, {"category", im.category}, {"file", im.file}});
  j["splits"] = {{"train", splits.count("train") ? splits.at("train") : std::vector<std::string>{}},
                 {"val", splits.count("val") ? splits.at("val") : std::vector<std::string>{}},
                 {"test", splits.count("test") ? splits.at("test") : std::vector<std::string>{}}};
  return j.dump(2);
}

DatasetManifest DatasetManifest::from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("manifest: invalid JSON: ") + e.what());
  }
  DatasetManifest m;
  try {
    m.schema_version = j.at("schema_version").get<int>();
    m.num_classes = j.at("num_classes").get<int>();
    m.channels = j.at("channels").get<int>();
    m.timesteps = j.at("timesteps").get<int>();
    for (const auto& s : j.at("segments")) {
      ManifestSegment ms;
      ms.segment_id = s.at("segment_id").get<std::string>();
      ms.subject_id = s.at("subject_id").get<int>();
      ms.label = s.at("label").get<int>();
      ms.band = band_from_name(s.at("band").get<std::string>());
      ms.image_id = s.at("image_id").get<std::string>();
      m.segments.push_back(std::move(ms));
    }
    for (const auto& s : j.at("images")) {
      ManifestImage mi;
      mi.image_id = s.at("image_id").get<std::string>();
      mi.category = s.at("category").get<int>();
      mi.file = s.at("file").get<std::string>();
      m.images.push_back(std::move(mi));
    }
    const auto& sp = j.at("splits");
    m.splits["train"] = sp.at("train").get<std::vector<std::string>>();
    m.splits["val"] = sp.at("val").get<std::vector<std::string>>();
    m.splits["test"] = sp.at("test").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("manifest: missing or mistyped field: ") + e.what());
  }
  if (m.schema_version != 1)
    throw ValidationError("manifest: unsupported schema_version " +
                          std::to_string(m.schema_version));
  return m;
}

Dataset::Dataset(std::string root, DatasetManifest manifest)
    : root_(std::move(root)), manifest_(std::move(manifest)) {}

EEGSegment Dataset::load_segment(const std::string& segment_id) const {
  const ManifestSegment& ms = manifest_.segment(segment_id);
  const fs::path path = fs::path(root_) / (segment_id + ".f32");
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ValidationError("segment " + segment_id + ": missing record " + path.string());

  const std::int64_t n = static_cast<std::int64_t>(manifest_.channels) * manifest_.timesteps;
  std::vector<float> raw(static_cast<std::size_t>(n));
  f.read(reinterpret_cast<char*>(raw.data()), n * static_cast<std::int64_t>(sizeof(float)));
  if (!f || f.gcount() != n * static_cast<std::int64_t>(sizeof(float)))
    throw ValidationError("segment " + segment_id + ": record shorter than manifest shape [" +
                          std::to_string(manifest_.channels) + "x" +
                          std::to_string(manifest_.timesteps) + "]");
  f.peek();
  if (!f.eof())
    throw ValidationError("segment " + segment_id + ": record longer than manifest shape");

  EEGSegment seg;
  seg.data = Tensor({manifest_.channels, manifest_.timesteps});
  for (std::int64_t i = 0; i < n; ++i) {
    seg.data[i] = static_cast<double>(raw[static_cast<std::size_t>(i)]);
    if (!std::isfinite(seg.data[i]))
      throw ValidationError("segment " + segment_id + ": non-finite sample");
  }
  seg.subject_id = ms.subject_id;
  seg.label = ms.label;
  seg.band = ms.band;
  seg.segment_id = ms.segment_id;
  return seg;
}

StimulusImage Dataset::load_image(const std::string& image_id, bool with_segmentation) const {
  const ManifestImage& mi = manifest_.image(image_id);
  const fs::path path = fs::path(root_) / mi.file;
  StimulusImage out;
  out.image_id = mi.image_id;
  out.category = mi.category;
  out.pixels = read_png_rgb(path.string());
  if (with_segmentation) {
    fs::path seg_path = path;
    seg_path.replace_extension();
    seg_path += "_seg.png";
    if (fs::exists(seg_path)) {
      LabelMap seg = read_png_gray(seg_path.string());
      if (seg.height != out.pixels.height || seg.width != out.pixels.width)
        throw ValidationError("image " + image_id + ": segmentation size mismatch");
      out.segmentation = std::move(seg);
    }
  }
  return out;
}

StimulusImage Dataset::image_for_segment(const std::string& segment_id,
                                         bool with_segmentation) const {
  return load_image(manifest_.segment(segment_id).image_id, with_segmentation);
}

std::optional<EEGSegment> Dataset::SegmentIterator::next() {
  if (pos_ >= ids_.size()) return std::nullopt;
  return ds_->load_segment(ids_[pos_++]);
}

Dataset::SegmentIterator Dataset::segments() const {
  std::vector<std::string> ids;
  ids.reserve(manifest_.segments.size());
  for (const auto& s : manifest_.segments) ids.push_back(s.segment_id);
  return SegmentIterator(*this, std::move(ids));
}

Dataset::SegmentIterator Dataset::segments_in_split(const std::string& split) const {
  return SegmentIterator(*this, manifest_.split_ids(split));
}

Dataset load_dataset(const std::string& root) {
  const fs::path manifest_path = fs::path(root) / "manifest.json";
  std::ifstream f(manifest_path);
  if (!f) throw LoadError("dataset: missing manifest " + manifest_path.string());
  std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  DatasetManifest m = DatasetManifest::from_json(text);
  m.validate();
  return Dataset(root, std::move(m));
}

Dataset load_eeg_imagenet(const std::string& root, Band band) {
  Dataset ds = load_dataset(root);
  if (ds.manifest().channels != 128)
    throw ValidationError("eeg_imagenet: expected 128 channels, manifest declares " +
                          std::to_string(ds.manifest().channels));
  DatasetManifest filtered = ds.manifest();
  filtered.segments.clear();
  std::set<std::string> kept;
  for (const auto& s : ds.manifest().segments)
    if (s.band == band) {
      filtered.segments.push_back(s);
      kept.insert(s.segment_id);
    }
  if (filtered.segments.empty())
    throw ValidationError("eeg_imagenet: no segments in band " + band_name(band));
  for (auto& [name, ids] : filtered.splits) {
    std::vector<std::string> f;
    for (const auto& id : ids)
      if (kept.count(id)) f.push_back(id);
    ids = std::move(f);
  }
  return Dataset(ds.root(), std::move(filtered));
}

Dataset load_things_eeg2(const std::string& root) { return load_dataset(root); }

// ------------------------------------------------------------------ synthetic

namespace {

bool inside_shape(int shape_kind, double u, double v, double half) {
  // u, v in [-1, 1] coordinates around the shape center; half = half-extent.
  switch (shape_kind & 3) {
    case 0: return u * u + v * v <= half * half;                       // circle
    case 1: return std::abs(u) <= half && std::abs(v) <= half;         // square
    case 2: return v >= -half && (std::abs(u) <= (half - v) * 0.5);    // triangle
    default: return std::abs(u) + std::abs(v) <= half;                 // diamond
  }
}

}  // namespace

void synthetic_class_color(int label, int num_classes, double rgb_out[3]) {
  // evenly spaced hues, full saturation, value 0.9
  const double h = (num_classes > 0 ? static_cast<double>(label) / num_classes : 0.0) * 6.0;
  const double v = 0.9, s = 0.95;
  const int i = static_cast<int>(h) % 6;
  const double f = h - std::floor(h);
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (i) {
    case 0: rgb_out[0] = v; rgb_out[1] = t; rgb_out[2] = p; break;
    case 1: rgb_out[0] = q; rgb_out[1] = v; rgb_out[2] = p; break;
    case 2: rgb_out[0] = p; rgb_out[1] = v; rgb_out[2] = t; break;
    case 3: rgb_out[0] = p; rgb_out[1] = q; rgb_out[2] = v; break;
    case 4: rgb_out[0] = t; rgb_out[1] = p; rgb_out[2] = v; break;
    default: rgb_out[0] = v; rgb_out[1] = p; rgb_out[2] = q; break;
  }
}

std::string synthetic_class_prompt(int label) { return "class " + std::to_string(label); }

SyntheticDataset generate_synthetic_dataset(const SyntheticSpec& spec) {
  if (spec.num_classes < 1 || spec.segments_per_class < 1 || spec.channels < 1 ||
      spec.timesteps < 1)
    throw ValidationError("synthetic: all counts must be >= 1");
  if (spec.image_size < 16) throw ValidationError("synthetic: image_size must be >= 16");

  SyntheticDataset out;
  auto& m = out.manifest;
  m.num_classes = spec.num_classes;
  m.channels = spec.channels;
  m.timesteps = spec.timesteps;

  const double fs = 128.0;  // nominal sampling rate for the sinusoid bank
  const double band_lo = 2.0, band_hi = 60.0;
  const double band_w = (band_hi - band_lo) / spec.num_classes;

  for (int k = 0; k < spec.num_classes; ++k) {
    // class-specific channel gain profile, fixed across segments
    Rng class_rng(derive_seed(spec.seed, "class_gain/" + std::to_string(k)));
    std::vector<double> gain(static_cast<std::size_t>(spec.channels));
    for (auto& g : gain) g = 0.5 + class_rng.uniform();
    const double f1 = band_lo + band_w * (k + 0.25);
    const double f2 = band_lo + band_w * (k + 0.75);

    double rgb[3];
    synthetic_class_color(k, spec.num_classes, rgb);

    for (int s = 0; s < spec.segments_per_class; ++s) {
      const int index = k * spec.segments_per_class + s;
      char id[32];
      std::snprintf(id, sizeof(id), "seg_%05d", index);
      char img_id[32];
      std::snprintf(img_id, sizeof(img_id), "img_%05d", index);

      Rng rng(derive_seed(spec.seed, std::string("segment/") + id));
      EEGSegment seg;
      seg.segment_id = id;
      seg.label = k;
      seg.subject_id = index % 6;
      seg.band = Band::synthetic;
      seg.data = Tensor({spec.channels, spec.timesteps});
      const double phi1 = rng.uniform(0.0, 2.0 * M_PI);
      const double phi2 = rng.uniform(0.0, 2.0 * M_PI);
      for (int c = 0; c < spec.channels; ++c) {
        const double g = gain[static_cast<std::size_t>(c)];
        const double chase = 0.3 * c;  // per-channel phase lag
        for (int t = 0; t < spec.timesteps; ++t) {
          const double tt = t / fs;
          double v = 10.0 * g * std::sin(2.0 * M_PI * f1 * tt + phi1 + chase) +
                     6.0 * g * std::sin(2.0 * M_PI * f2 * tt + phi2 + chase);
          v += 2.5 * rng.gaussian();
          seg.data.at(c, t) = v;
        }
      }

      StimulusImage img;
      img.image_id = img_id;
      img.category = k;
      img.pixels = Image(spec.image_size, spec.image_size);
      img.pixels.fill(1.0, 1.0, 1.0);
      LabelMap segmap(spec.image_size, spec.image_size);

      Rng irng(derive_seed(spec.seed, std::string("image/") + img_id));
      const double cx = 0.5 + 0.12 * (irng.uniform() - 0.5);
      const double cy = 0.5 + 0.12 * (irng.uniform() - 0.5);
      const double half = 0.28 + 0.10 * irng.uniform();
      for (int y = 0; y < spec.image_size; ++y)
        for (int x = 0; x < spec.image_size; ++x) {
          const double u = (x + 0.5) / spec.image_size - cx;
          const double v = (y + 0.5) / spec.image_size - cy;
          if (inside_shape(k, u, v, half)) {
            img.pixels.at(y, x, 0) = rgb[0];
            img.pixels.at(y, x, 1) = rgb[1];
            img.pixels.at(y, x, 2) = rgb[2];
            segmap.at(y, x) = 1;
          }
        }
      img.segmentation = std::move(segmap);

      m.segments.push_back({seg.segment_id, seg.subject_id, seg.label, seg.band, img.image_id});
      m.images.push_back({img.image_id, k, "images/" + std::string(img_id) + ".png"});
      out.segments.push_back(std::move(seg));
      out.images.push_back(std::move(img));
    }
  }

  // stratified split: ~70/15/15 within each class, deterministic order
  std::vector<std::string> train, val, test;
  for (int k = 0; k < spec.num_classes; ++k) {
    const int n = spec.segments_per_class;
    int n_test = std::max(1, n * 15 / 100);
    int n_val = std::max(1, n * 15 / 100);
    if (n_val + n_test >= n) {
      n_val = n >= 3 ? 1 : 0;
      n_test = n >= 2 ? 1 : 0;
    }
    const int n_train = n - n_val - n_test;
    for (int s = 0; s < n; ++s) {
      const auto& id = m.segments[static_cast<std::size_t>(k * n + s)].segment_id;
      if (s < n_train)
        train.push_back(id);
      else if (s < n_train + n_val)
        val.push_back(id);
      else
        test.push_back(id);
    }
  }
  m.splits["train"] = std::move(train);
  m.splits["val"] = std::move(val);
  m.splits["test"] = std::move(test);
  m.validate();
  return out;
}

void write_dataset(const SyntheticDataset& ds, const std::string& root) {
  fs::create_directories(fs::path(root) / "images");
  {
    std::ofstream f(fs::path(root) / "manifest.json");
    if (!f) throw LoadError("write_dataset: cannot write manifest under " + root);
    f << ds.manifest.to_json() << "\n";
  }
  for (const auto& seg : ds.segments) {
    std::ofstream f(fs::path(root) / (seg.segment_id + ".f32"), std::ios::binary);
    std::vector<float> raw(static_cast<std::size_t>(seg.data.numel()));
    for (std::int64_t i = 0; i < seg.data.numel(); ++i)
      raw[static_cast<std::size_t>(i)] = static_cast<float>(seg.data[i]);
    f.write(reinterpret_cast<const char*>(raw.data()),
            static_cast<std::streamsize>(raw.size() * sizeof(float)));
  }
  for (const auto& img : ds.images) {
    const fs::path png = fs::path(root) / "images" / (img.image_id + ".png");
    write_png_rgb(png.string(), img.pixels);
    if (img.segmentation) {
      const fs::path seg = fs::path(root) / "images" / (img.image_id + "_seg.png");
      write_png_gray(seg.string(), *img.segmentation);
    }
  }
}

EEGSegment preprocess(const EEGSegment& segment, const PreprocessConfig& config) {
  EEGSegment out = segment;
  out.zero_variance_channels.clear();

  if (config.crop) {
    const auto [start, len] = *config.crop;
    if (start < 0 || len < 1 || start + len > segment.timesteps())
      throw ValidationError("preprocess: crop window out of bounds for segment " +
                            segment.segment_id);
    Tensor cropped({segment.channels(), len});
    for (int c = 0; c < segment.channels(); ++c)
      for (int t = 0; t < len; ++t) cropped.at(c, t) = segment.data.at(c, start + t);
    out.data = std::move(cropped);
  }

  using N = PreprocessConfig::Normalize;
  if (config.normalize == N::none) return out;

  const int ch = out.channels(), ts = out.timesteps();
  if (config.normalize == N::per_channel_z) {
    for (int c = 0; c < ch; ++c) {
      double mu = 0.0;
      for (int t = 0; t < ts; ++t) mu += out.data.at(c, t);
      mu /= ts;
      double var = 0.0;
      for (int t = 0; t < ts; ++t) {
        const double d = out.data.at(c, t) - mu;
        var += d * d;
      }
      var /= ts;
      double sd = std::sqrt(var);
      if (sd < 1e-12) {
        sd = 1.0;
        out.zero_variance_channels.push_back(c);
      }
      for (int t = 0; t < ts; ++t) out.data.at(c, t) = (out.data.at(c, t) - mu) / sd;
    }
  } else {  // global_z
    const double mu = out.data.mean();
    double var = 0.0;
    for (std::int64_t i = 0; i < out.data.numel(); ++i) {
      const double d = out.data[i] - mu;
      var += d * d;
    }
    var /= static_cast<double>(out.data.numel());
    double sd = std::sqrt(var);
    if (sd < 1e-12) {
      sd = 1.0;
      for (int c = 0; c < ch; ++c) out.zero_variance_channels.push_back(c);
    }
    for (std::int64_t i = 0; i < out.data.numel(); ++i) out.data[i] = (out.data[i] - mu) / sd;
  }
  return out;
}

}  // namespace neuro3d::eeg
