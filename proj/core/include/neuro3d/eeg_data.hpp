#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "neuro3d/errors.hpp"
#include "neuro3d/image.hpp"
#include "neuro3d/tensor.hpp"

namespace neuro3d::eeg {

enum class Band { band_14_70, band_5_95, band_55_95, synthetic };

std::string band_name(Band b);
Band band_from_name(const std::string& s);

struct EEGSegment {
  Tensor data;  // [channels x timesteps], microvolts
  int subject_id = 0;
  int label = 0;
  Band band = Band::synthetic;
  std::string segment_id;
  // Channels whose variance vanished under z-normalization (preprocess metadata).
  std::vector<int> zero_variance_channels;

  int channels() const { return data.dim(0); }
  int timesteps() const { return data.dim(1); }
};

struct StimulusImage {
  Image pixels;
  int category = 0;
  std::string image_id;
  std::optional<LabelMap> segmentation;
};

struct ManifestSegment {
  std::string segment_id;
  int subject_id = 0;
  int label = 0;
  Band band = Band::synthetic;
  std::string image_id;
};

struct ManifestImage {
  std::string image_id;
  int category = 0;
  std::string file;
};

struct DatasetManifest {
  int schema_version = 1;
  int num_classes = 0;
  int channels = 0;
  int timesteps = 0;
  std::vector<ManifestSegment> segments;
  std::vector<ManifestImage> images;
  std::map<std::string, std::vector<std::string>> splits;  // train/val/test

  int num_segments() const { return static_cast<int>(segments.size()); }
  const ManifestSegment& segment(const std::string& id) const;
  const ManifestImage& image(const std::string& id) const;
  std::vector<std::string> split_ids(const std::string& split) const;

  // Splits disjoint and covering, pairing total, labels in range, ids unique.
  void validate() const;

  std::string to_json() const;
  static DatasetManifest from_json(const std::string& text);
};

// A dataset rooted at a directory: manifest.json, <segment_id>.f32 records
// (little-endian float32, row-major [channels x timesteps]) and images/ PNGs.
class Dataset {
public:
  Dataset(std::string root, DatasetManifest manifest);

  const DatasetManifest& manifest() const { return manifest_; }
  const std::string& root() const { return root_; }

  // Loads and validates one segment; throws ValidationError naming the
  // segment on any shape/content mismatch.
  EEGSegment load_segment(const std::string& segment_id) const;
  StimulusImage load_image(const std::string& image_id, bool with_segmentation = true) const;
  StimulusImage image_for_segment(const std::string& segment_id,
                                  bool with_segmentation = true) const;

  // Single-consumer pass over (a split of) the segment list.
  class SegmentIterator {
  public:
    SegmentIterator(const Dataset& ds, std::vector<std::string> ids)
        : ds_(&ds), ids_(std::move(ids)) {}
    std::optional<EEGSegment> next();

  private:
    const Dataset* ds_;
    std::vector<std::string> ids_;
    std::size_t pos_ = 0;
  };

  SegmentIterator segments() const;
  SegmentIterator segments_in_split(const std::string& split) const;

private:
  std::string root_;
  DatasetManifest manifest_;
};

// Generic loader for the on-disk container; validates the manifest eagerly.
Dataset load_dataset(const std::string& root);

// EEG-ImageNet layout: 128 channels, segments filtered to the requested band.
Dataset load_eeg_imagenet(const std::string& root, Band band);

// Things-EEG2 layout: channel/timestep counts trusted from the manifest.
Dataset load_things_eeg2(const std::string& root);

struct SyntheticSpec {
  int num_classes = 4;
  int segments_per_class = 20;
  int channels = 8;
  int timesteps = 128;
  int image_size = 32;
  std::uint64_t seed = 7;
};

struct SyntheticDataset {
  DatasetManifest manifest;
  std::vector<EEGSegment> segments;
  std::vector<StimulusImage> images;
};

// Pure function of its spec: each class gets a disjoint sinusoid band plus a
// class-specific channel gain profile; stimuli are colored shapes on a white
// background with exact segmentation (0 = background, 1 = object).
SyntheticDataset generate_synthetic_dataset(const SyntheticSpec& spec);

void write_dataset(const SyntheticDataset& ds, const std::string& root);

// Class color/shape used by the generator; exposed so oracles can reuse them.
void synthetic_class_color(int label, int num_classes, double rgb_out[3]);
std::string synthetic_class_prompt(int label);

struct PreprocessConfig {
  enum class Normalize { per_channel_z, global_z, none };
  Normalize normalize = Normalize::per_channel_z;
  std::optional<std::pair<int, int>> crop;  // [start, len) along time
};

EEGSegment preprocess(const EEGSegment& segment, const PreprocessConfig& config);

}  // namespace neuro3d::eeg
