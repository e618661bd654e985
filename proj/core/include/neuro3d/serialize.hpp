#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "neuro3d/tensor.hpp"

namespace neuro3d {

// Checkpoint container: a little-endian binary archive of named f64 tensors
// behind a small JSON header. One format shared by every stage.
struct ArchiveHeader {
  int schema_version = 1;
  std::string config_hash;
  std::int64_t step = 0;
  std::string version;  // extractor/embedder version stamp; empty elsewhere
};

void save_archive(const std::string& path, const ArchiveHeader& header,
                  const std::map<std::string, Tensor>& tensors);

struct Archive {
  ArchiveHeader header;
  std::map<std::string, Tensor> tensors;
};

Archive load_archive(const std::string& path);

// FNV-1a over a string; used for config hashes and stable content stamps.
std::string content_hash(const std::string& text);

}  // namespace neuro3d
