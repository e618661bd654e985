#pragma once

#include <json.hpp>

#include <fstream>
#include <string>

#include "neuro3d/errors.hpp"

namespace neuro3d::internal {

// Append-oriented JSONL writer; silently inert when constructed with an
// empty path so trainers can be run without logging.
class JsonlWriter {
public:
  explicit JsonlWriter(const std::string& path) {
    if (path.empty()) return;
    f_.open(path);
    if (!f_) throw LoadError("jsonl: cannot open for write: " + path);
  }

  void write(const nlohmann::json& j) {
    if (f_.is_open()) f_ << j.dump() << "\n";
  }

  void flush() {
    if (f_.is_open()) f_.flush();
  }

private:
  std::ofstream f_;
};

}  // namespace neuro3d::internal
