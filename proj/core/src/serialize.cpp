#include "neuro3d/serialize.hpp"

#include <json.hpp>

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace neuro3d {

namespace {
constexpr char kMagic[4] = {'N', '3', 'D', '1'};

template <typename T>
void write_pod(std::ofstream& f, T v) {
  f.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& f) {
  T v{};
  f.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!f) throw std::runtime_error("archive: truncated file");
  return v;
}
}  // namespace

void save_archive(const std::string& path, const ArchiveHeader& header,
                  const std::map<std::string, Tensor>& tensors) {
  nlohmann::json j = {{"schema_version", header.schema_version},
                      {"config_hash", header.config_hash},
                      {"step", header.step},
                      {"version", header.version}};
  const std::string hs = j.dump();

  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("archive: cannot open for write: " + path);
  f.write(kMagic, 4);
  write_pod<std::uint32_t>(f, static_cast<std::uint32_t>(hs.size()));
  f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  write_pod<std::uint32_t>(f, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    write_pod<std::uint16_t>(f, static_cast<std::uint16_t>(name.size()));
    f.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_pod<std::uint8_t>(f, static_cast<std::uint8_t>(t.rank()));
    for (int d : t.shape()) write_pod<std::int32_t>(f, d);
    f.write(reinterpret_cast<const char*>(t.data()),
            static_cast<std::streamsize>(t.numel() * sizeof(double)));
  }
  if (!f) throw std::runtime_error("archive: write failed: " + path);
}

Archive load_archive(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("archive: cannot open: " + path);
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error("archive: bad magic: " + path);

  const auto hlen = read_pod<std::uint32_t>(f);
  std::string hs(hlen, '\0');
  f.read(hs.data(), hlen);
  if (!f) throw std::runtime_error("archive: truncated header");
  nlohmann::json j = nlohmann::json::parse(hs);

  Archive a;
  a.header.schema_version = j.value("schema_version", 1);
  a.header.config_hash = j.value("config_hash", "");
  a.header.step = j.value("step", 0);
  a.header.version = j.value("version", "");

  const auto n = read_pod<std::uint32_t>(f);
  for (std::uint32_t i = 0; i < n; ++i) {
    const auto name_len = read_pod<std::uint16_t>(f);
    std::string name(name_len, '\0');
    f.read(name.data(), name_len);
    const auto rank = read_pod<std::uint8_t>(f);
    std::vector<int> shape(rank);
    for (auto& d : shape) d = read_pod<std::int32_t>(f);
    Tensor t(shape);
    f.read(reinterpret_cast<char*>(t.data()),
           static_cast<std::streamsize>(t.numel() * sizeof(double)));
    if (!f) throw std::runtime_error("archive: truncated tensor " + name);
    a.tensors.emplace(std::move(name), std::move(t));
  }
  return a;
}

std::string content_hash(const std::string& text) {
  std::uint64_t h = 1469598103934665603ull;
  for (char c : text) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

}  // namespace neuro3d
