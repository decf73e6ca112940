#include "slmlab/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <vector>

#include <json.hpp>

namespace slm::checkpoint {
namespace {

constexpr char kMagic[4] = {'S', 'L', 'M', 'F'};

template <typename P>
void write_pod(std::ofstream& os, P v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(P));
}

template <typename P>
P read_pod(std::ifstream& is) {
  P v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(P));
  if (!is) throw ValidationError("truncated tensor file");
  return v;
}

template <typename T>
void write_impl(const std::filesystem::path& file, const TensorT<T>& t, Dtype dtype) {
  std::ofstream os(file, std::ios::binary);
  if (!os) throw ValidationError("cannot open for write: " + file.string());
  os.write(kMagic, 4);
  write_pod<uint32_t>(os, kVersion);
  write_pod<uint32_t>(os, static_cast<uint32_t>(t.rank()));
  for (int64_t d : t.shape()) write_pod<uint64_t>(os, static_cast<uint64_t>(d));
  write_pod<uint32_t>(os, static_cast<uint32_t>(dtype));
  os.write(reinterpret_cast<const char*>(t.data()), t.numel() * sizeof(T));
  if (!os) throw ValidationError("write failed: " + file.string());
}

}  // namespace

void write_tensor(const std::filesystem::path& file, const Tensor& t) {
  write_impl(file, t, Dtype::kF64);
}

void write_tensor(const std::filesystem::path& file, const Tensor32& t) {
  write_impl(file, t, Dtype::kF32);
}

Dtype peek_dtype(const std::filesystem::path& file) {
  std::ifstream is(file, std::ios::binary);
  if (!is) throw ValidationError("cannot open: " + file.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    throw ValidationError("bad magic in " + file.string());
  read_pod<uint32_t>(is);
  uint32_t rank = read_pod<uint32_t>(is);
  for (uint32_t i = 0; i < rank; ++i) read_pod<uint64_t>(is);
  return static_cast<Dtype>(read_pod<uint32_t>(is));
}

Tensor read_tensor(const std::filesystem::path& file) {
  std::ifstream is(file, std::ios::binary);
  if (!is) throw ValidationError("cannot open: " + file.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    throw ValidationError("bad magic in " + file.string());
  uint32_t version = read_pod<uint32_t>(is);
  if (version != kVersion)
    throw ValidationError("unsupported tensor file version " + std::to_string(version));
  uint32_t rank = read_pod<uint32_t>(is);
  std::vector<int64_t> shape(rank);
  for (uint32_t i = 0; i < rank; ++i) shape[i] = static_cast<int64_t>(read_pod<uint64_t>(is));
  Dtype dtype = static_cast<Dtype>(read_pod<uint32_t>(is));
  Tensor t(shape);
  if (dtype == Dtype::kF64) {
    is.read(reinterpret_cast<char*>(t.data()), t.numel() * sizeof(double));
  } else if (dtype == Dtype::kF32) {
    std::vector<float> buf(t.numel());
    is.read(reinterpret_cast<char*>(buf.data()), t.numel() * sizeof(float));
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = buf[i];
  } else {
    throw ValidationError("unknown dtype tag in " + file.string());
  }
  if (!is) throw ValidationError("truncated payload in " + file.string());
  return t;
}

void write_manifest(const std::filesystem::path& dir,
                    const std::map<std::string, Tensor>& tensors) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["format"] = "slmf";
  manifest["version"] = kVersion;
  nlohmann::json entries = nlohmann::json::object();
  for (const auto& [name, t] : tensors) {
    std::string fname = name + ".slmf";
    for (auto& ch : fname)
      if (ch == '/' || ch == ' ') ch = '_';
    write_tensor(dir / fname, t);
    entries[name] = {{"file", fname}, {"shape", t.shape()}, {"dtype", "f64"}};
  }
  manifest["tensors"] = entries;
  std::ofstream os(dir / "manifest.json");
  os << manifest.dump(2) << "\n";
}

std::map<std::string, Tensor> read_manifest(const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw ValidationError("no manifest.json in " + dir.string());
  nlohmann::json manifest = nlohmann::json::parse(is);
  std::map<std::string, Tensor> out;
  for (const auto& [name, entry] : manifest.at("tensors").items())
    out[name] = read_tensor(dir / entry.at("file").get<std::string>());
  return out;
}

}  // namespace slm::checkpoint
