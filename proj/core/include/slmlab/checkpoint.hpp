#pragma once

#include <filesystem>
#include <map>
#include <string>

#include "slmlab/tensor.hpp"

namespace slm {

// One tensor per flat binary file:
//   magic "SLMF" | version u32 | rank u32 | dims u64 x rank | dtype u32 | payload (LE)
// dtype: 0 = f64, 1 = f32. A JSON manifest maps parameter names to files.
namespace checkpoint {

constexpr uint32_t kVersion = 1;
enum class Dtype : uint32_t { kF64 = 0, kF32 = 1 };

void write_tensor(const std::filesystem::path& file, const Tensor& t);
void write_tensor(const std::filesystem::path& file, const Tensor32& t);

// Reads any dtype, widening f32 to f64.
Tensor read_tensor(const std::filesystem::path& file);
Dtype peek_dtype(const std::filesystem::path& file);

// Writes <name>.slmf per tensor plus manifest.json in `dir`.
void write_manifest(const std::filesystem::path& dir,
                    const std::map<std::string, Tensor>& tensors);
std::map<std::string, Tensor> read_manifest(const std::filesystem::path& dir);

}  // namespace checkpoint
}  // namespace slm
