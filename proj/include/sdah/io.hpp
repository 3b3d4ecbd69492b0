#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sdah/tensor.hpp"

namespace sdah {

// SDT1 array file:
//   "SDT1" | u8 dtype (0=f32, 1=f64, 2=u8) | u8 ndim | 2 zero bytes |
//   ndim x u32 LE dims | row-major LE payload
enum class DType : std::uint8_t { f32 = 0, f64 = 1, u8 = 2 };

std::size_t dtype_size(DType t);

/// A decoded SDT1 array. Payload bytes are kept verbatim (little-endian).
struct ArrayBlob {
  DType dtype = DType::f32;
  Shape shape;
  std::vector<std::uint8_t> payload;

  std::size_t numel() const { return shape_numel(shape); }
  /// Converts f32/f64 payloads to a tensor of scalar T.
  template <typename T>
  Tensor<T> to_tensor() const;
  std::vector<std::uint8_t> to_u8() const;
};

template <typename T>
ArrayBlob blob_of(const Tensor<T>& t);
ArrayBlob blob_of_u8(Shape shape, std::span<const std::uint8_t> values);
/// UTF-8 text stored as a 1-D u8 array.
ArrayBlob blob_of_text(const std::string& text);
std::string text_of(const ArrayBlob& blob);

void write_sdt(std::ostream& os, const ArrayBlob& blob);
ArrayBlob read_sdt(std::istream& is);
void save_sdt(const std::filesystem::path& path, const ArrayBlob& blob);
ArrayBlob load_sdt(const std::filesystem::path& path);

// SDCK checkpoint: "SDCK" | u32 LE count | count x (u16 LE name length,
// UTF-8 name, SDT1 blob). Entry order is preserved.
struct Checkpoint {
  std::vector<std::pair<std::string, ArrayBlob>> entries;

  void put(std::string name, ArrayBlob blob);
  const ArrayBlob* find(const std::string& name) const;
  const ArrayBlob& at(const std::string& name) const;
};

void write_checkpoint(std::ostream& os, const Checkpoint& ck);
Checkpoint read_checkpoint(std::istream& is);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace sdah
