#include "sdah/io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace sdah {

static_assert(std::endian::native == std::endian::little,
              "payloads are memcpy'd and assume a little-endian host");

namespace {

constexpr char kSdtMagic[4] = {'S', 'D', 'T', '1'};
constexpr char kCkMagic[4] = {'S', 'D', 'C', 'K'};

template <typename U>
void put_le(std::ostream& os, U v) {
  char buf[sizeof(U)];
  std::memcpy(buf, &v, sizeof(U));
  os.write(buf, sizeof(U));
}

template <typename U>
U get_le(std::istream& is, const char* what) {
  char buf[sizeof(U)];
  if (!is.read(buf, sizeof(U))) throw DataError(std::string("truncated ") + what);
  U v;
  std::memcpy(&v, buf, sizeof(U));
  return v;
}

}  // namespace

std::size_t dtype_size(DType t) {
  switch (t) {
    case DType::f32: return 4;
    case DType::f64: return 8;
    case DType::u8: return 1;
  }
  throw DataError("unknown dtype");
}

template <typename T>
Tensor<T> ArrayBlob::to_tensor() const {
  const std::size_t n = numel();
  std::vector<T> values(n);
  if (dtype == DType::f32) {
    for (std::size_t i = 0; i < n; ++i) {
      float v;
      std::memcpy(&v, payload.data() + 4 * i, 4);
      values[i] = static_cast<T>(v);
    }
  } else if (dtype == DType::f64) {
    for (std::size_t i = 0; i < n; ++i) {
      double v;
      std::memcpy(&v, payload.data() + 8 * i, 8);
      values[i] = static_cast<T>(v);
    }
  } else {
    for (std::size_t i = 0; i < n; ++i) values[i] = static_cast<T>(payload[i]);
  }
  return Tensor<T>(shape, std::move(values));
}

std::vector<std::uint8_t> ArrayBlob::to_u8() const {
  if (dtype != DType::u8) throw DataError("expected a u8 array");
  return payload;
}

template <typename T>
ArrayBlob blob_of(const Tensor<T>& t) {
  ArrayBlob b;
  b.dtype = sizeof(T) == 4 ? DType::f32 : DType::f64;
  b.shape = t.shape();
  b.payload.resize(t.numel() * sizeof(T));
  std::memcpy(b.payload.data(), t.data().data(), b.payload.size());
  return b;
}

ArrayBlob blob_of_u8(Shape shape, std::span<const std::uint8_t> values) {
  ArrayBlob b;
  b.dtype = DType::u8;
  b.shape = std::move(shape);
  if (b.numel() != values.size()) throw ShapeError("blob_of_u8: size mismatch");
  b.payload.assign(values.begin(), values.end());
  return b;
}

ArrayBlob blob_of_text(const std::string& text) {
  // SDT1 has no zero-length dims, so empty text is a single NUL byte.
  std::vector<std::uint8_t> bytes(text.begin(), text.end());
  if (bytes.empty()) bytes.push_back(0);
  const int n = static_cast<int>(bytes.size());
  return blob_of_u8(Shape{n}, bytes);
}

std::string text_of(const ArrayBlob& blob) {
  if (blob.dtype != DType::u8) throw DataError("text entry must be u8");
  std::string s(blob.payload.begin(), blob.payload.end());
  if (s.size() == 1 && s[0] == '\0') s.clear();
  return s;
}

void write_sdt(std::ostream& os, const ArrayBlob& blob) {
  if (blob.shape.size() > 255) throw ShapeError("SDT1 supports at most 255 dims");
  if (blob.payload.size() != blob.numel() * dtype_size(blob.dtype))
    throw ShapeError("SDT1 payload size does not match shape");
  os.write(kSdtMagic, 4);
  put_le<std::uint8_t>(os, static_cast<std::uint8_t>(blob.dtype));
  put_le<std::uint8_t>(os, static_cast<std::uint8_t>(blob.shape.size()));
  put_le<std::uint16_t>(os, 0);
  for (int d : blob.shape) put_le<std::uint32_t>(os, static_cast<std::uint32_t>(d));
  os.write(reinterpret_cast<const char*>(blob.payload.data()),
           static_cast<std::streamsize>(blob.payload.size()));
}

ArrayBlob read_sdt(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kSdtMagic, 4) != 0)
    throw DataError("bad SDT1 magic");
  ArrayBlob b;
  const auto dt = get_le<std::uint8_t>(is, "SDT1 header");
  if (dt > 2) throw DataError("bad SDT1 dtype " + std::to_string(dt));
  b.dtype = static_cast<DType>(dt);
  const auto ndim = get_le<std::uint8_t>(is, "SDT1 header");
  if (get_le<std::uint16_t>(is, "SDT1 header") != 0) throw DataError("SDT1 reserved bytes not zero");
  for (int i = 0; i < ndim; ++i) {
    const auto d = get_le<std::uint32_t>(is, "SDT1 dims");
    if (d == 0 || d > 0x7fffffffu) throw DataError("SDT1 dimension out of range");
    b.shape.push_back(static_cast<int>(d));
  }
  b.payload.resize(b.numel() * dtype_size(b.dtype));
  if (!is.read(reinterpret_cast<char*>(b.payload.data()),
               static_cast<std::streamsize>(b.payload.size())))
    throw DataError("truncated SDT1 payload");
  return b;
}

void save_sdt(const std::filesystem::path& path, const ArrayBlob& blob) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open " + path.string() + " for writing");
  write_sdt(os, blob);
  if (!os) throw DataError("write failed: " + path.string());
}

ArrayBlob load_sdt(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path.string());
  return read_sdt(is);
}

void Checkpoint::put(std::string name, ArrayBlob blob) {
  for (auto& [n, b] : entries) {
    if (n == name) {
      b = std::move(blob);
      return;
    }
  }
  entries.emplace_back(std::move(name), std::move(blob));
}

const ArrayBlob* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, b] : entries)
    if (n == name) return &b;
  return nullptr;
}

const ArrayBlob& Checkpoint::at(const std::string& name) const {
  if (const auto* b = find(name)) return *b;
  throw DataError("checkpoint has no entry '" + name + "'");
}

void write_checkpoint(std::ostream& os, const Checkpoint& ck) {
  os.write(kCkMagic, 4);
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(ck.entries.size()));
  for (const auto& [name, blob] : ck.entries) {
    if (name.size() > 0xffff) throw DataError("checkpoint entry name too long");
    put_le<std::uint16_t>(os, static_cast<std::uint16_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_sdt(os, blob);
  }
}

Checkpoint read_checkpoint(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kCkMagic, 4) != 0)
    throw DataError("bad SDCK magic");
  Checkpoint ck;
  const auto count = get_le<std::uint32_t>(is, "SDCK header");
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = get_le<std::uint16_t>(is, "SDCK entry");
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw DataError("truncated SDCK entry name");
    ck.entries.emplace_back(std::move(name), read_sdt(is));
  }
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open " + path.string() + " for writing");
  write_checkpoint(os, ck);
  if (!os) throw DataError("write failed: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path.string());
  return read_checkpoint(is);
}

template Tensor<float> ArrayBlob::to_tensor<float>() const;
template Tensor<double> ArrayBlob::to_tensor<double>() const;
template ArrayBlob blob_of<float>(const Tensor<float>&);
template ArrayBlob blob_of<double>(const Tensor<double>&);

}  // namespace sdah
