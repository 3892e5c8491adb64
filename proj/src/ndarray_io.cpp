#include "ckm/ndarray.hpp"

#include "ckm/error.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

namespace ckm {
namespace {

constexpr char kMagic[4] = {'C', 'K', 'M', '1'};

void put_u32(std::ostream& out, std::uint32_t v) {
  const unsigned char bytes[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                                  static_cast<unsigned char>(v >> 16),
                                  static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(bytes), 4);
}

std::uint32_t get_u32(std::istream& in) {
  unsigned char bytes[4];
  if (!in.read(reinterpret_cast<char*>(bytes), 4)) {
    throw IoError("tensor record truncated");
  }
  return std::uint32_t(bytes[0]) | (std::uint32_t(bytes[1]) << 8) |
         (std::uint32_t(bytes[2]) << 16) | (std::uint32_t(bytes[3]) << 24);
}

}  // namespace

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

void write_tensor_record(std::ostream& out, const NdArrayF& array) {
  if (shape_numel(array.shape) != array.numel()) {
    throw InvalidArgument("write_tensor_record: shape does not match payload");
  }
  out.write(kMagic, 4);
  put_u32(out, static_cast<std::uint32_t>(array.shape.size()));
  for (Index d : array.shape) {
    if (d < 0 || d > std::numeric_limits<std::uint32_t>::max()) {
      throw InvalidArgument("write_tensor_record: dimension out of range");
    }
    put_u32(out, static_cast<std::uint32_t>(d));
  }
  for (Index i = 0; i < array.numel(); ++i) {
    put_u32(out, std::bit_cast<std::uint32_t>(array.data[i]));
  }
  if (!out) throw IoError("write_tensor_record: stream write failed");
}

NdArrayF read_tensor_record(std::istream& in) {
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
    throw IoError("tensor record: bad magic (expected CKM1)");
  }
  const std::uint32_t rank = get_u32(in);
  if (rank > 16) throw IoError("tensor record: implausible rank " + std::to_string(rank));
  NdArrayF array;
  array.shape.resize(rank);
  for (auto& d : array.shape) d = get_u32(in);
  array.data.resize(shape_numel(array.shape));
  for (Index i = 0; i < array.numel(); ++i) {
    array.data[i] = std::bit_cast<float>(get_u32(in));
  }
  return array;
}

void save_tensor(const std::filesystem::path& path, const NdArrayF& array) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  write_tensor_record(out, array);
}

NdArrayF load_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return read_tensor_record(in);
}

}  // namespace ckm
