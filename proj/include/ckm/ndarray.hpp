#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

namespace ckm {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

inline Index shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

std::string shape_to_string(const Shape& shape);

/// Plain dense row-major array without gradient tracking. Used for datasets,
/// metrics and file I/O.
template <typename Scalar>
struct NdArray {
  Shape shape;
  Eigen::Array<Scalar, Eigen::Dynamic, 1> data;

  NdArray() = default;
  explicit NdArray(Shape s, Scalar fill = Scalar(0))
      : shape(std::move(s)), data(decltype(data)::Constant(shape_numel(shape), fill)) {}

  Index numel() const { return data.size(); }
  Index rank() const { return static_cast<Index>(shape.size()); }

  // 3-d (C x H x W) accessors.
  Scalar& at(Index c, Index y, Index x) { return data[(c * shape[1] + y) * shape[2] + x]; }
  Scalar at(Index c, Index y, Index x) const { return data[(c * shape[1] + y) * shape[2] + x]; }

  template <typename Other>
  NdArray<Other> cast() const {
    NdArray<Other> out;
    out.shape = shape;
    out.data = data.template cast<Other>();
    return out;
  }
};

using NdArrayF = NdArray<float>;
using NdArrayD = NdArray<double>;

/// Tensor container: "CKM1", u32 LE rank, rank u32 LE dims, f32 LE row-major payload.
void write_tensor_record(std::ostream& out, const NdArrayF& array);
NdArrayF read_tensor_record(std::istream& in);

void save_tensor(const std::filesystem::path& path, const NdArrayF& array);
NdArrayF load_tensor(const std::filesystem::path& path);

}  // namespace ckm
