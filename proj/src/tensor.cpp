#include "probgrowth/tensor.hpp"

#include <algorithm>
#include <sstream>

#include "probgrowth/error.hpp"

namespace probgrowth {

std::string Extent::str() const {
  std::ostringstream os;
  if (is_3d()) {
    os << depth << "x";
  }
  os << height << "x" << width;
  return os.str();
}

Extent Extent::cube(int spatial_dims, int size) {
  if (spatial_dims == 3) {
    return {size, size, size};
  }
  return {1, size, size};
}

Extent Extent::halved() const {
  return {is_3d() ? depth / 2 : 1, height / 2, width / 2};
}

Extent Extent::doubled() const {
  return {is_3d() ? depth * 2 : 1, height * 2, width * 2};
}

std::string Tensor::shape_str() const {
  return "[" + std::to_string(channels) + " x " + extent.str() + "]";
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  if (a.extent != b.extent) {
    throw DimensionError("concat_channels: extent mismatch " + a.shape_str() + " vs " +
                         b.shape_str());
  }
  Tensor out(a.channels + b.channels, a.extent);
  std::copy(a.data.begin(), a.data.end(), out.data.begin());
  std::copy(b.data.begin(), b.data.end(),
            out.data.begin() + static_cast<std::ptrdiff_t>(a.data.size()));
  return out;
}

void split_channels(const Tensor& joined, int first_channels, Tensor& a, Tensor& b) {
  const auto split = static_cast<std::ptrdiff_t>(first_channels * joined.plane());
  a = Tensor(first_channels, joined.extent);
  b = Tensor(joined.channels - first_channels, joined.extent);
  std::copy(joined.data.begin(), joined.data.begin() + split, a.data.begin());
  std::copy(joined.data.begin() + split, joined.data.end(), b.data.begin());
}

}  // namespace probgrowth
