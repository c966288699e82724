#pragma once

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace refsplat {

/// Single-channel H×W raster, row-major so that (row, col) == (y, x).
template <typename Scalar>
using PlaneT = Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Plane = PlaneT<double>;

/// Binary raster, 1 = to be inpainted.
using Mask = PlaneT<std::uint8_t>;

/// Three colour planes in [0,1].
using RgbImage = std::array<Plane, 3>;

inline RgbImage make_rgb(int height, int width, double value = 0.0) {
    return {Plane::Constant(height, width, value), Plane::Constant(height, width, value),
            Plane::Constant(height, width, value)};
}

inline RgbImage make_rgb(int height, int width, const Eigen::Vector3d& color) {
    return {Plane::Constant(height, width, color.x()), Plane::Constant(height, width, color.y()),
            Plane::Constant(height, width, color.z())};
}

/// Thrown for malformed arguments and configuration values.
class InvalidInput : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Inclusive pixel rectangle.
struct PixelBox {
    int x0 = 0;
    int y0 = 0;
    int x1 = -1;
    int y1 = -1;

    [[nodiscard]] bool empty() const { return x1 < x0 || y1 < y0; }
    [[nodiscard]] int width() const { return empty() ? 0 : x1 - x0 + 1; }
    [[nodiscard]] int height() const { return empty() ? 0 : y1 - y0 + 1; }
};

/// Tight bounding box of the nonzero pixels; empty box when the mask is all zero.
PixelBox mask_bounding_box(const Mask& mask);

}  // namespace refsplat
