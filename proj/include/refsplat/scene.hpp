#pragma once

#include "refsplat/types.hpp"

#include <cmath>
#include <vector>

namespace refsplat {

inline constexpr int kShBasisCount = 16;
inline constexpr double kShDcOffset = 0.5;

/// SH coefficients, one column per colour channel, rows in basis order.
using ShCoeffs = Eigen::Matrix<double, kShBasisCount, 3>;

enum class Label : std::uint8_t { Unmasked = 0, Masked = 1 };

struct GaussianParticle {
    Eigen::Vector3d position = Eigen::Vector3d::Zero();
    Eigen::Vector3d log_scale = Eigen::Vector3d::Zero();
    /// (w, x, y, z)
    Eigen::Vector4d rotation{1.0, 0.0, 0.0, 0.0};
    double opacity_logit = 0.0;
    ShCoeffs sh = ShCoeffs::Zero();
    Label label = Label::Unmasked;

    [[nodiscard]] bool masked() const { return label == Label::Masked; }
};

struct GaussianScene {
    std::vector<GaussianParticle> particles;
    Eigen::Vector3d background = Eigen::Vector3d::Zero();

    [[nodiscard]] std::size_t size() const { return particles.size(); }
    [[nodiscard]] std::vector<Label> labels() const;
    void apply_labels(const std::vector<Label>& labels);
};

struct CameraView {
    int id = 0;
    int width = 0;
    int height = 0;
    double fx = 1.0;
    double fy = 1.0;
    double cx = 0.0;
    double cy = 0.0;
    Eigen::Matrix4d world_to_camera = Eigen::Matrix4d::Identity();
    RgbImage image;
    Mask mask;

    [[nodiscard]] Eigen::Matrix3d rotation() const { return world_to_camera.topLeftCorner<3, 3>(); }
    [[nodiscard]] Eigen::Vector3d translation() const { return world_to_camera.topRightCorner<3, 1>(); }
    [[nodiscard]] Eigen::Vector3d center() const { return -rotation().transpose() * translation(); }
    /// Camera-frame ray through pixel coordinates (u, v), with unit z component.
    [[nodiscard]] Eigen::Vector3d pixel_ray(double u, double v) const {
        return {(u - cx) / fx, (v - cy) / fy, 1.0};
    }
    /// Image and mask planes sized to the intrinsics, zero-filled.
    void allocate_planes();
};

/// Throws InvalidInput unless the pose block is orthonormal within `tol` and the
/// mask shape matches the image.
void validate_camera(const CameraView& camera, double tol = 1e-6);

/// Builds a world-to-camera transform for a camera at `eye` looking at `target`
/// (camera +z forward, +y down in the image).
Eigen::Matrix4d look_at(const Eigen::Vector3d& eye, const Eigen::Vector3d& target,
                        const Eigen::Vector3d& up = Eigen::Vector3d::UnitZ());

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
inline double logit(double p) { return std::log(p / (1.0 - p)); }

/// Rotation matrix of the normalized quaternion (w, x, y, z).
template <typename Scalar>
Eigen::Matrix<Scalar, 3, 3> quat_to_rotation(const Eigen::Matrix<Scalar, 4, 1>& quat) {
    const Scalar norm = quat.norm();
    if (!(norm > Scalar(0))) {
        throw InvalidInput("quaternion has zero norm");
    }
    const Eigen::Matrix<Scalar, 4, 1> q = quat / norm;
    const Scalar w = q[0], x = q[1], y = q[2], z = q[3];
    Eigen::Matrix<Scalar, 3, 3> rot;
    rot << Scalar(1) - Scalar(2) * (y * y + z * z), Scalar(2) * (x * y - w * z), Scalar(2) * (x * z + w * y),
        Scalar(2) * (x * y + w * z), Scalar(1) - Scalar(2) * (x * x + z * z), Scalar(2) * (y * z - w * x),
        Scalar(2) * (x * z - w * y), Scalar(2) * (y * z + w * x), Scalar(1) - Scalar(2) * (x * x + y * y);
    return rot;
}

/// Σ = R·diag(exp(2·log_scale))·Rᵀ, symmetrized.
template <typename Scalar>
Eigen::Matrix<Scalar, 3, 3> quat_scale_to_cov(const Eigen::Matrix<Scalar, 4, 1>& rotation,
                                              const Eigen::Matrix<Scalar, 3, 1>& log_scale) {
    const Eigen::Matrix<Scalar, 3, 3> rot = quat_to_rotation(rotation);
    const Eigen::Matrix<Scalar, 3, 3> m = rot * log_scale.array().exp().matrix().asDiagonal();
    Eigen::Matrix<Scalar, 3, 3> cov = m * m.transpose();
    // The product is symmetric up to rounding; make it exactly so.
    cov = (Scalar(0.5) * (cov + cov.transpose())).eval();
    return cov;
}

namespace sh {
inline constexpr double kC0 = 0.28209479177387814;
inline constexpr double kC1 = 0.4886025119029199;
inline constexpr std::array<double, 5> kC2{1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
                                           -1.0925484305920792, 0.5462742152960396};
inline constexpr std::array<double, 7> kC3{-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
                                           0.3731763325901154,  -0.4570457994644658, 1.445305721320277,
                                           -0.5900435899266435};
}  // namespace sh

/// Real SH basis up to degree 3 at a unit direction.
template <typename Scalar>
Eigen::Matrix<Scalar, kShBasisCount, 1> sh_basis(const Eigen::Matrix<Scalar, 3, 1>& dir) {
    using namespace sh;
    const Scalar x = dir.x(), y = dir.y(), z = dir.z();
    const Scalar xx = x * x, yy = y * y, zz = z * z;
    Eigen::Matrix<Scalar, kShBasisCount, 1> b;
    b[0] = Scalar(kC0);
    b[1] = -Scalar(kC1) * y;
    b[2] = Scalar(kC1) * z;
    b[3] = -Scalar(kC1) * x;
    b[4] = Scalar(kC2[0]) * x * y;
    b[5] = Scalar(kC2[1]) * y * z;
    b[6] = Scalar(kC2[2]) * (Scalar(2) * zz - xx - yy);
    b[7] = Scalar(kC2[3]) * x * z;
    b[8] = Scalar(kC2[4]) * (xx - yy);
    b[9] = Scalar(kC3[0]) * y * (Scalar(3) * xx - yy);
    b[10] = Scalar(kC3[1]) * x * y * z;
    b[11] = Scalar(kC3[2]) * y * (Scalar(4) * zz - xx - yy);
    b[12] = Scalar(kC3[3]) * z * (Scalar(2) * zz - Scalar(3) * xx - Scalar(3) * yy);
    b[13] = Scalar(kC3[4]) * x * (Scalar(4) * zz - xx - yy);
    b[14] = Scalar(kC3[5]) * z * (xx - yy);
    b[15] = Scalar(kC3[6]) * x * (xx - Scalar(3) * yy);
    return b;
}

/// ∂basis/∂(x, y, z), treating the direction components as independent.
template <typename Scalar>
Eigen::Matrix<Scalar, kShBasisCount, 3> sh_basis_jacobian(const Eigen::Matrix<Scalar, 3, 1>& dir) {
    using namespace sh;
    const Scalar x = dir.x(), y = dir.y(), z = dir.z();
    const Scalar xx = x * x, yy = y * y, zz = z * z;
    Eigen::Matrix<Scalar, kShBasisCount, 3> j = Eigen::Matrix<Scalar, kShBasisCount, 3>::Zero();
    j(1, 1) = -Scalar(kC1);
    j(2, 2) = Scalar(kC1);
    j(3, 0) = -Scalar(kC1);

    j(4, 0) = Scalar(kC2[0]) * y;
    j(4, 1) = Scalar(kC2[0]) * x;
    j(5, 1) = Scalar(kC2[1]) * z;
    j(5, 2) = Scalar(kC2[1]) * y;
    j(6, 0) = Scalar(-2 * kC2[2]) * x;
    j(6, 1) = Scalar(-2 * kC2[2]) * y;
    j(6, 2) = Scalar(4 * kC2[2]) * z;
    j(7, 0) = Scalar(kC2[3]) * z;
    j(7, 2) = Scalar(kC2[3]) * x;
    j(8, 0) = Scalar(2 * kC2[4]) * x;
    j(8, 1) = Scalar(-2 * kC2[4]) * y;

    j(9, 0) = Scalar(6 * kC3[0]) * x * y;
    j(9, 1) = Scalar(3 * kC3[0]) * (xx - yy);
    j(10, 0) = Scalar(kC3[1]) * y * z;
    j(10, 1) = Scalar(kC3[1]) * x * z;
    j(10, 2) = Scalar(kC3[1]) * x * y;
    j(11, 0) = Scalar(-2 * kC3[2]) * x * y;
    j(11, 1) = Scalar(kC3[2]) * (Scalar(4) * zz - xx - Scalar(3) * yy);
    j(11, 2) = Scalar(8 * kC3[2]) * y * z;
    j(12, 0) = Scalar(-6 * kC3[3]) * x * z;
    j(12, 1) = Scalar(-6 * kC3[3]) * y * z;
    j(12, 2) = Scalar(kC3[3]) * (Scalar(6) * zz - Scalar(3) * xx - Scalar(3) * yy);
    j(13, 0) = Scalar(kC3[4]) * (Scalar(4) * zz - Scalar(3) * xx - yy);
    j(13, 1) = Scalar(-2 * kC3[4]) * x * y;
    j(13, 2) = Scalar(8 * kC3[4]) * x * z;
    j(14, 0) = Scalar(2 * kC3[5]) * x * z;
    j(14, 1) = Scalar(-2 * kC3[5]) * y * z;
    j(14, 2) = Scalar(kC3[5]) * (xx - yy);
    j(15, 0) = Scalar(3 * kC3[6]) * (xx - yy);
    j(15, 1) = Scalar(-6 * kC3[6]) * x * y;
    return j;
}

/// View-dependent colour: basisᵀ·coeffs + 0.5, clamped at zero per channel.
template <typename Scalar>
Eigen::Matrix<Scalar, 3, 1> sh_eval(const Eigen::Matrix<Scalar, kShBasisCount, 3>& coeffs,
                                    const Eigen::Matrix<Scalar, 3, 1>& view_dir) {
    const Eigen::Matrix<Scalar, 3, 1> raw =
        coeffs.transpose() * sh_basis(view_dir) + Eigen::Matrix<Scalar, 3, 1>::Constant(Scalar(kShDcOffset));
    return raw.cwiseMax(Scalar(0));
}

/// DC coefficient that reproduces `color` exactly under sh_eval.
inline double color_to_sh_dc(double color) { return (color - kShDcOffset) / sh::kC0; }

}  // namespace refsplat
