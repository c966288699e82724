#include "refsplat/scene.hpp"

#include <fmt/format.h>

namespace refsplat {

std::vector<Label> GaussianScene::labels() const {
    std::vector<Label> out;
    out.reserve(particles.size());
    for (const auto& p : particles) {
        out.push_back(p.label);
    }
    return out;
}

void GaussianScene::apply_labels(const std::vector<Label>& labels) {
    if (labels.size() != particles.size()) {
        throw InvalidInput(fmt::format("label count {} does not match particle count {}", labels.size(),
                                       particles.size()));
    }
    for (std::size_t i = 0; i < labels.size(); ++i) {
        particles[i].label = labels[i];
    }
}

void CameraView::allocate_planes() {
    image = make_rgb(height, width);
    mask = Mask::Zero(height, width);
}

void validate_camera(const CameraView& camera, double tol) {
    if (camera.width <= 0 || camera.height <= 0) {
        throw InvalidInput(fmt::format("camera {}: non-positive image size", camera.id));
    }
    if (!(camera.fx > 0.0) || !(camera.fy > 0.0)) {
        throw InvalidInput(fmt::format("camera {}: focal lengths must be positive", camera.id));
    }
    const Eigen::Matrix3d rot = camera.rotation();
    const double err = (rot * rot.transpose() - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff();
    if (!(err <= tol)) {
        throw InvalidInput(
            fmt::format("camera {}: rotation block is not orthonormal (error {:.3g} > {:.3g})", camera.id, err, tol));
    }
    const auto bottom = camera.world_to_camera.row(3);
    if (bottom != Eigen::RowVector4d(0, 0, 0, 1)) {
        throw InvalidInput(fmt::format("camera {}: last pose row must be (0, 0, 0, 1)", camera.id));
    }
    if (camera.mask.size() != 0 && (camera.mask.rows() != camera.height || camera.mask.cols() != camera.width)) {
        throw InvalidInput(fmt::format("camera {}: mask size does not match image size", camera.id));
    }
    for (const auto& plane : camera.image) {
        if (plane.size() != 0 && (plane.rows() != camera.height || plane.cols() != camera.width)) {
            throw InvalidInput(fmt::format("camera {}: image plane size does not match intrinsics", camera.id));
        }
    }
}

Eigen::Matrix4d look_at(const Eigen::Vector3d& eye, const Eigen::Vector3d& target, const Eigen::Vector3d& up) {
    const Eigen::Vector3d forward = (target - eye).normalized();
    Eigen::Vector3d right = forward.cross(up);
    if (right.norm() < 1e-12) {
        right = forward.cross(Eigen::Vector3d::UnitX());
    }
    right.normalize();
    const Eigen::Vector3d down = forward.cross(right);
    Eigen::Matrix4d pose = Eigen::Matrix4d::Identity();
    pose.block<1, 3>(0, 0) = right.transpose();
    pose.block<1, 3>(1, 0) = down.transpose();
    pose.block<1, 3>(2, 0) = forward.transpose();
    pose.topRightCorner<3, 1>() = -pose.topLeftCorner<3, 3>() * eye;
    return pose;
}

PixelBox mask_bounding_box(const Mask& mask) {
    PixelBox box{static_cast<int>(mask.cols()), static_cast<int>(mask.rows()), -1, -1};
    for (Eigen::Index y = 0; y < mask.rows(); ++y) {
        for (Eigen::Index x = 0; x < mask.cols(); ++x) {
            if (mask(y, x) != 0) {
                box.x0 = std::min(box.x0, static_cast<int>(x));
                box.y0 = std::min(box.y0, static_cast<int>(y));
                box.x1 = std::max(box.x1, static_cast<int>(x));
                box.y1 = std::max(box.y1, static_cast<int>(y));
            }
        }
    }
    if (box.x1 < 0) {
        return PixelBox{};
    }
    return box;
}

}  // namespace refsplat
