#include "refsplat/rasterizer.hpp"

#include "refsplat/parallel.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>

namespace refsplat {

namespace {

struct Frame {
    std::vector<ProjectedGaussian> splats;  // sorted by (depth, particle index)
    int tiles_x = 0;
    int tiles_y = 0;
    std::vector<std::vector<std::uint32_t>> bins;  // per tile, indices into splats in sorted order
};

/// Tangent x/z and y/z used by the EWA Jacobian, clamped to 1.3× the field of view
/// so that off-screen particles near the camera do not smear across the frame.
struct JacobianTangent {
    double u = 0.0;
    double v = 0.0;
    bool u_clamped = false;
    bool v_clamped = false;
};

JacobianTangent jacobian_tangent(const Eigen::Vector3d& pc, const CameraView& camera) {
    const double lim_u = kFovClamp * 0.5 * camera.width / camera.fx;
    const double lim_v = kFovClamp * 0.5 * camera.height / camera.fy;
    JacobianTangent t;
    const double u = pc.x() / pc.z(), v = pc.y() / pc.z();
    t.u = std::clamp(u, -lim_u, lim_u);
    t.v = std::clamp(v, -lim_v, lim_v);
    t.u_clamped = t.u != u;
    t.v_clamped = t.v != v;
    return t;
}

Eigen::Matrix<double, 2, 3> projection_jacobian(const Eigen::Vector3d& pc, const CameraView& camera) {
    const double inv_z = 1.0 / pc.z();
    const JacobianTangent tan = jacobian_tangent(pc, camera);
    Eigen::Matrix<double, 2, 3> jac;
    jac << camera.fx * inv_z, 0.0, -camera.fx * tan.u * inv_z, 0.0, camera.fy * inv_z, -camera.fy * tan.v * inv_z;
    return jac;
}

std::optional<ProjectedGaussian> project_with_center(const GaussianParticle& particle, std::size_t index,
                                                     const CameraView& camera, const Eigen::Vector3d& camera_center) {
    const Eigen::Matrix3d view_rot = camera.rotation();
    const Eigen::Vector3d pc = view_rot * particle.position + camera.translation();
    if (!(pc.z() > kNearPlane)) {
        return std::nullopt;
    }
    const Eigen::Matrix3d cov3 = quat_scale_to_cov(particle.rotation, particle.log_scale);
    const Eigen::Matrix<double, 2, 3> t = projection_jacobian(pc, camera) * view_rot;
    Eigen::Matrix2d cov = t * cov3 * t.transpose();
    const double off = 0.5 * (cov(0, 1) + cov(1, 0));
    cov(0, 1) = off;
    cov(1, 0) = off;
    cov(0, 0) += kCovarianceFloor;
    cov(1, 1) += kCovarianceFloor;
    const double det = cov(0, 0) * cov(1, 1) - off * off;
    if (!(det > 0.0)) {
        return std::nullopt;
    }

    ProjectedGaussian out;
    out.index = index;
    out.mean = {camera.fx * pc.x() / pc.z() + camera.cx, camera.fy * pc.y() / pc.z() + camera.cy};
    out.cov = cov;
    out.conic = {cov(1, 1) / det, -off / det, cov(0, 0) / det};
    out.depth = pc.z();
    out.opacity = sigmoid(particle.opacity_logit);
    const Eigen::Vector3d dir = (particle.position - camera_center).normalized();
    out.color = sh_eval<double>(particle.sh, dir);
    out.semantic = particle.masked() ? 1.0 : 0.0;

    const double rx = std::sqrt(2.0 * kMaxPower * cov(0, 0)) + 1.0;
    const double ry = std::sqrt(2.0 * kMaxPower * cov(1, 1)) + 1.0;
    const double fx0 = std::floor(out.mean.x() - rx);
    const double fx1 = std::ceil(out.mean.x() + rx);
    const double fy0 = std::floor(out.mean.y() - ry);
    const double fy1 = std::ceil(out.mean.y() + ry);
    if (!std::isfinite(fx0) || !std::isfinite(fx1) || !std::isfinite(fy0) || !std::isfinite(fy1) ||
        fx1 < 0.0 || fy1 < 0.0 || fx0 > camera.width - 1 || fy0 > camera.height - 1) {
        out.bounds = PixelBox{};
    } else {
        out.bounds.x0 = static_cast<int>(std::max(0.0, fx0));
        out.bounds.y0 = static_cast<int>(std::max(0.0, fy0));
        out.bounds.x1 = static_cast<int>(std::min<double>(camera.width - 1, fx1));
        out.bounds.y1 = static_cast<int>(std::min<double>(camera.height - 1, fy1));
    }
    return out;
}

Frame prepare_frame(const GaussianScene& scene, const CameraView& camera) {
    Frame frame;
    const Eigen::Vector3d center = camera.center();
    frame.splats.reserve(scene.size());
    for (std::size_t i = 0; i < scene.size(); ++i) {
        auto splat = project_with_center(scene.particles[i], i, camera, center);
        if (splat && !splat->bounds.empty()) {
            frame.splats.push_back(*splat);
        }
    }
    std::sort(frame.splats.begin(), frame.splats.end(), [](const ProjectedGaussian& a, const ProjectedGaussian& b) {
        if (a.depth != b.depth) {
            return a.depth < b.depth;
        }
        return a.index < b.index;
    });

    frame.tiles_x = (camera.width + kTileSize - 1) / kTileSize;
    frame.tiles_y = (camera.height + kTileSize - 1) / kTileSize;
    frame.bins.resize(static_cast<std::size_t>(frame.tiles_x) * frame.tiles_y);
    for (std::size_t k = 0; k < frame.splats.size(); ++k) {
        const PixelBox& b = frame.splats[k].bounds;
        for (int ty = b.y0 / kTileSize; ty <= b.y1 / kTileSize; ++ty) {
            for (int tx = b.x0 / kTileSize; tx <= b.x1 / kTileSize; ++tx) {
                frame.bins[static_cast<std::size_t>(ty) * frame.tiles_x + tx].push_back(static_cast<std::uint32_t>(k));
            }
        }
    }
    return frame;
}

struct TileRange {
    int x0, y0, x1, y1;  // half-open
};

TileRange tile_range(const Frame& frame, std::size_t tile, const CameraView& camera) {
    const int tx = static_cast<int>(tile % frame.tiles_x);
    const int ty = static_cast<int>(tile / frame.tiles_x);
    return {tx * kTileSize, ty * kTileSize, std::min(camera.width, (tx + 1) * kTileSize),
            std::min(camera.height, (ty + 1) * kTileSize)};
}

/// Front-to-back compositing of one pixel. visit(k, alpha, T, gauss, clamped, dx, dy)
/// is called for each composited splat; returns the final transmittance.
template <typename Visit>
double composite_pixel(const Frame& frame, const std::vector<std::uint32_t>& bin, int px, int py, Visit&& visit) {
    double transmittance = 1.0;
    for (const std::uint32_t k : bin) {
        const ProjectedGaussian& s = frame.splats[k];
        if (px < s.bounds.x0 || px > s.bounds.x1 || py < s.bounds.y0 || py > s.bounds.y1) {
            continue;
        }
        const double dx = px - s.mean.x();
        const double dy = py - s.mean.y();
        const double power = 0.5 * (s.conic[0] * dx * dx + s.conic[2] * dy * dy) + s.conic[1] * dx * dy;
        if (!(power <= kMaxPower)) {
            continue;
        }
        const double gauss = std::exp(-power);
        const double raw = s.opacity * gauss;
        const double alpha = std::min(kAlphaMax, raw);
        const double next = transmittance * (1.0 - alpha);
        if (next < kTransmittanceMin) {
            break;
        }
        visit(k, alpha, transmittance, gauss, raw > kAlphaMax, dx, dy);
        transmittance = next;
    }
    return transmittance;
}

/// Gradient w.r.t. the screen-space quantities of one splat.
struct ScreenGradient {
    Eigen::Vector2d mean = Eigen::Vector2d::Zero();
    Eigen::Vector3d conic = Eigen::Vector3d::Zero();
    double opacity = 0.0;
    Eigen::Vector3d color = Eigen::Vector3d::Zero();
    double depth = 0.0;

    ScreenGradient& operator+=(const ScreenGradient& o) {
        mean += o.mean;
        conic += o.conic;
        opacity += o.opacity;
        color += o.color;
        depth += o.depth;
        return *this;
    }
};

double plane_at(const Plane& plane, int y, int x) { return plane.size() == 0 ? 0.0 : plane(y, x); }

/// Chains screen-space gradients back to the particle parameters.
ParticleGradient backward_projection(const GaussianParticle& particle, const ProjectedGaussian& splat,
                                     const CameraView& camera, const Eigen::Vector3d& camera_center,
                                     const ScreenGradient& g) {
    ParticleGradient out;
    out.mean2d = g.mean;

    const Eigen::Matrix3d view_rot = camera.rotation();
    const Eigen::Vector3d pc = view_rot * particle.position + camera.translation();
    const double x = pc.x(), y = pc.y(), z = pc.z();
    const double fx = camera.fx, fy = camera.fy;

    const double qnorm = particle.rotation.norm();
    const Eigen::Vector4d q = particle.rotation / qnorm;
    const Eigen::Matrix3d rot = quat_to_rotation<double>(particle.rotation);
    const Eigen::Vector3d scale = particle.log_scale.array().exp();
    const Eigen::Matrix3d m = rot * scale.asDiagonal();
    const Eigen::Matrix3d cov3 = m * m.transpose();
    const Eigen::Matrix<double, 2, 3> jac = projection_jacobian(pc, camera);
    const JacobianTangent tan = jacobian_tangent(pc, camera);
    const Eigen::Matrix<double, 2, 3> t = jac * view_rot;

    // conic = cov2⁻¹ with the off-diagonal shared by two matrix entries.
    Eigen::Matrix2d conic_mat;
    conic_mat << splat.conic[0], splat.conic[1], splat.conic[1], splat.conic[2];
    Eigen::Matrix2d g_conic;
    g_conic << g.conic[0], 0.5 * g.conic[1], 0.5 * g.conic[1], g.conic[2];
    const Eigen::Matrix2d g_cov2 = -conic_mat * g_conic * conic_mat;

    const Eigen::Matrix3d g_cov3 = t.transpose() * g_cov2 * t;
    const Eigen::Matrix<double, 2, 3> g_t = 2.0 * g_cov2 * t * cov3;
    const Eigen::Matrix<double, 2, 3> g_jac = g_t * view_rot.transpose();

    Eigen::Vector3d g_pc = Eigen::Vector3d::Zero();
    const double inv_z = 1.0 / z;
    const double inv_z2 = inv_z * inv_z;
    const double inv_z3 = inv_z2 * inv_z;
    g_pc.z() += g_jac(0, 0) * (-fx * inv_z2) + g_jac(1, 1) * (-fy * inv_z2);
    // J₀₂ = −fx·u/z with u = x/z unless clamped, in which case u is constant.
    if (tan.u_clamped) {
        g_pc.z() += g_jac(0, 2) * (fx * tan.u * inv_z2);
    } else {
        g_pc.x() += g_jac(0, 2) * (-fx * inv_z2);
        g_pc.z() += g_jac(0, 2) * (2.0 * fx * x * inv_z3);
    }
    if (tan.v_clamped) {
        g_pc.z() += g_jac(1, 2) * (fy * tan.v * inv_z2);
    } else {
        g_pc.y() += g_jac(1, 2) * (-fy * inv_z2);
        g_pc.z() += g_jac(1, 2) * (2.0 * fy * y * inv_z3);
    }

    g_pc.x() += g.mean.x() * fx * inv_z;
    g_pc.z() -= g.mean.x() * fx * x * inv_z2;
    g_pc.y() += g.mean.y() * fy * inv_z;
    g_pc.z() -= g.mean.y() * fy * y * inv_z2;
    g_pc.z() += g.depth;

    out.position = view_rot.transpose() * g_pc;

    // View-dependent colour.
    const Eigen::Vector3d offset = particle.position - camera_center;
    const double dist = offset.norm();
    const Eigen::Vector3d dir = offset / dist;
    const auto basis = sh_basis<double>(dir);
    const Eigen::Vector3d raw = particle.sh.transpose() * basis + Eigen::Vector3d::Constant(kShDcOffset);
    Eigen::Vector3d g_color = g.color;
    for (int c = 0; c < 3; ++c) {
        if (raw[c] < 0.0) {
            g_color[c] = 0.0;
        }
    }
    out.sh = basis * g_color.transpose();
    const Eigen::Vector3d g_dir = sh_basis_jacobian<double>(dir).transpose() * (particle.sh * g_color);
    out.position += (g_dir - dir * dir.dot(g_dir)) / dist;

    // Σ3 = M·Mᵀ, M = R·diag(s).
    const Eigen::Matrix3d g_m = 2.0 * g_cov3 * m;
    for (int k = 0; k < 3; ++k) {
        out.log_scale[k] = g_m.col(k).dot(rot.col(k)) * scale[k];
    }
    const Eigen::Matrix3d g_r = g_m * scale.asDiagonal();
    const double w = q[0], qx = q[1], qy = q[2], qz = q[3];
    Eigen::Vector4d g_q;
    g_q[0] = 2.0 * (-qz * g_r(0, 1) + qy * g_r(0, 2) + qz * g_r(1, 0) - qx * g_r(1, 2) - qy * g_r(2, 0) +
                    qx * g_r(2, 1));
    g_q[1] = 2.0 * (qy * g_r(0, 1) + qz * g_r(0, 2) + qy * g_r(1, 0) - 2.0 * qx * g_r(1, 1) - w * g_r(1, 2) +
                    qz * g_r(2, 0) + w * g_r(2, 1) - 2.0 * qx * g_r(2, 2));
    g_q[2] = 2.0 * (-2.0 * qy * g_r(0, 0) + qx * g_r(0, 1) + w * g_r(0, 2) + qx * g_r(1, 0) + qz * g_r(1, 2) -
                    w * g_r(2, 0) + qz * g_r(2, 1) - 2.0 * qy * g_r(2, 2));
    g_q[3] = 2.0 * (-2.0 * qz * g_r(0, 0) - w * g_r(0, 1) + qx * g_r(0, 2) + w * g_r(1, 0) - 2.0 * qz * g_r(1, 1) +
                    qy * g_r(1, 2) + qx * g_r(2, 0) + qy * g_r(2, 1));
    out.rotation = (g_q - q * q.dot(g_q)) / qnorm;

    out.opacity_logit = g.opacity * splat.opacity * (1.0 - splat.opacity);
    return out;
}

}  // namespace

std::optional<ProjectedGaussian> project(const GaussianParticle& particle, const CameraView& camera) {
    return project_with_center(particle, 0, camera, camera.center());
}

RenderOutput render(const GaussianScene& scene, const CameraView& camera, const RenderOptions& options) {
    const Frame frame = prepare_frame(scene, camera);
    const int h = camera.height;
    const int w = camera.width;

    RenderOutput out;
    out.rgb = make_rgb(h, w);
    Plane depth = Plane::Zero(h, w);
    Plane alpha = Plane::Zero(h, w);
    Plane semantic = Plane::Zero(h, w);
    PlaneT<int> contributors = PlaneT<int>::Zero(h, w);
    const Eigen::Vector3d bg = scene.background;

    parallel_for(frame.bins.size(), options.threads, [&](std::size_t tile) {
        const auto& bin = frame.bins[tile];
        const TileRange r = tile_range(frame, tile, camera);
        for (int py = r.y0; py < r.y1; ++py) {
            for (int px = r.x0; px < r.x1; ++px) {
                Eigen::Vector3d color = Eigen::Vector3d::Zero();
                double depth_num = 0.0;
                double weight_sum = 0.0;
                double sem = 0.0;
                int count = 0;
                const double t_final =
                    composite_pixel(frame, bin, px, py, [&](std::uint32_t k, double a, double trans, double, bool, double, double) {
                        const ProjectedGaussian& s = frame.splats[k];
                        const double weight = a * trans;
                        color += weight * s.color;
                        depth_num += weight * s.depth;
                        weight_sum += weight;
                        sem += weight * s.semantic;
                        ++count;
                    });
                color += t_final * bg;
                for (int c = 0; c < 3; ++c) {
                    out.rgb[c](py, px) = color[c];
                }
                depth(py, px) = weight_sum > kDepthAlphaMin ? depth_num / weight_sum : 0.0;
                alpha(py, px) = weight_sum;
                semantic(py, px) = sem;
                contributors(py, px) = count;
            }
        }
    });

    if (options.channels & kChannelDepth) {
        out.depth = std::move(depth);
    }
    if (options.channels & kChannelAlpha) {
        out.alpha = std::move(alpha);
    }
    if (options.channels & kChannelSemantic) {
        out.semantic = std::move(semantic);
    }
    if (options.channels & kChannelContributors) {
        out.contributors = std::move(contributors);
    }
    return out;
}

ParticleGradient& ParticleGradient::operator+=(const ParticleGradient& other) {
    position += other.position;
    log_scale += other.log_scale;
    rotation += other.rotation;
    opacity_logit += other.opacity_logit;
    sh += other.sh;
    mean2d += other.mean2d;
    return *this;
}

ParticleGradient& ParticleGradient::operator*=(double factor) {
    position *= factor;
    log_scale *= factor;
    rotation *= factor;
    opacity_logit *= factor;
    sh *= factor;
    mean2d *= factor;
    return *this;
}

bool ParticleGradient::all_finite() const {
    return position.allFinite() && log_scale.allFinite() && rotation.allFinite() && std::isfinite(opacity_logit) &&
           sh.allFinite() && mean2d.allFinite();
}

bool ParticleGradient::is_zero() const {
    return position.isZero(0.0) && log_scale.isZero(0.0) && rotation.isZero(0.0) && opacity_logit == 0.0 &&
           sh.isZero(0.0);
}

SceneGradient zero_gradient(std::size_t count) { return SceneGradient(count); }

void accumulate(SceneGradient& into, const SceneGradient& from, double factor) {
    if (into.size() != from.size()) {
        throw InvalidInput("gradient size mismatch");
    }
    for (std::size_t i = 0; i < into.size(); ++i) {
        ParticleGradient g = from[i];
        g *= factor;
        into[i] += g;
    }
}

SceneGradient render_backward(const GaussianScene& scene, const CameraView& camera, const RenderGradient& upstream,
                              int threads) {
    const Frame frame = prepare_frame(scene, camera);
    const Eigen::Vector3d bg = scene.background;
    const bool has_rgb = upstream.rgb[0].size() != 0;

    struct Entry {
        std::uint32_t k;
        double alpha, trans, gauss, dx, dy;
        bool clamped;
    };

    // Per-tile partials indexed like the tile's bin; combined in tile order below.
    std::vector<std::vector<ScreenGradient>> partials(frame.bins.size());
    parallel_for(frame.bins.size(), threads, [&](std::size_t tile) {
        const auto& bin = frame.bins[tile];
        if (bin.empty()) {
            return;
        }
        std::vector<ScreenGradient>& part = partials[tile];
        part.assign(bin.size(), ScreenGradient{});
        // Position of each splat within this bin.
        std::vector<std::uint32_t> slot(frame.splats.size(), 0);
        for (std::uint32_t j = 0; j < bin.size(); ++j) {
            slot[bin[j]] = j;
        }
        std::vector<Entry> entries;
        const TileRange r = tile_range(frame, tile, camera);
        for (int py = r.y0; py < r.y1; ++py) {
            for (int px = r.x0; px < r.x1; ++px) {
                Eigen::Vector3d g_rgb = Eigen::Vector3d::Zero();
                if (has_rgb) {
                    g_rgb = {upstream.rgb[0](py, px), upstream.rgb[1](py, px), upstream.rgb[2](py, px)};
                }
                const double g_depth = plane_at(upstream.depth, py, px);
                const double g_alpha = plane_at(upstream.alpha, py, px);
                const double g_sem = plane_at(upstream.semantic, py, px);
                if (g_rgb.isZero(0.0) && g_depth == 0.0 && g_alpha == 0.0 && g_sem == 0.0) {
                    continue;
                }
                entries.clear();
                double depth_num = 0.0;
                double weight_sum = 0.0;
                const double t_final = composite_pixel(
                    frame, bin, px, py, [&](std::uint32_t k, double a, double trans, double gauss, bool clamped, double dx, double dy) {
                        entries.push_back({k, a, trans, gauss, dx, dy, clamped});
                        depth_num += a * trans * frame.splats[k].depth;
                        weight_sum += a * trans;
                    });
                if (entries.empty()) {
                    continue;
                }

                // Feature per splat: (r, g, b, depth-numerator, alpha, semantic).
                double g_num = 0.0;
                double g_alpha_eff = g_alpha;
                if (weight_sum > kDepthAlphaMin) {
                    g_num = g_depth / weight_sum;
                    g_alpha_eff -= g_depth * depth_num / (weight_sum * weight_sum);
                }
                Eigen::Matrix<double, 6, 1> g_feat;
                g_feat << g_rgb, g_num, g_alpha_eff, g_sem;
                Eigen::Matrix<double, 6, 1> rest;
                rest << t_final * bg, 0.0, 0.0, 0.0;

                for (auto it = entries.rbegin(); it != entries.rend(); ++it) {
                    const ProjectedGaussian& s = frame.splats[it->k];
                    Eigen::Matrix<double, 6, 1> feat;
                    feat << s.color, s.depth, 1.0, s.semantic;
                    const double weight = it->alpha * it->trans;
                    const double g_a = g_feat.dot(it->trans * feat - rest / (1.0 - it->alpha));
                    rest += weight * feat;

                    ScreenGradient& sg = part[slot[it->k]];
                    sg.color += weight * g_rgb;
                    sg.depth += weight * g_num;
                    if (!it->clamped) {
                        sg.opacity += g_a * it->gauss;
                        const double g_power = -g_a * it->alpha;
                        const double dx = it->dx, dy = it->dy;
                        sg.mean.x() -= g_power * (s.conic[0] * dx + s.conic[1] * dy);
                        sg.mean.y() -= g_power * (s.conic[1] * dx + s.conic[2] * dy);
                        sg.conic[0] += g_power * 0.5 * dx * dx;
                        sg.conic[1] += g_power * dx * dy;
                        sg.conic[2] += g_power * 0.5 * dy * dy;
                    }
                }
            }
        }
    });

    std::vector<ScreenGradient> screen(frame.splats.size());
    for (std::size_t tile = 0; tile < frame.bins.size(); ++tile) {
        const auto& part = partials[tile];
        for (std::size_t j = 0; j < part.size(); ++j) {
            screen[frame.bins[tile][j]] += part[j];
        }
    }

    SceneGradient grads = zero_gradient(scene.size());
    const Eigen::Vector3d center = camera.center();
    parallel_for(frame.splats.size(), threads, [&](std::size_t k) {
        const ProjectedGaussian& s = frame.splats[k];
        grads[s.index] = backward_projection(scene.particles[s.index], s, camera, center, screen[k]);
    });
    return grads;
}

ContributionTally accumulate_contributions(const GaussianScene& scene, const std::vector<CameraView>& views,
                                           double threshold, int threads) {
    ContributionTally tally;
    tally.masked_count.assign(scene.size(), 0);
    tally.unmasked_count.assign(scene.size(), 0);
    for (const CameraView& view : views) {
        if (view.mask.rows() != view.height || view.mask.cols() != view.width) {
            throw InvalidInput(fmt::format("view {} carries no mask of matching size", view.id));
        }
        const Frame frame = prepare_frame(scene, view);
        std::vector<std::vector<std::array<std::uint64_t, 2>>> partials(frame.bins.size());
        parallel_for(frame.bins.size(), threads, [&](std::size_t tile) {
            const auto& bin = frame.bins[tile];
            std::vector<std::uint32_t> slot(frame.splats.size(), 0);
            for (std::uint32_t j = 0; j < bin.size(); ++j) {
                slot[bin[j]] = j;
            }
            auto& part = partials[tile];
            part.assign(bin.size(), {0, 0});
            const TileRange r = tile_range(frame, tile, view);
            for (int py = r.y0; py < r.y1; ++py) {
                for (int px = r.x0; px < r.x1; ++px) {
                    const int which = view.mask(py, px) != 0 ? 0 : 1;
                    composite_pixel(frame, bin, px, py,
                                    [&](std::uint32_t k, double a, double trans, double, bool, double, double) {
                                        if (a * trans > threshold) {
                                            ++part[slot[k]][which];
                                        }
                                    });
                }
            }
        });
        for (std::size_t tile = 0; tile < frame.bins.size(); ++tile) {
            for (std::size_t j = 0; j < partials[tile].size(); ++j) {
                const std::size_t idx = frame.splats[frame.bins[tile][j]].index;
                tally.masked_count[idx] += partials[tile][j][0];
                tally.unmasked_count[idx] += partials[tile][j][1];
            }
        }
    }
    return tally;
}

}  // namespace refsplat
