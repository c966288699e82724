#pragma once

// Shared fixtures and independent oracles for the unit and acceptance suites.

#include "refsplat/rasterizer.hpp"
#include "refsplat/scene.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>

namespace refsplat::testing {

inline CameraView make_camera(int width, int height, double focal, const Eigen::Vector3d& eye,
                              const Eigen::Vector3d& target, int id = 0) {
    CameraView cam;
    cam.id = id;
    cam.width = width;
    cam.height = height;
    cam.fx = focal;
    cam.fy = focal;
    cam.cx = 0.5 * (width - 1);
    cam.cy = 0.5 * (height - 1);
    cam.world_to_camera = look_at(eye, target, Eigen::Vector3d::UnitY());
    cam.allocate_planes();
    return cam;
}

/// Camera at the origin looking down +z with identity pose.
inline CameraView identity_camera(int width, int height, double focal) {
    CameraView cam;
    cam.width = width;
    cam.height = height;
    cam.fx = focal;
    cam.fy = focal;
    cam.cx = 0.5 * (width - 1);
    cam.cy = 0.5 * (height - 1);
    cam.allocate_planes();
    return cam;
}

inline double uniform(std::mt19937_64& rng, double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline double normal(std::mt19937_64& rng, double sigma = 1.0) {
    return std::normal_distribution<double>(0.0, sigma)(rng);
}

/// Random particles inside the frustum of an identity camera with the given focal/size.
inline GaussianScene random_scene(std::mt19937_64& rng, int count, double focal, int width, double sh_sigma = 0.3) {
    GaussianScene scene;
    scene.background = {uniform(rng, 0, 1), uniform(rng, 0, 1), uniform(rng, 0, 1)};
    const double half_fov = 0.5 * width / focal;
    for (int i = 0; i < count; ++i) {
        GaussianParticle p;
        const double z = uniform(rng, 2.0, 4.0);
        p.position = {uniform(rng, -0.7, 0.7) * half_fov * z, uniform(rng, -0.7, 0.7) * half_fov * z, z};
        p.log_scale = {std::log(uniform(rng, 0.05, 0.25)), std::log(uniform(rng, 0.05, 0.25)),
                       std::log(uniform(rng, 0.05, 0.25))};
        p.rotation = {normal(rng), normal(rng), normal(rng), normal(rng)};
        p.opacity_logit = uniform(rng, -1.5, 1.0);
        for (int k = 0; k < kShBasisCount; ++k) {
            for (int c = 0; c < 3; ++c) {
                p.sh(k, c) = normal(rng, k == 0 ? 0.6 : sh_sigma);
            }
        }
        p.label = uniform(rng, 0, 1) < 0.5 ? Label::Masked : Label::Unmasked;
        scene.particles.push_back(p);
    }
    return scene;
}

/// Brute-force compositing: projects every particle, sorts by (depth, index) and
/// composites each pixel over the whole list with no tiling or bounds culling.
inline RenderOutput naive_render(const GaussianScene& scene, const CameraView& cam) {
    std::vector<ProjectedGaussian> splats;
    for (std::size_t i = 0; i < scene.size(); ++i) {
        if (auto s = project(scene.particles[i], cam)) {
            s->index = i;
            splats.push_back(*s);
        }
    }
    std::stable_sort(splats.begin(), splats.end(), [](const auto& a, const auto& b) {
        return a.depth < b.depth || (a.depth == b.depth && a.index < b.index);
    });
    RenderOutput out;
    out.rgb = make_rgb(cam.height, cam.width);
    out.depth = Plane::Zero(cam.height, cam.width);
    out.alpha = Plane::Zero(cam.height, cam.width);
    out.semantic = Plane::Zero(cam.height, cam.width);
    for (int py = 0; py < cam.height; ++py) {
        for (int px = 0; px < cam.width; ++px) {
            double trans = 1.0;
            Eigen::Vector3d color = Eigen::Vector3d::Zero();
            double dnum = 0.0, wsum = 0.0, sem = 0.0;
            for (const auto& s : splats) {
                const double dx = px - s.mean.x();
                const double dy = py - s.mean.y();
                const double power = 0.5 * (s.conic[0] * dx * dx + s.conic[2] * dy * dy) + s.conic[1] * dx * dy;
                if (!(power <= kMaxPower)) {
                    continue;
                }
                const double alpha = std::min(kAlphaMax, s.opacity * std::exp(-power));
                const double next = trans * (1.0 - alpha);
                if (next < kTransmittanceMin) {
                    break;
                }
                const double w = alpha * trans;
                color += w * s.color;
                dnum += w * s.depth;
                wsum += w;
                sem += w * s.semantic;
                trans = next;
            }
            color += trans * scene.background;
            for (int c = 0; c < 3; ++c) {
                out.rgb[c](py, px) = color[c];
            }
            out.depth(py, px) = wsum > kDepthAlphaMin ? dnum / wsum : 0.0;
            out.alpha(py, px) = wsum;
            out.semantic(py, px) = sem;
        }
    }
    return out;
}

inline double inner(const RenderOutput& a, const RenderGradient& g) {
    double s = 0.0;
    for (int c = 0; c < 3; ++c) {
        if (g.rgb[c].size() != 0) {
            s += (a.rgb[c] * g.rgb[c]).sum();
        }
    }
    if (g.depth.size() != 0) s += (a.depth * g.depth).sum();
    if (g.alpha.size() != 0) s += (a.alpha * g.alpha).sum();
    if (g.semantic.size() != 0) s += (a.semantic * g.semantic).sum();
    return s;
}

/// Visits every scalar parameter of a particle as a mutable reference together
/// with the matching analytic gradient entry.
inline void for_each_parameter(GaussianParticle& p, const ParticleGradient& g,
                               const std::function<void(const char*, double&, double)>& fn) {
    for (int i = 0; i < 3; ++i) fn("position", p.position[i], g.position[i]);
    for (int i = 0; i < 3; ++i) fn("log_scale", p.log_scale[i], g.log_scale[i]);
    for (int i = 0; i < 4; ++i) fn("rotation", p.rotation[i], g.rotation[i]);
    fn("opacity_logit", p.opacity_logit, g.opacity_logit);
    for (int k = 0; k < kShBasisCount; ++k)
        for (int c = 0; c < 3; ++c) fn("sh", p.sh(k, c), g.sh(k, c));
}

inline bool grad_close(double analytic, double numeric, double rel = 1e-3, double abs_floor = 1e-6) {
    const double diff = std::abs(analytic - numeric);
    return diff <= abs_floor || diff <= rel * std::max(std::abs(analytic), std::abs(numeric));
}

struct GradCheckResult {
    int checked = 0;
    int failed = 0;
    /// Parameters whose first central difference disagreed and were settled at a tenth of the step.
    int retried = 0;
    double worst_rel = 0.0;
    std::string worst;
};

/// Compares render_backward against central differences of ⟨upstream, render⟩.
/// The forward map is piecewise smooth (footprint cutoff, early termination, alpha
/// floor), so a difference whose stencil straddles a jump is repeated at step/10.
inline GradCheckResult check_render_gradients(GaussianScene scene, const CameraView& cam,
                                              const RenderGradient& upstream, double step = 1e-4) {
    const SceneGradient analytic = render_backward(scene, cam, upstream, 1);
    GradCheckResult res;
    RenderOptions opts;
    opts.threads = 1;
    for (std::size_t i = 0; i < scene.size(); ++i) {
        GaussianParticle& p = scene.particles[i];
        for_each_parameter(p, analytic[i], [&](const char* name, double& value, double a) {
            const double saved = value;
            auto central = [&](double h) {
                value = saved + h;
                const double plus = inner(render(scene, cam, opts), upstream);
                value = saved - h;
                const double minus = inner(render(scene, cam, opts), upstream);
                value = saved;
                return (plus - minus) / (2.0 * h);
            };
            double numeric = central(step);
            ++res.checked;
            if (!grad_close(a, numeric)) {
                ++res.retried;
                numeric = central(0.1 * step);
            }
            if (!grad_close(a, numeric)) {
                ++res.failed;
                const double rel = std::abs(a - numeric) / std::max(std::abs(a), std::abs(numeric));
                if (rel > res.worst_rel) {
                    res.worst_rel = rel;
                    res.worst = std::string(name) + " of particle " + std::to_string(i) + ": analytic " +
                                std::to_string(a) + " numeric " + std::to_string(numeric);
                }
            }
        });
    }
    return res;
}

/// Random upstream gradient. The depth channel is only driven where coverage is
/// well above the normalization threshold, since depth jumps to the 0 sentinel there.
inline RenderGradient random_upstream(std::mt19937_64& rng, const RenderOutput& forward) {
    const int h = static_cast<int>(forward.alpha.rows());
    const int w = static_cast<int>(forward.alpha.cols());
    RenderGradient g;
    g.rgb = make_rgb(h, w);
    g.depth = Plane::Zero(h, w);
    g.alpha = Plane::Zero(h, w);
    g.semantic = Plane::Zero(h, w);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            for (int c = 0; c < 3; ++c) g.rgb[c](y, x) = uniform(rng, -1, 1);
            g.alpha(y, x) = uniform(rng, -1, 1);
            g.semantic(y, x) = uniform(rng, -1, 1);
            g.depth(y, x) = forward.alpha(y, x) > 1e-2 ? uniform(rng, -1, 1) : 0.0;
        }
    }
    return g;
}

}  // namespace refsplat::testing
