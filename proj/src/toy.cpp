#include "refsplat/toy.hpp"

#include "refsplat/image_ops.hpp"
#include "refsplat/mask_consolidation.hpp"
#include "refsplat/rasterizer.hpp"

#include <fmt/format.h>

#include <cmath>
#include <numbers>
#include <random>

namespace refsplat {

namespace {

constexpr double kRoomHalf = 3.0;
constexpr double kFloor = -1.0;
constexpr double kCeiling = 2.5;

struct Face {
    /// Origin corner, two spanning edges and the thin axis.
    Eigen::Vector3d origin;
    Eigen::Vector3d u;
    Eigen::Vector3d v;
    int normal_axis;
    Eigen::Vector3d base;
};

}  // namespace

ToyScene make_toy_scene(std::uint64_t seed, const ToyConfig& config) {
    if (config.width < 8 || config.height < 8 || config.views < 1 || config.room_grid < 2 ||
        config.object_particles < 1 || !(config.object_radius > 0.0) || config.hidden_grid < 0 ||
        !(config.hidden_size >= 0.0) || 0.5 * config.hidden_size * std::sqrt(3.0) > config.object_radius ||
        !(config.camera_radius > config.object_radius)) {
        throw InvalidInput("toy scene config out of range");
    }
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> normal(0.0, 1.0);

    ToyScene toy;
    toy.complete.background = {0.5, 0.5, 0.55};
    const double h = kCeiling - kFloor;
    const std::vector<Face> faces = {
        {{-kRoomHalf, -kRoomHalf, kFloor}, {2 * kRoomHalf, 0, 0}, {0, 2 * kRoomHalf, 0}, 2, {0.55, 0.4, 0.3}},
        {{kRoomHalf, -kRoomHalf, kFloor}, {0, 2 * kRoomHalf, 0}, {0, 0, h}, 0, {0.3, 0.5, 0.7}},
        {{-kRoomHalf, -kRoomHalf, kFloor}, {0, 2 * kRoomHalf, 0}, {0, 0, h}, 0, {0.7, 0.65, 0.4}},
        {{-kRoomHalf, kRoomHalf, kFloor}, {2 * kRoomHalf, 0, 0}, {0, 0, h}, 1, {0.35, 0.6, 0.4}},
        {{-kRoomHalf, -kRoomHalf, kFloor}, {2 * kRoomHalf, 0, 0}, {0, 0, h}, 1, {0.6, 0.35, 0.55}},
    };
    const int n = config.room_grid;
    for (const Face& f : faces) {
        const double fu = unit(rng) * 2.0 * std::numbers::pi, fv = unit(rng) * 2.0 * std::numbers::pi;
        for (int i = 0; i < n; ++i) {
            for (int j = 0; j < n; ++j) {
                const double a = (i + 0.5 + 0.2 * (unit(rng) - 0.5)) / n;
                const double b = (j + 0.5 + 0.2 * (unit(rng) - 0.5)) / n;
                GaussianParticle p;
                p.position = f.origin + a * f.u + b * f.v;
                Eigen::Vector3d scale = (0.6 * f.u.cwiseAbs() + 0.6 * f.v.cwiseAbs()) / n;
                scale[f.normal_axis] = 0.03;
                p.log_scale = scale.array().log();
                p.opacity_logit = 3.0;
                // Smooth stripes plus per-particle noise give every face a texture.
                const double pattern = 0.15 * std::sin(2.0 * std::numbers::pi * 2.0 * a + fu) *
                                       std::cos(2.0 * std::numbers::pi * 1.5 * b + fv);
                for (int c = 0; c < 3; ++c) {
                    const double colour = std::clamp(f.base[c] + pattern + 0.05 * normal(rng), 0.02, 0.98);
                    p.sh(0, c) = color_to_sh_dc(colour);
                }
                toy.complete.particles.push_back(p);
            }
        }
    }

    toy.augmented = toy.complete;
    const Eigen::Vector3d centre(0.0, 0.0, 0.1);
    // Hidden box: one flat colour per face, inside the object's radius.
    const double half = 0.5 * config.hidden_size;
    const int m = config.hidden_grid;
    const Eigen::Vector3d face_colours[6] = {{0.1, 0.3, 0.9}, {0.95, 0.85, 0.1}, {0.1, 0.8, 0.3},
                                            {0.9, 0.1, 0.8}, {0.1, 0.85, 0.9}, {0.95, 0.95, 0.95}};
    for (int axis = 0; axis < 3 && m > 0; ++axis) {
        for (int side = 0; side < 2; ++side) {
            const int u = (axis + 1) % 3, w = (axis + 2) % 3;
            for (int i = 0; i < m; ++i) {
                for (int j = 0; j < m; ++j) {
                    GaussianParticle p;
                    p.position = centre;
                    p.position[axis] += side ? half : -half;
                    p.position[u] += config.hidden_size * ((i + 0.5) / m - 0.5);
                    p.position[w] += config.hidden_size * ((j + 0.5) / m - 0.5);
                    Eigen::Vector3d scale = Eigen::Vector3d::Constant(0.6 * config.hidden_size / m);
                    scale[axis] = 0.01;
                    p.log_scale = scale.array().log();
                    p.opacity_logit = 4.0;
                    for (int c = 0; c < 3; ++c) p.sh(0, c) = color_to_sh_dc(face_colours[2 * axis + side][c]);
                    toy.complete.particles.push_back(p);
                }
            }
        }
    }
    const Eigen::Vector3d object_colour(0.85, 0.2, 0.15);
    // The object is a jittered Fibonacci shell, dense enough to be opaque so the box stays hidden.
    const double golden = std::numbers::pi * (3.0 - std::sqrt(5.0));
    const double spin = unit(rng) * 2.0 * std::numbers::pi;
    const double shell_sigma = 2.2 * config.object_radius / std::sqrt(static_cast<double>(config.object_particles));
    for (int k = 0; k < config.object_particles; ++k) {
        const double zk = 1.0 - 2.0 * (k + 0.5) / config.object_particles;
        const double rk = std::sqrt(1.0 - zk * zk);
        const double phi = spin + golden * k;
        const Eigen::Vector3d d(rk * std::cos(phi), rk * std::sin(phi), zk);
        GaussianParticle p;
        p.position = centre + config.object_radius * (1.0 + 0.05 * normal(rng)) * d;
        p.log_scale = Eigen::Vector3d::Constant(std::log(shell_sigma));
        p.rotation = Eigen::Vector4d(normal(rng), normal(rng), normal(rng), normal(rng)).normalized();
        p.opacity_logit = 5.0;
        for (int c = 0; c < 3; ++c) {
            p.sh(0, c) = color_to_sh_dc(std::clamp(object_colour[c] + 0.08 * normal(rng), 0.02, 0.98));
        }
        p.label = Label::Masked;
        toy.augmented.particles.push_back(p);
    }

    const double phase = unit(rng) * 2.0 * std::numbers::pi;
    RenderOptions rgb_only;
    rgb_only.channels = kChannelRgb;
    rgb_only.threads = config.threads;
    for (int v = 0; v < config.views; ++v) {
        const double a = phase + 2.0 * std::numbers::pi * v / config.views;
        CameraView cam;
        cam.id = v;
        cam.width = config.width;
        cam.height = config.height;
        cam.fx = cam.fy = config.focal;
        cam.cx = 0.5 * (config.width - 1);
        cam.cy = 0.5 * (config.height - 1);
        const Eigen::Vector3d eye(config.camera_radius * std::cos(a), config.camera_radius * std::sin(a),
                                  config.camera_height);
        cam.world_to_camera = look_at(eye, centre);
        cam.allocate_planes();
        cam.image = render(toy.augmented, cam, rgb_only).rgb;
        toy.ground_truth.push_back(render(toy.complete, cam, rgb_only).rgb);
        toy.views.push_back(std::move(cam));
    }
    const std::vector<Mask> masks =
        render_consistent_masks(toy.augmented, toy.views, config.mask_threshold, config.threads);
    for (std::size_t v = 0; v < toy.views.size(); ++v) toy.views[v].mask = masks[v];
    return toy;
}

ReferenceView make_toy_reference(const ToyScene& toy, std::size_t index, double scale, double offset, int threads) {
    if (index >= toy.views.size()) throw InvalidInput(fmt::format("no toy view {}", index));
    ReferenceView ref;
    ref.camera = toy.views[index];
    ref.camera.image = toy.ground_truth[index];
    RenderOptions opt;
    opt.channels = kChannelDepth;
    opt.threads = threads;
    ref.relative_depth = scale * render(toy.complete, ref.camera, opt).depth + offset;
    return ref;
}

// --------------------------------------------------------------- evaluation

EvalReport eval_masked(const std::vector<RgbImage>& pred, const std::vector<RgbImage>& gt,
                       const std::vector<Mask>& masks, double dilation) {
    if (pred.size() != gt.size() || pred.size() != masks.size()) {
        throw InvalidInput(fmt::format("eval needs matching counts (pred {}, gt {}, masks {})", pred.size(), gt.size(),
                                       masks.size()));
    }
    if (pred.empty()) throw InvalidInput("eval needs at least one view");
    if (!(dilation >= 0.0)) throw InvalidInput("dilation must be ≥ 0");
    EvalReport report;
    for (std::size_t v = 0; v < pred.size(); ++v) {
        const Eigen::Index h = masks[v].rows(), w = masks[v].cols();
        for (int c = 0; c < 3; ++c) {
            if (pred[v][c].rows() != h || pred[v][c].cols() != w || gt[v][c].rows() != h || gt[v][c].cols() != w) {
                throw InvalidInput(fmt::format("view {}: image and mask shapes differ", v));
            }
        }
        const PixelBox box = dilate_box(mask_bounding_box(masks[v]), dilation, static_cast<int>(h), static_cast<int>(w));
        if (box.empty()) throw InvalidInput(fmt::format("view {}: mask is empty", v));
        const RgbImage p = crop(pred[v], box), g = crop(gt[v], box);
        double abs_sum = 0.0, sq_sum = 0.0;
        for (int c = 0; c < 3; ++c) {
            abs_sum += (p[c] - g[c]).abs().sum();
            sq_sum += (p[c] - g[c]).square().sum();
        }
        const double count = 3.0 * box.width() * box.height();
        EvalMetrics m;
        m.l1 = abs_sum / count;
        const double mse = sq_sum / count;
        m.psnr = mse > 0.0 ? std::min(kPsnrCap, -10.0 * std::log10(mse)) : kPsnrCap;
        m.ssim = mean_ssim(p, g);
        report.per_view.push_back(m);
        report.mean.l1 += m.l1 / pred.size();
        report.mean.psnr += m.psnr / pred.size();
        report.mean.ssim += m.ssim / pred.size();
    }
    return report;
}

}  // namespace refsplat
