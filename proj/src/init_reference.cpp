#include "refsplat/init_reference.hpp"

#include "refsplat/rasterizer.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <cmath>

namespace refsplat {

namespace {

template <typename A, typename B>
void require_same_shape(const A& a, const B& b, const char* what) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw InvalidInput(fmt::format("{}: {}x{} vs {}x{}", what, a.rows(), a.cols(), b.rows(), b.cols()));
    }
}

}  // namespace

DepthAlignment align_depth(const Plane& relative, const Plane& rendered, const Mask& select) {
    require_same_shape(relative, rendered, "align_depth depth planes differ");
    require_same_shape(relative, select, "align_depth selection differs");
    double n = 0.0, sum_rel = 0.0, sum_ren = 0.0;
    for (Eigen::Index i = 0; i < relative.size(); ++i) {
        if (select.data()[i] != 0) {
            n += 1.0;
            sum_rel += relative.data()[i];
            sum_ren += rendered.data()[i];
        }
    }
    if (n < 2.0) {
        throw InvalidInput("align_depth needs at least two selected pixels");
    }
    const double mean_rel = sum_rel / n;
    const double mean_ren = sum_ren / n;
    double sxx = 0.0, sxy = 0.0;
    for (Eigen::Index i = 0; i < relative.size(); ++i) {
        if (select.data()[i] != 0) {
            const double dx = relative.data()[i] - mean_rel;
            sxx += dx * dx;
            sxy += dx * (rendered.data()[i] - mean_ren);
        }
    }
    DepthAlignment result;
    if (sxx > 0.0) {
        result.scale = sxy / sxx;
        result.offset = mean_ren - result.scale * mean_rel;
    } else {
        result.degenerate = true;
        result.scale = 1.0;
        result.offset = mean_ren - mean_rel;
        spdlog::warn("relative depth is constant over the alignment pixels; using an offset-only fit");
    }
    result.aligned = result.scale * relative + result.offset;
    return result;
}

Plane bilateral_refine(const Plane& depth, const RgbImage& guide, const Mask& mask, const BilateralParams& params) {
    require_same_shape(depth, mask, "bilateral_refine mask differs");
    for (const Plane& g : guide) require_same_shape(depth, g, "bilateral_refine guide differs");
    const int h = static_cast<int>(depth.rows());
    const int w = static_cast<int>(depth.cols());
    const int r = params.radius;
    const double inv_c = 1.0 / (2.0 * params.sigma_color * params.sigma_color);
    const double inv_s = 1.0 / (2.0 * params.sigma_space * params.sigma_space);
    Plane current = depth;
    for (int iter = 0; iter < params.iterations; ++iter) {
        Plane next = current;
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                if (mask(y, x) == 0) continue;
                double num = 0.0, den = 0.0;
                for (int dy = -r; dy <= r; ++dy) {
                    for (int dx = -r; dx <= r; ++dx) {
                        const int qy = y + dy, qx = x + dx;
                        if (qy < 0 || qx < 0 || qy >= h || qx >= w) continue;
                        double dc = 0.0;
                        for (const Plane& g : guide) {
                            const double d = g(qy, qx) - g(y, x);
                            dc += d * d;
                        }
                        const double wgt = std::exp(-dc * inv_c) * std::exp(-(dx * dx + dy * dy) * inv_s);
                        num += wgt * (current(qy, qx) - current(y, x));
                        den += wgt;
                    }
                }
                // Averaging the differences keeps constant regions exactly fixed.
                next(y, x) = current(y, x) + num / den;
            }
        }
        current = std::move(next);
    }
    return current;
}

UnprojectResult unproject_reference(const ReferenceView& ref, const Plane& depth, const UnprojectOptions& options) {
    const CameraView& cam = ref.camera;
    if (options.stride < 1) {
        throw InvalidInput("unprojection stride must be at least 1");
    }
    if (depth.rows() != cam.height || depth.cols() != cam.width || cam.mask.rows() != cam.height ||
        cam.mask.cols() != cam.width || cam.image[0].rows() != cam.height || cam.image[0].cols() != cam.width) {
        throw InvalidInput("reference planes do not match the camera size");
    }
    const Eigen::Matrix3d cam_to_world = cam.rotation().transpose();
    const Eigen::Vector3d origin = cam.center();
    const double opacity_logit = logit(options.opacity);
    UnprojectResult result;
    for (int y = 0; y < cam.height; y += options.stride) {
        for (int x = 0; x < cam.width; x += options.stride) {
            if (cam.mask(y, x) == 0) continue;
            const double d = depth(y, x);
            if (!(d > 0.0)) {
                ++result.skipped;
                continue;
            }
            GaussianParticle p;
            p.position = origin + d * (cam_to_world * cam.pixel_ray(x, y));
            const double footprint = d * options.stride / std::sqrt(cam.fx * cam.fy);
            p.log_scale = Eigen::Vector3d::Constant(std::log(options.footprint_scale * footprint));
            p.opacity_logit = opacity_logit;
            for (int c = 0; c < 3; ++c) p.sh(0, c) = color_to_sh_dc(cam.image[c](y, x));
            p.label = Label::Masked;
            result.particles.push_back(p);
        }
    }
    return result;
}

DepthAlignment align_reference(const GaussianScene& scene, const ReferenceView& ref, const BilateralParams& params,
                               double min_alpha) {
    const CameraView& cam = ref.camera;
    RenderOptions options;
    options.channels = kChannelDepth | kChannelAlpha;
    const RenderOutput out = render(scene, cam, options);
    const Mask select = ((cam.mask == 0) && (out.alpha > min_alpha)).cast<std::uint8_t>();
    DepthAlignment alignment = align_depth(ref.relative_depth, out.depth, select);
    alignment.aligned = bilateral_refine(alignment.aligned, cam.image, cam.mask, params);
    return alignment;
}

GaussianScene init_masked_region(const GaussianScene& scene, const std::vector<Label>& labels,
                                 const ReferenceView& ref, const Plane& depth, const UnprojectOptions& options) {
    if (labels.size() != scene.size()) {
        throw InvalidInput("label count does not match the scene");
    }
    GaussianScene out;
    out.background = scene.background;
    for (std::size_t i = 0; i < scene.size(); ++i) {
        if (labels[i] == Label::Unmasked) {
            out.particles.push_back(scene.particles[i]);
            out.particles.back().label = Label::Unmasked;
        }
    }
    const UnprojectResult added = unproject_reference(ref, depth, options);
    if (added.skipped > 0) {
        spdlog::warn("skipped {} reference pixels with nonpositive depth", added.skipped);
    }
    out.particles.insert(out.particles.end(), added.particles.begin(), added.particles.end());
    return out;
}

}  // namespace refsplat
