#include "refsplat/mask_consolidation.hpp"

#include <fmt/format.h>

namespace refsplat {

std::vector<Label> label_gaussians(const ContributionTally& tally, double tau_mask) {
    if (!(tau_mask >= 0.0)) {
        throw InvalidInput(fmt::format("tau_mask must be non-negative, got {}", tau_mask));
    }
    if (tally.masked_count.size() != tally.unmasked_count.size()) {
        throw InvalidInput("tally count arrays differ in length");
    }
    std::vector<Label> labels(tally.masked_count.size(), Label::Unmasked);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const auto masked = tally.masked_count[i];
        const auto unmasked = tally.unmasked_count[i];
        const bool is_masked = unmasked == 0 ? masked > 0
                                             : static_cast<double>(masked) >= tau_mask * static_cast<double>(unmasked);
        labels[i] = is_masked ? Label::Masked : Label::Unmasked;
    }
    return labels;
}

std::vector<Mask> render_consistent_masks(const GaussianScene& scene, const std::vector<CameraView>& views,
                                          double tau_prime, int threads) {
    if (!(tau_prime >= 0.0 && tau_prime <= 1.0)) {
        throw InvalidInput(fmt::format("tau_prime must lie in [0, 1], got {}", tau_prime));
    }
    RenderOptions options;
    options.channels = kChannelSemantic;
    options.threads = threads;
    std::vector<Mask> masks;
    masks.reserve(views.size());
    for (const CameraView& view : views) {
        const RenderOutput out = render(scene, view, options);
        masks.push_back((out.semantic >= tau_prime).cast<std::uint8_t>());
    }
    return masks;
}

bool ray_misses_axis_sphere(const Eigen::Vector3d& dir, double distance, double radius) {
    // Ray o + t·d from the origin, sphere centre c = (0, 0, distance).
    const double a = dir.squaredNorm();
    const double b = -2.0 * distance * dir.z();
    const double c = distance * distance - radius * radius;
    return b * b - 4.0 * a * c < 0.0;
}

std::vector<Mask> generate_outpaint_masks(const std::vector<CameraView>& views, double sphere_distance,
                                          double sphere_radius) {
    if (!(sphere_radius > 0.0 && sphere_distance > sphere_radius)) {
        throw InvalidInput(fmt::format("outpaint sphere needs distance > radius > 0 (got {} and {})", sphere_distance,
                                       sphere_radius));
    }
    std::vector<Mask> masks;
    masks.reserve(views.size());
    for (const CameraView& view : views) {
        Mask mask(view.height, view.width);
        for (int y = 0; y < view.height; ++y) {
            for (int x = 0; x < view.width; ++x) {
                mask(y, x) = ray_misses_axis_sphere(view.pixel_ray(x, y), sphere_distance, sphere_radius) ? 1 : 0;
            }
        }
        masks.push_back(std::move(mask));
    }
    return masks;
}

}  // namespace refsplat
