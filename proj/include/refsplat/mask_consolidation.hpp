#pragma once

#include "refsplat/rasterizer.hpp"

#include <vector>

namespace refsplat {

/// Default thresholds for particle labelling and mask re-rendering.
inline constexpr double kDefaultTauMask = 1.0;
inline constexpr double kDefaultTauPrime = 0.3;

/// Masked iff masked_count ≥ tau·unmasked_count; with no unmasked evidence a
/// particle is Masked iff it has any masked contribution. Throws on negative tau.
std::vector<Label> label_gaussians(const ContributionTally& tally, double tau_mask = kDefaultTauMask);

/// Renders the semantic channel of a labelled scene into every view and
/// thresholds it at tau_prime (inclusive). Throws unless tau_prime ∈ [0, 1].
std::vector<Mask> render_consistent_masks(const GaussianScene& scene, const std::vector<CameraView>& views,
                                          double tau_prime = kDefaultTauPrime, int threads = 0);

/// True when the camera-frame ray along `dir` misses a sphere of `radius`
/// centred `distance` along the optical axis (b² − 4ac < 0).
bool ray_misses_axis_sphere(const Eigen::Vector3d& dir, double distance, double radius);

/// Inverse sphere masks for outpainting: a pixel is 1 when its ray misses the
/// sphere placed on that view's optical axis. Throws unless distance > radius > 0.
std::vector<Mask> generate_outpaint_masks(const std::vector<CameraView>& views, double sphere_distance,
                                          double sphere_radius);

}  // namespace refsplat
