#pragma once

#include "refsplat/scene.hpp"

#include <optional>
#include <vector>

namespace refsplat {

/// Low-pass floor added to the projected covariance diagonal, in px².
inline constexpr double kCovarianceFloor = 0.3;
inline constexpr double kAlphaMax = 0.999;
/// Compositing stops before a splat would push transmittance below this.
inline constexpr double kTransmittanceMin = 1e-4;
inline constexpr double kNearPlane = 0.2;
/// Tangents in the projection Jacobian are clamped to this multiple of the half field of view.
inline constexpr double kFovClamp = 1.3;
/// Splats contribute nothing where ½dᵀΣ⁻¹d exceeds this (exp(-24.5) ≈ 2.3e-11).
inline constexpr double kMaxPower = 24.5;
/// Depth is normalized by alpha only above this coverage; below it the sentinel 0 is written.
inline constexpr double kDepthAlphaMin = 1e-4;
inline constexpr double kContributionThreshold = 1e-3;
inline constexpr int kTileSize = 16;

/// Screen-space footprint of one particle.
struct ProjectedGaussian {
    std::size_t index = 0;
    Eigen::Vector2d mean = Eigen::Vector2d::Zero();
    /// Projected covariance including the low-pass floor.
    Eigen::Matrix2d cov = Eigen::Matrix2d::Identity();
    /// Upper triangle (a, b, c) of cov⁻¹.
    Eigen::Vector3d conic = Eigen::Vector3d::Zero();
    double depth = 0.0;
    double opacity = 0.0;
    Eigen::Vector3d color = Eigen::Vector3d::Zero();
    double semantic = 0.0;
    /// Image-clipped pixel rectangle outside of which the splat cannot contribute.
    PixelBox bounds;
};

/// EWA projection of a particle; nullopt when the particle is behind the near plane.
/// `bounds` may be empty for particles that project entirely off-screen.
std::optional<ProjectedGaussian> project(const GaussianParticle& particle, const CameraView& camera);

enum ChannelSet : unsigned {
    kChannelRgb = 1u << 0,
    kChannelDepth = 1u << 1,
    kChannelAlpha = 1u << 2,
    kChannelSemantic = 1u << 3,
    kChannelContributors = 1u << 4,
    kChannelsAll = kChannelRgb | kChannelDepth | kChannelAlpha | kChannelSemantic,
};

struct RenderOutput {
    RgbImage rgb;
    /// Alpha-normalized expected depth, 0 where alpha ≤ kDepthAlphaMin.
    Plane depth;
    Plane alpha;
    Plane semantic;
    /// Number of composited splats per pixel (only with kChannelContributors).
    PlaneT<int> contributors;
};

/// Upstream gradient for render_backward; empty planes count as zero.
using RenderGradient = RenderOutput;

struct RenderOptions {
    unsigned channels = kChannelsAll;
    /// Worker threads for the tile loop; 0 picks the hardware concurrency.
    int threads = 0;
};

RenderOutput render(const GaussianScene& scene, const CameraView& camera, const RenderOptions& options = {});

/// Per-particle gradient, one field per differentiable parameter.
struct ParticleGradient {
    Eigen::Vector3d position = Eigen::Vector3d::Zero();
    Eigen::Vector3d log_scale = Eigen::Vector3d::Zero();
    Eigen::Vector4d rotation = Eigen::Vector4d::Zero();
    double opacity_logit = 0.0;
    ShCoeffs sh = ShCoeffs::Zero();
    /// Gradient w.r.t. the projected mean (not a parameter; feeds densification statistics).
    Eigen::Vector2d mean2d = Eigen::Vector2d::Zero();

    ParticleGradient& operator+=(const ParticleGradient& other);
    ParticleGradient& operator*=(double factor);
    [[nodiscard]] bool all_finite() const;
    [[nodiscard]] bool is_zero() const;
};

using SceneGradient = std::vector<ParticleGradient>;

SceneGradient zero_gradient(std::size_t count);
void accumulate(SceneGradient& into, const SceneGradient& from, double factor = 1.0);

/// Analytic gradient of ⟨upstream, render(scene, camera)⟩ with respect to every particle.
SceneGradient render_backward(const GaussianScene& scene, const CameraView& camera, const RenderGradient& upstream,
                              int threads = 0);

struct ContributionTally {
    std::vector<std::uint64_t> masked_count;
    std::vector<std::uint64_t> unmasked_count;
};

/// Counts, per particle, the masked and unmasked pixels where its compositing
/// weight α·T exceeds `threshold`. Every view must carry a mask.
ContributionTally accumulate_contributions(const GaussianScene& scene, const std::vector<CameraView>& views,
                                           double threshold = kContributionThreshold, int threads = 0);

}  // namespace refsplat
