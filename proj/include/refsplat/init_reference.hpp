#pragma once

#include "refsplat/scene.hpp"

#include <vector>

namespace refsplat {

/// Affine fit d̄ = scale·d̃ + offset of a relative depth map to a rendered one.
struct DepthAlignment {
    double scale = 1.0;
    double offset = 0.0;
    Plane aligned;
    /// Set when the relative depth was constant over the selection and the
    /// offset-only fallback was used.
    bool degenerate = false;
};

/// Least-squares (scale, offset) over pixels where `select` is nonzero.
/// Throws when fewer than two pixels are selected or shapes differ.
DepthAlignment align_depth(const Plane& relative, const Plane& rendered, const Mask& select);

struct BilateralParams {
    double sigma_color = 0.1;
    double sigma_space = 2.0;
    int radius = 2;
    int iterations = 10;
};

/// Joint-bilateral Jacobi smoothing of the pixels where `mask` is nonzero; the
/// others are held fixed. Neighbour weights combine guide-colour and pixel distance.
Plane bilateral_refine(const Plane& depth, const RgbImage& guide, const Mask& mask,
                       const BilateralParams& params = {});

/// Reference view: `camera.image` is the reference image, `camera.mask` its
/// inpainting mask and `relative_depth` the depth oracle output.
struct ReferenceView {
    CameraView camera;
    Plane relative_depth;
};

struct UnprojectOptions {
    int stride = 1;
    double opacity = 0.8;
    /// Isotropic standard deviation as a multiple of the pixel footprint depth·stride/f.
    double footprint_scale = 0.75;
};

struct UnprojectResult {
    std::vector<GaussianParticle> particles;
    /// Masked pixels dropped because their depth was not positive.
    std::size_t skipped = 0;
};

/// One Masked particle per masked reference pixel on the stride grid, placed at
/// `depth` along the pixel ray and coloured by the pixel through the DC term.
UnprojectResult unproject_reference(const ReferenceView& ref, const Plane& depth, const UnprojectOptions& options = {});

/// Aligns the reference's relative depth to the scene's depth render over unmasked
/// pixels with alpha above `min_alpha`, then bilaterally refines the masked region.
DepthAlignment align_reference(const GaussianScene& scene, const ReferenceView& ref,
                               const BilateralParams& params = {}, double min_alpha = 0.5);

/// Deletes every particle labelled Masked in `labels` and appends the particles
/// unprojected from `ref` at depth `depth`.
GaussianScene init_masked_region(const GaussianScene& scene, const std::vector<Label>& labels,
                                 const ReferenceView& ref, const Plane& depth, const UnprojectOptions& options = {});

}  // namespace refsplat
