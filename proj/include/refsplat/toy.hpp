#pragma once

#include "refsplat/init_reference.hpp"
#include "refsplat/scene.hpp"

#include <cstdint>
#include <vector>

namespace refsplat {

struct ToyConfig {
    int width = 64;
    int height = 64;
    int views = 20;
    double focal = 56.0;
    /// Room particles per side of each face grid; five faces give 5·n² particles.
    int room_grid = 10;
    int object_particles = 48;
    double object_radius = 0.35;
    /// Edge of the box the object hides; each of its six faces is a hidden_grid² patch.
    double hidden_size = 0.3;
    int hidden_grid = 4;
    double camera_radius = 2.2;
    double camera_height = 0.4;
    /// Semantic threshold turning the object's footprint into masks.
    double mask_threshold = 0.3;
    int threads = 0;
};

/// Procedural room with an unwanted object in the middle, seen by a ring of inward cameras.
/// The object encloses a box with differently coloured faces, so what lies behind the
/// object is never observed and a single reference view cannot show all of it.
struct ToyScene {
    /// Room and the hidden box, the object-free scene.
    GaussianScene complete;
    /// Room plus the object, whose particles are labelled Masked. The box is absent
    /// because no view ever sees it.
    GaussianScene augmented;
    /// Images are renders of `augmented`; masks threshold the object's semantic render.
    std::vector<CameraView> views;
    /// Renders of `complete`, one per view.
    std::vector<RgbImage> ground_truth;
};

/// Bitwise deterministic for a given seed and config.
ToyScene make_toy_scene(std::uint64_t seed, const ToyConfig& config = {});

/// Reference for view `index`: its camera and mask with the object-free render as
/// the reference image, and relative depth scale·depth + offset of the complete scene.
ReferenceView make_toy_reference(const ToyScene& toy, std::size_t index, double scale = 0.5, double offset = 0.25,
                                 int threads = 0);

// --------------------------------------------------------------- evaluation

struct EvalMetrics {
    double l1 = 0.0;
    double psnr = 0.0;
    double ssim = 0.0;
};

struct EvalReport {
    std::vector<EvalMetrics> per_view;
    EvalMetrics mean;
};

/// PSNR reported for identical images.
inline constexpr double kPsnrCap = 100.0;

/// Metrics inside each mask's bounding box, dilated by `dilation` of its size per
/// side and clamped to the image. Throws on empty masks or mismatched shapes.
EvalReport eval_masked(const std::vector<RgbImage>& pred, const std::vector<RgbImage>& gt,
                       const std::vector<Mask>& masks, double dilation = 0.10);

}  // namespace refsplat
