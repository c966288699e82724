#pragma once

#include "refsplat/scene.hpp"
#include "refsplat/trainer.hpp"

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace refsplat {

/// Malformed file contents. `line` is 1-based, 0 when not line oriented.
class ParseError : public InvalidInput {
public:
    ParseError(const std::string& source, int line, const std::string& message);
    [[nodiscard]] int line() const { return line_; }

private:
    int line_;
};

// ------------------------------------------------------------------- scenes

/// Binary little-endian PLY in the common splatting layout with a trailing
/// uchar `label`. Values are stored as float32.
void write_scene_ply(std::ostream& out, const GaussianScene& scene);
GaussianScene read_scene_ply(std::istream& in, const std::string& source = "<stream>");
void save_scene(const std::filesystem::path& path, const GaussianScene& scene);
GaussianScene load_scene(const std::filesystem::path& path);

/// One 0/1 per line.
void save_labels(const std::filesystem::path& path, const std::vector<Label>& labels);
std::vector<Label> load_labels(const std::filesystem::path& path);

// ------------------------------------------------------------------- images

/// 8-bit PNG, grey or colour, alpha ignored; values scaled to [0, 1].
RgbImage load_png(const std::filesystem::path& path);
/// Values clamped to [0, 1] and rounded to 8 bits.
void save_png(const std::filesystem::path& path, const RgbImage& image);
/// Grey value ≥ 128 marks a pixel for inpainting.
Mask load_mask_png(const std::filesystem::path& path);
/// Writes 255 for masked and 0 for kept pixels.
void save_mask_png(const std::filesystem::path& path, const Mask& mask);

/// Single-channel little-endian PFM, rows stored bottom to top.
void write_pfm(std::ostream& out, const Plane& plane);
Plane read_pfm(std::istream& in, const std::string& source = "<stream>");
void save_pfm(const std::filesystem::path& path, const Plane& plane);
Plane load_pfm(const std::filesystem::path& path);

// ------------------------------------------------------------------ cameras

/// Pose orthonormality tolerance applied to loaded cameras.
inline constexpr double kPoseTolerance = 1e-4;

/// JSON array of {id, width, height, fx, fy, cx, cy, world_to_camera (16 row-major),
/// image, mask}. Image paths resolve against `image_dir`, mask paths against
/// `mask_dir`; a null mask gives an all-zero mask and a null image a black one.
std::vector<CameraView> parse_views(const std::string& json_text, const std::filesystem::path& image_dir,
                                    const std::filesystem::path& mask_dir, const std::string& source = "<string>");
std::vector<CameraView> load_views(const std::filesystem::path& cameras_file, const std::filesystem::path& image_dir,
                                   const std::filesystem::path& mask_dir);

struct ViewFiles {
    /// Per view, relative to the JSON directory or absolute; empty writes null.
    std::vector<std::string> images;
    std::vector<std::string> masks;
};

std::string views_to_json(const std::vector<CameraView>& views, const ViewFiles& files);
/// Writes the JSON and every image and mask file that `files` names, relative to the JSON's directory.
void save_views(const std::filesystem::path& cameras_file, const std::vector<CameraView>& views,
                const ViewFiles& files);

// ---------------------------------------------------------------- train job

/// A training run: TrainConfig keys plus the data paths the command line needs.
/// Relative paths resolve against the job file's directory.
struct TrainJob {
    TrainConfig config;
    std::string scene;
    std::string cameras;
    std::string images;
    std::string masks;
    /// Cameras file of the reference view and the id to use from it.
    std::string reference;
    int reference_id = 0;
    std::string reference_depth;
    /// Cameras file whose images are the analytic prior's targets.
    std::string prior_targets;
    /// Hidden complete scene for the ground-truth depth oracle.
    std::string complete_scene;
    double depth_scale = 1.0;
    double depth_offset = 0.0;
};

/// Same syntax as parse_train_config; unknown keys are errors.
TrainJob parse_train_job(const std::string& text);
std::string serialize_train_job(const TrainJob& job);

}  // namespace refsplat
