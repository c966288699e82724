#pragma once

#include "refsplat/guidance_prior.hpp"
#include "refsplat/init_reference.hpp"
#include "refsplat/optim.hpp"
#include "refsplat/rasterizer.hpp"
#include "refsplat/regularizers.hpp"

#include <array>
#include <iosfwd>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace refsplat {

enum class TrainMode { Inpaint, Insert, Outpaint, SparseRecon };

const char* to_string(TrainMode mode);
TrainMode parse_train_mode(const std::string& text);

struct TrainConfig {
    TrainMode mode = TrainMode::Inpaint;
    int iterations = 3000;
    std::uint64_t seed = 0;
    int threads = 0;

    double lambda_rec = 1.0;
    double lambda_sds = 0.001;
    double lambda_depth = 0.0625;
    double lambda_adv = 0.03;

    bool sds_global = true;
    bool sds_local = true;
    int n_local_patches = 2;
    double guidance = 7.5;
    /// Diffusion time range of the schedule handed to the prior.
    double t_min = 0.02;
    double t_max = 0.98;

    int depth_every = 8;
    int depth_steps = 10;

    int adv_patches = 64;
    int adv_patch_size = 64;
    double lambda_gp = 1.0;
    bool penalty_on_real = false;
    double disc_lr = 2e-3;

    double tau_mask = 1.0;
    double tau_mask_prime = 0.3;

    int densify_every = 100;
    int densify_from = 500;
    int densify_until = 15000;
    double densify_grad_rec = 2e-4;
    /// SDS-sourced gradients are thresholded at this multiple of densify_grad_rec.
    double densify_sds_factor = 10.0;
    double percent_dense = 0.01;
    double prune_opacity = 0.005;
    bool audit_labels = true;

    double lr_position = 1.6e-4;
    double lr_position_final = 1.6e-6;
    double lr_sh = 2.5e-3;
    double lr_opacity = 5e-2;
    double lr_scale = 5e-3;
    double lr_rotation = 1e-3;

    int max_rollbacks = 10;

    /// Views supervised inside the mask in sparse_recon mode.
    std::vector<int> gt_views;
    double outpaint_distance = 2.0;
    double outpaint_radius = 1.0;

    /// Throws InvalidInput unless every weight is ≥ 0 and every interval ≥ 1.
    void validate() const;
    bool operator==(const TrainConfig&) const = default;
};

/// key = value lines; '#' starts a comment. Unknown keys are errors.
TrainConfig parse_train_config(const std::string& text);
std::string serialize_train_config(const TrainConfig& config);

enum class LossSource { Reconstruction, Sds, Depth, Adversarial, Supervision };

/// "reconstruction", "sds", "depth", "adversarial" or "supervision"; anything else throws.
LossSource parse_loss_source(const std::string& tag);

/// Reconstruction gradients reach only Unmasked particles; SDS, depth and
/// adversarial gradients only Masked ones, adversarial additionally only their SH
/// coefficients. Supervision (ground-truth views inside the mask) is unfiltered.
void route_gradients(SceneGradient& grads, const std::vector<Label>& labels, LossSource source);

/// Running screen-space gradient statistics, kept per loss source.
struct DensifyStats {
    std::vector<double> rec_accum;
    std::vector<double> sds_accum;
    std::vector<int> rec_count;
    std::vector<int> sds_count;

    void resize(std::size_t n);
    void add(const SceneGradient& grads, LossSource source);
};

struct DensifyReport {
    int cloned = 0;
    int split = 0;
    int pruned_opacity = 0;
    int pruned_flipped = 0;
    /// For every particle of the new scene, its index in the old scene, or -1 for a new child.
    std::vector<int> origin;
};

/// Clones small and splits large particles whose averaged screen-space gradient
/// exceeds the per-source threshold, children inheriting labels; prunes
/// transparent particles; then, when `views` carry masks and auditing is on,
/// relabels against them and deletes every particle whose label flips.
DensifyReport densify_and_prune(GaussianScene& scene, const DensifyStats& stats, const TrainConfig& config,
                                double scene_extent, const std::vector<CameraView>& views, std::mt19937_64& rng);

/// Radius of the camera-centre cloud, padded by 10%.
double scene_extent(const std::vector<CameraView>& views);

struct LossRow {
    int iteration = 0;
    double rec = 0.0;
    double sds_global = 0.0;
    double sds_local = 0.0;
    double depth = 0.0;
    double adv_g = 0.0;
    double adv_d = 0.0;
    std::size_t particle_count = 0;
};

void write_loss_log(std::ostream& out, const std::vector<LossRow>& rows);

class TrainingDiverged : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Optional collaborators of the training loop; absent ones disable their terms.
struct TrainInputs {
    const DenoisePrior* prior = nullptr;
    const DepthOracle* depth_oracle = nullptr;
    const ReferenceView* reference = nullptr;
};

struct TrainResult {
    GaussianScene scene;
    std::vector<LossRow> log;
    int rollbacks = 0;
    std::vector<DensifyReport> densify_events;
};

/// Per-parameter-group Adam state for a particle set.
class SceneOptimizer {
public:
    explicit SceneOptimizer(const TrainConfig& config) : config_(config) {}

    /// Applies one step with learning rates for `iteration`. Particles whose
    /// gradient block is all zero are left bitwise unchanged.
    void step(GaussianScene& scene, const SceneGradient& grads, int iteration);
    /// Carries moments across a densification event.
    void remap(const std::vector<int>& origin);
    [[nodiscard]] double position_lr(int iteration) const;

private:
    enum Group { kPosition, kScale, kRotation, kOpacity, kShDc, kShRest, kGroups };
    struct ParticleState {
        std::array<AdamMoments, kGroups> groups;
    };
    TrainConfig config_;
    std::vector<ParticleState> state_;
};

/// Runs the optimization loop. Zero iterations return the input scene unchanged.
TrainResult train(const TrainConfig& config, GaussianScene scene, std::vector<CameraView> views,
                  const TrainInputs& inputs);

}  // namespace refsplat
