#pragma once

#include "refsplat/guidance_prior.hpp"
#include "refsplat/init_reference.hpp"
#include "refsplat/optim.hpp"
#include "refsplat/rasterizer.hpp"
#include "refsplat/tape.hpp"

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace refsplat {

// ---------------------------------------------------------------- adversarial

/// f(x) = −log(1 + exp(−x)).
double adv_f(double x);
/// f′(x) = 1 / (1 + exp(x)).
double adv_f_prime(double x);

struct DiscriminatorConfig {
    /// Flattened patch length, 3·size·size.
    int input_dim = 3 * 64 * 64;
    std::vector<int> hidden{256, 256};
    std::uint64_t seed = 0;
    AdamParams adam{2e-3, 0.0, 0.99, 1e-8};
};

/// MLP with leaky-ReLU hidden layers and a scalar logit. Inputs are columns.
class Discriminator {
public:
    explicit Discriminator(DiscriminatorConfig config);

    [[nodiscard]] int input_dim() const { return config_.input_dim; }
    [[nodiscard]] std::size_t parameter_count() const;
    /// Weights and biases, alternating W₀, b₀, W₁, b₁, …
    [[nodiscard]] const std::vector<Eigen::MatrixXd>& parameters() const { return params_; }
    [[nodiscard]] std::vector<Eigen::MatrixXd>& parameters() { return params_; }

    /// 1×n logits for n input columns.
    [[nodiscard]] Eigen::RowVectorXd logits(const Eigen::MatrixXd& x) const;
    /// Records the network on `tape`, appending one variable per parameter to `param_ids`.
    Tape::Id record(Tape& tape, Tape::Id input, std::vector<Tape::Id>& param_ids) const;

    /// One Adam step that increases the objective whose gradient is `grads`.
    void ascend(const std::vector<Eigen::MatrixXd>& grads);
    [[nodiscard]] bool all_finite() const;

private:
    DiscriminatorConfig config_;
    std::vector<Eigen::MatrixXd> params_;
    std::vector<AdamMoments> moments_;
};

enum class PenaltyTarget { Fake, Real };

struct AdvConfig {
    double lambda_gp = 1.0;
    /// The objective as printed penalizes ∇D at fake patches; Real gives conventional R1.
    PenaltyTarget penalty_on = PenaltyTarget::Fake;
};

struct AdvResult {
    /// E[f(D(fake)) + f(−D(real))] − λ·E‖∇ₓD‖², maximized over ξ.
    double disc_objective = 0.0;
    double penalty = 0.0;
    /// ∂disc_objective/∂ξ, laid out like Discriminator::parameters().
    std::vector<Eigen::MatrixXd> disc_grad;
    /// E[f(D(fake))], minimized by the generator.
    double gen_loss = 0.0;
    /// ∂gen_loss/∂fake, one column per fake patch.
    Eigen::MatrixXd fake_grad;
    /// Set when a logit is non-finite; no gradients are returned then.
    bool skipped = false;
};

/// Evaluates the adversarial objective on column-stacked real and fake patches.
AdvResult adv_step(const Discriminator& disc, const Eigen::MatrixXd& real, const Eigen::MatrixXd& fake,
                   const AdvConfig& config);

/// λ·E‖∇ₓD(x)‖² over the columns of x, as a plain value.
double gradient_penalty(const Discriminator& disc, const Eigen::MatrixXd& x, double lambda);

// ------------------------------------------------------------------- patches

/// Fraction of the mask's bounding box added on every side before drawing centres.
inline constexpr double kPatchBoxDilation = 0.10;

/// Square size×size boxes near the mask. Per axis, a dilated mask box that fits
/// in the patch is covered entirely; otherwise the centre is uniform over the
/// dilated box. Boxes are clamped inside the image.
std::vector<PixelBox> sample_patch_boxes(const Mask& mask, int n, int size, std::mt19937_64& rng);

/// Column per box, channel-major (c, y, x) inside each column.
Eigen::MatrixXd extract_patches(const RgbImage& image, const std::vector<PixelBox>& boxes);
/// Adjoint of extract_patches: scatters (adds) columns back into an H×W image.
RgbImage scatter_patches(const Eigen::MatrixXd& columns, const std::vector<PixelBox>& boxes, int height, int width);

struct PatchBatch {
    std::vector<PixelBox> real_boxes;
    std::vector<PixelBox> fake_boxes;
    Eigen::MatrixXd real;
    Eigen::MatrixXd fake;
};

/// Real patches around the reference mask, fake patches around the training view's mask.
PatchBatch sample_patches(const ReferenceView& reference, const RgbImage& render, const Mask& mask, int n, int size,
                          std::mt19937_64& rng);

// --------------------------------------------------------------------- depth

/// Relative depth for an image seen from a camera.
class DepthOracle {
public:
    virtual ~DepthOracle() = default;
    [[nodiscard]] virtual Plane relative_depth(const RgbImage& image, const CameraView& camera) const = 0;
};

/// Renders a hidden complete scene and returns scale·depth + offset, ignoring the image.
class GroundTruthDepthOracle : public DepthOracle {
public:
    GroundTruthDepthOracle(GaussianScene complete, double scale = 1.0, double offset = 0.0);
    [[nodiscard]] Plane relative_depth(const RgbImage& image, const CameraView& camera) const override;

private:
    GaussianScene complete_;
    double scale_;
    double offset_;
};

class RemotePrior;

/// Monocular depth served by the prior server, resized to the camera.
class RemoteDepthOracle : public DepthOracle {
public:
    explicit RemoteDepthOracle(const RemotePrior& prior) : prior_(prior) {}
    [[nodiscard]] Plane relative_depth(const RgbImage& image, const CameraView& camera) const override;

private:
    const RemotePrior& prior_;
};

struct DepthConfig {
    int denoise_steps = 10;
    double guidance = 7.5;
    /// Unmasked pixels with rendered alpha above this anchor the alignment.
    double min_alpha = 0.5;
    BilateralParams bilateral;
    int threads = 0;
};

/// Aligned, refined pseudo ground truth d̄ for one view (constant w.r.t. the scene).
struct DepthTarget {
    Plane depth;
    RgbImage inpainted;
    DepthAlignment alignment;
    bool skipped = false;
    std::string reason;
};

/// Inpaints the render from a random t_depth, pastes the result into the mask,
/// queries the oracle and aligns its output to the rendered depth.
DepthTarget depth_target(const GaussianScene& scene, const CameraView& camera, const DenoisePrior& prior,
                         const DepthOracle& oracle, const DepthConfig& config, NoiseSampler& sampler);

struct DepthLoss {
    double loss = 0.0;
    /// Zero for Unmasked particles.
    SceneGradient grad;
    bool skipped = false;
};

/// mean over mask pixels of (d̂ − d̄)², with the gradient routed to Masked particles.
DepthLoss depth_loss_to_target(const GaussianScene& scene, const CameraView& camera, const Plane& target,
                               int threads = 0);

/// depth_target followed by depth_loss_to_target; oracle or prior failures skip the term.
DepthLoss depth_loss(const GaussianScene& scene, const CameraView& camera, const DenoisePrior& prior,
                     const DepthOracle& oracle, const DepthConfig& config, NoiseSampler& sampler);

}  // namespace refsplat
