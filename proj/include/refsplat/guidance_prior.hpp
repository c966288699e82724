#pragma once

#include "refsplat/rasterizer.hpp"

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

namespace refsplat {

/// Variance-preserving cosine schedule: alpha = cos(πt/2), sigma = sin(πt/2).
struct NoiseSchedule {
    double t_min = 0.02;
    double t_max = 0.98;

    [[nodiscard]] double alpha(double t) const;
    [[nodiscard]] double sigma(double t) const;
    /// SDS weight w(t) = sigma(t)².
    [[nodiscard]] double weight(double t) const;
    /// Throws unless t lies in [t_min, t_max].
    void check(double t) const;
};

/// C×h×w tensor in a prior's latent space, stored channel-major.
struct LatentImage {
    int channels = 0;
    int height = 0;
    int width = 0;
    Eigen::ArrayXd data;
    std::string codec_id;

    static LatentImage zeros(int channels, int height, int width, std::string codec_id = {});
    [[nodiscard]] double& at(int c, int y, int x) { return data[(c * height + y) * width + x]; }
    [[nodiscard]] double at(int c, int y, int x) const { return data[(c * height + y) * width + x]; }
    [[nodiscard]] bool same_shape(const LatentImage& other) const {
        return channels == other.channels && height == other.height && width == other.width;
    }
    /// Copy with the same shape and codec but different values.
    [[nodiscard]] LatentImage with_data(Eigen::ArrayXd values) const;
};

void require_same_shape(const LatentImage& a, const LatentImage& b, const char* what);

/// k×k average pooling of a 3-channel image. Pooling sums pairwise, so
/// encode(decode(z)) == z exactly for power-of-two k.
class LinearCodec {
public:
    explicit LinearCodec(int factor = 4);

    [[nodiscard]] int factor() const { return factor_; }
    [[nodiscard]] std::string id() const;
    [[nodiscard]] LatentImage encode(const RgbImage& image) const;
    /// Nearest (block-constant) upsampling.
    [[nodiscard]] RgbImage decode(const LatentImage& latent) const;
    /// Eᵀ: block-constant upsampling scaled by 1/k².
    [[nodiscard]] RgbImage encode_adjoint(const LatentImage& grad) const;

private:
    int factor_;
};

enum class PromptTag { Global, Local };

const char* to_string(PromptTag tag);

/// Conditioning passed with every denoiser call.
struct Condition {
    PromptTag tag = PromptTag::Global;
    int view_id = 0;
    /// Region of the full-resolution view this latent was taken from.
    PixelBox crop;
    /// Latent of the view image with the masked pixels zeroed.
    LatentImage masked_latent;
    /// Mask at latent resolution, 1 = to inpaint.
    Plane mask;
    double guidance = 7.5;
};

/// Denoising prior ε_θ(z_t, t, c) with its codec and schedule.
class DenoisePrior {
public:
    virtual ~DenoisePrior() = default;

    [[nodiscard]] virtual const NoiseSchedule& schedule() const = 0;
    /// Square image resolution the prior consumes.
    [[nodiscard]] virtual int image_size() const = 0;
    [[nodiscard]] virtual LatentImage encode(const RgbImage& image) const = 0;
    [[nodiscard]] virtual RgbImage decode(const LatentImage& latent) const = 0;
    /// Vector-Jacobian product of encode at `image`.
    [[nodiscard]] virtual RgbImage encode_adjoint(const RgbImage& image, const LatentImage& grad) const = 0;
    /// CFG-combined noise prediction at noise level t.
    [[nodiscard]] virtual LatentImage denoise(const LatentImage& z_t, double t, const Condition& condition) const = 0;
    /// Fully denoised image from z_t at t_start. Defaults to ddim_denoise followed by decode.
    [[nodiscard]] virtual RgbImage inpaint(const LatentImage& z_t, double t_start, int steps,
                                           const Condition& condition) const;
};

/// z_t = alpha(t)·z + sigma(t)·ε.
LatentImage add_noise(const LatentImage& z, double t, const LatentImage& eps, const NoiseSchedule& schedule);

/// ε̂ = (1 + α)·ε_cond − α·ε_uncond.
LatentImage cfg_combine(const LatentImage& eps_cond, const LatentImage& eps_uncond, double guidance);

struct SdsTerm {
    /// Gradient with respect to the clean latent z.
    LatentImage grad;
    /// w(t)·mean((ε̂ − ε)²), logged as the branch's loss value.
    double loss = 0.0;
};

/// w(t)·(ε̂_θ(z_t, t, c) − ε)·alpha(t) with z_t = add_noise(z, t, ε).
SdsTerm sds_grad(const DenoisePrior& prior, const LatentImage& z, const Condition& condition, double t,
                 const LatentImage& eps);

/// Posterior-mean noise prediction for a weighted point-mass mixture over `targets`.
LatentImage analytic_denoiser(const LatentImage& z_t, double t, const NoiseSchedule& schedule,
                              const std::vector<LatentImage>& targets, const std::vector<double>& weights);

/// Closed-form prior whose data distribution is a point mass (or mixture of point
/// masses) on per-view target images. Condition masks and prompts are ignored;
/// the view id and crop select the target latent. Conditional and unconditional
/// predictions coincide, so CFG leaves the prediction unchanged.
class AnalyticPrior : public DenoisePrior {
public:
    AnalyticPrior(int image_size, int codec_factor = 4, NoiseSchedule schedule = {});

    /// Adds a full-resolution target image for a view. One target per view gives a Dirac prior.
    void add_target(int view_id, RgbImage image, double weight = 1.0);

    [[nodiscard]] const NoiseSchedule& schedule() const override { return schedule_; }
    [[nodiscard]] int image_size() const override { return image_size_; }
    [[nodiscard]] LatentImage encode(const RgbImage& image) const override { return codec_.encode(image); }
    [[nodiscard]] RgbImage decode(const LatentImage& latent) const override { return codec_.decode(latent); }
    [[nodiscard]] RgbImage encode_adjoint(const RgbImage&, const LatentImage& grad) const override {
        return codec_.encode_adjoint(grad);
    }
    [[nodiscard]] LatentImage denoise(const LatentImage& z_t, double t, const Condition& condition) const override;

    /// Target latents for a view and crop, as the SDS pipeline would encode them.
    [[nodiscard]] std::vector<LatentImage> target_latents(int view_id, const PixelBox& crop) const;

private:
    struct Target {
        RgbImage image;
        double weight;
    };
    int image_size_;
    LinearCodec codec_;
    NoiseSchedule schedule_;
    std::map<int, std::vector<Target>> targets_;
};

/// Source of diffusion times and Gaussian noise for the SDS branches.
class NoiseSampler {
public:
    virtual ~NoiseSampler() = default;
    virtual double uniform(double lo, double hi) = 0;
    virtual void normal(LatentImage& out) = 0;
};

class RandomSampler : public NoiseSampler {
public:
    explicit RandomSampler(std::uint64_t seed) : rng_(seed) {}
    double uniform(double lo, double hi) override;
    void normal(LatentImage& out) override;
    std::mt19937_64& engine() { return rng_; }

private:
    std::mt19937_64 rng_;
};

struct SdsConfig {
    bool global = true;
    bool local = true;
    int n_local = 2;
    double guidance = 7.5;
    int threads = 0;
};

struct SdsOutput {
    /// Gradient for Masked particles; Unmasked entries are exactly zero.
    SceneGradient grad;
    double global_loss = 0.0;
    double local_loss = 0.0;
    bool local_skipped = false;
};

/// Builds the condition for a crop of `camera`: masked view latent and
/// latent-resolution mask.
Condition make_condition(const DenoisePrior& prior, const CameraView& camera, const PixelBox& crop, PromptTag tag,
                         double guidance);

/// Multi-scale SDS gradient on the particles of `scene` for one view. The global
/// branch sees the whole render resized to the prior resolution; each local
/// branch sees a prior-sized crop centred in the mask's bounding box. Draws are
/// made in a fixed order (global t and ε, then each local's centre, t and ε)
/// whether or not a branch is enabled, so branch results are additive.
SdsOutput multiscale_sds(const GaussianScene& scene, const CameraView& camera, const DenoisePrior& prior,
                         const SdsConfig& config, NoiseSampler& sampler);

/// Deterministic DDIM-style denoising from t_start to 0 in `steps` uniform steps.
LatentImage ddim_denoise(const DenoisePrior& prior, LatentImage z_t, double t_start, int steps,
                         const Condition& condition);

}  // namespace refsplat
