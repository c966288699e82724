#include "refsplat/guidance_prior.hpp"

#include "refsplat/image_ops.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <cmath>
#include <numbers>

namespace refsplat {

double NoiseSchedule::alpha(double t) const { return std::cos(0.5 * std::numbers::pi * t); }
double NoiseSchedule::sigma(double t) const { return std::sin(0.5 * std::numbers::pi * t); }
double NoiseSchedule::weight(double t) const {
    const double s = sigma(t);
    return s * s;
}

void NoiseSchedule::check(double t) const {
    if (!(t >= t_min && t <= t_max)) {
        throw InvalidInput(fmt::format("diffusion time {} outside [{}, {}]", t, t_min, t_max));
    }
}

LatentImage LatentImage::zeros(int channels, int height, int width, std::string codec_id) {
    LatentImage z;
    z.channels = channels;
    z.height = height;
    z.width = width;
    z.data = Eigen::ArrayXd::Zero(static_cast<Eigen::Index>(channels) * height * width);
    z.codec_id = std::move(codec_id);
    return z;
}

LatentImage LatentImage::with_data(Eigen::ArrayXd values) const {
    if (values.size() != data.size()) {
        throw InvalidInput("latent data size mismatch");
    }
    LatentImage out = *this;
    out.data = std::move(values);
    return out;
}

void require_same_shape(const LatentImage& a, const LatentImage& b, const char* what) {
    if (!a.same_shape(b) || a.data.size() != b.data.size()) {
        throw InvalidInput(fmt::format("{}: latent shapes {}x{}x{} and {}x{}x{} differ", what, a.channels, a.height,
                                       a.width, b.channels, b.height, b.width));
    }
}

namespace {

/// Sum of v[0..n) by recursive halving.
double pairwise_sum(const double* v, int n) {
    if (n == 1) return v[0];
    const int half = n / 2;
    return pairwise_sum(v, half) + pairwise_sum(v + half, n - half);
}

}  // namespace

LinearCodec::LinearCodec(int factor) : factor_(factor) {
    if (factor < 1) {
        throw InvalidInput("codec factor must be at least 1");
    }
}

std::string LinearCodec::id() const { return fmt::format("avgpool{}", factor_); }

LatentImage LinearCodec::encode(const RgbImage& image) const {
    const int h = static_cast<int>(image[0].rows());
    const int w = static_cast<int>(image[0].cols());
    if (h % factor_ != 0 || w % factor_ != 0) {
        throw InvalidInput(fmt::format("image {}x{} is not divisible by codec factor {}", h, w, factor_));
    }
    const int k = factor_;
    LatentImage z = LatentImage::zeros(3, h / k, w / k, id());
    std::vector<double> block(static_cast<std::size_t>(k) * k);
    const double inv = 1.0 / (k * k);
    for (int c = 0; c < 3; ++c) {
        for (int y = 0; y < z.height; ++y) {
            for (int x = 0; x < z.width; ++x) {
                for (int dy = 0; dy < k; ++dy)
                    for (int dx = 0; dx < k; ++dx) block[dy * k + dx] = image[c](y * k + dy, x * k + dx);
                z.at(c, y, x) = pairwise_sum(block.data(), k * k) * inv;
            }
        }
    }
    return z;
}

RgbImage LinearCodec::decode(const LatentImage& latent) const {
    if (latent.channels != 3) {
        throw InvalidInput("linear codec latents have three channels");
    }
    const int k = factor_;
    RgbImage out = make_rgb(latent.height * k, latent.width * k);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < latent.height * k; ++y)
            for (int x = 0; x < latent.width * k; ++x) out[c](y, x) = latent.at(c, y / k, x / k);
    return out;
}

RgbImage LinearCodec::encode_adjoint(const LatentImage& grad) const {
    RgbImage out = decode(grad);
    const double inv = 1.0 / (factor_ * factor_);
    for (auto& p : out) p *= inv;
    return out;
}

const char* to_string(PromptTag tag) { return tag == PromptTag::Global ? "global" : "local"; }

LatentImage add_noise(const LatentImage& z, double t, const LatentImage& eps, const NoiseSchedule& schedule) {
    require_same_shape(z, eps, "add_noise");
    schedule.check(t);
    return z.with_data(schedule.alpha(t) * z.data + schedule.sigma(t) * eps.data);
}

LatentImage cfg_combine(const LatentImage& eps_cond, const LatentImage& eps_uncond, double guidance) {
    require_same_shape(eps_cond, eps_uncond, "cfg_combine");
    // ε_c + α(ε_c − ε_u): equal predictions or α = 0 return ε_c bit for bit.
    return eps_cond.with_data(eps_cond.data + guidance * (eps_cond.data - eps_uncond.data));
}

SdsTerm sds_grad(const DenoisePrior& prior, const LatentImage& z, const Condition& condition, double t,
                 const LatentImage& eps) {
    const NoiseSchedule& schedule = prior.schedule();
    const LatentImage z_t = add_noise(z, t, eps, schedule);
    LatentImage eps_hat;
    try {
        eps_hat = prior.denoise(z_t, t, condition);
    } catch (const std::exception& e) {
        throw std::runtime_error(fmt::format("prior failed during {} SDS at t={}: {}", to_string(condition.tag), t,
                                             e.what()));
    }
    require_same_shape(eps_hat, eps, "prior prediction");
    const Eigen::ArrayXd residual = eps_hat.data - eps.data;
    const double w = schedule.weight(t);
    SdsTerm term;
    term.grad = z.with_data(w * schedule.alpha(t) * residual);
    term.loss = w * residual.square().mean();
    return term;
}

LatentImage analytic_denoiser(const LatentImage& z_t, double t, const NoiseSchedule& schedule,
                              const std::vector<LatentImage>& targets, const std::vector<double>& weights) {
    if (targets.empty() || targets.size() != weights.size()) {
        throw InvalidInput("analytic denoiser needs one weight per target and at least one target");
    }
    const double a = schedule.alpha(t);
    const double s = schedule.sigma(t);
    Eigen::ArrayXd mean;
    if (targets.size() == 1) {
        require_same_shape(z_t, targets[0], "analytic denoiser target");
        mean = targets[0].data;
    } else {
        std::vector<double> logits(targets.size());
        for (std::size_t k = 0; k < targets.size(); ++k) {
            require_same_shape(z_t, targets[k], "analytic denoiser target");
            if (!(weights[k] > 0.0)) throw InvalidInput("mixture weights must be positive");
            logits[k] = std::log(weights[k]) - (z_t.data - a * targets[k].data).square().sum() / (2.0 * s * s);
        }
        const double top = *std::max_element(logits.begin(), logits.end());
        double total = 0.0;
        for (double& l : logits) total += (l = std::exp(l - top));
        mean = Eigen::ArrayXd::Zero(z_t.data.size());
        for (std::size_t k = 0; k < targets.size(); ++k) mean += (logits[k] / total) * targets[k].data;
    }
    return z_t.with_data((z_t.data - a * mean) / s);
}

AnalyticPrior::AnalyticPrior(int image_size, int codec_factor, NoiseSchedule schedule)
    : image_size_(image_size), codec_(codec_factor), schedule_(schedule) {
    if (image_size <= 0 || image_size % codec_factor != 0) {
        throw InvalidInput("prior image size must be a positive multiple of the codec factor");
    }
}

void AnalyticPrior::add_target(int view_id, RgbImage image, double weight) {
    if (!(weight > 0.0)) {
        throw InvalidInput("target weight must be positive");
    }
    targets_[view_id].push_back({std::move(image), weight});
}

std::vector<LatentImage> AnalyticPrior::target_latents(int view_id, const PixelBox& crop_box) const {
    const auto it = targets_.find(view_id);
    if (it == targets_.end()) {
        throw InvalidInput(fmt::format("analytic prior has no target for view {}", view_id));
    }
    std::vector<LatentImage> out;
    for (const Target& target : it->second) {
        out.push_back(codec_.encode(resize_bilinear(crop(target.image, crop_box), image_size_, image_size_)));
    }
    return out;
}

LatentImage AnalyticPrior::denoise(const LatentImage& z_t, double t, const Condition& condition) const {
    const std::vector<LatentImage> latents = target_latents(condition.view_id, condition.crop);
    std::vector<double> weights;
    for (const Target& target : targets_.at(condition.view_id)) weights.push_back(target.weight);
    const LatentImage eps = analytic_denoiser(z_t, t, schedule_, latents, weights);
    return cfg_combine(eps, eps, condition.guidance);
}

double RandomSampler::uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng_); }

void RandomSampler::normal(LatentImage& out) {
    std::normal_distribution<double> dist;
    for (Eigen::Index i = 0; i < out.data.size(); ++i) out.data[i] = dist(rng_);
}

namespace {

PixelBox full_box(const CameraView& camera) { return {0, 0, camera.width - 1, camera.height - 1}; }

/// Prior-resolution image of `box` within `image`.
RgbImage to_prior(const RgbImage& image, const PixelBox& box, int size) {
    return resize_bilinear(crop(image, box), size, size);
}

struct Branch {
    PixelBox box;
    double t;
    LatentImage eps;
};

}  // namespace

Condition make_condition(const DenoisePrior& prior, const CameraView& camera, const PixelBox& box, PromptTag tag,
                         double guidance) {
    const int size = prior.image_size();
    const Plane keep = (camera.mask == 0).cast<double>();
    RgbImage masked = camera.image;
    for (auto& p : masked) p *= keep;
    Condition cond;
    cond.tag = tag;
    cond.view_id = camera.id;
    cond.crop = box;
    cond.guidance = guidance;
    cond.masked_latent = prior.encode(to_prior(masked, box, size));
    const Plane mask_full = resize_bilinear(crop(Plane((camera.mask != 0).cast<double>()), box), size, size);
    const int k = size / cond.masked_latent.width;
    cond.mask = Plane::Zero(cond.masked_latent.height, cond.masked_latent.width);
    for (int y = 0; y < cond.mask.rows(); ++y)
        for (int x = 0; x < cond.mask.cols(); ++x) cond.mask(y, x) = mask_full.block(y * k, x * k, k, k).mean();
    return cond;
}

SdsOutput multiscale_sds(const GaussianScene& scene, const CameraView& camera, const DenoisePrior& prior,
                         const SdsConfig& config, NoiseSampler& sampler) {
    const int size = prior.image_size();
    const NoiseSchedule& schedule = prior.schedule();
    const int h = camera.height, w = camera.width;
    if (camera.mask.rows() != h || camera.mask.cols() != w) {
        throw InvalidInput("multiscale_sds needs a view mask");
    }
    const LatentImage shape = prior.encode(make_rgb(size, size));

    auto draw = [&](const PixelBox& box) {
        Branch b{box, sampler.uniform(schedule.t_min, schedule.t_max), shape};
        sampler.normal(b.eps);
        return b;
    };
    const Branch global = draw(full_box(camera));
    std::vector<Branch> locals;
    const PixelBox bbox = mask_bounding_box(camera.mask);
    SdsOutput out;
    out.grad = zero_gradient(scene.size());
    if (bbox.empty()) {
        out.local_skipped = true;
        if (config.local) spdlog::debug("view {} has an empty mask; local SDS skipped", camera.id);
    } else {
        const int cw = std::min(size, w), ch = std::min(size, h);
        for (int i = 0; i < config.n_local; ++i) {
            const int cx = std::min(bbox.x1, bbox.x0 + static_cast<int>(sampler.uniform(0.0, bbox.width())));
            const int cy = std::min(bbox.y1, bbox.y0 + static_cast<int>(sampler.uniform(0.0, bbox.height())));
            const int x0 = std::clamp(cx - cw / 2, 0, w - cw);
            const int y0 = std::clamp(cy - ch / 2, 0, h - ch);
            locals.push_back(draw({x0, y0, x0 + cw - 1, y0 + ch - 1}));
        }
    }
    if (!config.global && (!config.local || locals.empty())) {
        return out;
    }

    RenderOptions ropt;
    ropt.channels = kChannelRgb;
    ropt.threads = config.threads;
    const RenderOutput rendered = render(scene, camera, ropt);

    RgbImage image_grad = make_rgb(h, w);
    auto run = [&](const Branch& b, PromptTag tag, double factor) {
        const RgbImage prior_image = to_prior(rendered.rgb, b.box, size);
        const LatentImage z = prior.encode(prior_image);
        const SdsTerm term = sds_grad(prior, z, make_condition(prior, camera, b.box, tag, config.guidance), b.t, b.eps);
        const RgbImage g_prior = prior.encode_adjoint(prior_image, term.grad);
        const RgbImage g_crop = resize_bilinear_adjoint(g_prior, b.box.height(), b.box.width());
        for (int c = 0; c < 3; ++c) image_grad[c] += factor * paste(g_crop[c], b.box, h, w);
        return factor * term.loss;
    };
    if (config.global) {
        out.global_loss = run(global, PromptTag::Global, 1.0);
    }
    if (config.local) {
        for (const Branch& b : locals) out.local_loss += run(b, PromptTag::Local, 1.0 / locals.size());
    }

    RenderGradient upstream;
    upstream.rgb = std::move(image_grad);
    out.grad = render_backward(scene, camera, upstream, config.threads);
    for (std::size_t i = 0; i < scene.size(); ++i) {
        if (!scene.particles[i].masked()) out.grad[i] = ParticleGradient{};
    }
    return out;
}

LatentImage ddim_denoise(const DenoisePrior& prior, LatentImage z_t, double t_start, int steps,
                         const Condition& condition) {
    if (steps < 1) {
        throw InvalidInput("ddim_denoise needs at least one step");
    }
    const NoiseSchedule& schedule = prior.schedule();
    for (int k = 0; k < steps; ++k) {
        const double t = t_start * (1.0 - static_cast<double>(k) / steps);
        const double t_next = t_start * (1.0 - static_cast<double>(k + 1) / steps);
        const LatentImage eps = prior.denoise(z_t, t, condition);
        const Eigen::ArrayXd z0 = (z_t.data - schedule.sigma(t) * eps.data) / schedule.alpha(t);
        z_t.data = k + 1 == steps ? z0 : schedule.alpha(t_next) * z0 + schedule.sigma(t_next) * eps.data;
    }
    return z_t;
}

RgbImage DenoisePrior::inpaint(const LatentImage& z_t, double t_start, int steps, const Condition& condition) const {
    return decode(ddim_denoise(*this, z_t, t_start, steps, condition));
}

}  // namespace refsplat
