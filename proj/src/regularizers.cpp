#include "refsplat/regularizers.hpp"

#include "refsplat/image_ops.hpp"
#include "refsplat/remote_prior.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>

namespace refsplat {

double adv_f(double x) { return -(std::max(-x, 0.0) + std::log1p(std::exp(-std::abs(x)))); }

double adv_f_prime(double x) {
    if (x >= 0.0) {
        const double e = std::exp(-x);
        return e / (1.0 + e);
    }
    return 1.0 / (1.0 + std::exp(x));
}

// ---------------------------------------------------------------- discriminator

Discriminator::Discriminator(DiscriminatorConfig config) : config_(std::move(config)) {
    if (config_.input_dim <= 0) {
        throw InvalidInput("discriminator input dimension must be positive");
    }
    std::mt19937_64 rng(config_.seed);
    std::vector<int> widths{config_.input_dim};
    for (int h : config_.hidden) {
        if (h <= 0) throw InvalidInput("discriminator hidden widths must be positive");
        widths.push_back(h);
    }
    widths.push_back(1);
    for (std::size_t k = 0; k + 1 < widths.size(); ++k) {
        const int in = widths[k], out = widths[k + 1];
        // He initialization for leaky-ReLU layers.
        std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / ((1.0 + Tape::kLeakySlope * Tape::kLeakySlope) * in)));
        Eigen::MatrixXd w(out, in);
        for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = normal(rng);
        params_.push_back(std::move(w));
        params_.push_back(Eigen::MatrixXd::Zero(out, 1));
    }
    moments_.resize(params_.size());
}

std::size_t Discriminator::parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += static_cast<std::size_t>(p.size());
    return n;
}

Eigen::RowVectorXd Discriminator::logits(const Eigen::MatrixXd& x) const {
    if (x.rows() != config_.input_dim) {
        throw InvalidInput(fmt::format("discriminator expects {} rows, got {}", config_.input_dim, x.rows()));
    }
    Eigen::MatrixXd h = x;
    const std::size_t layers = params_.size() / 2;
    for (std::size_t k = 0; k < layers; ++k) {
        Eigen::MatrixXd z = (params_[2 * k] * h).colwise() + params_[2 * k + 1].col(0);
        h = k + 1 < layers ? Eigen::MatrixXd(z.unaryExpr([](double v) { return v > 0.0 ? v : Tape::kLeakySlope * v; }))
                           : std::move(z);
    }
    return h.row(0);
}

Tape::Id Discriminator::record(Tape& tape, Tape::Id input, std::vector<Tape::Id>& param_ids) const {
    if (tape.value(input).rows() != config_.input_dim) {
        throw InvalidInput(
            fmt::format("discriminator expects {} rows, got {}", config_.input_dim, tape.value(input).rows()));
    }
    Tape::Id h = input;
    const std::size_t layers = params_.size() / 2;
    for (std::size_t k = 0; k < layers; ++k) {
        const Tape::Id w = tape.variable(params_[2 * k]);
        const Tape::Id b = tape.variable(params_[2 * k + 1]);
        param_ids.push_back(w);
        param_ids.push_back(b);
        const Tape::Id z = tape.add_columns(tape.matmul(w, h), b);
        h = k + 1 < layers ? tape.leaky_relu(z) : z;
    }
    return h;
}

void Discriminator::ascend(const std::vector<Eigen::MatrixXd>& grads) {
    if (grads.size() != params_.size()) {
        throw InvalidInput("discriminator gradient has the wrong number of blocks");
    }
    for (std::size_t k = 0; k < params_.size(); ++k) {
        if (grads[k].rows() != params_[k].rows() || grads[k].cols() != params_[k].cols()) {
            throw InvalidInput("discriminator gradient block has the wrong shape");
        }
        const Eigen::MatrixXd descent = -grads[k];
        adam_update(params_[k], descent, moments_[k], config_.adam);
    }
}

bool Discriminator::all_finite() const {
    return std::all_of(params_.begin(), params_.end(), [](const Eigen::MatrixXd& p) { return p.allFinite(); });
}

// ---------------------------------------------------------------- adversarial

namespace {

/// Constant n×k matrix selecting columns [first, first + k).
Eigen::MatrixXd column_selector(Eigen::Index n, Eigen::Index first, Eigen::Index k) {
    Eigen::MatrixXd s = Eigen::MatrixXd::Zero(n, k);
    for (Eigen::Index j = 0; j < k; ++j) s(first + j, j) = 1.0;
    return s;
}

}  // namespace

double gradient_penalty(const Discriminator& disc, const Eigen::MatrixXd& x, double lambda) {
    if (x.cols() == 0) return 0.0;
    Tape tape;
    const Tape::Id in = tape.variable(x);
    std::vector<Tape::Id> params;
    const Tape::Id logits = disc.record(tape, in, params);
    const Tape::Id total = tape.dot(logits, tape.constant(Eigen::MatrixXd::Ones(1, x.cols())));
    const Tape::Id g = tape.grad(total, {in})[0];
    return lambda * tape.value(tape.squared_norm(g))(0, 0) / static_cast<double>(x.cols());
}

AdvResult adv_step(const Discriminator& disc, const Eigen::MatrixXd& real, const Eigen::MatrixXd& fake,
                   const AdvConfig& config) {
    if (real.cols() == 0 || fake.cols() == 0) {
        throw InvalidInput("adv_step needs at least one real and one fake patch");
    }
    if (real.rows() != disc.input_dim() || fake.rows() != disc.input_dim()) {
        throw InvalidInput(fmt::format("patches have {} / {} rows, discriminator expects {}", real.rows(), fake.rows(),
                                       disc.input_dim()));
    }
    if (config.lambda_gp < 0.0) {
        throw InvalidInput("lambda_gp must be nonnegative");
    }
    const Eigen::Index nf = fake.cols(), nr = real.cols(), n = nf + nr;
    Eigen::MatrixXd both(fake.rows(), n);
    both << fake, real;

    AdvResult out;
    Tape tape;
    const Tape::Id x = tape.variable(both);
    std::vector<Tape::Id> params;
    const Tape::Id logits = disc.record(tape, x, params);
    const Eigen::MatrixXd l = tape.value(logits);
    if (!l.allFinite()) {
        spdlog::warn("discriminator produced non-finite logits; adversarial step skipped");
        out.skipped = true;
        return out;
    }

    // ∂/∂L of the data terms, held constant so the tape only differentiates D.
    Eigen::MatrixXd seed(1, n);
    for (Eigen::Index i = 0; i < nf; ++i) {
        out.gen_loss += adv_f(l(0, i)) / static_cast<double>(nf);
        seed(0, i) = adv_f_prime(l(0, i)) / static_cast<double>(nf);
    }
    double real_term = 0.0;
    for (Eigen::Index i = nf; i < n; ++i) {
        real_term += adv_f(-l(0, i)) / static_cast<double>(nr);
        seed(0, i) = -adv_f_prime(-l(0, i)) / static_cast<double>(nr);
    }

    const Tape::Id total = tape.dot(logits, tape.constant(Eigen::MatrixXd::Ones(1, n)));
    const Tape::Id input_grad = tape.grad(total, {x})[0];
    Tape::Id surrogate = tape.dot(logits, tape.constant(seed));
    if (config.lambda_gp > 0.0) {
        const bool on_fake = config.penalty_on == PenaltyTarget::Fake;
        const Eigen::Index count = on_fake ? nf : nr;
        const Tape::Id picked =
            tape.matmul(input_grad, tape.constant(column_selector(n, on_fake ? 0 : nf, count)));
        const Tape::Id penalty = tape.scale(tape.squared_norm(picked), config.lambda_gp / static_cast<double>(count));
        out.penalty = tape.value(penalty)(0, 0);
        surrogate = tape.add(surrogate, tape.scale(penalty, -1.0));
    }
    const std::vector<Tape::Id> grads = tape.grad(surrogate, params);
    for (Tape::Id g : grads) out.disc_grad.push_back(tape.value(g));
    out.disc_objective = out.gen_loss + real_term - out.penalty;

    const Eigen::MatrixXd& gx = tape.value(input_grad);
    out.fake_grad = gx.leftCols(nf);
    for (Eigen::Index i = 0; i < nf; ++i) out.fake_grad.col(i) *= seed(0, i);
    return out;
}

// ------------------------------------------------------------------- patches

namespace {

/// Patch origin along one axis of length `extent`, for the dilated box [lo, hi].
int draw_origin(int lo, int hi, int size, int extent, std::mt19937_64& rng) {
    if (hi - lo + 1 <= size) {
        const int first = std::max(0, hi - size + 1);
        const int last = std::min(extent - size, lo);
        return std::uniform_int_distribution<int>(first, last)(rng);
    }
    const int c = std::uniform_int_distribution<int>(lo, hi)(rng);
    return std::clamp(c - size / 2, 0, extent - size);
}

}  // namespace

std::vector<PixelBox> sample_patch_boxes(const Mask& mask, int n, int size, std::mt19937_64& rng) {
    if (n < 0 || size <= 0) {
        throw InvalidInput("patch count must be nonnegative and size positive");
    }
    const int h = static_cast<int>(mask.rows()), w = static_cast<int>(mask.cols());
    if (h < size || w < size) {
        throw InvalidInput(fmt::format("{}x{} image is smaller than {}px patches", w, h, size));
    }
    std::vector<PixelBox> boxes;
    if (n == 0) return boxes;
    const PixelBox bbox = mask_bounding_box(mask);
    if (bbox.empty()) {
        throw InvalidInput("patch sampling needs a nonempty mask");
    }
    const PixelBox d = dilate_box(bbox, kPatchBoxDilation, h, w);
    boxes.reserve(n);
    for (int i = 0; i < n; ++i) {
        const int x0 = draw_origin(d.x0, d.x1, size, w, rng);
        const int y0 = draw_origin(d.y0, d.y1, size, h, rng);
        boxes.push_back({x0, y0, x0 + size - 1, y0 + size - 1});
    }
    return boxes;
}

Eigen::MatrixXd extract_patches(const RgbImage& image, const std::vector<PixelBox>& boxes) {
    if (boxes.empty()) return {};
    const int s = boxes.front().width();
    Eigen::MatrixXd out(3 * s * s, static_cast<Eigen::Index>(boxes.size()));
    for (std::size_t j = 0; j < boxes.size(); ++j) {
        const PixelBox& b = boxes[j];
        if (b.width() != s || b.height() != s || b.x0 < 0 || b.y0 < 0 || b.x1 >= image[0].cols() ||
            b.y1 >= image[0].rows()) {
            throw InvalidInput("patch box is not a same-size square inside the image");
        }
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < s; ++y)
                for (int x = 0; x < s; ++x) out((c * s + y) * s + x, static_cast<Eigen::Index>(j)) = image[c](b.y0 + y, b.x0 + x);
    }
    return out;
}

RgbImage scatter_patches(const Eigen::MatrixXd& columns, const std::vector<PixelBox>& boxes, int height, int width) {
    RgbImage out = make_rgb(height, width);
    if (static_cast<std::size_t>(columns.cols()) != boxes.size()) {
        throw InvalidInput("one column per patch box is required");
    }
    for (std::size_t j = 0; j < boxes.size(); ++j) {
        const PixelBox& b = boxes[j];
        const int s = b.width();
        if (columns.rows() != 3 * s * s) {
            throw InvalidInput("patch column length does not match its box");
        }
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < s; ++y)
                for (int x = 0; x < s; ++x) out[c](b.y0 + y, b.x0 + x) += columns((c * s + y) * s + x, static_cast<Eigen::Index>(j));
    }
    return out;
}

PatchBatch sample_patches(const ReferenceView& reference, const RgbImage& render, const Mask& mask, int n, int size,
                          std::mt19937_64& rng) {
    if (render[0].rows() != mask.rows() || render[0].cols() != mask.cols()) {
        throw InvalidInput("render and mask differ in size");
    }
    PatchBatch batch;
    batch.real_boxes = sample_patch_boxes(reference.camera.mask, n, size, rng);
    batch.fake_boxes = sample_patch_boxes(mask, n, size, rng);
    batch.real = extract_patches(reference.camera.image, batch.real_boxes);
    batch.fake = extract_patches(render, batch.fake_boxes);
    return batch;
}

// --------------------------------------------------------------------- depth

GroundTruthDepthOracle::GroundTruthDepthOracle(GaussianScene complete, double scale, double offset)
    : complete_(std::move(complete)), scale_(scale), offset_(offset) {}

Plane GroundTruthDepthOracle::relative_depth(const RgbImage&, const CameraView& camera) const {
    RenderOptions opt;
    opt.channels = kChannelDepth;
    return scale_ * render(complete_, camera, opt).depth + offset_;
}

Plane RemoteDepthOracle::relative_depth(const RgbImage& image, const CameraView& camera) const {
    Plane d = prior_.monodepth(image);
    if (d.rows() != camera.height || d.cols() != camera.width) {
        d = resize_bilinear(d, camera.height, camera.width);
    }
    return d;
}

DepthTarget depth_target(const GaussianScene& scene, const CameraView& camera, const DenoisePrior& prior,
                         const DepthOracle& oracle, const DepthConfig& config, NoiseSampler& sampler) {
    const int h = camera.height, w = camera.width;
    if (camera.mask.rows() != h || camera.mask.cols() != w) {
        throw InvalidInput("depth_loss needs a view mask");
    }
    const NoiseSchedule& schedule = prior.schedule();
    const int size = prior.image_size();
    const double t = sampler.uniform(schedule.t_min, schedule.t_max);
    DepthTarget target;
    try {
        RenderOptions ropt;
        ropt.channels = kChannelRgb | kChannelDepth | kChannelAlpha;
        ropt.threads = config.threads;
        const RenderOutput rendered = render(scene, camera, ropt);
        const LatentImage z = prior.encode(resize_bilinear(rendered.rgb, size, size));
        LatentImage eps = z.with_data(Eigen::ArrayXd::Zero(z.data.size()));
        sampler.normal(eps);
        const Condition cond =
            make_condition(prior, camera, {0, 0, w - 1, h - 1}, PromptTag::Global, config.guidance);
        const RgbImage filled = resize_bilinear(
            prior.inpaint(add_noise(z, t, eps, schedule), t, config.denoise_steps, cond), h, w);
        const Plane keep = (camera.mask == 0).cast<double>();
        target.inpainted = rendered.rgb;
        for (int c = 0; c < 3; ++c) target.inpainted[c] = keep * rendered.rgb[c] + (1.0 - keep) * filled[c];

        const Plane relative = oracle.relative_depth(target.inpainted, camera);
        if (relative.rows() != h || relative.cols() != w) {
            throw InvalidInput("depth oracle returned the wrong resolution");
        }
        const Mask select = ((camera.mask == 0) && (rendered.alpha > config.min_alpha)).cast<std::uint8_t>();
        target.alignment = align_depth(relative, rendered.depth, select);
        target.depth = bilateral_refine(target.alignment.aligned, target.inpainted, camera.mask, config.bilateral);
    } catch (const std::exception& e) {
        spdlog::warn("depth target for view {} skipped: {}", camera.id, e.what());
        target.skipped = true;
        target.reason = e.what();
    }
    return target;
}

DepthLoss depth_loss_to_target(const GaussianScene& scene, const CameraView& camera, const Plane& target,
                               int threads) {
    const int h = camera.height, w = camera.width;
    if (target.rows() != h || target.cols() != w || camera.mask.rows() != h || camera.mask.cols() != w) {
        throw InvalidInput("depth target and mask must match the camera");
    }
    DepthLoss out;
    out.grad = zero_gradient(scene.size());
    const Plane sel = (camera.mask != 0).cast<double>();
    const double count = sel.sum();
    if (count == 0.0) return out;
    RenderOptions ropt;
    ropt.channels = kChannelDepth;
    ropt.threads = threads;
    const Plane diff = sel * (render(scene, camera, ropt).depth - target);
    out.loss = diff.square().sum() / count;
    RenderGradient upstream;
    upstream.depth = 2.0 * diff / count;
    out.grad = render_backward(scene, camera, upstream, threads);
    for (std::size_t i = 0; i < scene.size(); ++i) {
        if (!scene.particles[i].masked()) out.grad[i] = ParticleGradient{};
    }
    return out;
}

DepthLoss depth_loss(const GaussianScene& scene, const CameraView& camera, const DenoisePrior& prior,
                     const DepthOracle& oracle, const DepthConfig& config, NoiseSampler& sampler) {
    const DepthTarget target = depth_target(scene, camera, prior, oracle, config, sampler);
    if (target.skipped) {
        DepthLoss out;
        out.grad = zero_gradient(scene.size());
        out.skipped = true;
        return out;
    }
    return depth_loss_to_target(scene, camera, target.depth, config.threads);
}

}  // namespace refsplat
