#include "refsplat/trainer.hpp"

#include "refsplat/image_ops.hpp"
#include "refsplat/mask_consolidation.hpp"

#include <fmt/format.h>
#include <fmt/ranges.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <functional>
#include <map>
#include <ostream>
#include <sstream>

namespace refsplat {

// ------------------------------------------------------------------- config

const char* to_string(TrainMode mode) {
    switch (mode) {
        case TrainMode::Inpaint:
            return "inpaint";
        case TrainMode::Insert:
            return "insert";
        case TrainMode::Outpaint:
            return "outpaint";
        case TrainMode::SparseRecon:
            return "sparse_recon";
    }
    return "?";
}

TrainMode parse_train_mode(const std::string& text) {
    for (TrainMode m : {TrainMode::Inpaint, TrainMode::Insert, TrainMode::Outpaint, TrainMode::SparseRecon}) {
        if (text == to_string(m)) return m;
    }
    throw InvalidInput(fmt::format("unknown mode '{}' (expected inpaint, insert, outpaint or sparse_recon)", text));
}

void TrainConfig::validate() const {
    auto nonneg = [](double v, const char* name) {
        if (!(v >= 0.0)) throw InvalidInput(fmt::format("{} must be ≥ 0, got {}", name, v));
    };
    auto positive = [](long v, const char* name) {
        if (v < 1) throw InvalidInput(fmt::format("{} must be ≥ 1, got {}", name, v));
    };
    if (iterations < 0) throw InvalidInput("iterations must be ≥ 0");
    nonneg(lambda_rec, "lambda_rec");
    nonneg(lambda_sds, "lambda_sds");
    nonneg(lambda_depth, "lambda_depth");
    nonneg(lambda_adv, "lambda_adv");
    nonneg(lambda_gp, "lambda_gp");
    nonneg(tau_mask, "tau_mask");
    nonneg(densify_grad_rec, "densify_grad_rec");
    nonneg(densify_sds_factor, "densify_sds_factor");
    nonneg(percent_dense, "percent_dense");
    nonneg(prune_opacity, "prune_opacity");
    nonneg(guidance, "guidance");
    for (double lr : {lr_position, lr_position_final, lr_sh, lr_opacity, lr_scale, lr_rotation, disc_lr}) {
        nonneg(lr, "learning rate");
    }
    positive(depth_every, "depth_every");
    positive(depth_steps, "depth_steps");
    positive(densify_every, "densify_every");
    positive(max_rollbacks, "max_rollbacks");
    positive(adv_patch_size, "adv_patch_size");
    if (n_local_patches < 0 || adv_patches < 0) throw InvalidInput("patch counts must be ≥ 0");
    if (tau_mask_prime < 0.0 || tau_mask_prime > 1.0) throw InvalidInput("tau_mask_prime must lie in [0, 1]");
    if (!(0.0 <= t_min && t_min < t_max && t_max <= 1.0)) throw InvalidInput("need 0 ≤ t_min < t_max ≤ 1");
    if (mode == TrainMode::Outpaint && !(outpaint_distance > outpaint_radius && outpaint_radius > 0.0)) {
        throw InvalidInput("outpainting needs outpaint_distance > outpaint_radius > 0");
    }
}

namespace {

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

double to_double(const std::string& v) {
    double out = 0.0;
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size()) throw InvalidInput(fmt::format("'{}' is not a number", v));
    return out;
}

template <typename Int>
Int to_int(const std::string& v) {
    Int out = 0;
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size()) throw InvalidInput(fmt::format("'{}' is not an integer", v));
    return out;
}

bool to_bool(const std::string& v) {
    if (v == "true") return true;
    if (v == "false") return false;
    throw InvalidInput(fmt::format("'{}' is not true or false", v));
}

std::string unquote(const std::string& v) {
    if (v.size() >= 2 && v.front() == '"' && v.back() == '"') return v.substr(1, v.size() - 2);
    throw InvalidInput(fmt::format("expected a quoted string, got '{}'", v));
}

std::vector<int> to_int_list(const std::string& v) {
    if (v.size() < 2 || v.front() != '[' || v.back() != ']') {
        throw InvalidInput(fmt::format("expected a [list], got '{}'", v));
    }
    std::vector<int> out;
    const std::string body = trim(std::string_view(v).substr(1, v.size() - 2));
    if (body.empty()) return out;
    std::stringstream ss(body);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(to_int<int>(trim(item)));
    return out;
}

struct Field {
    std::function<void(TrainConfig&, const std::string&)> set;
    std::function<std::string(const TrainConfig&)> get;
};

template <typename T>
Field number(T TrainConfig::*member) {
    if constexpr (std::is_floating_point_v<T>) {
        return {[member](TrainConfig& c, const std::string& v) { c.*member = to_double(v); },
                [member](const TrainConfig& c) { return fmt::format("{}", c.*member); }};
    } else {
        return {[member](TrainConfig& c, const std::string& v) { c.*member = to_int<T>(v); },
                [member](const TrainConfig& c) { return fmt::format("{}", c.*member); }};
    }
}

Field boolean(bool TrainConfig::*member) {
    return {[member](TrainConfig& c, const std::string& v) { c.*member = to_bool(v); },
            [member](const TrainConfig& c) { return std::string(c.*member ? "true" : "false"); }};
}

/// Keys in serialization order.
const std::vector<std::pair<std::string, Field>>& config_fields() {
    static const std::vector<std::pair<std::string, Field>> fields = {
        {"mode",
         {[](TrainConfig& c, const std::string& v) { c.mode = parse_train_mode(unquote(v)); },
          [](const TrainConfig& c) { return fmt::format("\"{}\"", to_string(c.mode)); }}},
        {"iterations", number(&TrainConfig::iterations)},
        {"seed", number(&TrainConfig::seed)},
        {"threads", number(&TrainConfig::threads)},
        {"lambda_rec", number(&TrainConfig::lambda_rec)},
        {"lambda_sds", number(&TrainConfig::lambda_sds)},
        {"lambda_depth", number(&TrainConfig::lambda_depth)},
        {"lambda_adv", number(&TrainConfig::lambda_adv)},
        {"sds_global", boolean(&TrainConfig::sds_global)},
        {"sds_local", boolean(&TrainConfig::sds_local)},
        {"n_local_patches", number(&TrainConfig::n_local_patches)},
        {"guidance", number(&TrainConfig::guidance)},
        {"t_min", number(&TrainConfig::t_min)},
        {"t_max", number(&TrainConfig::t_max)},
        {"depth_every", number(&TrainConfig::depth_every)},
        {"depth_steps", number(&TrainConfig::depth_steps)},
        {"adv_patches", number(&TrainConfig::adv_patches)},
        {"adv_patch_size", number(&TrainConfig::adv_patch_size)},
        {"lambda_gp", number(&TrainConfig::lambda_gp)},
        {"penalty_on_real", boolean(&TrainConfig::penalty_on_real)},
        {"disc_lr", number(&TrainConfig::disc_lr)},
        {"tau_mask", number(&TrainConfig::tau_mask)},
        {"tau_mask_prime", number(&TrainConfig::tau_mask_prime)},
        {"densify_every", number(&TrainConfig::densify_every)},
        {"densify_from", number(&TrainConfig::densify_from)},
        {"densify_until", number(&TrainConfig::densify_until)},
        {"densify_grad_rec", number(&TrainConfig::densify_grad_rec)},
        {"densify_sds_factor", number(&TrainConfig::densify_sds_factor)},
        {"percent_dense", number(&TrainConfig::percent_dense)},
        {"prune_opacity", number(&TrainConfig::prune_opacity)},
        {"audit_labels", boolean(&TrainConfig::audit_labels)},
        {"lr_position", number(&TrainConfig::lr_position)},
        {"lr_position_final", number(&TrainConfig::lr_position_final)},
        {"lr_sh", number(&TrainConfig::lr_sh)},
        {"lr_opacity", number(&TrainConfig::lr_opacity)},
        {"lr_scale", number(&TrainConfig::lr_scale)},
        {"lr_rotation", number(&TrainConfig::lr_rotation)},
        {"max_rollbacks", number(&TrainConfig::max_rollbacks)},
        {"gt_views",
         {[](TrainConfig& c, const std::string& v) { c.gt_views = to_int_list(v); },
          [](const TrainConfig& c) { return fmt::format("[{}]", fmt::join(c.gt_views, ", ")); }}},
        {"outpaint_distance", number(&TrainConfig::outpaint_distance)},
        {"outpaint_radius", number(&TrainConfig::outpaint_radius)},
    };
    return fields;
}

}  // namespace

TrainConfig parse_train_config(const std::string& text) {
    TrainConfig config;
    const auto& fields = config_fields();
    std::stringstream in(text);
    std::string line;
    int number = 0;
    while (std::getline(in, line)) {
        ++number;
        const auto hash = line.find('#');
        const std::string body = trim(hash == std::string::npos ? line : line.substr(0, hash));
        if (body.empty()) continue;
        const auto eq = body.find('=');
        if (eq == std::string::npos) {
            throw InvalidInput(fmt::format("config line {}: expected key = value", number));
        }
        const std::string key = trim(body.substr(0, eq));
        const std::string value = trim(body.substr(eq + 1));
        const auto it = std::find_if(fields.begin(), fields.end(), [&](const auto& f) { return f.first == key; });
        if (it == fields.end()) {
            throw InvalidInput(fmt::format("config line {}: unknown key '{}'", number, key));
        }
        try {
            it->second.set(config, value);
        } catch (const InvalidInput& e) {
            throw InvalidInput(fmt::format("config line {} ({}): {}", number, key, e.what()));
        }
    }
    config.validate();
    return config;
}

std::string serialize_train_config(const TrainConfig& config) {
    std::string out;
    for (const auto& [key, field] : config_fields()) out += fmt::format("{} = {}\n", key, field.get(config));
    return out;
}

// ------------------------------------------------------------------ routing

LossSource parse_loss_source(const std::string& tag) {
    static const std::map<std::string, LossSource> tags = {{"reconstruction", LossSource::Reconstruction},
                                                           {"sds", LossSource::Sds},
                                                           {"depth", LossSource::Depth},
                                                           {"adversarial", LossSource::Adversarial},
                                                           {"supervision", LossSource::Supervision}};
    const auto it = tags.find(tag);
    if (it == tags.end()) throw InvalidInput(fmt::format("unknown loss source '{}'", tag));
    return it->second;
}

void route_gradients(SceneGradient& grads, const std::vector<Label>& labels, LossSource source) {
    if (grads.size() != labels.size()) {
        throw InvalidInput("gradient and label counts differ");
    }
    for (std::size_t i = 0; i < grads.size(); ++i) {
        const bool masked = labels[i] == Label::Masked;
        switch (source) {
            case LossSource::Reconstruction:
                if (masked) grads[i] = ParticleGradient{};
                break;
            case LossSource::Sds:
            case LossSource::Depth:
                if (!masked) grads[i] = ParticleGradient{};
                break;
            case LossSource::Adversarial:
                if (!masked) {
                    grads[i] = ParticleGradient{};
                } else {
                    const ShCoeffs sh = grads[i].sh;
                    const Eigen::Vector2d mean2d = grads[i].mean2d;
                    grads[i] = ParticleGradient{};
                    grads[i].sh = sh;
                    grads[i].mean2d = mean2d;
                }
                break;
            case LossSource::Supervision:
                break;
        }
    }
}

// -------------------------------------------------------------- densification

void DensifyStats::resize(std::size_t n) {
    rec_accum.assign(n, 0.0);
    sds_accum.assign(n, 0.0);
    rec_count.assign(n, 0);
    sds_count.assign(n, 0);
}

void DensifyStats::add(const SceneGradient& grads, LossSource source) {
    if (grads.size() != rec_accum.size()) {
        throw InvalidInput("densification statistics sized for a different scene");
    }
    const bool rec = source == LossSource::Reconstruction || source == LossSource::Supervision;
    if (!rec && source != LossSource::Sds) return;
    auto& accum = rec ? rec_accum : sds_accum;
    auto& count = rec ? rec_count : sds_count;
    for (std::size_t i = 0; i < grads.size(); ++i) {
        const double n = grads[i].mean2d.norm();
        if (n > 0.0) {
            accum[i] += n;
            ++count[i];
        }
    }
}

double scene_extent(const std::vector<CameraView>& views) {
    if (views.empty()) return 1.0;
    Eigen::Vector3d mean = Eigen::Vector3d::Zero();
    for (const auto& v : views) mean += v.center();
    mean /= static_cast<double>(views.size());
    double radius = 0.0;
    for (const auto& v : views) radius = std::max(radius, (v.center() - mean).norm());
    return 1.1 * std::max(radius, 1e-6);
}

DensifyReport densify_and_prune(GaussianScene& scene, const DensifyStats& stats, const TrainConfig& config,
                                double extent, const std::vector<CameraView>& views, std::mt19937_64& rng) {
    const std::size_t n = scene.size();
    if (stats.rec_accum.size() != n) {
        throw InvalidInput("densification statistics sized for a different scene");
    }
    DensifyReport report;
    const double thr_rec = config.densify_grad_rec;
    const double thr_sds = config.densify_grad_rec * config.densify_sds_factor;
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<GaussianParticle> grown;
    std::vector<int> origin;
    grown.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const GaussianParticle& p = scene.particles[i];
        const double avg_rec = stats.rec_count[i] > 0 ? stats.rec_accum[i] / stats.rec_count[i] : 0.0;
        const double avg_sds = stats.sds_count[i] > 0 ? stats.sds_accum[i] / stats.sds_count[i] : 0.0;
        const bool grow = (stats.rec_count[i] > 0 && avg_rec >= thr_rec) || (stats.sds_count[i] > 0 && avg_sds >= thr_sds);
        const double max_scale = std::exp(p.log_scale.maxCoeff());
        if (grow && max_scale <= config.percent_dense * extent) {
            grown.push_back(p);
            origin.push_back(static_cast<int>(i));
            grown.push_back(p);
            origin.push_back(-1);
            ++report.cloned;
        } else if (grow) {
            const Eigen::Matrix3d rot = quat_to_rotation(p.rotation);
            for (int k = 0; k < 2; ++k) {
                GaussianParticle child = p;
                const Eigen::Vector3d s(normal(rng), normal(rng), normal(rng));
                child.position = p.position + rot * (p.log_scale.array().exp().matrix().cwiseProduct(s));
                child.log_scale = p.log_scale.array() - std::log(1.6);
                grown.push_back(child);
                origin.push_back(-1);
            }
            ++report.split;
        } else {
            grown.push_back(p);
            origin.push_back(static_cast<int>(i));
        }
    }

    std::vector<bool> keep(grown.size(), true);
    for (std::size_t i = 0; i < grown.size(); ++i) {
        if (sigmoid(grown[i].opacity_logit) < config.prune_opacity) {
            keep[i] = false;
            ++report.pruned_opacity;
        }
    }
    const bool masks_ready = !views.empty() && std::all_of(views.begin(), views.end(), [](const CameraView& v) {
        return v.mask.rows() == v.height && v.mask.cols() == v.width;
    });
    if (config.audit_labels && masks_ready) {
        GaussianScene candidate;
        candidate.background = scene.background;
        candidate.particles = grown;
        const ContributionTally tally = accumulate_contributions(candidate, views, kContributionThreshold, config.threads);
        const std::vector<Label> relabel = label_gaussians(tally, config.tau_mask);
        for (std::size_t i = 0; i < grown.size(); ++i) {
            const bool evidence = tally.masked_count[i] + tally.unmasked_count[i] > 0;
            if (keep[i] && evidence && relabel[i] != grown[i].label) {
                keep[i] = false;
                ++report.pruned_flipped;
            }
        }
    }
    scene.particles.clear();
    for (std::size_t i = 0; i < grown.size(); ++i) {
        if (!keep[i]) continue;
        scene.particles.push_back(grown[i]);
        report.origin.push_back(origin[i]);
    }
    return report;
}

// ---------------------------------------------------------------- optimizer

double SceneOptimizer::position_lr(int iteration) const {
    const double r = config_.iterations > 0 ? std::clamp(static_cast<double>(iteration) / config_.iterations, 0.0, 1.0)
                                            : 0.0;
    if (config_.lr_position <= 0.0 || config_.lr_position_final <= 0.0) return config_.lr_position;
    return std::exp((1.0 - r) * std::log(config_.lr_position) + r * std::log(config_.lr_position_final));
}

void SceneOptimizer::step(GaussianScene& scene, const SceneGradient& grads, int iteration) {
    if (grads.size() != scene.size()) {
        throw InvalidInput("gradient count differs from particle count");
    }
    if (state_.size() != scene.size()) state_.resize(scene.size());
    const double lrs[kGroups] = {position_lr(iteration), config_.lr_scale, config_.lr_rotation, config_.lr_opacity,
                                 config_.lr_sh, config_.lr_sh / 20.0};
    AdamParams adam{0.0, 0.9, 0.999, 1e-15};
    std::array<double, 45> param{}, grad{};
    for (std::size_t i = 0; i < scene.size(); ++i) {
        GaussianParticle& p = scene.particles[i];
        const ParticleGradient& g = grads[i];
        auto update = [&](int group, int count, auto&& gather, auto&& scatter) {
            gather(param.data(), grad.data());
            if (std::all_of(grad.begin(), grad.begin() + count, [](double v) { return v == 0.0; })) return false;
            adam.lr = lrs[group];
            adam_update(param.data(), grad.data(), count, state_[i].groups[group], adam);
            scatter(param.data());
            return true;
        };
        update(kPosition, 3,
               [&](double* x, double* d) {
                   for (int k = 0; k < 3; ++k) x[k] = p.position[k], d[k] = g.position[k];
               },
               [&](const double* x) {
                   for (int k = 0; k < 3; ++k) p.position[k] = x[k];
               });
        update(kScale, 3,
               [&](double* x, double* d) {
                   for (int k = 0; k < 3; ++k) x[k] = p.log_scale[k], d[k] = g.log_scale[k];
               },
               [&](const double* x) {
                   for (int k = 0; k < 3; ++k) p.log_scale[k] = x[k];
               });
        const bool rotated = update(kRotation, 4,
                                    [&](double* x, double* d) {
                                        for (int k = 0; k < 4; ++k) x[k] = p.rotation[k], d[k] = g.rotation[k];
                                    },
                                    [&](const double* x) {
                                        for (int k = 0; k < 4; ++k) p.rotation[k] = x[k];
                                    });
        if (rotated) p.rotation.normalize();
        update(kOpacity, 1,
               [&](double* x, double* d) {
                   x[0] = p.opacity_logit;
                   d[0] = g.opacity_logit;
               },
               [&](const double* x) { p.opacity_logit = x[0]; });
        update(kShDc, 3,
               [&](double* x, double* d) {
                   for (int c = 0; c < 3; ++c) x[c] = p.sh(0, c), d[c] = g.sh(0, c);
               },
               [&](const double* x) {
                   for (int c = 0; c < 3; ++c) p.sh(0, c) = x[c];
               });
        update(kShRest, 45,
               [&](double* x, double* d) {
                   for (int k = 1; k < kShBasisCount; ++k)
                       for (int c = 0; c < 3; ++c) x[(k - 1) * 3 + c] = p.sh(k, c), d[(k - 1) * 3 + c] = g.sh(k, c);
               },
               [&](const double* x) {
                   for (int k = 1; k < kShBasisCount; ++k)
                       for (int c = 0; c < 3; ++c) p.sh(k, c) = x[(k - 1) * 3 + c];
               });
    }
}

void SceneOptimizer::remap(const std::vector<int>& origin) {
    std::vector<ParticleState> next(origin.size());
    for (std::size_t j = 0; j < origin.size(); ++j) {
        if (origin[j] >= 0 && static_cast<std::size_t>(origin[j]) < state_.size()) next[j] = state_[origin[j]];
    }
    state_ = std::move(next);
}

// --------------------------------------------------------------------- log

void write_loss_log(std::ostream& out, const std::vector<LossRow>& rows) {
    out << "iteration,L_rec,L_SDS_global,L_SDS_local,L_depth,L_adv_G,L_adv_D,particle_count\n";
    for (const LossRow& r : rows) {
        out << fmt::format("{},{},{},{},{},{},{},{}\n", r.iteration, r.rec, r.sds_global, r.sds_local, r.depth, r.adv_g,
                           r.adv_d, r.particle_count);
    }
}

// -------------------------------------------------------------------- train

namespace {

bool all_finite(const SceneGradient& g) {
    return std::all_of(g.begin(), g.end(), [](const ParticleGradient& p) { return p.all_finite(); });
}

bool scene_finite(const GaussianScene& s) {
    return std::all_of(s.particles.begin(), s.particles.end(), [](const GaussianParticle& p) {
        return p.position.allFinite() && p.log_scale.allFinite() && p.rotation.allFinite() &&
               std::isfinite(p.opacity_logit) && p.sh.allFinite();
    });
}

}  // namespace

TrainResult train(const TrainConfig& config, GaussianScene scene, std::vector<CameraView> views,
                  const TrainInputs& inputs) {
    config.validate();
    TrainResult result;
    result.scene = std::move(scene);
    if (config.iterations == 0) return result;
    if (views.empty()) throw InvalidInput("training needs at least one view");
    for (CameraView& v : views) {
        if (v.mask.size() == 0) v.mask = Mask::Zero(v.height, v.width);
        validate_camera(v, 1e-4);
        if (v.image[0].rows() != v.height || v.image[0].cols() != v.width) {
            throw InvalidInput(fmt::format("view {} has no image of its size", v.id));
        }
    }
    GaussianScene& s = result.scene;
    if (config.mode == TrainMode::Outpaint) {
        const std::vector<Mask> masks = generate_outpaint_masks(views, config.outpaint_distance, config.outpaint_radius);
        for (std::size_t v = 0; v < views.size(); ++v) views[v].mask = masks[v];
        s.apply_labels(label_gaussians(accumulate_contributions(s, views, kContributionThreshold, config.threads),
                                       config.tau_mask));
    }

    const bool use_sds = config.lambda_sds > 0.0 && inputs.prior != nullptr && (config.sds_global || config.sds_local);
    const bool use_depth = config.lambda_depth > 0.0 && inputs.prior != nullptr && inputs.depth_oracle != nullptr;
    const bool use_adv = config.lambda_adv > 0.0 && inputs.reference != nullptr && config.adv_patches > 0;
    std::optional<Discriminator> disc;
    if (use_adv) {
        DiscriminatorConfig dc;
        dc.input_dim = 3 * config.adv_patch_size * config.adv_patch_size;
        dc.seed = config.seed + 17;
        dc.adam.lr = config.disc_lr;
        disc.emplace(dc);
    }

    std::mt19937_64 rng(config.seed);
    RandomSampler sampler(config.seed + 1);
    std::mt19937_64 patch_rng(config.seed + 2);
    std::mt19937_64 densify_rng(config.seed + 3);
    SceneOptimizer optimizer(config);
    DensifyStats stats;
    stats.resize(s.size());
    const double extent = scene_extent(views);
    const AdvConfig adv_config{config.lambda_gp, config.penalty_on_real ? PenaltyTarget::Real : PenaltyTarget::Fake};
    int consecutive = 0;

    for (int it = 0; it < config.iterations; ++it) {
        const CameraView& view = views[std::uniform_int_distribution<std::size_t>(0, views.size() - 1)(rng)];
        const std::vector<Label> labels = s.labels();
        const int h = view.height, w = view.width;
        SceneGradient total = zero_gradient(s.size());
        LossRow row;
        row.iteration = it;
        DensifyStats step_stats;
        step_stats.resize(s.size());
        bool finite = true;
        auto add_term = [&](SceneGradient g, LossSource source, double weight) {
            route_gradients(g, labels, source);
            for (auto& p : g) p *= weight;
            finite = finite && all_finite(g);
            step_stats.add(g, source);
            accumulate(total, g);
        };

        RenderOptions ropt;
        ropt.channels = kChannelRgb;
        ropt.threads = config.threads;
        const RenderOutput rendered = render(s, view, ropt);

        if (config.lambda_rec > 0.0) {
            const bool supervised = config.mode == TrainMode::SparseRecon &&
                                    std::find(config.gt_views.begin(), config.gt_views.end(), view.id) !=
                                        config.gt_views.end();
            const Mask include = supervised ? Mask::Ones(h, w) : Mask((view.mask == 0).cast<std::uint8_t>());
            if ((include != 0).any()) {
                ImageLoss rec = reconstruction_loss(rendered.rgb, view.image, include);
                row.rec = rec.value;
                RenderGradient up;
                up.rgb = std::move(rec.grad);
                add_term(render_backward(s, view, up, config.threads),
                         supervised ? LossSource::Supervision : LossSource::Reconstruction, config.lambda_rec);
            }
        }
        if (use_sds) {
            SdsConfig sc;
            sc.global = config.sds_global;
            sc.local = config.sds_local;
            sc.n_local = config.n_local_patches;
            sc.guidance = config.guidance;
            sc.threads = config.threads;
            SdsOutput out = multiscale_sds(s, view, *inputs.prior, sc, sampler);
            row.sds_global = out.global_loss;
            row.sds_local = out.local_loss;
            add_term(std::move(out.grad), LossSource::Sds, config.lambda_sds);
        }
        if (use_depth && (it + 1) % config.depth_every == 0) {
            DepthConfig dc;
            dc.denoise_steps = config.depth_steps;
            dc.guidance = config.guidance;
            dc.threads = config.threads;
            DepthLoss d = depth_loss(s, view, *inputs.prior, *inputs.depth_oracle, dc, sampler);
            if (!d.skipped) {
                row.depth = d.loss;
                add_term(std::move(d.grad), LossSource::Depth, config.lambda_depth);
            }
        }
        std::optional<AdvResult> adv;
        if (use_adv && (view.mask != 0).any() && (inputs.reference->camera.mask != 0).any()) {
            const PatchBatch batch = sample_patches(*inputs.reference, rendered.rgb, view.mask, config.adv_patches,
                                                    config.adv_patch_size, patch_rng);
            adv = adv_step(*disc, batch.real, batch.fake, adv_config);
            if (!adv->skipped) {
                row.adv_g = adv->gen_loss;
                row.adv_d = adv->disc_objective;
                RenderGradient up;
                up.rgb = scatter_patches(adv->fake_grad, batch.fake_boxes, h, w);
                add_term(render_backward(s, view, up, config.threads), LossSource::Adversarial, config.lambda_adv);
                for (const auto& g : adv->disc_grad) finite = finite && g.allFinite();
            }
        }

        for (double v : {row.rec, row.sds_global, row.sds_local, row.depth, row.adv_g, row.adv_d}) {
            finite = finite && std::isfinite(v);
        }
        GaussianScene before;
        SceneOptimizer optimizer_before = optimizer;
        if (finite) {
            before = s;
            optimizer.step(s, total, it);
            finite = scene_finite(s);
            if (!finite) {
                s = std::move(before);
                optimizer = std::move(optimizer_before);
            }
        }
        if (!finite) {
            ++result.rollbacks;
            ++consecutive;
            spdlog::warn("iteration {}: non-finite loss or update rolled back ({} in a row)", it, consecutive);
            if (consecutive >= config.max_rollbacks) {
                throw TrainingDiverged(fmt::format("{} consecutive rollbacks at iteration {}", consecutive, it));
            }
            continue;
        }
        consecutive = 0;
        if (adv && !adv->skipped) disc->ascend(adv->disc_grad);
        for (std::size_t i = 0; i < s.size(); ++i) {
            stats.rec_accum[i] += step_stats.rec_accum[i];
            stats.rec_count[i] += step_stats.rec_count[i];
            stats.sds_accum[i] += step_stats.sds_accum[i];
            stats.sds_count[i] += step_stats.sds_count[i];
        }
        row.particle_count = s.size();
        result.log.push_back(row);

        const int done = it + 1;
        if (done >= config.densify_from && done <= config.densify_until && done % config.densify_every == 0) {
            DensifyReport report = densify_and_prune(s, stats, config, extent, views, densify_rng);
            spdlog::info("iteration {}: cloned {}, split {}, pruned {} transparent and {} relabelled; {} particles",
                         done, report.cloned, report.split, report.pruned_opacity, report.pruned_flipped, s.size());
            optimizer.remap(report.origin);
            stats.resize(s.size());
            result.densify_events.push_back(std::move(report));
        }
        if (done % 100 == 0 || done == config.iterations) {
            spdlog::debug("iteration {}: rec {:.5f} sds {:.5f}/{:.5f} depth {:.5f} adv {:.4f}/{:.4f}", done, row.rec,
                          row.sds_global, row.sds_local, row.depth, row.adv_g, row.adv_d);
        }
    }
    return result;
}

}  // namespace refsplat
