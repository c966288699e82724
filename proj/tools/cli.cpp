#include "cli.hpp"

#include "refsplat/guidance_prior.hpp"
#include "refsplat/init_reference.hpp"
#include "refsplat/io.hpp"
#include "refsplat/mask_consolidation.hpp"
#include "refsplat/remote_prior.hpp"
#include "refsplat/toy.hpp"
#include "refsplat/trainer.hpp"

#include <CLI11.hpp>
#include <fmt/format.h>
#include <fmt/ostream.h>
#include <spdlog/spdlog.h>

#include <fstream>
#include <memory>
#include <ostream>
#include <sstream>

namespace refsplat {

namespace fs = std::filesystem;

namespace {

std::string view_file(const CameraView& v) { return fmt::format("{:03d}.png", v.id); }

std::string read_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw InvalidInput(fmt::format("cannot open {}", path.string()));
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

fs::path resolve(const fs::path& base, const std::string& p) {
    if (p.empty()) return {};
    const fs::path path(p);
    return path.is_absolute() ? path : base / path;
}

/// Cameras whose images sit next to the JSON and whose masks live in `mask_dir`.
std::vector<CameraView> load_cameras(const fs::path& cameras, const fs::path& mask_dir) {
    const fs::path dir = cameras.parent_path();
    return load_views(cameras, dir, mask_dir.empty() ? dir : mask_dir);
}

ViewFiles standard_files(const std::vector<CameraView>& views, const std::string& image_dir,
                         const std::string& mask_dir) {
    ViewFiles files;
    for (const auto& v : views) {
        files.images.push_back(image_dir.empty() ? std::string() : image_dir + "/" + view_file(v));
        files.masks.push_back(mask_dir.empty() ? std::string() : mask_dir + "/" + view_file(v));
    }
    return files;
}

// ------------------------------------------------------------ subcommands

struct LabelArgs {
    std::string scene, cameras, masks, out;
    double tau = kDefaultTauMask;
    double tau_prime = kDefaultTauPrime;
};

void run_label(const LabelArgs& a, std::ostream& out) {
    GaussianScene scene = load_scene(a.scene);
    std::vector<CameraView> views = load_cameras(a.cameras, a.masks);
    const ContributionTally tally = accumulate_contributions(scene, views);
    scene.apply_labels(label_gaussians(tally, a.tau));
    const std::vector<Mask> masks = render_consistent_masks(scene, views, a.tau_prime);
    for (std::size_t v = 0; v < views.size(); ++v) views[v].mask = masks[v];
    const std::vector<Label> labels = scene.labels();
    const fs::path dir(a.out);
    save_scene(dir / "scene.ply", scene);
    save_labels(dir / "labels.txt", labels);
    save_views(dir / "cameras.json", views, standard_files(views, "images", "masks"));
    const auto masked = std::count(labels.begin(), labels.end(), Label::Masked);
    out << fmt::format("labelled {} of {} particles Masked; consistent masks in {}\n", masked, scene.size(),
                       (dir / "masks").string());
}

struct InitArgs {
    std::string scene, labels, reference, ref_depth, out;
    int camera_id = 0;
};

ReferenceView load_reference(const std::string& cameras, int id, const std::string& depth) {
    const fs::path path(cameras);
    for (CameraView& v : load_cameras(path, {})) {
        if (v.id != id) continue;
        ReferenceView ref;
        ref.camera = std::move(v);
        if (!depth.empty()) ref.relative_depth = load_pfm(depth);
        return ref;
    }
    throw InvalidInput(fmt::format("{} has no camera with id {}", cameras, id));
}

void run_init(const InitArgs& a, std::ostream& out) {
    GaussianScene scene = load_scene(a.scene);
    const std::vector<Label> labels = load_labels(a.labels);
    if (labels.size() != scene.size()) {
        throw InvalidInput(fmt::format("{} labels for {} particles", labels.size(), scene.size()));
    }
    scene.apply_labels(labels);
    const ReferenceView ref = load_reference(a.reference, a.camera_id, a.ref_depth);
    GaussianScene kept = scene;
    std::erase_if(kept.particles, [](const GaussianParticle& p) { return p.masked(); });
    const DepthAlignment alignment = align_reference(kept, ref);
    const GaussianScene result = init_masked_region(scene, labels, ref, alignment.aligned);
    save_scene(a.out, result);
    out << fmt::format("depth scale {:.6g}, offset {:.6g}; {} particles ({} from the reference)\n", alignment.scale,
                       alignment.offset, result.size(), result.size() - kept.size());
}

struct TrainArgs {
    std::string config, prior = "analytic", depth_oracle = "gt", out;
};

void run_train(const TrainArgs& a, std::ostream& out) {
    const fs::path job_path(a.config);
    const fs::path base = job_path.parent_path();
    const TrainJob job = parse_train_job(read_file(job_path));
    if (job.scene.empty() || job.cameras.empty()) throw InvalidInput("the job needs scene and cameras");
    const GaussianScene scene = load_scene(resolve(base, job.scene));
    const fs::path cameras = resolve(base, job.cameras);
    const fs::path images = job.images.empty() ? cameras.parent_path() : resolve(base, job.images);
    const fs::path masks = job.masks.empty() ? cameras.parent_path() : resolve(base, job.masks);
    const std::vector<CameraView> views = load_views(cameras, images, masks);
    if (views.empty()) throw InvalidInput("the cameras file lists no views");
    const int size = std::max(views.front().width, views.front().height);
    const NoiseSchedule schedule{job.config.t_min, job.config.t_max};

    std::unique_ptr<DenoisePrior> prior;
    std::unique_ptr<RemotePrior> remote;
    if (a.prior == "analytic" || a.prior == "mixture") {
        if (job.prior_targets.empty()) throw InvalidInput("--prior analytic/mixture needs prior_targets in the job");
        const fs::path targets = resolve(base, job.prior_targets);
        auto analytic = std::make_unique<AnalyticPrior>(size, 4, schedule);
        for (const CameraView& t : load_cameras(targets, {})) analytic->add_target(t.id, t.image);
        if (a.prior == "mixture") {
            for (const CameraView& v : views) analytic->add_target(v.id, v.image);
        }
        prior = std::move(analytic);
    } else if (a.prior == "remote" || a.prior.rfind("remote=", 0) == 0) {
        RemotePriorConfig rc;
        rc.url = resolve_prior_url(a.prior == "remote" ? rc.url : a.prior.substr(7));
        rc.image_size = size;
        rc.schedule = schedule;
        remote = std::make_unique<RemotePrior>(rc);
    } else {
        throw InvalidInput(fmt::format("unknown prior '{}' (analytic, mixture or remote=<url>)", a.prior));
    }
    const DenoisePrior* active = remote ? static_cast<const DenoisePrior*>(remote.get()) : prior.get();

    std::unique_ptr<DepthOracle> oracle;
    if (a.depth_oracle == "gt") {
        if (!job.complete_scene.empty()) {
            oracle = std::make_unique<GroundTruthDepthOracle>(load_scene(resolve(base, job.complete_scene)),
                                                              job.depth_scale, job.depth_offset);
        } else if (job.config.lambda_depth > 0.0) {
            spdlog::warn("no complete_scene in the job: the depth term is disabled");
        }
    } else if (a.depth_oracle == "remote") {
        if (!remote) throw InvalidInput("--depth-oracle remote needs --prior remote=<url>");
        oracle = std::make_unique<RemoteDepthOracle>(*remote);
    } else {
        throw InvalidInput(fmt::format("unknown depth oracle '{}' (gt or remote)", a.depth_oracle));
    }

    std::optional<ReferenceView> reference;
    if (!job.reference.empty()) {
        reference = load_reference(resolve(base, job.reference).string(), job.reference_id,
                                   job.reference_depth.empty() ? "" : resolve(base, job.reference_depth).string());
    }
    TrainInputs inputs{active, oracle.get(), reference ? &*reference : nullptr};
    const TrainResult result = train(job.config, scene, views, inputs);

    const fs::path dir(a.out);
    fs::create_directories(dir);
    save_scene(dir / "scene.ply", result.scene);
    std::ofstream log(dir / "loss.csv");
    write_loss_log(log, result.log);
    std::ofstream(dir / "job.toml") << serialize_train_job(job);
    RenderOptions opt;
    opt.channels = kChannelRgb;
    opt.threads = job.config.threads;
    for (const CameraView& v : views) save_png(dir / "renders" / view_file(v), render(result.scene, v, opt).rgb);
    out << fmt::format("trained {} iterations ({} rollbacks, {} densification events); {} particles written to {}\n",
                       result.log.size(), result.rollbacks, result.densify_events.size(), result.scene.size(),
                       (dir / "scene.ply").string());
}

struct RenderArgs {
    std::string scene, cameras, out_dir;
};

void run_render(const RenderArgs& a, std::ostream& out) {
    const GaussianScene scene = load_scene(a.scene);
    const std::vector<CameraView> views = load_cameras(a.cameras, {});
    RenderOptions opt;
    opt.channels = kChannelRgb;
    for (const CameraView& v : views) save_png(fs::path(a.out_dir) / view_file(v), render(scene, v, opt).rgb);
    out << fmt::format("rendered {} views to {}\n", views.size(), a.out_dir);
}

struct EvalArgs {
    std::string pred, gt, masks;
    double dilate = 0.10;
};

void run_eval(const EvalArgs& a, std::ostream& out) {
    std::vector<fs::path> names;
    for (const auto& entry : fs::directory_iterator(a.masks)) {
        if (entry.path().extension() == ".png") names.push_back(entry.path().filename());
    }
    std::sort(names.begin(), names.end());
    if (names.empty()) throw InvalidInput(fmt::format("no PNG masks in {}", a.masks));
    std::vector<RgbImage> pred, gt;
    std::vector<Mask> masks;
    for (const auto& n : names) {
        pred.push_back(load_png(fs::path(a.pred) / n));
        gt.push_back(load_png(fs::path(a.gt) / n));
        masks.push_back(load_mask_png(fs::path(a.masks) / n));
    }
    const EvalReport r = eval_masked(pred, gt, masks, a.dilate);
    out << "view,L1,PSNR,SSIM\n";
    for (std::size_t i = 0; i < names.size(); ++i) {
        out << fmt::format("{},{:.6f},{:.4f},{:.6f}\n", names[i].stem().string(), r.per_view[i].l1,
                           r.per_view[i].psnr, r.per_view[i].ssim);
    }
    out << fmt::format("mean,{:.6f},{:.4f},{:.6f}\n", r.mean.l1, r.mean.psnr, r.mean.ssim);
}

struct OutpaintArgs {
    std::string cameras, out;
    double distance = 2.0;
    double radius = 1.0;
};

void run_outpaint(const OutpaintArgs& a, std::ostream& out) {
    const std::vector<CameraView> views = load_cameras(a.cameras, {});
    const std::vector<Mask> masks = generate_outpaint_masks(views, a.distance, a.radius);
    for (std::size_t v = 0; v < views.size(); ++v) save_mask_png(fs::path(a.out) / view_file(views[v]), masks[v]);
    out << fmt::format("wrote {} outpainting masks to {}\n", masks.size(), a.out);
}

struct ToyArgs {
    std::uint64_t seed = 0;
    std::string out;
};

void run_toy(const ToyArgs& a, std::ostream& out) {
    const ToyScene toy = make_toy_scene(a.seed);
    const fs::path dir(a.out);
    save_scene(dir / "complete.ply", toy.complete);
    save_scene(dir / "scene.ply", toy.augmented);
    save_labels(dir / "labels.txt", toy.augmented.labels());
    save_views(dir / "cameras.json", toy.views, standard_files(toy.views, "images", "masks"));
    std::vector<CameraView> gt_views = toy.views;
    for (std::size_t v = 0; v < gt_views.size(); ++v) gt_views[v].image = toy.ground_truth[v];
    save_views(dir / "gt_cameras.json", gt_views, standard_files(gt_views, "gt", "masks"));
    constexpr double kDepthScale = 0.5, kDepthOffset = 0.25;
    const ReferenceView ref = make_toy_reference(toy, 0, kDepthScale, kDepthOffset);
    save_views(dir / "reference.json", {ref.camera}, {{"reference.png"}, {"reference_mask.png"}});
    save_pfm(dir / "reference_depth.pfm", ref.relative_depth);

    TrainJob job;
    job.config.iterations = 500;
    job.config.threads = 1;
    job.config.adv_patch_size = 16;
    job.config.adv_patches = 8;
    job.config.densify_from = 200;
    job.config.densify_until = 400;
    job.scene = "init.ply";
    job.cameras = "cameras.json";
    job.reference = "reference.json";
    job.reference_id = ref.camera.id;
    job.reference_depth = "reference_depth.pfm";
    job.prior_targets = "gt_cameras.json";
    job.complete_scene = "complete.ply";
    job.depth_scale = kDepthScale;
    job.depth_offset = kDepthOffset;
    std::ofstream(dir / "train.toml") << serialize_train_job(job);
    out << fmt::format("toy scene with {} views and {} particles written to {}\n", toy.views.size(),
                       toy.augmented.size(), dir.string());
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Reference-guided inpainting of Gaussian-splat scenes", "refsplat"};
    app.require_subcommand(1);
    std::string log_level = "info";
    app.add_option("--log-level", log_level, "trace, debug, info, warn or error")->capture_default_str();

    LabelArgs label;
    auto* label_cmd = app.add_subcommand("label", "Label particles from per-view masks and re-render consistent masks");
    label_cmd->add_option("--scene", label.scene, "Input scene (PLY)")->required();
    label_cmd->add_option("--cameras", label.cameras, "Cameras JSON; images resolve next to it")->required();
    label_cmd->add_option("--masks", label.masks, "Directory the cameras' mask paths resolve against")->required();
    label_cmd->add_option("--tau", label.tau, "Masked/unmasked contribution ratio")->capture_default_str();
    label_cmd->add_option("--tau-prime", label.tau_prime, "Semantic threshold for consistent masks")
        ->capture_default_str();
    label_cmd->add_option("--out", label.out, "Output directory")->required();

    InitArgs init;
    auto* init_cmd = app.add_subcommand("init", "Replace Masked particles by the unprojected reference");
    init_cmd->add_option("--scene", init.scene, "Input scene (PLY)")->required();
    init_cmd->add_option("--labels", init.labels, "Labels file, one 0/1 per particle")->required();
    init_cmd->add_option("--reference", init.reference, "Cameras JSON holding the reference view")->required();
    init_cmd->add_option("--ref-depth", init.ref_depth, "Relative depth of the reference (PFM)")->required();
    init_cmd->add_option("--camera-id", init.camera_id, "Id of the reference camera")->capture_default_str();
    init_cmd->add_option("--out", init.out, "Output scene (PLY)")->required();

    TrainArgs tr;
    auto* train_cmd = app.add_subcommand("train", "Optimize a scene");
    train_cmd->add_option("--config", tr.config, "Job file: key = value TrainConfig fields plus data paths")
        ->required();
    train_cmd->add_option("--prior", tr.prior, "analytic, mixture or remote=<url>")->capture_default_str();
    train_cmd->add_option("--depth-oracle", tr.depth_oracle, "gt or remote")->capture_default_str();
    train_cmd->add_option("--out", tr.out, "Output directory")->required();

    RenderArgs rd;
    auto* render_cmd = app.add_subcommand("render", "Render a scene into every camera");
    render_cmd->add_option("--scene", rd.scene, "Scene (PLY)")->required();
    render_cmd->add_option("--cameras", rd.cameras, "Cameras JSON")->required();
    render_cmd->add_option("--out-dir", rd.out_dir, "Output directory for PNGs")->required();

    EvalArgs ev;
    auto* eval_cmd = app.add_subcommand("eval", "Masked-region L1, PSNR and SSIM");
    eval_cmd->add_option("--pred", ev.pred, "Directory of predicted PNGs")->required();
    eval_cmd->add_option("--gt", ev.gt, "Directory of ground-truth PNGs with the same names")->required();
    eval_cmd->add_option("--masks", ev.masks, "Directory of mask PNGs with the same names")->required();
    eval_cmd->add_option("--dilate", ev.dilate, "Bounding-box dilation per side")->capture_default_str();

    OutpaintArgs op;
    auto* outpaint_cmd = app.add_subcommand("outpaint-mask", "Inverse sphere masks for outpainting");
    outpaint_cmd->add_option("--cameras", op.cameras, "Cameras JSON")->required();
    outpaint_cmd->add_option("--distance", op.distance, "Sphere distance along the optical axis")
        ->capture_default_str();
    outpaint_cmd->add_option("--radius", op.radius, "Sphere radius")->capture_default_str();
    outpaint_cmd->add_option("--out", op.out, "Output directory for mask PNGs")->required();

    ToyArgs toy;
    auto* toy_cmd = app.add_subcommand("toy", "Write a procedural toy dataset");
    toy_cmd->add_option("--seed", toy.seed, "Random seed")->capture_default_str();
    toy_cmd->add_option("--out", toy.out, "Output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e, out, err);
    }
    spdlog::set_level(spdlog::level::from_str(log_level));
    try {
        if (*label_cmd) run_label(label, out);
        if (*init_cmd) run_init(init, out);
        if (*train_cmd) run_train(tr, out);
        if (*render_cmd) run_render(rd, out);
        if (*eval_cmd) run_eval(ev, out);
        if (*outpaint_cmd) run_outpaint(op, out);
        if (*toy_cmd) run_toy(toy, out);
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

}  // namespace refsplat
