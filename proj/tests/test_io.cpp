#include "refsplat/io.hpp"

#include "test_support.hpp"

#include <doctest.h>

#include <cstring>
#include <fstream>
#include <sstream>
#include <unistd.h>

using namespace refsplat;
using namespace refsplat::testing;
namespace fs = std::filesystem;

namespace {

/// Fresh directory removed when the object goes out of scope.
struct TempDir {
    fs::path path;
    TempDir() {
        static int counter = 0;
        path = fs::temp_directory_path() / ("refsplat_io_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

std::string error_of(const std::function<void()>& fn) {
    try {
        fn();
    } catch (const InvalidInput& e) {
        return e.what();
    }
    return {};
}

double to_float(double v) { return static_cast<double>(static_cast<float>(v)); }

void write_floats(std::ostream& out, std::initializer_list<float> values) {
    for (float v : values) out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

}  // namespace

TEST_CASE("PLY save and load round-trip") {
    std::mt19937_64 rng(8);
    GaussianScene scene = random_scene(rng, 25, 30.0, 32);
    std::ostringstream first;
    write_scene_ply(first, scene);
    std::istringstream in(first.str());
    const GaussianScene back = read_scene_ply(in);
    REQUIRE(back.size() == scene.size());
    for (std::size_t i = 0; i < scene.size(); ++i) {
        const GaussianParticle& a = scene.particles[i];
        const GaussianParticle& b = back.particles[i];
        for (int k = 0; k < 3; ++k) {
            CHECK(b.position[k] == to_float(a.position[k]));
            CHECK(b.log_scale[k] == to_float(a.log_scale[k]));
        }
        for (int k = 0; k < 4; ++k) CHECK(b.rotation[k] == to_float(a.rotation[k]));
        CHECK(b.opacity_logit == to_float(a.opacity_logit));
        for (int k = 0; k < kShBasisCount; ++k)
            for (int c = 0; c < 3; ++c) CHECK(b.sh(k, c) == to_float(a.sh(k, c)));
        CHECK(b.label == a.label);
    }
    CHECK(back.background == scene.background);

    std::ostringstream second;
    write_scene_ply(second, back);
    CHECK(second.str() == first.str());

    TempDir dir;
    save_scene(dir.path / "s.ply", back);
    const GaussianScene from_file = load_scene(dir.path / "s.ply");
    std::ostringstream third;
    write_scene_ply(third, from_file);
    CHECK(third.str() == first.str());
}

TEST_CASE("PLY header layout follows the splatting convention") {
    GaussianScene scene;
    scene.particles.resize(1);
    std::ostringstream out;
    write_scene_ply(out, scene);
    const std::string text = out.str();
    const std::string header = text.substr(0, text.find("end_header"));
    std::vector<std::string> props;
    std::istringstream lines(header);
    for (std::string line; std::getline(lines, line);) {
        if (line.rfind("property ", 0) == 0) props.push_back(line);
    }
    REQUIRE(props.size() == 14 + 45 + 1);
    CHECK(props[0] == "property float x");
    CHECK(props[3] == "property float scale_0");
    CHECK(props[6] == "property float rot_0");
    CHECK(props[10] == "property float opacity");
    CHECK(props[11] == "property float f_dc_0");
    CHECK(props[14] == "property float f_rest_0");
    CHECK(props[58] == "property float f_rest_44");
    CHECK(props[59] == "property uchar label");
    CHECK(text.size() - (text.find("end_header\n") + 11) == 59 * 4 + 1);
}

TEST_CASE("third-party PLY without labels loads as Unmasked") {
    // Normals, a reordered layout, no f_rest and no label.
    std::ostringstream out;
    out << "ply\nformat binary_little_endian 1.0\ncomment made elsewhere\nelement vertex 2\n";
    for (const char* name : {"x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0",
                             "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"}) {
        out << "property float " << name << "\n";
    }
    out << "end_header\n";
    write_floats(out, {1, 2, 3, 0, 0, 1, 0.1f, 0.2f, 0.3f, -1, -2, -3, -4, 1, 0, 0, 0});
    write_floats(out, {4, 5, 6, 0, 1, 0, 0.4f, 0.5f, 0.6f, 2, -1, -1, -1, 0, 1, 0, 0});
    std::istringstream in(out.str());
    const GaussianScene scene = read_scene_ply(in);
    REQUIRE(scene.size() == 2);
    for (const auto& p : scene.particles) {
        CHECK(p.label == Label::Unmasked);
        CHECK(p.sh.bottomRows(kShBasisCount - 1).isZero(0));
    }
    CHECK(scene.particles[1].position == Eigen::Vector3d(4, 5, 6));
    CHECK(scene.particles[0].log_scale == Eigen::Vector3d(-2, -3, -4));
    CHECK(scene.particles[1].opacity_logit == 2.0);
    CHECK(scene.particles[0].sh(0, 2) == to_float(0.3));
    CHECK(scene.particles[1].rotation == Eigen::Vector4d(0, 1, 0, 0));
}

TEST_CASE("malformed PLY files raise parse errors naming the line") {
    auto parse = [](const std::string& text) {
        return error_of([&] {
            std::istringstream in(text);
            (void)read_scene_ply(in, "bad.ply");
        });
    };
    CHECK(parse("plx\n").find("bad.ply:1") != std::string::npos);
    CHECK(parse("ply\nformat ascii 1.0\nend_header\n").find("bad.ply:2") != std::string::npos);
    CHECK(parse("ply\nformat binary_little_endian 1.0\nelement face 3\n").find("bad.ply:3") != std::string::npos);
    CHECK(parse("ply\nformat binary_little_endian 1.0\nelement vertex 1\nproperty float16 x\n").find("bad.ply:4") !=
          std::string::npos);
    CHECK(parse("ply\nformat binary_little_endian 1.0\nelement vertex 1\nbogus line\n").find("bad.ply:4") !=
          std::string::npos);
    CHECK(parse("ply\nformat binary_little_endian 1.0\nelement vertex 1\nproperty float x\n").find("end_header") !=
          std::string::npos);
    const std::string missing =
        parse("ply\nformat binary_little_endian 1.0\nelement vertex 1\nproperty float x\nend_header\n");
    CHECK(missing.find("'y'") != std::string::npos);
    CHECK(missing.find("bad.ply:5") != std::string::npos);

    GaussianScene scene;
    scene.particles.resize(3);
    std::ostringstream out;
    write_scene_ply(out, scene);
    std::string truncated = out.str();
    truncated.resize(truncated.size() - 10);
    CHECK(parse(truncated).find("truncated") != std::string::npos);
    std::string bad_label = out.str();
    bad_label.back() = 7;
    CHECK(parse(bad_label).find("label 7") != std::string::npos);
    CHECK_THROWS_AS(load_scene("/nonexistent/scene.ply"), InvalidInput);
}

TEST_CASE("labels files") {
    TempDir dir;
    const std::vector<Label> labels = {Label::Masked, Label::Unmasked, Label::Unmasked, Label::Masked};
    save_labels(dir.path / "l.txt", labels);
    CHECK(load_labels(dir.path / "l.txt") == labels);
    std::ofstream(dir.path / "bad.txt") << "0\n1\nmasked\n";
    CHECK(error_of([&] { load_labels(dir.path / "bad.txt"); }).find(":3") != std::string::npos);
}

TEST_CASE("PNG images and masks") {
    TempDir dir;
    std::mt19937_64 rng(4);
    RgbImage img = make_rgb(7, 9);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < 7; ++y)
            for (int x = 0; x < 9; ++x) img[c](y, x) = std::floor(uniform(rng, 0, 256)) / 255.0;
    img[0](0, 0) = 1.7;  // clamped on write
    save_png(dir.path / "a.png", img);
    const RgbImage back = load_png(dir.path / "a.png");
    REQUIRE(back[0].rows() == 7);
    REQUIRE(back[0].cols() == 9);
    img[0](0, 0) = 1.0;
    for (int c = 0; c < 3; ++c) CHECK((back[c] - img[c]).abs().maxCoeff() < 1e-12);

    RgbImage grey = make_rgb(1, 4);
    const double levels[4] = {0, 127, 128, 255};
    for (int x = 0; x < 4; ++x)
        for (int c = 0; c < 3; ++c) grey[c](0, x) = levels[x] / 255.0;
    save_png(dir.path / "g.png", grey);
    const Mask m = load_mask_png(dir.path / "g.png");
    CHECK(m(0, 0) == 0);
    CHECK(m(0, 1) == 0);
    CHECK(m(0, 2) == 1);
    CHECK(m(0, 3) == 1);

    Mask mask = Mask::Zero(5, 6);
    mask(1, 2) = 1;
    mask(4, 5) = 1;
    save_mask_png(dir.path / "m.png", mask);
    CHECK((load_mask_png(dir.path / "m.png") == mask).all());
    const RgbImage as_rgb = load_png(dir.path / "m.png");
    CHECK(as_rgb[1](1, 2) == 1.0);
    CHECK(as_rgb[1](0, 0) == 0.0);
    CHECK_THROWS_AS(load_png(dir.path / "missing.png"), InvalidInput);
}

TEST_CASE("PFM depth maps") {
    Plane depth(3, 4);
    for (int y = 0; y < 3; ++y)
        for (int x = 0; x < 4; ++x) depth(y, x) = 0.1 * y + 1.0 / (x + 3.0);
    std::ostringstream out;
    write_pfm(out, depth);
    const std::string bytes = out.str();
    CHECK(bytes.rfind("Pf\n4 3\n-1.0\n", 0) == 0);
    // Rows run bottom to top: the first stored value is the last row's first pixel.
    float first = 0.0f;
    std::memcpy(&first, bytes.data() + std::strlen("Pf\n4 3\n-1.0\n"), sizeof first);
    CHECK(first == static_cast<float>(depth(2, 0)));
    std::istringstream in(bytes);
    const Plane back = read_pfm(in);
    for (int y = 0; y < 3; ++y)
        for (int x = 0; x < 4; ++x) CHECK(back(y, x) == to_float(depth(y, x)));

    auto parse = [](const std::string& text) {
        return error_of([&] {
            std::istringstream s(text);
            (void)read_pfm(s, "d.pfm");
        });
    };
    CHECK(parse("PF\n1 1\n-1.0\n").find("d.pfm:1") != std::string::npos);
    CHECK(parse("Pf\n0 1\n-1.0\n").find("d.pfm:2") != std::string::npos);
    CHECK(parse("Pf\n1 1\n1.0\n").find("big-endian") != std::string::npos);
    CHECK(parse("Pf\n2 2\n-1.0\n1234").find("truncated") != std::string::npos);
}

TEST_CASE("camera files") {
    TempDir dir;
    CameraView a = identity_camera(6, 5, 10.0);
    a.id = 3;
    a.image[1].setConstant(128.0 / 255.0);
    a.mask(2, 2) = 1;
    CameraView b = make_camera(6, 5, 12.0, {1.0, 2.0, -3.0}, {0, 0, 0}, 7);
    ViewFiles files;
    files.images = {"img/3.png", "img/7.png"};
    files.masks = {"masks/3.png", ""};
    save_views(dir.path / "cameras.json", {a, b}, files);

    const std::vector<CameraView> views = load_views(dir.path / "cameras.json", dir.path, dir.path);
    REQUIRE(views.size() == 2);
    CHECK(views[0].id == 3);
    CHECK(views[0].world_to_camera == Eigen::Matrix4d::Identity());
    CHECK(views[0].fx == 10.0);
    CHECK(views[0].cx == a.cx);
    CHECK(views[0].image[1](4, 5) == 128.0 / 255.0);
    CHECK((views[0].mask == a.mask).all());
    CHECK(views[1].mask.rows() == 5);
    CHECK((views[1].mask == 0).all());
    CHECK(views[1].world_to_camera.isApprox(b.world_to_camera, 1e-15));

    auto parse = [&](const std::string& json) {
        return error_of([&] { (void)parse_views(json, dir.path, dir.path, "cams.json"); });
    };
    const std::string pose_ok = "[1,0,0,0, 0,1,0,0, 0,0,1,0, 0,0,0,1]";
    auto record = [](const std::string& pose, const std::string& image = "null") {
        return "[{\"id\": 0, \"width\": 6, \"height\": 5, \"fx\": 10, \"fy\": 10, \"cx\": 2.5, \"cy\": 2, "
               "\"world_to_camera\": " +
               pose + ", \"image\": " + image + ", \"mask\": null}]";
    };
    CHECK(parse(record(pose_ok)).empty());
    CHECK(parse(record("[1.00002,0,0,0, 0,1,0,0, 0,0,1,0, 0,0,0,1]")).empty());
    CHECK_FALSE(parse(record("[1.001,0,0,0, 0,1,0,0, 0,0,1,0, 0,0,0,1]")).empty());
    CHECK(parse(record("[1,0,0]")).find("16") != std::string::npos);
    CHECK(parse(record(pose_ok, "\"img/7.png\"")).empty());
    CHECK(parse("[{\"id\": 1}]").find("camera record 0") != std::string::npos);
    CHECK(parse("[\n{\"id\": 1,,}]").find("cams.json:2") != std::string::npos);
    CHECK(parse("{}").find("array") != std::string::npos);
    // Image of the wrong size.
    save_png(dir.path / "small.png", make_rgb(2, 2));
    CHECK(parse(record(pose_ok, "\"small.png\"")).find("size") != std::string::npos);
}

TEST_CASE("train job files") {
    const std::string text =
        "# toy run\n"
        "iterations = 42\n"
        "scene = \"scene.ply\"\n"
        "cameras = \"cams.json\"\n"
        "reference_id = 3\n"
        "lambda_sds = 0.5\n"
        "depth_scale = 0.5\n"
        "complete_scene = \"complete.ply\"\n";
    const TrainJob job = parse_train_job(text);
    CHECK(job.config.iterations == 42);
    CHECK(job.config.lambda_sds == 0.5);
    CHECK(job.scene == "scene.ply");
    CHECK(job.cameras == "cams.json");
    CHECK(job.reference_id == 3);
    CHECK(job.depth_scale == 0.5);
    CHECK(job.complete_scene == "complete.ply");

    const TrainJob back = parse_train_job(serialize_train_job(job));
    CHECK(back.config == job.config);
    CHECK(back.scene == job.scene);
    CHECK(back.reference_id == job.reference_id);
    CHECK(back.depth_scale == job.depth_scale);

    const std::string unknown = error_of([] { parse_train_job("scene = \"a\"\n\nlambda_bogus = 1\n"); });
    CHECK(unknown.find("lambda_bogus") != std::string::npos);
    CHECK(unknown.find("line 3") != std::string::npos);
    CHECK_FALSE(error_of([] { parse_train_job("scene = a.ply\n"); }).empty());
    CHECK_FALSE(error_of([] { parse_train_job("depth_scale = big\n"); }).empty());
}
