#include "refsplat/io.hpp"

#include <fmt/format.h>
#include <json.hpp>
#include <png.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

namespace refsplat {

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

ParseError::ParseError(const std::string& source, int line, const std::string& message)
    : InvalidInput(line > 0 ? fmt::format("{}:{}: {}", source, line, message) : fmt::format("{}: {}", source, message)),
      line_(line) {}

namespace {

std::ifstream open_in(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InvalidInput(fmt::format("cannot open {} for reading", path.string()));
    return in;
}

std::ofstream open_out(const fs::path& path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InvalidInput(fmt::format("cannot open {} for writing", path.string()));
    return out;
}

std::string read_text(const fs::path& path) {
    std::ifstream in = open_in(path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

constexpr int kShRestCount = 3 * (kShBasisCount - 1);

std::vector<std::string> ply_property_names() {
    std::vector<std::string> names = {"x", "y", "z", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3",
                                      "opacity", "f_dc_0", "f_dc_1", "f_dc_2"};
    for (int i = 0; i < kShRestCount; ++i) names.push_back(fmt::format("f_rest_{}", i));
    return names;
}

/// Parameter values in PLY property order.
std::vector<double> flatten(const GaussianParticle& p) {
    std::vector<double> v = {p.position.x(),  p.position.y(),  p.position.z(),  p.log_scale.x(), p.log_scale.y(),
                             p.log_scale.z(), p.rotation[0],   p.rotation[1],   p.rotation[2],   p.rotation[3],
                             p.opacity_logit, p.sh(0, 0),      p.sh(0, 1),      p.sh(0, 2)};
    // Channel-major rest coefficients: f_rest_{c·15 + k−1}.
    for (int c = 0; c < 3; ++c)
        for (int k = 1; k < kShBasisCount; ++k) v.push_back(p.sh(k, c));
    return v;
}

void unflatten(const std::vector<double>& v, GaussianParticle& p) {
    p.position = {v[0], v[1], v[2]};
    p.log_scale = {v[3], v[4], v[5]};
    p.rotation = {v[6], v[7], v[8], v[9]};
    p.opacity_logit = v[10];
    for (int c = 0; c < 3; ++c) p.sh(0, c) = v[11 + c];
    for (int c = 0; c < 3; ++c)
        for (int k = 1; k < kShBasisCount; ++k) p.sh(k, c) = v[14 + c * (kShBasisCount - 1) + (k - 1)];
}

struct PlyProperty {
    std::string name;
    std::string type;
    int size = 0;
};

int ply_type_size(const std::string& type) {
    static const std::map<std::string, int> sizes = {
        {"char", 1},  {"uchar", 1}, {"int8", 1},    {"uint8", 1},   {"short", 2},  {"ushort", 2}, {"int16", 2},
        {"uint16", 2}, {"int", 4},  {"uint", 4},    {"int32", 4},   {"uint32", 4}, {"float", 4},  {"float32", 4},
        {"double", 8}, {"float64", 8}};
    const auto it = sizes.find(type);
    return it == sizes.end() ? 0 : it->second;
}

template <typename T>
double load_as(const char* p) {
    T v;
    std::memcpy(&v, p, sizeof(T));
    return static_cast<double>(v);
}

double ply_value(const PlyProperty& prop, const char* p) {
    const std::string& t = prop.type;
    if (t == "float" || t == "float32") return load_as<float>(p);
    if (t == "double" || t == "float64") return load_as<double>(p);
    if (t == "uchar" || t == "uint8") return load_as<std::uint8_t>(p);
    if (t == "char" || t == "int8") return load_as<std::int8_t>(p);
    if (t == "short" || t == "int16") return load_as<std::int16_t>(p);
    if (t == "ushort" || t == "uint16") return load_as<std::uint16_t>(p);
    if (t == "int" || t == "int32") return load_as<std::int32_t>(p);
    return load_as<std::uint32_t>(p);
}

}  // namespace

// ------------------------------------------------------------------- scenes

void write_scene_ply(std::ostream& out, const GaussianScene& scene) {
    out << "ply\nformat binary_little_endian 1.0\n";
    out << fmt::format("comment background {} {} {}\n", scene.background.x(), scene.background.y(),
                       scene.background.z());
    out << "element vertex " << scene.size() << "\n";
    for (const auto& name : ply_property_names()) out << "property float " << name << "\n";
    out << "property uchar label\nend_header\n";
    for (const GaussianParticle& p : scene.particles) {
        for (double v : flatten(p)) {
            const float f = static_cast<float>(v);
            out.write(reinterpret_cast<const char*>(&f), sizeof f);
        }
        const auto label = static_cast<std::uint8_t>(p.label);
        out.write(reinterpret_cast<const char*>(&label), 1);
    }
}

GaussianScene read_scene_ply(std::istream& in, const std::string& source) {
    GaussianScene scene;
    std::vector<PlyProperty> props;
    long long count = -1;
    int line_no = 0;
    std::string line;
    bool ended = false;
    bool in_vertex = false;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        std::istringstream ls(line);
        std::string word;
        ls >> word;
        if (line_no == 1) {
            if (word != "ply") throw ParseError(source, line_no, "not a PLY file (missing 'ply' magic)");
            continue;
        }
        if (word == "format") {
            std::string fmt_name, version;
            ls >> fmt_name >> version;
            if (fmt_name != "binary_little_endian") {
                throw ParseError(source, line_no, fmt::format("unsupported format '{}'", fmt_name));
            }
        } else if (word == "comment" || word == "obj_info") {
            std::string key;
            ls >> key;
            if (key == "background") {
                double r = 0, g = 0, b = 0;
                if (!(ls >> r >> g >> b)) throw ParseError(source, line_no, "malformed background comment");
                scene.background = {r, g, b};
            }
        } else if (word == "element") {
            std::string name;
            long long n = -1;
            ls >> name >> n;
            if (name != "vertex") throw ParseError(source, line_no, fmt::format("unsupported element '{}'", name));
            if (n < 0) throw ParseError(source, line_no, "element vertex needs a non-negative count");
            count = n;
            in_vertex = true;
        } else if (word == "property") {
            if (!in_vertex) throw ParseError(source, line_no, "property before element vertex");
            PlyProperty prop;
            ls >> prop.type >> prop.name;
            if (prop.type == "list") throw ParseError(source, line_no, "list properties are not supported");
            prop.size = ply_type_size(prop.type);
            if (prop.size == 0 || prop.name.empty()) {
                throw ParseError(source, line_no, fmt::format("malformed property '{}'", line));
            }
            props.push_back(prop);
        } else if (word == "end_header") {
            ended = true;
            break;
        } else {
            throw ParseError(source, line_no, fmt::format("unexpected header line '{}'", line));
        }
    }
    if (!ended) throw ParseError(source, line_no, "header has no end_header");
    if (count < 0) throw ParseError(source, line_no, "header declares no vertex element");

    const std::vector<std::string> required = ply_property_names();
    std::map<std::string, std::size_t> where;
    std::size_t stride = 0;
    std::vector<std::size_t> offsets;
    for (std::size_t i = 0; i < props.size(); ++i) {
        where[props[i].name] = i;
        offsets.push_back(stride);
        stride += props[i].size;
    }
    for (int i = 0; i < 14; ++i) {
        if (!where.count(required[i])) {
            throw ParseError(source, line_no, fmt::format("missing property '{}'", required[i]));
        }
    }
    std::vector<char> row(stride);
    std::vector<double> values(required.size(), 0.0);
    scene.particles.resize(static_cast<std::size_t>(count));
    for (long long v = 0; v < count; ++v) {
        if (!in.read(row.data(), static_cast<std::streamsize>(stride))) {
            throw ParseError(source, 0, fmt::format("truncated body: {} of {} vertices read", v, count));
        }
        for (std::size_t k = 0; k < required.size(); ++k) {
            const auto it = where.find(required[k]);
            values[k] = it == where.end() ? 0.0 : ply_value(props[it->second], row.data() + offsets[it->second]);
        }
        GaussianParticle& p = scene.particles[static_cast<std::size_t>(v)];
        unflatten(values, p);
        if (const auto it = where.find("label"); it != where.end()) {
            const double label = ply_value(props[it->second], row.data() + offsets[it->second]);
            if (label != 0.0 && label != 1.0) {
                throw ParseError(source, 0, fmt::format("vertex {} has label {} (expected 0 or 1)", v, label));
            }
            p.label = label == 1.0 ? Label::Masked : Label::Unmasked;
        }
    }
    return scene;
}

void save_scene(const fs::path& path, const GaussianScene& scene) {
    std::ofstream out = open_out(path);
    write_scene_ply(out, scene);
    if (!out) throw InvalidInput(fmt::format("failed writing {}", path.string()));
}

GaussianScene load_scene(const fs::path& path) {
    std::ifstream in = open_in(path);
    return read_scene_ply(in, path.string());
}

void save_labels(const fs::path& path, const std::vector<Label>& labels) {
    std::ofstream out = open_out(path);
    for (Label l : labels) out << (l == Label::Masked ? 1 : 0) << "\n";
}

std::vector<Label> load_labels(const fs::path& path) {
    std::ifstream in = open_in(path);
    std::vector<Label> labels;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line == "0") {
            labels.push_back(Label::Unmasked);
        } else if (line == "1") {
            labels.push_back(Label::Masked);
        } else if (!line.empty()) {
            throw ParseError(path.string(), line_no, fmt::format("expected 0 or 1, got '{}'", line));
        }
    }
    return labels;
}

// ------------------------------------------------------------------- images

namespace {

std::vector<std::uint8_t> read_png_pixels(const fs::path& path, png_uint_32 format, int& width, int& height) {
    png_image image;
    std::memset(&image, 0, sizeof image);
    image.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&image, path.c_str())) {
        throw InvalidInput(fmt::format("{}: {}", path.string(), image.message));
    }
    image.format = format;
    std::vector<std::uint8_t> pixels(PNG_IMAGE_SIZE(image));
    if (!png_image_finish_read(&image, nullptr, pixels.data(), 0, nullptr)) {
        const std::string message = image.message;
        png_image_free(&image);
        throw InvalidInput(fmt::format("{}: {}", path.string(), message));
    }
    width = static_cast<int>(image.width);
    height = static_cast<int>(image.height);
    return pixels;
}

void write_png_pixels(const fs::path& path, png_uint_32 format, int width, int height,
                      const std::vector<std::uint8_t>& pixels) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    png_image image;
    std::memset(&image, 0, sizeof image);
    image.version = PNG_IMAGE_VERSION;
    image.width = static_cast<png_uint_32>(width);
    image.height = static_cast<png_uint_32>(height);
    image.format = format;
    if (!png_image_write_to_file(&image, path.c_str(), 0, pixels.data(), 0, nullptr)) {
        throw InvalidInput(fmt::format("{}: {}", path.string(), image.message));
    }
}

std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

}  // namespace

RgbImage load_png(const fs::path& path) {
    int w = 0, h = 0;
    const std::vector<std::uint8_t> px = read_png_pixels(path, PNG_FORMAT_RGB, w, h);
    RgbImage img = make_rgb(h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) img[c](y, x) = px[(static_cast<std::size_t>(y) * w + x) * 3 + c] / 255.0;
    return img;
}

void save_png(const fs::path& path, const RgbImage& image) {
    const int h = static_cast<int>(image[0].rows()), w = static_cast<int>(image[0].cols());
    std::vector<std::uint8_t> px(static_cast<std::size_t>(w) * h * 3);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) px[(static_cast<std::size_t>(y) * w + x) * 3 + c] = to_byte(image[c](y, x));
    write_png_pixels(path, PNG_FORMAT_RGB, w, h, px);
}

Mask load_mask_png(const fs::path& path) {
    int w = 0, h = 0;
    const std::vector<std::uint8_t> px = read_png_pixels(path, PNG_FORMAT_GRAY, w, h);
    Mask mask(h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) mask(y, x) = px[static_cast<std::size_t>(y) * w + x] >= 128 ? 1 : 0;
    return mask;
}

void save_mask_png(const fs::path& path, const Mask& mask) {
    const int h = static_cast<int>(mask.rows()), w = static_cast<int>(mask.cols());
    std::vector<std::uint8_t> px(static_cast<std::size_t>(w) * h);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) px[static_cast<std::size_t>(y) * w + x] = mask(y, x) ? 255 : 0;
    write_png_pixels(path, PNG_FORMAT_GRAY, w, h, px);
}

void write_pfm(std::ostream& out, const Plane& plane) {
    out << "Pf\n" << plane.cols() << " " << plane.rows() << "\n-1.0\n";
    for (Eigen::Index y = plane.rows() - 1; y >= 0; --y) {
        for (Eigen::Index x = 0; x < plane.cols(); ++x) {
            const float f = static_cast<float>(plane(y, x));
            out.write(reinterpret_cast<const char*>(&f), sizeof f);
        }
    }
}

Plane read_pfm(std::istream& in, const std::string& source) {
    std::string magic;
    long long w = 0, h = 0;
    double scale = 0.0;
    if (!(in >> magic) || magic != "Pf") throw ParseError(source, 1, "expected single-channel 'Pf' magic");
    if (!(in >> w >> h) || w <= 0 || h <= 0) throw ParseError(source, 2, "malformed dimensions");
    if (!(in >> scale) || scale == 0.0) throw ParseError(source, 3, "malformed scale");
    if (scale > 0.0) throw ParseError(source, 3, "big-endian PFM is not supported");
    in.get();  // single whitespace before the payload
    Plane plane(h, w);
    for (long long y = h - 1; y >= 0; --y) {
        for (long long x = 0; x < w; ++x) {
            float f = 0.0f;
            if (!in.read(reinterpret_cast<char*>(&f), sizeof f)) throw ParseError(source, 0, "truncated payload");
            plane(y, x) = f;
        }
    }
    return plane;
}

void save_pfm(const fs::path& path, const Plane& plane) {
    std::ofstream out = open_out(path);
    write_pfm(out, plane);
}

Plane load_pfm(const fs::path& path) {
    std::ifstream in = open_in(path);
    return read_pfm(in, path.string());
}

// ------------------------------------------------------------------ cameras

std::vector<CameraView> parse_views(const std::string& json_text, const fs::path& image_dir, const fs::path& mask_dir,
                                    const std::string& source) {
    json doc;
    try {
        doc = json::parse(json_text);
    } catch (const json::parse_error& e) {
        const auto upto = json_text.substr(0, std::min<std::size_t>(e.byte, json_text.size()));
        const int line = 1 + static_cast<int>(std::count(upto.begin(), upto.end(), '\n'));
        throw ParseError(source, line, e.what());
    }
    if (!doc.is_array()) throw ParseError(source, 0, "cameras file must hold a JSON array");
    std::vector<CameraView> views;
    for (std::size_t i = 0; i < doc.size(); ++i) {
        const json& r = doc[i];
        const std::string where = fmt::format("camera record {}", i);
        try {
            CameraView cam;
            cam.id = r.at("id").get<int>();
            cam.width = r.at("width").get<int>();
            cam.height = r.at("height").get<int>();
            cam.fx = r.at("fx").get<double>();
            cam.fy = r.at("fy").get<double>();
            cam.cx = r.at("cx").get<double>();
            cam.cy = r.at("cy").get<double>();
            const auto m = r.at("world_to_camera").get<std::vector<double>>();
            if (m.size() != 16) throw ParseError(source, 0, where + ": world_to_camera needs 16 values");
            for (int k = 0; k < 16; ++k) cam.world_to_camera(k / 4, k % 4) = m[k];
            if (cam.width <= 0 || cam.height <= 0) throw ParseError(source, 0, where + ": size must be positive");
            cam.allocate_planes();
            if (r.contains("image") && !r.at("image").is_null()) {
                cam.image = load_png(image_dir / r.at("image").get<std::string>());
            }
            if (r.contains("mask") && !r.at("mask").is_null()) {
                cam.mask = load_mask_png(mask_dir / r.at("mask").get<std::string>());
            }
            if (cam.image[0].rows() != cam.height || cam.image[0].cols() != cam.width ||
                cam.mask.rows() != cam.height || cam.mask.cols() != cam.width) {
                throw ParseError(source, 0, where + ": image or mask size differs from the camera");
            }
            validate_camera(cam, kPoseTolerance);
            views.push_back(std::move(cam));
        } catch (const json::exception& e) {
            throw ParseError(source, 0, fmt::format("{}: {}", where, e.what()));
        } catch (const ParseError&) {
            throw;
        } catch (const InvalidInput& e) {
            throw ParseError(source, 0, fmt::format("{}: {}", where, e.what()));
        }
    }
    return views;
}

std::vector<CameraView> load_views(const fs::path& cameras_file, const fs::path& image_dir, const fs::path& mask_dir) {
    return parse_views(read_text(cameras_file), image_dir, mask_dir, cameras_file.string());
}

std::string views_to_json(const std::vector<CameraView>& views, const ViewFiles& files) {
    json doc = json::array();
    for (std::size_t i = 0; i < views.size(); ++i) {
        const CameraView& v = views[i];
        std::vector<double> m(16);
        for (int k = 0; k < 16; ++k) m[k] = v.world_to_camera(k / 4, k % 4);
        json r = {{"id", v.id}, {"width", v.width}, {"height", v.height}, {"fx", v.fx}, {"fy", v.fy},
                  {"cx", v.cx}, {"cy", v.cy},       {"world_to_camera", m}};
        const bool has_image = i < files.images.size() && !files.images[i].empty();
        const bool has_mask = i < files.masks.size() && !files.masks[i].empty();
        r["image"] = has_image ? json(files.images[i]) : json(nullptr);
        r["mask"] = has_mask ? json(files.masks[i]) : json(nullptr);
        doc.push_back(std::move(r));
    }
    return doc.dump(2) + "\n";
}

void save_views(const fs::path& cameras_file, const std::vector<CameraView>& views, const ViewFiles& files) {
    const fs::path dir = cameras_file.parent_path();
    for (std::size_t i = 0; i < views.size(); ++i) {
        if (i < files.images.size() && !files.images[i].empty()) save_png(dir / files.images[i], views[i].image);
        if (i < files.masks.size() && !files.masks[i].empty()) save_mask_png(dir / files.masks[i], views[i].mask);
    }
    std::ofstream out = open_out(cameras_file);
    out << views_to_json(views, files);
}

// ---------------------------------------------------------------- train job

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

std::string job_string(const std::string& v, int line) {
    if (v.size() >= 2 && v.front() == '"' && v.back() == '"') return v.substr(1, v.size() - 2);
    throw ParseError("train job", line, fmt::format("expected a quoted path, got '{}'", v));
}

double job_number(const std::string& v, int line) {
    std::size_t used = 0;
    try {
        const double d = std::stod(v, &used);
        if (used == v.size()) return d;
    } catch (const std::exception&) {
    }
    throw ParseError("train job", line, fmt::format("'{}' is not a number", v));
}

}  // namespace

TrainJob parse_train_job(const std::string& text) {
    TrainJob job;
    const std::map<std::string, std::string TrainJob::*> paths = {
        {"scene", &TrainJob::scene},
        {"cameras", &TrainJob::cameras},
        {"images", &TrainJob::images},
        {"masks", &TrainJob::masks},
        {"reference", &TrainJob::reference},
        {"reference_depth", &TrainJob::reference_depth},
        {"prior_targets", &TrainJob::prior_targets},
        {"complete_scene", &TrainJob::complete_scene}};
    std::istringstream in(text);
    std::string config_text;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find('#');
        const std::string body = trim(hash == std::string::npos ? line : line.substr(0, hash));
        const auto eq = body.find('=');
        const std::string key = eq == std::string::npos ? std::string() : trim(body.substr(0, eq));
        const std::string value = eq == std::string::npos ? std::string() : trim(body.substr(eq + 1));
        bool consumed = true;
        if (const auto it = paths.find(key); it != paths.end()) {
            job.*(it->second) = job_string(value, line_no);
        } else if (key == "reference_id") {
            job.reference_id = static_cast<int>(job_number(value, line_no));
        } else if (key == "depth_scale") {
            job.depth_scale = job_number(value, line_no);
        } else if (key == "depth_offset") {
            job.depth_offset = job_number(value, line_no);
        } else {
            consumed = false;
        }
        // Blank consumed lines keep parse_train_config's line numbers aligned.
        config_text += (consumed ? std::string() : line) + "\n";
    }
    job.config = parse_train_config(config_text);
    return job;
}

std::string serialize_train_job(const TrainJob& job) {
    std::string out = serialize_train_config(job.config);
    auto path = [&](const char* key, const std::string& v) {
        if (!v.empty()) out += fmt::format("{} = \"{}\"\n", key, v);
    };
    path("scene", job.scene);
    path("cameras", job.cameras);
    path("images", job.images);
    path("masks", job.masks);
    path("reference", job.reference);
    out += fmt::format("reference_id = {}\n", job.reference_id);
    path("reference_depth", job.reference_depth);
    path("prior_targets", job.prior_targets);
    path("complete_scene", job.complete_scene);
    out += fmt::format("depth_scale = {}\ndepth_offset = {}\n", job.depth_scale, job.depth_offset);
    return out;
}

}  // namespace refsplat
