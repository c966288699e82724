#include "refsplat/remote_prior.hpp"

#include "refsplat/wire.hpp"

#include <fmt/format.h>
#include <httplib.h>
#include <json.hpp>
#include <spdlog/spdlog.h>

#include <chrono>
#include <cstdlib>

namespace refsplat {

namespace {

constexpr const char* kCodecId = "remote";

std::string trailer(const nlohmann::json& fields) { return fields.dump(); }

wire::Tensor single_tensor(const std::string& body, const std::string& path) {
    try {
        std::size_t offset = 0;
        wire::Tensor t = wire::decode(body, offset);
        if (offset != body.size()) {
            throw wire::WireError(fmt::format("{} trailing bytes after the tensor", body.size() - offset));
        }
        return t;
    } catch (const wire::WireError& e) {
        throw RemoteError(fmt::format("malformed response from {}: {}", path, e.what()));
    }
}

}  // namespace

std::string resolve_prior_url(const std::string& fallback) {
    const char* env = std::getenv(kPriorUrlEnv);
    return env != nullptr && *env != '\0' ? std::string(env) : fallback;
}

RemotePrior::RemotePrior(RemotePriorConfig config) : config_(std::move(config)) {
    if (config_.image_size <= 0) {
        throw InvalidInput("remote prior image size must be positive");
    }
}

std::string RemotePrior::post(const std::string& path, const std::string& body) const {
    httplib::Client client(config_.url);
    const auto timeout = std::chrono::duration<double>(config_.timeout_seconds);
    client.set_connection_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));
    client.set_read_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));
    const auto start = std::chrono::steady_clock::now();
    auto result = client.Post(path, body, "application/octet-stream");
    if (!result) {
        throw RemoteError(fmt::format("request to {}{} failed: {}", config_.url, path, httplib::to_string(result.error())));
    }
    if (result->status != 200) {
        throw RemoteError(fmt::format("{}{} returned HTTP {}: {}", config_.url, path, result->status, result->body));
    }
    spdlog::debug("{} answered in {:.3f}s ({} bytes)", path,
                  std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count(),
                  result->body.size());
    return result->body;
}

LatentImage RemotePrior::encode(const RgbImage& image) const {
    return wire::to_latent(single_tensor(post("/encode", wire::encode(wire::from_image(image))), "/encode"), kCodecId);
}

RgbImage RemotePrior::decode(const LatentImage& latent) const {
    return wire::to_image(single_tensor(post("/decode", wire::encode(wire::from_latent(latent))), "/decode"));
}

RgbImage RemotePrior::encode_adjoint(const RgbImage& image, const LatentImage& grad) const {
    const std::string body = wire::encode(wire::from_image(image)) + wire::encode(wire::from_latent(grad));
    return wire::to_image(single_tensor(post("/encode_vjp", body), "/encode_vjp"));
}

LatentImage RemotePrior::denoise(const LatentImage& z_t, double t, const Condition& condition) const {
    const std::string body = wire::encode(wire::from_latent(z_t)) + wire::encode(wire::condition_tensor(condition)) +
                             trailer({{"t", t}, {"guidance", condition.guidance}, {"prompt_tag", to_string(condition.tag)}});
    LatentImage eps = wire::to_latent(single_tensor(post("/denoise", body), "/denoise"), z_t.codec_id);
    require_same_shape(eps, z_t, "remote denoise response");
    return eps;
}

RgbImage RemotePrior::inpaint(const LatentImage& z_t, double t_start, int steps, const Condition& condition) const {
    const std::string body = wire::encode(wire::from_latent(z_t)) + wire::encode(wire::condition_tensor(condition)) +
                             trailer({{"t_start", t_start},
                                      {"steps", steps},
                                      {"guidance", condition.guidance},
                                      {"prompt_tag", to_string(condition.tag)}});
    return wire::to_image(single_tensor(post("/inpaint", body), "/inpaint"));
}

Plane RemotePrior::monodepth(const RgbImage& image) const {
    return wire::to_plane(single_tensor(post("/monodepth", wire::encode(wire::from_image(image))), "/monodepth"));
}

}  // namespace refsplat
