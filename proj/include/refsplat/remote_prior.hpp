#pragma once

#include "refsplat/guidance_prior.hpp"

#include <stdexcept>
#include <string>

namespace refsplat {

/// Environment variable that overrides the remote prior address.
inline constexpr const char* kPriorUrlEnv = "REFSPLAT_PRIOR_URL";

class RemoteError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// `fallback` unless REFSPLAT_PRIOR_URL is set and nonempty.
std::string resolve_prior_url(const std::string& fallback);

struct RemotePriorConfig {
    /// scheme://host:port
    std::string url = "http://127.0.0.1:8765";
    int image_size = 64;
    NoiseSchedule schedule;
    double timeout_seconds = 120.0;
};

/// HTTP client for a prior server speaking RFTN tensors. Denoise requests carry
/// z_t and the condition tensor followed by a JSON trailer with t, guidance and
/// the prompt tag; CFG is applied by the server.
class RemotePrior : public DenoisePrior {
public:
    explicit RemotePrior(RemotePriorConfig config);

    [[nodiscard]] const NoiseSchedule& schedule() const override { return config_.schedule; }
    [[nodiscard]] int image_size() const override { return config_.image_size; }
    [[nodiscard]] LatentImage encode(const RgbImage& image) const override;
    [[nodiscard]] RgbImage decode(const LatentImage& latent) const override;
    /// POST /encode_vjp with the image and the latent gradient.
    [[nodiscard]] RgbImage encode_adjoint(const RgbImage& image, const LatentImage& grad) const override;
    [[nodiscard]] LatentImage denoise(const LatentImage& z_t, double t, const Condition& condition) const override;
    [[nodiscard]] RgbImage inpaint(const LatentImage& z_t, double t_start, int steps,
                                   const Condition& condition) const override;
    /// Relative depth of an image (POST /monodepth).
    [[nodiscard]] Plane monodepth(const RgbImage& image) const;

    [[nodiscard]] const std::string& url() const { return config_.url; }

private:
    [[nodiscard]] std::string post(const std::string& path, const std::string& body) const;

    RemotePriorConfig config_;
};

}  // namespace refsplat
