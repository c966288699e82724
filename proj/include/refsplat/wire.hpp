#pragma once

#include "refsplat/guidance_prior.hpp"

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace refsplat::wire {

/// Header: magic "RFTN", u8 dtype, u8 rank, u16 reserved, 4×u32 dims (24 bytes), all little-endian.
inline constexpr std::size_t kHeaderSize = 24;
inline constexpr std::uint8_t kFloat32 = 1;
inline constexpr int kMaxRank = 4;

class WireError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Float32 tensor. Dimensions past the rank are written as 1.
struct Tensor {
    std::vector<std::uint32_t> shape;
    std::vector<float> data;

    [[nodiscard]] std::size_t element_count() const;
};

std::string encode(const Tensor& tensor);
/// Decodes one tensor starting at `offset` and advances it past the payload.
Tensor decode(std::string_view bytes, std::size_t& offset);

Tensor from_latent(const LatentImage& latent);
LatentImage to_latent(const Tensor& tensor, const std::string& codec_id = {});
/// 3×H×W.
Tensor from_image(const RgbImage& image);
RgbImage to_image(const Tensor& tensor);
/// 1×H×W.
Tensor from_plane(const Plane& plane);
/// Accepts H×W or 1×H×W.
Plane to_plane(const Tensor& tensor);

/// Mask channel followed by the masked latent's channels.
Tensor condition_tensor(const Condition& condition);

}  // namespace refsplat::wire
