#include "refsplat/wire.hpp"

#include <fmt/format.h>

#include <bit>
#include <cstring>

namespace refsplat::wire {

static_assert(std::endian::native == std::endian::little, "wire format assumes a little-endian host");

std::size_t Tensor::element_count() const {
    std::size_t n = 1;
    for (std::uint32_t d : shape) n *= d;
    return n;
}

std::string encode(const Tensor& tensor) {
    if (tensor.shape.empty() || tensor.shape.size() > static_cast<std::size_t>(kMaxRank)) {
        throw WireError(fmt::format("tensor rank {} outside [1, {}]", tensor.shape.size(), kMaxRank));
    }
    if (tensor.element_count() != tensor.data.size()) {
        throw WireError("tensor data does not match its shape");
    }
    std::string out(kHeaderSize + 4 * tensor.data.size(), '\0');
    std::memcpy(out.data(), "RFTN", 4);
    out[4] = static_cast<char>(kFloat32);
    out[5] = static_cast<char>(tensor.shape.size());
    for (int i = 0; i < kMaxRank; ++i) {
        const std::uint32_t d = i < static_cast<int>(tensor.shape.size()) ? tensor.shape[i] : 1u;
        std::memcpy(out.data() + 8 + 4 * i, &d, 4);
    }
    std::memcpy(out.data() + kHeaderSize, tensor.data.data(), 4 * tensor.data.size());
    return out;
}

Tensor decode(std::string_view bytes, std::size_t& offset) {
    if (offset > bytes.size() || bytes.size() - offset < kHeaderSize) {
        throw WireError("truncated tensor header");
    }
    const char* h = bytes.data() + offset;
    if (std::memcmp(h, "RFTN", 4) != 0) {
        throw WireError("bad tensor magic");
    }
    const auto dtype = static_cast<std::uint8_t>(h[4]);
    const auto rank = static_cast<std::uint8_t>(h[5]);
    if (dtype != kFloat32) {
        throw WireError(fmt::format("unsupported dtype code {}", dtype));
    }
    if (rank < 1 || rank > kMaxRank) {
        throw WireError(fmt::format("tensor rank {} outside [1, {}]", rank, kMaxRank));
    }
    std::uint16_t reserved = 0;
    std::memcpy(&reserved, h + 6, 2);
    if (reserved != 0) {
        throw WireError("reserved header field is nonzero");
    }
    Tensor t;
    const std::uint64_t limit = (bytes.size() - offset - kHeaderSize) / 4;
    std::uint64_t count = 1;
    for (int i = 0; i < kMaxRank; ++i) {
        std::uint32_t d = 0;
        std::memcpy(&d, h + 8 + 4 * i, 4);
        if (i < rank) {
            t.shape.push_back(d);
            if (d != 0 && count > limit / d) {
                throw WireError("tensor payload shorter than its shape");
            }
            count *= d;
        } else if (d != 1) {
            throw WireError(fmt::format("unused dimension {} is {}, expected 1", i, d));
        }
    }
    const std::size_t payload = 4 * static_cast<std::size_t>(count);
    if (bytes.size() - offset - kHeaderSize < payload) {
        throw WireError("tensor payload shorter than its shape");
    }
    t.data.resize(count);
    std::memcpy(t.data.data(), h + kHeaderSize, payload);
    offset += kHeaderSize + payload;
    return t;
}

Tensor from_latent(const LatentImage& latent) {
    Tensor t;
    t.shape = {static_cast<std::uint32_t>(latent.channels), static_cast<std::uint32_t>(latent.height),
               static_cast<std::uint32_t>(latent.width)};
    t.data.assign(latent.data.begin(), latent.data.end());
    return t;
}

LatentImage to_latent(const Tensor& tensor, const std::string& codec_id) {
    if (tensor.shape.size() != 3) {
        throw WireError(fmt::format("latent tensors have rank 3, got {}", tensor.shape.size()));
    }
    LatentImage z = LatentImage::zeros(static_cast<int>(tensor.shape[0]), static_cast<int>(tensor.shape[1]),
                                       static_cast<int>(tensor.shape[2]), codec_id);
    for (std::size_t i = 0; i < tensor.data.size(); ++i) z.data[static_cast<Eigen::Index>(i)] = tensor.data[i];
    return z;
}

Tensor from_image(const RgbImage& image) {
    Tensor t;
    const auto h = static_cast<std::uint32_t>(image[0].rows());
    const auto w = static_cast<std::uint32_t>(image[0].cols());
    t.shape = {3, h, w};
    t.data.reserve(3ull * h * w);
    for (const Plane& p : image)
        for (Eigen::Index i = 0; i < p.size(); ++i) t.data.push_back(static_cast<float>(p.data()[i]));
    return t;
}

RgbImage to_image(const Tensor& tensor) {
    if (tensor.shape.size() != 3 || tensor.shape[0] != 3) {
        throw WireError("image tensors have shape 3×H×W");
    }
    const int h = static_cast<int>(tensor.shape[1]);
    const int w = static_cast<int>(tensor.shape[2]);
    RgbImage img = make_rgb(h, w);
    std::size_t k = 0;
    for (Plane& p : img)
        for (Eigen::Index i = 0; i < p.size(); ++i) p.data()[i] = tensor.data[k++];
    return img;
}

Tensor from_plane(const Plane& plane) {
    Tensor t;
    t.shape = {1, static_cast<std::uint32_t>(plane.rows()), static_cast<std::uint32_t>(plane.cols())};
    t.data.reserve(plane.size());
    for (Eigen::Index i = 0; i < plane.size(); ++i) t.data.push_back(static_cast<float>(plane.data()[i]));
    return t;
}

Plane to_plane(const Tensor& tensor) {
    const auto& s = tensor.shape;
    const bool flat = s.size() == 2;
    if (!flat && !(s.size() == 3 && s[0] == 1)) {
        throw WireError("plane tensors have shape H×W or 1×H×W");
    }
    const int h = static_cast<int>(flat ? s[0] : s[1]);
    const int w = static_cast<int>(flat ? s[1] : s[2]);
    Plane p(h, w);
    for (Eigen::Index i = 0; i < p.size(); ++i) p.data()[i] = tensor.data[static_cast<std::size_t>(i)];
    return p;
}

Tensor condition_tensor(const Condition& condition) {
    const LatentImage& z = condition.masked_latent;
    if (condition.mask.rows() != z.height || condition.mask.cols() != z.width) {
        throw WireError("condition mask and masked latent differ in size");
    }
    Tensor t;
    t.shape = {static_cast<std::uint32_t>(z.channels + 1), static_cast<std::uint32_t>(z.height),
               static_cast<std::uint32_t>(z.width)};
    t.data.reserve(t.element_count());
    for (Eigen::Index i = 0; i < condition.mask.size(); ++i)
        t.data.push_back(static_cast<float>(condition.mask.data()[i]));
    for (Eigen::Index i = 0; i < z.data.size(); ++i) t.data.push_back(static_cast<float>(z.data[i]));
    return t;
}

}  // namespace refsplat::wire
