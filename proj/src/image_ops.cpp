#include "refsplat/image_ops.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace refsplat {

namespace {

struct Tap {
    int i0;
    int i1;
    double w0;
    double w1;
};

std::vector<Tap> bilinear_taps(int in, int out) {
    std::vector<Tap> taps(out);
    const double ratio = static_cast<double>(in) / out;
    for (int o = 0; o < out; ++o) {
        const double s = std::clamp((o + 0.5) * ratio - 0.5, 0.0, static_cast<double>(in - 1));
        const int i0 = static_cast<int>(std::floor(s));
        const int i1 = std::min(i0 + 1, in - 1);
        const double f = s - i0;
        taps[o] = {i0, i1, 1.0 - f, f};
    }
    return taps;
}

void check_size(int height, int width) {
    if (height <= 0 || width <= 0) {
        throw InvalidInput("image dimensions must be positive");
    }
}

}  // namespace

Plane resize_bilinear(const Plane& src, int out_height, int out_width) {
    check_size(out_height, out_width);
    check_size(static_cast<int>(src.rows()), static_cast<int>(src.cols()));
    const auto tx = bilinear_taps(static_cast<int>(src.cols()), out_width);
    const auto ty = bilinear_taps(static_cast<int>(src.rows()), out_height);
    Plane rows(src.rows(), out_width);
    for (Eigen::Index y = 0; y < src.rows(); ++y) {
        for (int x = 0; x < out_width; ++x) {
            rows(y, x) = tx[x].w0 * src(y, tx[x].i0) + tx[x].w1 * src(y, tx[x].i1);
        }
    }
    Plane out(out_height, out_width);
    for (int y = 0; y < out_height; ++y) {
        out.row(y) = ty[y].w0 * rows.row(ty[y].i0) + ty[y].w1 * rows.row(ty[y].i1);
    }
    return out;
}

Plane resize_bilinear_adjoint(const Plane& grad, int src_height, int src_width) {
    check_size(src_height, src_width);
    const auto tx = bilinear_taps(src_width, static_cast<int>(grad.cols()));
    const auto ty = bilinear_taps(src_height, static_cast<int>(grad.rows()));
    Plane rows = Plane::Zero(src_height, grad.cols());
    for (Eigen::Index y = 0; y < grad.rows(); ++y) {
        rows.row(ty[y].i0) += ty[y].w0 * grad.row(y);
        rows.row(ty[y].i1) += ty[y].w1 * grad.row(y);
    }
    Plane out = Plane::Zero(src_height, src_width);
    for (int y = 0; y < src_height; ++y) {
        for (Eigen::Index x = 0; x < grad.cols(); ++x) {
            out(y, tx[x].i0) += tx[x].w0 * rows(y, x);
            out(y, tx[x].i1) += tx[x].w1 * rows(y, x);
        }
    }
    return out;
}

RgbImage resize_bilinear(const RgbImage& src, int out_height, int out_width) {
    return {resize_bilinear(src[0], out_height, out_width), resize_bilinear(src[1], out_height, out_width),
            resize_bilinear(src[2], out_height, out_width)};
}

RgbImage resize_bilinear_adjoint(const RgbImage& grad, int src_height, int src_width) {
    return {resize_bilinear_adjoint(grad[0], src_height, src_width),
            resize_bilinear_adjoint(grad[1], src_height, src_width),
            resize_bilinear_adjoint(grad[2], src_height, src_width)};
}

RgbImage crop(const RgbImage& src, const PixelBox& box) {
    return {crop(src[0], box), crop(src[1], box), crop(src[2], box)};
}

Plane paste(const Plane& patch, const PixelBox& box, int height, int width) {
    if (patch.rows() != box.height() || patch.cols() != box.width()) {
        throw InvalidInput("patch size does not match its box");
    }
    if (box.x0 < 0 || box.y0 < 0 || box.x1 >= width || box.y1 >= height) {
        throw InvalidInput("paste box lies outside the image");
    }
    Plane out = Plane::Zero(height, width);
    out.block(box.y0, box.x0, box.height(), box.width()) = patch;
    return out;
}

RgbImage paste(const RgbImage& patch, const PixelBox& box, int height, int width) {
    return {paste(patch[0], box, height, width), paste(patch[1], box, height, width),
            paste(patch[2], box, height, width)};
}

PixelBox dilate_box(const PixelBox& box, double fraction, int height, int width) {
    if (box.empty()) {
        return box;
    }
    const int dx = static_cast<int>(std::lround(fraction * box.width()));
    const int dy = static_cast<int>(std::lround(fraction * box.height()));
    return {std::max(0, box.x0 - dx), std::max(0, box.y0 - dy), std::min(width - 1, box.x1 + dx),
            std::min(height - 1, box.y1 + dy)};
}

Eigen::VectorXd gaussian_window(int size, double sigma) {
    Eigen::VectorXd taps(size);
    const double centre = 0.5 * (size - 1);
    for (int i = 0; i < size; ++i) {
        const double d = i - centre;
        taps[i] = std::exp(-d * d / (2.0 * sigma * sigma));
    }
    return taps / taps.sum();
}

Plane gaussian_filter(const Plane& src, const Eigen::VectorXd& taps) {
    const int h = static_cast<int>(src.rows());
    const int w = static_cast<int>(src.cols());
    const int r = static_cast<int>(taps.size() / 2);
    Plane tmp = Plane::Zero(h, w);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int k = -r; k <= r; ++k) {
                const int xx = x + k;
                if (xx >= 0 && xx < w) acc += taps[k + r] * src(y, xx);
            }
            tmp(y, x) = acc;
        }
    }
    Plane out = Plane::Zero(h, w);
    for (int y = 0; y < h; ++y) {
        for (int k = -r; k <= r; ++k) {
            const int yy = y + k;
            if (yy >= 0 && yy < h) out.row(y) += taps[k + r] * tmp.row(yy);
        }
    }
    return out;
}

namespace {

struct SsimStats {
    Plane mu_x, mu_y, e_xx, e_yy, e_xy;
};

SsimStats ssim_stats(const Plane& x, const Plane& y, const Eigen::VectorXd& taps) {
    if (x.rows() != y.rows() || x.cols() != y.cols()) {
        throw InvalidInput("ssim inputs differ in size");
    }
    return {gaussian_filter(x, taps), gaussian_filter(y, taps), gaussian_filter(x * x, taps),
            gaussian_filter(y * y, taps), gaussian_filter(x * y, taps)};
}

}  // namespace

Plane ssim_map(const Plane& x, const Plane& y) {
    const SsimStats s = ssim_stats(x, y, gaussian_window());
    const Plane var_x = s.e_xx - s.mu_x.square();
    const Plane var_y = s.e_yy - s.mu_y.square();
    const Plane cov = s.e_xy - s.mu_x * s.mu_y;
    return ((2.0 * s.mu_x * s.mu_y + kSsimC1) * (2.0 * cov + kSsimC2)) /
           ((s.mu_x.square() + s.mu_y.square() + kSsimC1) * (var_x + var_y + kSsimC2));
}

SsimResult weighted_ssim(const Plane& x, const Plane& y, const Plane& weight) {
    const Eigen::VectorXd taps = gaussian_window();
    const SsimStats s = ssim_stats(x, y, taps);
    const Plane var_x = s.e_xx - s.mu_x.square();
    const Plane var_y = s.e_yy - s.mu_y.square();
    const Plane cov = s.e_xy - s.mu_x * s.mu_y;
    const Plane a1 = 2.0 * s.mu_x * s.mu_y + kSsimC1;
    const Plane a2 = 2.0 * cov + kSsimC2;
    const Plane b1 = s.mu_x.square() + s.mu_y.square() + kSsimC1;
    const Plane b2 = var_x + var_y + kSsimC2;
    const Plane map = (a1 * a2) / (b1 * b2);

    // map as a function of μx, E[x²] and E[xy] taken as independent statistics.
    const Plane d_mu = (2.0 * s.mu_y * (a2 - a1)) / (b1 * b2) - map * (2.0 * s.mu_x / b1 - 2.0 * s.mu_x / b2);
    const Plane d_exx = -map / b2;
    const Plane d_exy = 2.0 * a1 / (b1 * b2);

    SsimResult result;
    result.value = (weight * map).sum();
    result.grad = gaussian_filter(weight * d_mu, taps) + 2.0 * x * gaussian_filter(weight * d_exx, taps) +
                  y * gaussian_filter(weight * d_exy, taps);
    return result;
}

double mean_ssim(const RgbImage& x, const RgbImage& y) {
    double total = 0.0;
    for (int c = 0; c < 3; ++c) total += ssim_map(x[c], y[c]).mean();
    return total / 3.0;
}

ImageLoss reconstruction_loss(const RgbImage& rendered, const RgbImage& target, const Mask& include) {
    const Eigen::Index h = rendered[0].rows();
    const Eigen::Index w = rendered[0].cols();
    if (include.rows() != h || include.cols() != w || target[0].rows() != h || target[0].cols() != w) {
        throw InvalidInput("reconstruction_loss inputs differ in size");
    }
    ImageLoss loss;
    loss.grad = make_rgb(static_cast<int>(h), static_cast<int>(w));
    const Plane weight = (include != 0).cast<double>();
    const double count = weight.sum();
    if (count == 0.0) {
        return loss;
    }
    const double norm = 1.0 / (3.0 * count);
    for (int c = 0; c < 3; ++c) {
        const Plane diff = rendered[c] - target[c];
        loss.value += kL1Weight * norm * (weight * diff.abs()).sum();
        loss.grad[c] = kL1Weight * norm * weight * diff.sign();
        const SsimResult ssim = weighted_ssim(rendered[c], target[c], weight);
        loss.value += kDssimWeight * (1.0 / 3.0 - norm * ssim.value);
        loss.grad[c] -= kDssimWeight * norm * ssim.grad;
    }
    return loss;
}

}  // namespace refsplat
