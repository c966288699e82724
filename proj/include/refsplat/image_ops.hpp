#pragma once

#include "refsplat/types.hpp"

namespace refsplat {

/// Bilinear resampling with half-pixel centres and edge clamping (no antialiasing).
Plane resize_bilinear(const Plane& src, int out_height, int out_width);

/// Adjoint of resize_bilinear: scatters an output-sized gradient back onto the source grid.
Plane resize_bilinear_adjoint(const Plane& grad, int src_height, int src_width);

RgbImage resize_bilinear(const RgbImage& src, int out_height, int out_width);
RgbImage resize_bilinear_adjoint(const RgbImage& grad, int src_height, int src_width);

/// Copies the inclusive rectangle `box`, which must lie inside `src`.
template <typename Scalar>
PlaneT<Scalar> crop(const PlaneT<Scalar>& src, const PixelBox& box) {
    if (box.empty() || box.x0 < 0 || box.y0 < 0 || box.x1 >= src.cols() || box.y1 >= src.rows()) {
        throw InvalidInput("crop box lies outside the image");
    }
    return src.block(box.y0, box.x0, box.height(), box.width());
}

RgbImage crop(const RgbImage& src, const PixelBox& box);

/// Adjoint of crop: a zero image of the given size with `patch` written at `box`.
Plane paste(const Plane& patch, const PixelBox& box, int height, int width);
RgbImage paste(const RgbImage& patch, const PixelBox& box, int height, int width);

/// Grows `box` by `fraction` of its width/height on every side, clamped to the image.
PixelBox dilate_box(const PixelBox& box, double fraction, int height, int width);

inline constexpr int kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;
inline constexpr double kSsimC1 = 0.01 * 0.01;
inline constexpr double kSsimC2 = 0.03 * 0.03;

/// Normalized separable Gaussian window taps.
Eigen::VectorXd gaussian_window(int size = kSsimWindow, double sigma = kSsimSigma);

/// Separable filtering with the given symmetric taps and zero padding; self-adjoint.
Plane gaussian_filter(const Plane& src, const Eigen::VectorXd& taps);

/// Per-pixel SSIM of two single-channel images (Gaussian window, zero padding).
Plane ssim_map(const Plane& x, const Plane& y);

/// Value of Σ weight·ssim_map(x, y) and its gradient with respect to x.
struct SsimResult {
    double value = 0.0;
    Plane grad;
};
SsimResult weighted_ssim(const Plane& x, const Plane& y, const Plane& weight);

/// Mean SSIM over all pixels and channels.
double mean_ssim(const RgbImage& x, const RgbImage& y);

inline constexpr double kL1Weight = 0.8;
inline constexpr double kDssimWeight = 0.2;

struct ImageLoss {
    double value = 0.0;
    /// Gradient with respect to the rendered image.
    RgbImage grad;
};

/// 0.8·L1 + 0.2·(1 − SSIM), both averaged over pixels where `include` is nonzero and
/// over channels. Zero loss and gradient when no pixel is included.
ImageLoss reconstruction_loss(const RgbImage& rendered, const RgbImage& target, const Mask& include);

}  // namespace refsplat
