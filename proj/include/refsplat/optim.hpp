#pragma once

#include <Eigen/Dense>

#include <cmath>

namespace refsplat {

struct AdamParams {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// First and second moments for one parameter block.
struct AdamMoments {
    Eigen::ArrayXd m;
    Eigen::ArrayXd v;
    long step = 0;

    void reset(Eigen::Index size) {
        m = Eigen::ArrayXd::Zero(size);
        v = Eigen::ArrayXd::Zero(size);
        step = 0;
    }
};

/// One bias-corrected Adam descent step on n contiguous parameters.
inline void adam_update(double* param, const double* grad, Eigen::Index n, AdamMoments& state, const AdamParams& p) {
    if (state.m.size() != n) state.reset(n);
    ++state.step;
    const double c1 = 1.0 - std::pow(p.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(p.beta2, static_cast<double>(state.step));
    for (Eigen::Index i = 0; i < n; ++i) {
        const double g = grad[i];
        state.m[i] = p.beta1 * state.m[i] + (1.0 - p.beta1) * g;
        state.v[i] = p.beta2 * state.v[i] + (1.0 - p.beta2) * g * g;
        param[i] -= p.lr * (state.m[i] / c1) / (std::sqrt(state.v[i] / c2) + p.eps);
    }
}

inline void adam_update(Eigen::MatrixXd& param, const Eigen::MatrixXd& grad, AdamMoments& state, const AdamParams& p) {
    adam_update(param.data(), grad.data(), param.size(), state, p);
}

}  // namespace refsplat
