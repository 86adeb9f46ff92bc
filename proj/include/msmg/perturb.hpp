#pragma once

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "msmg/error.hpp"
#include "msmg/image_io.hpp"
#include "msmg/tensor.hpp"

namespace msmg {

// Image-space perturbations over {C,H,W} float tensors in [0,1]. These back
// both the training-time augmentations and the post-processing sweeps, so
// they live below the pipeline.

enum class PerturbKind { gaussian_blur, gaussian_noise, jpeg, iso_noise };

inline const char* perturb_kind_name(PerturbKind k) {
    switch (k) {
        case PerturbKind::gaussian_blur: return "gaussian_blur";
        case PerturbKind::gaussian_noise: return "gaussian_noise";
        case PerturbKind::jpeg: return "jpeg";
        case PerturbKind::iso_noise: return "iso_noise";
    }
    return "?";
}

inline PerturbKind perturb_kind_from(const std::string& s) {
    if (s == "gaussian_blur") return PerturbKind::gaussian_blur;
    if (s == "gaussian_noise") return PerturbKind::gaussian_noise;
    if (s == "jpeg") return PerturbKind::jpeg;
    if (s == "iso_noise") return PerturbKind::iso_noise;
    throw ConfigError("unknown perturbation kind: " + s);
}

struct PerturbationSpec {
    PerturbKind kind;
    std::vector<double> params;

    void validate() const {
        for (double p : params) {
            switch (kind) {
                case PerturbKind::gaussian_blur:
                    if (p < 1 || static_cast<int>(p) % 2 == 0)
                        throw ConfigError("blur kernel must be odd and >= 1");
                    break;
                case PerturbKind::jpeg:
                    if (p < 1 || p > 100) throw ConfigError("jpeg quality must be in [1,100]");
                    break;
                case PerturbKind::gaussian_noise:
                case PerturbKind::iso_noise:
                    if (p <= 0) throw ConfigError("noise variance must be positive");
                    break;
            }
        }
    }
};

// The sweep grids: blur kernels 3..9, noise variance 3..9 (8-bit units),
// jpeg quality 50..100, iso variance 0.05..0.2.
inline std::vector<PerturbationSpec> default_perturbation_grids() {
    return {
        {PerturbKind::gaussian_blur, {3, 5, 7, 9}},
        {PerturbKind::gaussian_noise, {3, 5, 7, 9}},
        {PerturbKind::jpeg, {50, 60, 70, 80, 90, 100}},
        {PerturbKind::iso_noise, {0.05, 0.1, 0.15, 0.2}},
    };
}

// 1-D Gaussian taps with sigma tied to the kernel size the usual way,
// normalized to sum 1.
inline std::vector<double> gaussian_kernel_1d(int kernel) {
    if (kernel < 1 || kernel % 2 == 0)
        throw ConfigError("gaussian_blur: kernel must be odd and >= 1, got " +
                          std::to_string(kernel));
    const int half = kernel / 2;
    const double sigma = 0.3 * (half - 1.0) + 0.8;
    std::vector<double> k(static_cast<std::size_t>(kernel));
    double sum = 0.0;
    for (int i = -half; i <= half; ++i) {
        k[static_cast<std::size_t>(i + half)] = std::exp(-0.5 * i * i / (sigma * sigma));
        sum += k[static_cast<std::size_t>(i + half)];
    }
    for (double& v : k) v /= sum;
    return k;
}

// Separable Gaussian blur with symmetric-reflect padding; kernel 1 is the
// identity.
inline Tensor<float> gaussian_blur(const Tensor<float>& img, int kernel) {
    if (kernel == 1) return img;
    const auto k = gaussian_kernel_1d(kernel);
    const int half = kernel / 2;
    const std::size_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
    auto reflect = [](long i, long n) {
        while (i < 0 || i >= n) {
            if (i < 0) i = -i - 1;
            if (i >= n) i = 2 * n - i - 1;
        }
        return static_cast<std::size_t>(i);
    };
    Tensor<float> tmp(img.shape), out(img.shape);
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x) {
                double acc = 0.0;
                for (int t = -half; t <= half; ++t)
                    acc += k[static_cast<std::size_t>(t + half)] *
                           img[(c * H + y) * W + reflect(static_cast<long>(x) + t,
                                                         static_cast<long>(W))];
                tmp[(c * H + y) * W + x] = static_cast<float>(acc);
            }
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x) {
                double acc = 0.0;
                for (int t = -half; t <= half; ++t)
                    acc += k[static_cast<std::size_t>(t + half)] *
                           tmp[(c * H + reflect(static_cast<long>(y) + t,
                                                static_cast<long>(H))) * W + x];
                out[(c * H + y) * W + x] = static_cast<float>(acc);
            }
    return out;
}

// Additive zero-mean noise; variance is quoted in 8-bit pixel-value units.
inline Tensor<float> gaussian_noise(const Tensor<float>& img, double variance,
                                    std::mt19937_64& rng) {
    const double sigma = std::sqrt(variance) / 255.0;
    std::normal_distribution<double> n(0.0, sigma);
    Tensor<float> out = img;
    for (auto& v : out.data)
        v = std::clamp(v + static_cast<float>(n(rng)), 0.0f, 1.0f);
    return out;
}

inline Tensor<float> jpeg_compress(const Tensor<float>& img, int quality) {
    if (quality < 1 || quality > 100)
        throw ConfigError("jpeg quality must be in [1,100], got " + std::to_string(quality));
    return jpeg_roundtrip(img, quality);
}

// Sensor-style signal-dependent noise: luminance noise scaled by the square
// root of local brightness plus a small per-channel color shift.
inline Tensor<float> iso_noise(const Tensor<float>& img, double variance,
                               std::mt19937_64& rng) {
    const std::size_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
    std::normal_distribution<double> n(0.0, 1.0);
    std::vector<double> shift(C);
    for (auto& s : shift) s = n(rng) * variance * 0.1;
    Tensor<float> out(img.shape);
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
            double luma = 0.0;
            for (std::size_t c = 0; c < C; ++c) luma += img[(c * H + y) * W + x];
            luma /= static_cast<double>(C);
            const double n1 = n(rng) * variance * std::sqrt(std::max(luma, 0.0));
            for (std::size_t c = 0; c < C; ++c) {
                const double v = img[(c * H + y) * W + x] + n1 + shift[c];
                out[(c * H + y) * W + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
            }
        }
    return out;
}

inline Tensor<float> apply_perturbation(const Tensor<float>& img, PerturbKind kind,
                                        double param, std::mt19937_64& rng) {
    switch (kind) {
        case PerturbKind::gaussian_blur:
            return gaussian_blur(img, static_cast<int>(param));
        case PerturbKind::gaussian_noise:
            return gaussian_noise(img, param, rng);
        case PerturbKind::jpeg:
            return jpeg_compress(img, static_cast<int>(param));
        case PerturbKind::iso_noise:
            return iso_noise(img, param, rng);
    }
    throw ConfigError("unknown perturbation kind");
}

}  // namespace msmg
