#pragma once

#include <string>

#include "msmg/tensor.hpp"

namespace msmg {

// 8-bit image files <-> float tensors in [0,1].

// PNG/JPEG -> RGB tensor {3,H,W}.
Tensor<float> load_rgb(const std::string& path);

// Single-channel PNG -> binary mask {1,H,W}; pixels > 127 map to 1.
Tensor<float> load_mask(const std::string& path);

// {1,H,W} or {H,W} in [0,1] -> 8-bit grayscale PNG.
void save_gray_png(const Tensor<float>& t, const std::string& path);

// {3,H,W} in [0,1] -> 8-bit RGB PNG.
void save_rgb_png(const Tensor<float>& t, const std::string& path);

// Bilinear resize for images, nearest for masks.
Tensor<float> resize_bilinear(const Tensor<float>& img, std::size_t out_h, std::size_t out_w);
Tensor<float> resize_nearest(const Tensor<float>& mask, std::size_t out_h, std::size_t out_w);

// Baseline JPEG encode/decode round trip at the given quality (1..100).
Tensor<float> jpeg_roundtrip(const Tensor<float>& img, int quality);

}  // namespace msmg
