#pragma once

#include <array>
#include <string>
#include <vector>

#include "msmg/grained.hpp"
#include "msmg/layers.hpp"

namespace msmg {

// Two heads over the multi-grained pyramid: a bottom-up concatenate-and-
// convolve path ending in the full-resolution segmentation map, and a
// top-down Sobel-filtered aggregation path producing the quarter-resolution
// edge map.
struct FusionConfig {
    std::array<int, 3> fuse_channels{256, 128, 64};  // g3, g2, g1
    int edge_channels = 32;

    static FusionConfig toy() {
        FusionConfig c;
        c.fuse_channels = {64, 32, 16};
        c.edge_channels = 8;
        return c;
    }

    void validate() const {
        for (int c : fuse_channels)
            if (c <= 0) throw ConfigError("fusion: fuse_channels must be positive");
        if (edge_channels <= 0) throw ConfigError("fusion: edge_channels must be positive");
    }
};

// Upsample the deeper operand 2x, concatenate channels, 1x1 conv then 3x3
// conv, each followed by ReLU.
template <class T>
struct GlffBlock {
    Conv2dLayer<T> conv1, conv3;

    GlffBlock() = default;
    GlffBlock(ParamStore<T>& ps, std::mt19937_64& rng, const std::string& name,
              std::size_t deep_ch, std::size_t shallow_ch, std::size_t out_ch) {
        conv1 = Conv2dLayer<T>(ps, rng, name + ".conv1", deep_ch + shallow_ch, out_ch, 1);
        conv3 = Conv2dLayer<T>(ps, rng, name + ".conv3", out_ch, out_ch, 3, 1, 1);
    }

    int forward(Graph<T>& g, int f_deep, int f_shallow) const {
        const Tensor<T>& dv = g.value(f_deep);
        const Tensor<T>& sv = g.value(f_shallow);
        if (dv.dim(2) * 2 != sv.dim(2) || dv.dim(3) * 2 != sv.dim(3))
            throw ShapeError("glff_fuse: deep feature " + shape_str(dv.shape) +
                             " is not at half the spatial size of " + shape_str(sv.shape));
        int up = ops::bilinear_upsample(g, f_deep, 2);
        int cat = ops::concat(g, 1, {up, f_shallow});
        int y = ops::relu(g, conv1.forward(g, cat));
        return ops::relu(g, conv3.forward(g, y));
    }
};

// 3x3 conv -> ReLU -> 1x1 conv to one channel -> bilinear 4x -> sigmoid.
template <class T>
struct SegmentationHead {
    Conv2dLayer<T> conv3, conv1;

    SegmentationHead() = default;
    SegmentationHead(ParamStore<T>& ps, std::mt19937_64& rng, const std::string& name,
                     std::size_t in_ch) {
        conv3 = Conv2dLayer<T>(ps, rng, name + ".conv3", in_ch, in_ch, 3, 1, 1);
        conv1 = Conv2dLayer<T>(ps, rng, name + ".conv1", in_ch, 1, 1);
    }

    int forward(Graph<T>& g, int g1) const {
        int y = ops::relu(g, conv3.forward(g, g1));
        y = conv1.forward(g, y);
        y = ops::bilinear_upsample(g, y, 4);
        return ops::sigmoid(g, y);
    }
};

// Fixed depthwise Sobel pair + per-channel magnitude, then a learned 1x1
// remap to the edge width. The Sobel kernels never learn.
template <class T>
int sobel_magnitude(Graph<T>& g, int x, T eps = static_cast<T>(1e-12)) {
    const Tensor<T>& xv = g.value(x);
    const std::size_t C = xv.dim(1);
    Tensor<T> gx_w({C, 1, 3, 3}), gy_w({C, 1, 3, 3});
    const T kx[9] = {-1, 0, 1, -2, 0, 2, -1, 0, 1};
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t i = 0; i < 9; ++i) {
            gx_w[c * 9 + i] = kx[i];
            gy_w[c * 9 + (i % 3) * 3 + i / 3] = kx[i];  // Gy = Gx transposed
        }
    int gx = ops::conv2d(g, x, ops::constant(g, std::move(gx_w)), -1, 1, 1, C);
    int gy = ops::conv2d(g, x, ops::constant(g, std::move(gy_w)), -1, 1, 1, C);
    return ops::sqrt_eps(g, ops::add(g, ops::mul(g, gx, gx), ops::mul(g, gy, gy)), eps);
}

template <class T>
class FusionModule {
  public:
    FusionModule() = default;
    FusionModule(ParamStore<T>& ps, std::mt19937_64& rng, const FusionConfig& cfg,
                 const GrainedConfig& grained)
        : cfg_(cfg) {
        cfg.validate();
        const auto& d = grained.embed_dims;
        const auto& fc = cfg.fuse_channels;
        glff_[0] = GlffBlock<T>(ps, rng, "fusion.glff3", static_cast<std::size_t>(d[3]),
                                static_cast<std::size_t>(d[2]), static_cast<std::size_t>(fc[0]));
        glff_[1] = GlffBlock<T>(ps, rng, "fusion.glff2", static_cast<std::size_t>(fc[0]),
                                static_cast<std::size_t>(d[1]), static_cast<std::size_t>(fc[1]));
        glff_[2] = GlffBlock<T>(ps, rng, "fusion.glff1", static_cast<std::size_t>(fc[1]),
                                static_cast<std::size_t>(d[0]), static_cast<std::size_t>(fc[2]));
        seg_head_ = SegmentationHead<T>(ps, rng, "fusion.seg_head",
                                        static_cast<std::size_t>(fc[2]));
        const std::size_t e = static_cast<std::size_t>(cfg.edge_channels);
        for (std::size_t i = 0; i < 4; ++i)
            sobel_remap_[i] = Conv2dLayer<T>(ps, rng, "fusion.mlfa.sobel" + std::to_string(i + 1),
                                             static_cast<std::size_t>(d[i]), e, 1);
        for (std::size_t i = 0; i < 3; ++i)
            agg_conv_[i] = Conv2dLayer<T>(ps, rng, "fusion.mlfa.agg" + std::to_string(3 - i),
                                          e, e, 3, 1, 1);
        edge_proj_ = Conv2dLayer<T>(ps, rng, "fusion.mlfa.proj", 4 * e, 1, 1);
        // Sobel magnitudes are unbounded, so a default-scale projection starts
        // the sigmoid deep in saturation where float gradients vanish. Damp the
        // initial weights to keep the first edge maps near 0.5.
        for (T& v : ps.value(edge_proj_.w).data) v *= static_cast<T>(0.01);
    }

    int bottom_up_fuse(Graph<T>& g, const PyramidIds<T>& p) const {
        int g3 = glff_[0].forward(g, p.f[3], p.f[2]);
        int g2 = glff_[1].forward(g, g3, p.f[1]);
        return glff_[2].forward(g, g2, p.f[0]);
    }

    int segmentation(Graph<T>& g, int g1) const { return seg_head_.forward(g, g1); }

    int sobel_conv(Graph<T>& g, int f, std::size_t scale) const {
        return ops::relu(g, sobel_remap_[scale].forward(g, sobel_magnitude(g, f)));
    }

    // e4 -> (up2, add e3, conv) -> (up2, add e2, conv) -> (up2, add e1, conv);
    // concatenate {e4, t3, t2, t1} at scale-1 resolution, 1x1 to one channel,
    // sigmoid. Output lands at H/4 × W/4.
    int mlfa(Graph<T>& g, const PyramidIds<T>& p) const {
        std::array<int, 4> e{};
        for (std::size_t i = 0; i < 4; ++i) e[i] = sobel_conv(g, p.f[i], i);
        std::vector<int> collected;
        int t = e[3];
        collected.push_back(t);
        for (std::size_t step = 0; step < 3; ++step) {
            const std::size_t level = 2 - step;  // e3, e2, e1
            t = ops::add(g, ops::bilinear_upsample(g, t, 2), e[level]);
            t = ops::relu(g, agg_conv_[step].forward(g, t));
            collected.push_back(t);
        }
        // bring everything to scale-1 resolution: factors 8, 4, 2, 1
        std::vector<int> at_scale1;
        const std::size_t factors[4] = {8, 4, 2, 1};
        for (std::size_t i = 0; i < 4; ++i)
            at_scale1.push_back(factors[i] == 1
                                    ? collected[i]
                                    : ops::bilinear_upsample(g, collected[i], factors[i]));
        int cat = ops::concat(g, 1, at_scale1);
        return ops::sigmoid(g, edge_proj_.forward(g, cat));
    }

    const FusionConfig& config() const { return cfg_; }

  private:
    FusionConfig cfg_;
    std::array<GlffBlock<T>, 3> glff_;
    SegmentationHead<T> seg_head_;
    std::array<Conv2dLayer<T>, 4> sobel_remap_;
    std::array<Conv2dLayer<T>, 3> agg_conv_;
    Conv2dLayer<T> edge_proj_;
};

}  // namespace msmg
