#pragma once

#include <array>
#include <string>
#include <vector>

#include "msmg/layers.hpp"

namespace msmg {

// Multi-scale encoder: stride-4 stem (3x3 conv stride 2 + 2x2 max-pool)
// followed by four residual stages producing features at strides 4/8/16/32.
struct BackboneConfig {
    int stem_channels = 64;
    std::array<int, 4> stage_channels{64, 128, 256, 512};
    std::array<int, 4> blocks_per_stage{2, 2, 2, 2};

    static BackboneConfig toy() {
        BackboneConfig c;
        c.stem_channels = 16;
        c.stage_channels = {16, 32, 64, 128};
        c.blocks_per_stage = {2, 2, 2, 2};
        return c;
    }

    void validate() const {
        if (stem_channels <= 0) throw ConfigError("backbone: stem_channels must be positive");
        for (int i = 0; i < 4; ++i) {
            if (stage_channels[i] <= 0)
                throw ConfigError("backbone: stage_channels must be positive");
            if (blocks_per_stage[i] <= 0)
                throw ConfigError("backbone: blocks_per_stage must be positive");
            if (i > 0 && stage_channels[i] < stage_channels[i - 1])
                throw ConfigError("backbone: stage_channels must be non-decreasing");
        }
    }
};

template <class T>
struct PyramidIds {
    std::array<int, 4> f;  // strides 4, 8, 16, 32
};

// Basic residual block: two 3x3 conv+BN, identity shortcut when shapes match,
// 1x1 strided conv+BN otherwise.
template <class T>
struct ResidualBlock {
    Conv2dLayer<T> conv1, conv2;
    BatchNorm2dLayer<T> bn1, bn2;
    bool projected = false;
    Conv2dLayer<T> short_conv;
    BatchNorm2dLayer<T> short_bn;

    ResidualBlock() = default;
    ResidualBlock(ParamStore<T>& ps, std::mt19937_64& rng, const std::string& name,
                  std::size_t in_ch, std::size_t out_ch, std::size_t stride) {
        conv1 = Conv2dLayer<T>(ps, rng, name + ".conv1", in_ch, out_ch, 3, stride, 1, 1, false);
        bn1 = BatchNorm2dLayer<T>(ps, name + ".bn1", out_ch);
        conv2 = Conv2dLayer<T>(ps, rng, name + ".conv2", out_ch, out_ch, 3, 1, 1, 1, false);
        bn2 = BatchNorm2dLayer<T>(ps, name + ".bn2", out_ch);
        if (stride != 1 || in_ch != out_ch) {
            projected = true;
            short_conv =
                Conv2dLayer<T>(ps, rng, name + ".shortcut.conv", in_ch, out_ch, 1, stride, 0, 1, false);
            short_bn = BatchNorm2dLayer<T>(ps, name + ".shortcut.bn", out_ch);
        }
    }

    int forward(Graph<T>& g, int x, bool training) const {
        int y = ops::relu(g, bn1.forward(g, conv1.forward(g, x), training));
        y = bn2.forward(g, conv2.forward(g, y), training);
        int sc = projected ? short_bn.forward(g, short_conv.forward(g, x), training) : x;
        return ops::relu(g, ops::add(g, y, sc));
    }
};

template <class T>
class Backbone {
  public:
    Backbone() = default;
    Backbone(ParamStore<T>& ps, std::mt19937_64& rng, const BackboneConfig& cfg)
        : cfg_(cfg) {
        cfg.validate();
        stem_conv_ = Conv2dLayer<T>(ps, rng, "backbone.stem.conv", 3,
                                    static_cast<std::size_t>(cfg.stem_channels), 3, 2, 1, 1, false);
        stem_bn_ = BatchNorm2dLayer<T>(ps, "backbone.stem.bn",
                                       static_cast<std::size_t>(cfg.stem_channels));
        std::size_t in_ch = static_cast<std::size_t>(cfg.stem_channels);
        for (int s = 0; s < 4; ++s) {
            const std::size_t out_ch = static_cast<std::size_t>(cfg.stage_channels[s]);
            std::vector<ResidualBlock<T>> blocks;
            for (int b = 0; b < cfg.blocks_per_stage[s]; ++b) {
                // stage 1 keeps the stem stride; stages 2..4 enter with stride 2
                const std::size_t stride = (b == 0 && s > 0) ? 2 : 1;
                blocks.emplace_back(ps, rng,
                                    "backbone.stage" + std::to_string(s + 1) + ".block" +
                                        std::to_string(b),
                                    in_ch, out_ch, stride);
                in_ch = out_ch;
            }
            stages_[static_cast<std::size_t>(s)] = std::move(blocks);
        }
    }

    // 3x3 conv stride 2 + 2x2 max-pool: N×3×H×W -> N×stem×H/4×W/4.
    int r_down(Graph<T>& g, int x, bool training) const {
        const Tensor<T>& xv = g.value(x);
        if (xv.rank() != 4 || xv.dim(1) != 3)
            throw ShapeError("r_down: expected N×3×H×W input, got " + shape_str(xv.shape));
        if (xv.dim(2) % 32 != 0 || xv.dim(3) % 32 != 0)
            throw ShapeError("r_down: input height/width must be a multiple of 32, got " +
                             std::to_string(xv.dim(2)) + "x" + std::to_string(xv.dim(3)));
        int y = ops::relu(g, stem_bn_.forward(g, stem_conv_.forward(g, x), training));
        return ops::max_pool2d(g, y, 2, 2);
    }

    PyramidIds<T> extract_pyramid(Graph<T>& g, int x, bool training) const {
        int y = r_down(g, x, training);
        PyramidIds<T> p{};
        for (std::size_t s = 0; s < 4; ++s) {
            for (const auto& blk : stages_[s]) y = blk.forward(g, y, training);
            p.f[s] = y;
        }
        return p;
    }

    const BackboneConfig& config() const { return cfg_; }

  private:
    BackboneConfig cfg_;
    Conv2dLayer<T> stem_conv_;
    BatchNorm2dLayer<T> stem_bn_;
    std::array<std::vector<ResidualBlock<T>>, 4> stages_;
};

}  // namespace msmg
