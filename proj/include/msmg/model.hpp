#pragma once

#include <array>
#include <cstdint>

#include "msmg/backbone.hpp"
#include "msmg/fusion.hpp"
#include "msmg/grained.hpp"

namespace msmg {

struct ModelConfig {
    BackboneConfig backbone;
    GrainedConfig grained;
    FusionConfig fusion;
    std::size_t input_size = 512;
    std::array<bool, 4> enable_grained{true, true, true, true};

    static ModelConfig toy(std::size_t input_size = 64) {
        ModelConfig c;
        c.backbone = BackboneConfig::toy();
        c.grained = GrainedConfig::toy();
        c.fusion = FusionConfig::toy();
        c.input_size = input_size;
        return c;
    }

    std::array<std::size_t, 4> grids() const {
        return {input_size / 4, input_size / 8, input_size / 16, input_size / 32};
    }

    void validate() const {
        if (input_size == 0 || input_size % 32 != 0)
            throw ConfigError("input_size must be a positive multiple of 32");
        backbone.validate();
        grained.validate(grids());
        fusion.validate();
    }
};

// Full network: backbone -> per-scale grained branches -> fusion heads.
template <class T>
class MsmgNet {
  public:
    struct Forward {
        PyramidIds<T> pyramid;  // backbone features f1..f4
        PyramidIds<T> grained;  // post-transformer features
        int s_seg = -1;         // N×1×H×W probabilities
        int s_edge = -1;        // N×1×H/4×W/4 probabilities
    };

    explicit MsmgNet(const ModelConfig& cfg, std::uint64_t seed = 0) : cfg_(cfg) {
        cfg.validate();
        std::mt19937_64 rng(seed);
        backbone_ = Backbone<T>(store_, rng, cfg.backbone);
        grained_ = GrainedModule<T>(store_, rng, cfg.grained, cfg.backbone, cfg.grids());
        fusion_ = FusionModule<T>(store_, rng, cfg.fusion, cfg.grained);
    }

    Forward forward(Graph<T>& g, int x, bool training) const {
        const Tensor<T>& xv = g.value(x);
        if (xv.rank() != 4 || xv.dim(2) != cfg_.input_size || xv.dim(3) != cfg_.input_size)
            throw ShapeError("model: expected N×3×" + std::to_string(cfg_.input_size) + "×" +
                             std::to_string(cfg_.input_size) + " input, got " +
                             shape_str(xv.shape));
        Forward out;
        out.pyramid = backbone_.extract_pyramid(g, x, training);
        out.grained = grained_.forward(g, out.pyramid, cfg_.enable_grained);
        int g1 = fusion_.bottom_up_fuse(g, out.grained);
        out.s_seg = fusion_.segmentation(g, g1);
        out.s_edge = fusion_.mlfa(g, out.grained);
        return out;
    }

    ParamStore<T>& params() { return store_; }
    const ParamStore<T>& params() const { return store_; }
    const ModelConfig& config() const { return cfg_; }
    const Backbone<T>& backbone() const { return backbone_; }
    const GrainedModule<T>& grained() const { return grained_; }
    const FusionModule<T>& fusion() const { return fusion_; }

  private:
    ModelConfig cfg_;
    ParamStore<T> store_;
    Backbone<T> backbone_;
    GrainedModule<T> grained_;
    FusionModule<T> fusion_;
};

}  // namespace msmg
