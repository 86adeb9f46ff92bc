#pragma once

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "msmg/backbone.hpp"
#include "msmg/layers.hpp"

namespace msmg {

// Per-scale multi-grained feature learning: patch embedding, learned
// positional embeddings, and shunted-transformer blocks. The four scales
// never exchange information here.
struct GrainedConfig {
    std::array<int, 4> embed_dims{64, 128, 256, 512};
    std::array<int, 4> heads{2, 4, 8, 8};
    std::array<std::vector<int>, 4> shunt_ratios{{{8, 4}, {4, 2}, {2, 1}, {1}}};
    std::array<int, 4> blocks{2, 2, 2, 2};
    int mlp_ratio = 4;
    bool detail_enhance = true;

    static GrainedConfig toy() {
        GrainedConfig c;
        c.embed_dims = {16, 32, 64, 128};
        c.heads = {2, 2, 2, 2};
        c.shunt_ratios = {{{2, 1}, {1}, {1}, {1}}};
        c.blocks = {1, 1, 1, 1};
        c.mlp_ratio = 2;
        c.detail_enhance = true;
        return c;
    }

    // grid[i] is scale i's token grid side length at the training input size.
    void validate(const std::array<std::size_t, 4>& grid) const {
        for (int i = 0; i < 4; ++i) {
            if (embed_dims[i] <= 0) throw ConfigError("grained: embed_dims must be positive");
            if (heads[i] <= 0) throw ConfigError("grained: heads must be positive");
            if (embed_dims[i] % heads[i] != 0)
                throw ConfigError("grained: embed_dim " + std::to_string(embed_dims[i]) +
                                  " not divisible by heads " + std::to_string(heads[i]) +
                                  " at scale " + std::to_string(i + 1));
            const auto& ratios = shunt_ratios[static_cast<std::size_t>(i)];
            if (ratios.empty()) throw ConfigError("grained: empty ratio list");
            if (heads[i] % static_cast<int>(ratios.size()) != 0)
                throw ConfigError("grained: heads " + std::to_string(heads[i]) +
                                  " not divisible by " + std::to_string(ratios.size()) +
                                  " ratio groups at scale " + std::to_string(i + 1));
            for (int r : ratios) {
                if (r <= 0) throw ConfigError("grained: ratios must be positive");
                if (grid[static_cast<std::size_t>(i)] % static_cast<std::size_t>(r) != 0)
                    throw ConfigError("grained: ratio " + std::to_string(r) +
                                      " does not divide grid " +
                                      std::to_string(grid[static_cast<std::size_t>(i)]) +
                                      " at scale " + std::to_string(i + 1));
            }
            if (blocks[i] <= 0) throw ConfigError("grained: blocks must be positive");
        }
        if (mlp_ratio <= 0) throw ConfigError("grained: mlp_ratio must be positive");
    }
};

// Multi-head attention where each head group attends over key/value tokens
// merged at its own spatial ratio (r×r stride-r conv over the token grid;
// r = 1 attends over the raw tokens). With all ratios 1 and detail
// enhancement off this is exactly dense multi-head self-attention.
template <class T>
class ShuntedSelfAttention {
  public:
    ShuntedSelfAttention() = default;
    ShuntedSelfAttention(ParamStore<T>& ps, std::mt19937_64& rng, const std::string& name,
                         std::size_t dim, std::size_t n_heads, std::vector<int> ratios,
                         bool detail_enhance)
        : dim_(dim), heads_(n_heads), ratios_(std::move(ratios)),
          detail_enhance_(detail_enhance) {
        wq_ = LinearLayer<T>(ps, rng, name + ".q", dim, dim);
        wkv_ = LinearLayer<T>(ps, rng, name + ".kv", dim, 2 * dim);
        wo_ = LinearLayer<T>(ps, rng, name + ".out", dim, dim);
        for (std::size_t gi = 0; gi < ratios_.size(); ++gi) {
            const int r = ratios_[gi];
            merge_.emplace_back();
            detail_.emplace_back();
            if (r > 1)
                merge_.back() = Conv2dLayer<T>(ps, rng, name + ".merge" + std::to_string(gi),
                                               dim, dim, static_cast<std::size_t>(r),
                                               static_cast<std::size_t>(r), 0);
            if (detail_enhance)
                detail_.back() = Conv2dLayer<T>(ps, rng, name + ".detail" + std::to_string(gi),
                                                dim, dim, 3, 1, 1, dim);
        }
    }

    // attn_out, when given, receives the per-group attention nodes (for
    // inspection and feature dumps).
    int forward(Graph<T>& g, int tokens, std::size_t grid_h, std::size_t grid_w,
                std::vector<int>* attn_out = nullptr) const {
        const Tensor<T>& tv = g.value(tokens);
        const std::size_t N = tv.dim(0), L = tv.dim(1);
        const std::size_t dh = dim_ / heads_;
        const std::size_t groups = ratios_.size();
        const std::size_t heads_per_group = heads_ / groups;
        const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));

        int q = wq_.forward(g, tokens);
        q = ops::reshape(g, q, {N, L, heads_, dh});
        q = ops::permute(g, q, {0, 2, 1, 3});  // N,h,L,dh

        std::vector<int> group_outs;
        for (std::size_t gi = 0; gi < groups; ++gi) {
            const std::size_t r = static_cast<std::size_t>(ratios_[gi]);
            int t = tokens;
            std::size_t mh = grid_h, mw = grid_w;
            if (r > 1) {
                int img = ops::unflatten_spatial(g, tokens, grid_h, grid_w);
                img = merge_[gi].forward(g, img);
                mh = grid_h / r;
                mw = grid_w / r;
                t = ops::flatten_spatial(g, img);
            }
            const std::size_t Lr = mh * mw;
            int kv = wkv_.forward(g, t);  // N,Lr,2D
            int k = ops::slice(g, kv, 2, 0, dim_);
            int v = ops::slice(g, kv, 2, dim_, dim_);
            if (detail_enhance_) {
                int vimg = ops::unflatten_spatial(g, v, mh, mw);
                v = ops::add(g, v, ops::flatten_spatial(g, detail_[gi].forward(g, vimg)));
            }
            auto to_heads = [&](int x) {
                x = ops::reshape(g, x, {N, Lr, heads_, dh});
                x = ops::permute(g, x, {0, 2, 1, 3});                       // N,h,Lr,dh
                return ops::slice(g, x, 1, gi * heads_per_group, heads_per_group);
            };
            int kg = to_heads(k);
            int vg = to_heads(v);
            int qg = ops::slice(g, q, 1, gi * heads_per_group, heads_per_group);
            int logits = ops::scale(g, ops::matmul(g, qg, ops::permute(g, kg, {0, 1, 3, 2})),
                                    scale);
            int attn = ops::softmax(g, logits, 3);
            if (attn_out) attn_out->push_back(attn);
            group_outs.push_back(ops::matmul(g, attn, vg));  // N,hg,L,dh
        }
        int out = group_outs.size() == 1 ? group_outs[0] : ops::concat(g, 1, group_outs);
        out = ops::permute(g, out, {0, 2, 1, 3});
        out = ops::reshape(g, out, {N, L, dim_});
        return wo_.forward(g, out);
    }

  private:
    std::size_t dim_ = 0, heads_ = 0;
    std::vector<int> ratios_;
    bool detail_enhance_ = false;
    LinearLayer<T> wq_, wkv_, wo_;
    std::vector<Conv2dLayer<T>> merge_, detail_;
};

// Pre-norm residual block: t += Attn(LN(t)); t += MLP(LN(t)).
template <class T>
class ShuntedTransformerBlock {
  public:
    ShuntedTransformerBlock() = default;
    ShuntedTransformerBlock(ParamStore<T>& ps, std::mt19937_64& rng, const std::string& name,
                            std::size_t dim, std::size_t n_heads, std::vector<int> ratios,
                            int mlp_ratio, bool detail_enhance) {
        ln1_ = LayerNormLayer<T>(ps, name + ".ln1", dim);
        attn_ = ShuntedSelfAttention<T>(ps, rng, name + ".attn", dim, n_heads,
                                        std::move(ratios), detail_enhance);
        ln2_ = LayerNormLayer<T>(ps, name + ".ln2", dim);
        const std::size_t hidden = dim * static_cast<std::size_t>(mlp_ratio);
        fc1_ = LinearLayer<T>(ps, rng, name + ".mlp.fc1", dim, hidden);
        fc2_ = LinearLayer<T>(ps, rng, name + ".mlp.fc2", hidden, dim);
    }

    int forward(Graph<T>& g, int tokens, std::size_t grid_h, std::size_t grid_w) const {
        int a = attn_.forward(g, ln1_.forward(g, tokens), grid_h, grid_w);
        int t = ops::add(g, tokens, a);
        int m = fc2_.forward(g, ops::gelu(g, fc1_.forward(g, ln2_.forward(g, t))));
        return ops::add(g, t, m);
    }

  private:
    LayerNormLayer<T> ln1_, ln2_;
    ShuntedSelfAttention<T> attn_;
    LinearLayer<T> fc1_, fc2_;
};

template <class T>
class GrainedModule {
  public:
    GrainedModule() = default;
    GrainedModule(ParamStore<T>& ps, std::mt19937_64& rng, const GrainedConfig& cfg,
                  const BackboneConfig& backbone, std::array<std::size_t, 4> grid)
        : cfg_(cfg), grid_(grid) {
        cfg.validate(grid);
        for (std::size_t i = 0; i < 4; ++i) {
            const std::string base = "grained.scale" + std::to_string(i + 1);
            const std::size_t c_in = static_cast<std::size_t>(backbone.stage_channels[i]);
            const std::size_t d = static_cast<std::size_t>(cfg.embed_dims[i]);
            pe1_[i] = Conv2dLayer<T>(ps, rng, base + ".pe1", c_in, d, 1);
            pe2_[i] = Conv2dLayer<T>(ps, rng, base + ".pe2", d, d, 3, 1, 1);
            pos_[i] = ps.add(base + ".pos", Tensor<T>::zeros({1, grid[i] * grid[i], d}));
            store_ = &ps;
            std::vector<ShuntedTransformerBlock<T>> blks;
            for (int b = 0; b < cfg.blocks[i]; ++b)
                blks.emplace_back(ps, rng, base + ".block" + std::to_string(b), d,
                                  static_cast<std::size_t>(cfg.heads[i]), cfg.shunt_ratios[i],
                                  cfg.mlp_ratio, cfg.detail_enhance);
            blocks_[i] = std::move(blks);
        }
    }

    // 1x1 channel remap plus a residual 3x3 refinement.
    int patch_embed(Graph<T>& g, int f, std::size_t scale) const {
        int p = pe1_[scale].forward(g, f);
        return ops::add(g, p, pe2_[scale].forward(g, p));
    }

    int forward_scale(Graph<T>& g, int f, std::size_t scale, bool enabled) const {
        const Tensor<T>& fv = g.value(f);
        if (fv.dim(2) != grid_[scale] || fv.dim(3) != grid_[scale])
            throw ShapeError("grained: scale " + std::to_string(scale + 1) + " grid " +
                             std::to_string(fv.dim(2)) + "x" + std::to_string(fv.dim(3)) +
                             " differs from the configured " + std::to_string(grid_[scale]) +
                             " (positional embeddings are fixed to the training size)");
        int p = patch_embed(g, f, scale);
        if (!enabled) return p;  // ablation: channel remap only, no transformer
        int tokens = ops::flatten_spatial(g, p);
        tokens = ops::add(g, tokens, g.param(*store_, pos_[scale]));
        for (const auto& blk : blocks_[scale])
            tokens = blk.forward(g, tokens, grid_[scale], grid_[scale]);
        return ops::unflatten_spatial(g, tokens, grid_[scale], grid_[scale]);
    }

    PyramidIds<T> forward(Graph<T>& g, const PyramidIds<T>& pyr,
                          std::array<bool, 4> enabled = {true, true, true, true}) const {
        PyramidIds<T> out{};
        for (std::size_t i = 0; i < 4; ++i)
            out.f[i] = forward_scale(g, pyr.f[i], i, enabled[i]);
        return out;
    }

    const GrainedConfig& config() const { return cfg_; }

  private:
    GrainedConfig cfg_;
    std::array<std::size_t, 4> grid_{};
    ParamStore<T>* store_ = nullptr;
    std::array<Conv2dLayer<T>, 4> pe1_, pe2_;
    std::array<int, 4> pos_{};
    std::array<std::vector<ShuntedTransformerBlock<T>>, 4> blocks_;
};

}  // namespace msmg
