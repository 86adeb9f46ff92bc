#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "msmg/checkpoint.hpp"
#include "msmg/image_io.hpp"
#include "msmg/model.hpp"
#include "msmg/objective.hpp"
#include "msmg/perturb.hpp"

namespace msmg {

// ---------------------------------------------------------------------------
// dataset

struct ManifestEntry {
    std::string id;
    std::string image_path;
    std::string mask_path;  // empty for authentic images
};

// One record per line, tab-separated: id, image path, mask path or the
// literal "AUTHENTIC". Relative paths resolve against the manifest's
// directory; every referenced file must exist.
inline std::vector<ManifestEntry> load_manifest(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError("manifest: cannot open: " + path);
    const auto base = std::filesystem::path(path).parent_path();
    auto resolve = [&](const std::string& p) {
        std::filesystem::path fp(p);
        if (fp.is_relative()) fp = base / fp;
        if (!std::filesystem::exists(fp))
            throw DataError("manifest: missing file: " + fp.string());
        return fp.string();
    };
    std::vector<ManifestEntry> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream ls(line);
        ManifestEntry e;
        std::string mask;
        if (!std::getline(ls, e.id, '\t') || !std::getline(ls, e.image_path, '\t') ||
            !std::getline(ls, mask, '\t'))
            throw DataError("manifest: " + path + ":" + std::to_string(lineno) +
                            ": expected 3 tab-separated fields");
        e.image_path = resolve(e.image_path);
        if (mask != "AUTHENTIC") e.mask_path = resolve(mask);
        out.push_back(std::move(e));
    }
    if (out.empty()) throw DataError("manifest: no records in " + path);
    return out;
}

struct SampleRecord {
    std::string id;
    Tensor<float> image;  // {3,S,S} in [0,1]
    Tensor<float> mask;   // {1,S,S} binary
    Tensor<float> edge;   // {1,S/4,S/4} binary, derived from the mask
};

// ---------------------------------------------------------------------------
// edge ground truth

namespace morph {

// Binary dilation/erosion of {1,H,W} with a square structuring element of
// the given radius; outside the image counts as 0.
inline Tensor<float> dilate(const Tensor<float>& m, int radius) {
    const long H = static_cast<long>(m.dim(1)), W = static_cast<long>(m.dim(2));
    Tensor<float> out(m.shape);
    for (long y = 0; y < H; ++y)
        for (long x = 0; x < W; ++x) {
            float v = 0.0f;
            for (long dy = -radius; dy <= radius && v == 0.0f; ++dy)
                for (long dx = -radius; dx <= radius; ++dx) {
                    const long yy = y + dy, xx = x + dx;
                    if (yy >= 0 && yy < H && xx >= 0 && xx < W &&
                        m[static_cast<std::size_t>(yy * W + xx)] > 0.5f) {
                        v = 1.0f;
                        break;
                    }
                }
            out[static_cast<std::size_t>(y * W + x)] = v;
        }
    return out;
}

inline Tensor<float> erode(const Tensor<float>& m, int radius) {
    const long H = static_cast<long>(m.dim(1)), W = static_cast<long>(m.dim(2));
    Tensor<float> out(m.shape);
    for (long y = 0; y < H; ++y)
        for (long x = 0; x < W; ++x) {
            float v = 1.0f;
            for (long dy = -radius; dy <= radius && v == 1.0f; ++dy)
                for (long dx = -radius; dx <= radius; ++dx) {
                    const long yy = y + dy, xx = x + dx;
                    if (yy < 0 || yy >= H || xx < 0 || xx >= W ||
                        m[static_cast<std::size_t>(yy * W + xx)] <= 0.5f) {
                        v = 0.0f;
                        break;
                    }
                }
            out[static_cast<std::size_t>(y * W + x)] = v;
        }
    return out;
}

}  // namespace morph

// Edge band = dilate(mask, w) AND NOT erode(mask, w), then downsampled 4x
// by any-pooling: a low-res pixel is edge if any covered pixel is.
inline Tensor<float> derive_edge_gt(const Tensor<float>& mask, int width = 3) {
    const std::size_t H = mask.dim(1), W = mask.dim(2);
    if (H % 4 != 0 || W % 4 != 0)
        throw ShapeError("derive_edge_gt: mask size " + shape_str(mask.shape) +
                         " is not divisible by 4");
    const auto d = morph::dilate(mask, width);
    const auto e = morph::erode(mask, width);
    Tensor<float> edge({1, H / 4, W / 4});
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x)
            if (d[y * W + x] > 0.5f && e[y * W + x] <= 0.5f)
                edge[(y / 4) * (W / 4) + x / 4] = 1.0f;
    return edge;
}

inline SampleRecord load_sample(const ManifestEntry& e, std::size_t input_size) {
    SampleRecord s;
    s.id = e.id;
    s.image = resize_bilinear(load_rgb(e.image_path), input_size, input_size);
    s.mask = e.mask_path.empty()
                 ? Tensor<float>::zeros({1, input_size, input_size})
                 : resize_nearest(load_mask(e.mask_path), input_size, input_size);
    s.edge = derive_edge_gt(s.mask);
    return s;
}

// ---------------------------------------------------------------------------
// augmentation

struct AugmentConfig {
    double p_flip = 0.5;
    double p_blur = 0.2;
    double p_jpeg = 0.2;
    std::vector<int> blur_kernels{3, 5};
    int jpeg_quality_lo = 70;
    int jpeg_quality_hi = 100;

    static AugmentConfig off() { return {0.0, 0.0, 0.0, {3, 5}, 70, 100}; }
};

inline Tensor<float> hflip(const Tensor<float>& t) {
    const std::size_t C = t.dim(0), H = t.dim(1), W = t.dim(2);
    Tensor<float> out(t.shape);
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x)
                out[(c * H + y) * W + x] = t[(c * H + y) * W + (W - 1 - x)];
    return out;
}

// Horizontal flip moves the mask with the image; blur and recompression
// touch the image only. Deterministic given the rng state.
inline SampleRecord augment(SampleRecord s, const AugmentConfig& cfg, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    if (unit(rng) < cfg.p_flip) {
        s.image = hflip(s.image);
        s.mask = hflip(s.mask);
        s.edge = hflip(s.edge);
    }
    if (unit(rng) < cfg.p_blur) {
        std::uniform_int_distribution<std::size_t> pick(0, cfg.blur_kernels.size() - 1);
        s.image = gaussian_blur(s.image, cfg.blur_kernels[pick(rng)]);
    }
    if (unit(rng) < cfg.p_jpeg) {
        std::uniform_int_distribution<int> q(cfg.jpeg_quality_lo, cfg.jpeg_quality_hi);
        s.image = jpeg_compress(s.image, q(rng));
    }
    return s;
}

// ---------------------------------------------------------------------------
// schedule and optimizer

enum class LrSchedule { cosine, step };

struct TrainConfig {
    std::size_t input_size = 512;
    std::size_t batch_size = 2;
    std::size_t max_steps = 1000;
    double lr_start = 1e-4;
    double lr_end = 1e-6;
    LrSchedule schedule = LrSchedule::cosine;
    std::uint64_t seed = 0;
    LossWeights loss_weights;
    AugmentConfig augment;
    std::size_t checkpoint_every = 0;  // 0: final only
    std::size_t log_every = 1;

    void validate() const {
        if (input_size == 0 || input_size % 32 != 0)
            throw ConfigError("train: input_size must be a positive multiple of 32");
        if (batch_size == 0) throw ConfigError("train: batch_size must be positive");
        if (max_steps == 0) throw ConfigError("train: max_steps must be positive");
        if (!(lr_start >= lr_end) || !(lr_end > 0))
            throw ConfigError("train: need lr_start >= lr_end > 0");
        loss_weights.validate();
    }
};

// Cosine anneal from lr_start to lr_end over the run; the step alternative
// drops by decades (start, geometric midpoints, end). Both hit the
// endpoints exactly and never increase.
inline double lr_at(std::size_t step, std::size_t total_steps, const TrainConfig& cfg) {
    if (total_steps == 0) return cfg.lr_start;
    const double frac =
        std::min(1.0, static_cast<double>(step) / static_cast<double>(total_steps));
    if (cfg.schedule == LrSchedule::cosine)
        return cfg.lr_end +
               0.5 * (cfg.lr_start - cfg.lr_end) * (1.0 + std::cos(M_PI * frac));
    const int segments = 3;
    const int seg = std::min(segments - 1, static_cast<int>(frac * segments));
    return cfg.lr_start *
           std::pow(cfg.lr_end / cfg.lr_start, static_cast<double>(seg) / (segments - 1));
}

// Bias-corrected Adam over the trainable entries of a store.
struct AdamState {
    std::vector<Tensor<float>> m, v;
    std::uint64_t step = 0;
};

inline void adam_step(ParamStore<float>& ps, AdamState& st, double lr, double beta1 = 0.9,
                      double beta2 = 0.999, double eps = 1e-8) {
    if (st.m.empty()) {
        for (std::size_t i = 0; i < ps.size(); ++i) {
            st.m.push_back(Tensor<float>::zeros(ps.value(static_cast<int>(i)).shape));
            st.v.push_back(Tensor<float>::zeros(ps.value(static_cast<int>(i)).shape));
        }
    }
    if (st.m.size() != ps.size())
        throw ConfigError("adam: state/store size mismatch");
    ++st.step;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(st.step));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(st.step));
    for (std::size_t i = 0; i < ps.size(); ++i) {
        auto& e = ps.entry(static_cast<int>(i));
        if (!e.trainable) continue;
        auto& m = st.m[i];
        auto& v = st.v[i];
        for (std::size_t j = 0; j < e.value.size(); ++j) {
            const double gj = e.grad[j];
            m[j] = static_cast<float>(beta1 * m[j] + (1.0 - beta1) * gj);
            v[j] = static_cast<float>(beta2 * v[j] + (1.0 - beta2) * gj * gj);
            const double mhat = m[j] / bc1;
            const double vhat = v[j] / bc2;
            e.value[j] -= static_cast<float>(lr * mhat / (std::sqrt(vhat) + eps));
        }
    }
}

// Optimizer state rides in the same checkpoint file under reserved names.
inline void append_optimizer(CheckpointData& ck, const ParamStore<float>& ps,
                             const AdamState& st) {
    if (st.m.empty()) return;
    for (std::size_t i = 0; i < ps.size(); ++i) {
        ck.tensors.emplace_back("adam.m." + ps.name(static_cast<int>(i)), st.m[i]);
        ck.tensors.emplace_back("adam.v." + ps.name(static_cast<int>(i)), st.v[i]);
    }
    Tensor<float> step({1});
    step[0] = static_cast<float>(st.step);
    ck.tensors.emplace_back("adam.step", std::move(step));
}

inline AdamState extract_optimizer(const CheckpointData& ck, const ParamStore<float>& ps) {
    AdamState st;
    for (const auto& [name, t] : ck.tensors)
        if (name == "adam.step") st.step = static_cast<std::uint64_t>(t[0]);
    if (st.step == 0 && std::none_of(ck.tensors.begin(), ck.tensors.end(),
                                     [](const auto& p) { return p.first == "adam.step"; }))
        return st;  // no optimizer section; fresh state
    for (std::size_t i = 0; i < ps.size(); ++i) {
        const std::string pn = ps.name(static_cast<int>(i));
        Tensor<float> m, v;
        for (const auto& [name, t] : ck.tensors) {
            if (name == "adam.m." + pn) m = t;
            if (name == "adam.v." + pn) v = t;
        }
        if (m.size() == 0 || v.size() == 0)
            throw DataError("checkpoint: optimizer state missing for " + pn);
        st.m.push_back(std::move(m));
        st.v.push_back(std::move(v));
    }
    return st;
}

// ---------------------------------------------------------------------------
// training

struct StepLog {
    std::size_t step;
    double lr;
    double total;
    double seg;
    double edge;
};

namespace detail {

template <class T>
void check_finite_or_throw(const MsmgNet<T>& model, std::size_t step) {
    const auto& ps = model.params();
    for (std::size_t i = 0; i < ps.size(); ++i) {
        const int idx = static_cast<int>(i);
        if (!ps.value(idx).all_finite())
            throw NumericError("non-finite value in " + ps.name(idx) + " at step " +
                               std::to_string(step));
        if (!ps.entry(idx).grad.all_finite())
            throw NumericError("non-finite gradient in " + ps.name(idx) + " at step " +
                               std::to_string(step));
    }
}

}  // namespace detail

// Stack {C,H,W} samples into one {N,C,H,W} batch leaf.
inline Tensor<float> stack_batch(const std::vector<const Tensor<float>*>& parts) {
    const auto& s0 = parts.front()->shape;
    std::vector<std::size_t> shape{parts.size()};
    shape.insert(shape.end(), s0.begin(), s0.end());
    Tensor<float> out(shape);
    std::size_t off = 0;
    for (const auto* p : parts) {
        std::copy(p->data.begin(), p->data.end(), out.data.begin() + static_cast<long>(off));
        off += p->size();
    }
    return out;
}

// One optimizer step over a prepared batch; returns the logged losses.
inline StepLog train_step(MsmgNet<float>& model, AdamState& opt, const Tensor<float>& images,
                          const Tensor<float>& masks, const Tensor<float>& edges, double lr,
                          const LossWeights& w, std::size_t step) {
    Graph<float> g;
    auto out = model.forward(g, g.leaf(images), true);
    auto loss =
        combined_loss(g, out.s_seg, out.s_edge, g.leaf(masks), g.leaf(edges), w, 1.0f);
    const double total = g.value(loss.total)[0];
    const double seg = g.value(loss.seg)[0];
    const double edge = g.value(loss.edge)[0];
    if (!std::isfinite(total)) {
        detail::check_finite_or_throw(model, step);
        throw NumericError("non-finite loss at step " + std::to_string(step));
    }
    model.params().zero_grad();
    g.backward(loss.total);
    detail::check_finite_or_throw(model, step);
    adam_step(model.params(), opt, lr);
    return {step, lr, total, seg, edge};
}

// Full loop: sample a batch, augment, forward, backward, Adam, schedule.
// Emits one JSON line per logged step to `log` when given. Reproducible:
// the same seed yields bitwise-identical parameter trajectories.
inline std::vector<StepLog> train(MsmgNet<float>& model, AdamState& opt,
                                  const std::vector<SampleRecord>& samples,
                                  const TrainConfig& cfg, std::ostream* log = nullptr,
                                  std::size_t start_step = 0) {
    cfg.validate();
    if (samples.empty()) throw DataError("train: no samples");
    std::mt19937_64 rng(cfg.seed + 0x9e3779b97f4a7c15ull * (start_step + 1));
    std::uniform_int_distribution<std::size_t> pick(0, samples.size() - 1);
    std::vector<StepLog> history;
    for (std::size_t step = start_step; step < cfg.max_steps; ++step) {
        std::vector<SampleRecord> batch;
        for (std::size_t b = 0; b < cfg.batch_size; ++b)
            batch.push_back(augment(samples[pick(rng)], cfg.augment, rng));
        std::vector<const Tensor<float>*> im, mk, ed;
        for (const auto& s : batch) {
            im.push_back(&s.image);
            mk.push_back(&s.mask);
            ed.push_back(&s.edge);
        }
        const double lr = lr_at(step, cfg.max_steps, cfg);
        auto rec = train_step(model, opt, stack_batch(im), stack_batch(mk), stack_batch(ed),
                              lr, cfg.loss_weights, step);
        if (log && step % cfg.log_every == 0)
            *log << "{\"step\":" << rec.step << ",\"lr\":" << rec.lr
                 << ",\"total\":" << rec.total << ",\"seg\":" << rec.seg
                 << ",\"edge\":" << rec.edge << "}\n";
        history.push_back(rec);
    }
    return history;
}

// ---------------------------------------------------------------------------
// evaluation

struct ImageMetrics {
    std::string id;
    double f1 = 0.0;
    std::optional<double> auc;
    double score = 0.0;
};

struct EvalSummary {
    std::vector<ImageMetrics> per_image;
    double f1_mean = 0.0;
    std::optional<double> auc_mean;  // over images where AUC is defined
    double score_mean = 0.0;
};

struct Prediction {
    Tensor<float> seg;   // {1,S,S}
    Tensor<float> edge;  // {1,S/4,S/4}
};

inline Prediction predict(const MsmgNet<float>& model, const Tensor<float>& image) {
    Graph<float> g;
    Tensor<float> batch({1, image.dim(0), image.dim(1), image.dim(2)});
    batch.data = image.data;
    auto out = model.forward(g, g.leaf(batch), false);
    Prediction p;
    const auto& sv = g.value(out.s_seg);
    const auto& ev = g.value(out.s_edge);
    p.seg = Tensor<float>({1, sv.dim(2), sv.dim(3)});
    p.seg.data = sv.data;
    p.edge = Tensor<float>({1, ev.dim(2), ev.dim(3)});
    p.edge.data = ev.data;
    return p;
}

// Per-image metrics and their means. Images whose ground truth is
// single-class have no AUC and are excluded from the AUC mean. Pooled mode
// instead concatenates all pixels before computing F1/AUC.
inline EvalSummary evaluate(const MsmgNet<float>& model,
                            const std::vector<SampleRecord>& samples, bool pooled = false) {
    if (samples.empty()) throw DataError("evaluate: no samples");
    EvalSummary out;
    std::vector<float> all_pred, all_gt;
    double auc_sum = 0.0;
    std::size_t auc_n = 0;
    for (const auto& s : samples) {
        auto p = predict(model, s.image);
        ImageMetrics m;
        m.id = s.id;
        m.f1 = pixel_f1(p.seg, s.mask);
        m.auc = pixel_auc(p.seg, s.mask);
        m.score = image_score(p.seg);
        out.f1_mean += m.f1;
        out.score_mean += m.score;
        if (m.auc) {
            auc_sum += *m.auc;
            ++auc_n;
        }
        if (pooled) {
            all_pred.insert(all_pred.end(), p.seg.data.begin(), p.seg.data.end());
            all_gt.insert(all_gt.end(), s.mask.data.begin(), s.mask.data.end());
        }
        out.per_image.push_back(std::move(m));
    }
    const double n = static_cast<double>(samples.size());
    out.f1_mean /= n;
    out.score_mean /= n;
    if (auc_n > 0) out.auc_mean = auc_sum / static_cast<double>(auc_n);
    if (pooled) {
        Tensor<float> pr({all_pred.size()}), gt({all_gt.size()});
        pr.data = std::move(all_pred);
        gt.data = std::move(all_gt);
        out.f1_mean = pixel_f1(pr, gt);
        out.auc_mean = pixel_auc(pr, gt);
    }
    return out;
}

}  // namespace msmg
