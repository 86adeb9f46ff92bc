#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "msmg/config.hpp"
#include "msmg/gradcheck.hpp"
#include "msmg/model.hpp"
#include "msmg/pipeline.hpp"
#include "msmg/robustness.hpp"

namespace fs = std::filesystem;
using namespace msmg;

namespace {

std::vector<SampleRecord> load_samples(const std::string& manifest_path,
                                       std::size_t input_size) {
    std::vector<SampleRecord> samples;
    for (const auto& e : load_manifest(manifest_path))
        samples.push_back(load_sample(e, input_size));
    return samples;
}

void restore_model(MsmgNet<float>& model, const std::string& ckpt_path,
                   std::uint64_t fingerprint, bool force_partial) {
    auto ck = load_checkpoint(ckpt_path);
    restore_params(model.params(), ck, fingerprint, force_partial);
}

int cmd_train(const std::string& config_path, const std::string& manifest_path,
              const std::string& out_dir, std::int64_t seed_override,
              const std::string& resume_path) {
    auto cfg = config_path.empty() ? RunConfig{} : load_run_config(config_path);
    if (seed_override >= 0) cfg.train.seed = static_cast<std::uint64_t>(seed_override);
    cfg.validate();
    fs::create_directories(out_dir);

    auto samples = load_samples(manifest_path, cfg.model.input_size);
    MsmgNet<float> model(cfg.model, cfg.train.seed);
    const auto fingerprint = config_fingerprint(cfg.model);

    AdamState opt;
    std::size_t start_step = 0;
    if (!resume_path.empty()) {
        auto ck = load_checkpoint(resume_path);
        restore_params(model.params(), ck, fingerprint);
        opt = extract_optimizer(ck, model.params());
        start_step = opt.step;
    }

    std::ofstream frozen(fs::path(out_dir) / "config.json");
    frozen << dump_run_config(cfg);
    std::ofstream log(fs::path(out_dir) / "metrics.jsonl",
                      start_step ? std::ios::app : std::ios::out);

    auto save = [&](const std::string& name) {
        auto ck = snapshot_params(model.params(), fingerprint);
        append_optimizer(ck, model.params(), opt);
        save_checkpoint((fs::path(out_dir) / name).string(), ck);
    };

    if (cfg.train.checkpoint_every == 0) {
        train(model, opt, samples, cfg.train, &log, start_step);
    } else {
        while (start_step < cfg.train.max_steps) {
            TrainConfig chunk = cfg.train;
            chunk.max_steps =
                std::min(cfg.train.max_steps, start_step + cfg.train.checkpoint_every);
            train(model, opt, samples, chunk, &log, start_step);
            start_step = chunk.max_steps;
            save("checkpoint_step" + std::to_string(start_step) + ".ckpt");
        }
    }
    save("checkpoint_final.ckpt");
    std::cout << "trained to step " << cfg.train.max_steps << ", wrote " << out_dir << "\n";
    return 0;
}

void write_eval_table(std::ostream& os, const EvalSummary& s) {
    os << "id\tf1\tauc\tscore\n";
    for (const auto& m : s.per_image) {
        os << m.id << '\t' << m.f1 << '\t';
        if (m.auc)
            os << *m.auc;
        else
            os << "nan";
        os << '\t' << m.score << '\n';
    }
    os << "MEAN\t" << s.f1_mean << '\t';
    if (s.auc_mean)
        os << *s.auc_mean;
    else
        os << "nan";
    os << '\t' << s.score_mean << '\n';
}

int cmd_eval(const std::string& config_path, const std::string& ckpt_path,
             const std::string& manifest_path, const std::string& out_path, bool pooled,
             bool force_partial) {
    auto cfg = config_path.empty() ? RunConfig{} : load_run_config(config_path);
    MsmgNet<float> model(cfg.model, cfg.train.seed);
    restore_model(model, ckpt_path, config_fingerprint(cfg.model), force_partial);
    auto summary = evaluate(model, load_samples(manifest_path, cfg.model.input_size), pooled);
    if (out_path.empty()) {
        write_eval_table(std::cout, summary);
    } else {
        std::ofstream os(out_path);
        if (!os) throw DataError("cannot write: " + out_path);
        write_eval_table(os, summary);
    }
    return 0;
}

int cmd_predict(const std::string& config_path, const std::string& ckpt_path,
                const std::string& image_path, const std::string& out_prefix,
                bool force_partial) {
    auto cfg = config_path.empty() ? RunConfig{} : load_run_config(config_path);
    MsmgNet<float> model(cfg.model, cfg.train.seed);
    restore_model(model, ckpt_path, config_fingerprint(cfg.model), force_partial);
    auto image =
        resize_bilinear(load_rgb(image_path), cfg.model.input_size, cfg.model.input_size);
    auto p = predict(model, image);
    save_gray_png(p.seg, out_prefix + "_seg.png");
    save_gray_png(p.edge, out_prefix + "_edge.png");
    std::ofstream score(out_prefix + "_score.txt");
    score << image_score(p.seg) << "\n";
    std::cout << "wrote " << out_prefix << "_{seg,edge}.png and _score.txt\n";
    return 0;
}

int cmd_perturb_eval(const std::string& config_path, const std::string& ckpt_path,
                     const std::string& manifest_path, const std::string& kinds_csv,
                     const std::string& out_path, bool force_partial) {
    auto cfg = config_path.empty() ? RunConfig{} : load_run_config(config_path);
    MsmgNet<float> model(cfg.model, cfg.train.seed);
    restore_model(model, ckpt_path, config_fingerprint(cfg.model), force_partial);

    std::vector<PerturbationSpec> specs;
    std::stringstream ss(kinds_csv);
    std::string kind;
    while (std::getline(ss, kind, ',')) {
        const auto k = perturb_kind_from(kind);
        for (const auto& g : default_perturbation_grids())
            if (g.kind == k) specs.push_back(g);
    }
    if (specs.empty()) throw ConfigError("no perturbation kinds selected");

    auto rows = robustness_sweep(model, load_samples(manifest_path, cfg.model.input_size),
                                 specs, cfg.train.seed);
    if (out_path.empty()) {
        write_sweep_table(std::cout, rows);
    } else {
        std::ofstream os(out_path);
        if (!os) throw DataError("cannot write: " + out_path);
        write_sweep_table(os, rows);
    }
    return 0;
}

// channel mean -> min/max normalized grayscale
Tensor<float> channel_mean_map(const Tensor<float>& f) {
    const std::size_t C = f.dim(1), H = f.dim(2), W = f.dim(3);
    Tensor<float> out({1, H, W});
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t i = 0; i < H * W; ++i) out[i] += f[c * H * W + i];
    float lo = out[0], hi = out[0];
    for (float v : out.data) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    for (float& v : out.data) v = (v - lo) / (hi - lo + 1e-12f);
    return out;
}

int cmd_dump_features(const std::string& config_path, const std::string& ckpt_path,
                      const std::string& image_path, const std::string& out_dir,
                      bool force_partial) {
    auto cfg = config_path.empty() ? RunConfig{} : load_run_config(config_path);
    MsmgNet<float> model(cfg.model, cfg.train.seed);
    restore_model(model, ckpt_path, config_fingerprint(cfg.model), force_partial);
    fs::create_directories(out_dir);

    auto image =
        resize_bilinear(load_rgb(image_path), cfg.model.input_size, cfg.model.input_size);
    Graph<float> g;
    Tensor<float> batch({1, 3, cfg.model.input_size, cfg.model.input_size});
    batch.data = image.data;
    auto out = model.forward(g, g.leaf(batch), false);
    for (int i = 0; i < 4; ++i) {
        auto map = channel_mean_map(g.value(out.grained.f[static_cast<std::size_t>(i)]));
        save_gray_png(map, (fs::path(out_dir) / ("scale" + std::to_string(i + 1) + ".png"))
                               .string());
    }
    const auto& seg = g.value(out.s_seg);
    const auto& edge = g.value(out.s_edge);
    Tensor<float> seg_map({1, seg.dim(2), seg.dim(3)});
    seg_map.data = seg.data;
    Tensor<float> edge_map({1, edge.dim(2), edge.dim(3)});
    edge_map.data = edge.data;
    save_gray_png(seg_map, (fs::path(out_dir) / "seg.png").string());
    save_gray_png(edge_map, (fs::path(out_dir) / "edge.png").string());
    std::cout << "wrote feature maps to " << out_dir << "\n";
    return 0;
}

int cmd_gradcheck(const std::string& config_path, std::uint64_t seed) {
    auto cfg = config_path.empty() ? RunConfig{} : load_run_config(config_path);
    ModelConfig mc = cfg.model;
    if (config_path.empty()) {
        mc = ModelConfig::toy(32);
        mc.backbone.stem_channels = 4;
        mc.backbone.stage_channels = {4, 8, 8, 8};
        mc.backbone.blocks_per_stage = {1, 1, 1, 1};
        mc.grained.embed_dims = {8, 8, 8, 8};
        mc.grained.heads = {2, 2, 2, 2};
        mc.grained.shunt_ratios = {{{2, 1}, {1}, {1}, {1}}};
        mc.grained.blocks = {1, 1, 1, 1};
        mc.grained.mlp_ratio = 2;
        mc.fusion.fuse_channels = {8, 8, 8};
        mc.fusion.edge_channels = 4;
    }
    MsmgNet<double> model(mc, seed);
    std::mt19937_64 rng(seed + 1);

    auto x = uniform_init<double>({1, 3, mc.input_size, mc.input_size}, 0.0, 1.0, rng);
    Tensor<double> mask = Tensor<double>::zeros({1, 1, mc.input_size, mc.input_size});
    for (std::size_t i = 0; i < mask.size(); i += 3) mask[i] = 1.0;
    Tensor<double> edge =
        Tensor<double>::zeros({1, 1, mc.input_size / 4, mc.input_size / 4});
    for (std::size_t i = 0; i < edge.size(); i += 2) edge[i] = 1.0;

    auto& ps = model.params();
    auto loss_of = [&]() {
        Graph<double> g;
        auto out = model.forward(g, g.leaf(x), true);
        auto l = combined_loss(g, out.s_seg, out.s_edge, g.leaf(mask), g.leaf(edge),
                               LossWeights{}, 1.0);
        return std::pair(std::move(g), l.total);
    };

    // representative parameters per block
    const std::vector<std::pair<std::string, std::string>> blocks = {
        {"stem", "backbone.stem.conv.weight"},
        {"stage", "backbone.stage2.block0.conv1.weight"},
        {"attention", "grained.scale1.block0.attn.q.weight"},
        {"mlp", "grained.scale1.block0.mlp.fc1.weight"},
        {"glff", "fusion.glff1.conv3.weight"},
        {"seg_head", "fusion.seg_head.conv3.weight"},
        {"mlfa", "fusion.mlfa.agg1.weight"},
    };

    bool ok = true;
    for (const auto& [label, pname] : blocks) {
        const int idx = ps.find(pname);
        if (idx < 0) throw ConfigError("gradcheck: no parameter named " + pname);
        ps.zero_grad();
        {
            auto [g, loss] = loss_of();
            g.backward(loss);
        }
        const Tensor<double> analytic = ps.grad(idx);
        auto f = [&]() {
            auto [g, loss] = loss_of();
            return g.value(loss)[0];
        };
        const double err = finite_diff_check<double>(
            f, {{&ps.value(idx), &analytic}}, 1e-5, 6, rng);
        const bool pass = err < 1e-3;
        ok = ok && pass;
        std::cout << label << ": worst rel err " << err << (pass ? "" : "  FAIL") << "\n";
    }
    if (!ok) throw NumericError("gradient check failed");
    std::cout << "all blocks within tolerance\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"multi-scale multi-grained manipulation localization"};
    app.require_subcommand(1);

    std::string config_path, manifest_path, out_dir, out_path, ckpt_path, image_path,
        out_prefix, resume_path;
    std::string kinds = "gaussian_blur,gaussian_noise,jpeg,iso_noise";
    std::int64_t seed_override = -1;
    std::uint64_t gc_seed = 0;
    bool pooled = false, force_partial = false;

    auto* tr = app.add_subcommand("train", "train a model");
    tr->add_option("--config", config_path);
    tr->add_option("--manifest", manifest_path)->required();
    tr->add_option("--out-dir", out_dir)->required();
    tr->add_option("--seed", seed_override);
    tr->add_option("--resume", resume_path);

    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
    ev->add_option("--config", config_path);
    ev->add_option("--checkpoint", ckpt_path)->required();
    ev->add_option("--manifest", manifest_path)->required();
    ev->add_option("--out", out_path);
    ev->add_flag("--pooled", pooled, "pool pixels across images");
    ev->add_flag("--force-partial", force_partial);

    auto* pr = app.add_subcommand("predict", "segment one image");
    pr->add_option("--config", config_path);
    pr->add_option("--checkpoint", ckpt_path)->required();
    pr->add_option("--image", image_path)->required();
    pr->add_option("--out-prefix", out_prefix)->required();
    pr->add_flag("--force-partial", force_partial);

    auto* pe = app.add_subcommand("perturb-eval", "robustness sweep");
    pe->add_option("--config", config_path);
    pe->add_option("--checkpoint", ckpt_path)->required();
    pe->add_option("--manifest", manifest_path)->required();
    pe->add_option("--kinds", kinds, "comma-separated perturbation kinds");
    pe->add_option("--out", out_path);
    pe->add_flag("--force-partial", force_partial);

    auto* df = app.add_subcommand("dump-features", "write per-scale feature maps");
    df->add_option("--config", config_path);
    df->add_option("--checkpoint", ckpt_path)->required();
    df->add_option("--image", image_path)->required();
    df->add_option("--out-dir", out_dir)->required();
    df->add_flag("--force-partial", force_partial);

    auto* gc = app.add_subcommand("gradcheck", "finite-difference self-test");
    gc->add_option("--config", config_path);
    gc->add_option("--seed", gc_seed);

    try {
        app.parse(argc, argv);
        if (tr->parsed())
            return cmd_train(config_path, manifest_path, out_dir, seed_override, resume_path);
        if (ev->parsed())
            return cmd_eval(config_path, ckpt_path, manifest_path, out_path, pooled,
                            force_partial);
        if (pr->parsed())
            return cmd_predict(config_path, ckpt_path, image_path, out_prefix, force_partial);
        if (pe->parsed())
            return cmd_perturb_eval(config_path, ckpt_path, manifest_path, kinds, out_path,
                                    force_partial);
        if (df->parsed())
            return cmd_dump_features(config_path, ckpt_path, image_path, out_dir,
                                     force_partial);
        if (gc->parsed()) return cmd_gradcheck(config_path, gc_seed);
        return 1;
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 2;
    } catch (const NumericError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 3;
    } catch (const ShapeError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 2;
    }
}
