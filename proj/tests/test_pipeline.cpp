#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "msmg/config.hpp"
#include "msmg/pipeline.hpp"

using namespace msmg;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_config(std::size_t input_size = 32) {
    ModelConfig c;
    c.backbone.stem_channels = 4;
    c.backbone.stage_channels = {4, 8, 8, 8};
    c.backbone.blocks_per_stage = {1, 1, 1, 1};
    c.grained.embed_dims = {8, 8, 8, 8};
    c.grained.heads = {2, 2, 2, 2};
    c.grained.shunt_ratios = {{{2, 1}, {1}, {1}, {1}}};
    c.grained.blocks = {1, 1, 1, 1};
    c.grained.mlp_ratio = 2;
    c.fusion.fuse_channels = {8, 8, 8};
    c.fusion.edge_channels = 4;
    c.input_size = input_size;
    return c;
}

fs::path fresh_dir(const std::string& name) {
    auto dir = fs::temp_directory_path() / "msmg_pipeline" / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

Tensor<float> checker_image(std::size_t h, std::size_t w) {
    Tensor<float> img({3, h, w});
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x)
                img[(c * h + y) * w + x] =
                    ((x / 4 + y / 4) % 2 ? 0.8f : 0.2f) + 0.05f * static_cast<float>(c);
    return img;
}

Tensor<float> rect_mask(std::size_t h, std::size_t w, std::size_t y0, std::size_t x0,
                        std::size_t y1, std::size_t x1) {
    Tensor<float> m({1, h, w});
    for (std::size_t y = y0; y < y1; ++y)
        for (std::size_t x = x0; x < x1; ++x) m[y * w + x] = 1.0f;
    return m;
}

// Independent oracle for the edge band: a pixel is in the band iff some 1
// lies within Chebyshev distance w AND some 0 (or the outside) does too.
bool in_edge_band(const Tensor<float>& mask, long y, long x, int w) {
    const long H = static_cast<long>(mask.dim(1)), W = static_cast<long>(mask.dim(2));
    bool near_one = false, near_zero = false;
    for (long dy = -w; dy <= w; ++dy)
        for (long dx = -w; dx <= w; ++dx) {
            const long yy = y + dy, xx = x + dx;
            if (yy < 0 || yy >= H || xx < 0 || xx >= W)
                near_zero = true;
            else if (mask[static_cast<std::size_t>(yy * W + xx)] > 0.5f)
                near_one = true;
            else
                near_zero = true;
        }
    return near_one && near_zero;
}

Tensor<float> edge_oracle(const Tensor<float>& mask, int w) {
    const std::size_t H = mask.dim(1), W = mask.dim(2);
    Tensor<float> out({1, H / 4, W / 4});
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x)
            if (in_edge_band(mask, static_cast<long>(y), static_cast<long>(x), w))
                out[(y / 4) * (W / 4) + x / 4] = 1.0f;
    return out;
}

}  // namespace

TEST_CASE("manifest loading") {
    auto dir = fresh_dir("manifest");
    save_rgb_png(checker_image(16, 16), (dir / "img0.png").string());
    save_rgb_png(checker_image(16, 16), (dir / "img1.png").string());
    save_gray_png(rect_mask(16, 16, 4, 4, 12, 12), (dir / "mask0.png").string());

    SUBCASE("records parse and relative paths resolve") {
        std::ofstream(dir / "list.tsv") << "s0\timg0.png\tmask0.png\n"
                                        << "s1\timg1.png\tAUTHENTIC\n";
        auto entries = load_manifest((dir / "list.tsv").string());
        REQUIRE(entries.size() == 2);
        CHECK(entries[0].id == "s0");
        CHECK(fs::exists(entries[0].mask_path));
        CHECK(entries[1].mask_path.empty());
    }
    SUBCASE("missing referenced file") {
        std::ofstream(dir / "bad.tsv") << "s0\tnope.png\tmask0.png\n";
        CHECK_THROWS_AS(load_manifest((dir / "bad.tsv").string()), DataError);
    }
    SUBCASE("malformed line") {
        std::ofstream(dir / "short.tsv") << "s0\timg0.png\n";
        CHECK_THROWS_AS(load_manifest((dir / "short.tsv").string()), DataError);
    }
    SUBCASE("empty manifest") {
        std::ofstream(dir / "empty.tsv") << "";
        CHECK_THROWS_AS(load_manifest((dir / "empty.tsv").string()), DataError);
    }
}

TEST_CASE("sample loading resizes and binarizes") {
    auto dir = fresh_dir("samples");
    save_rgb_png(checker_image(20, 24), (dir / "img.png").string());
    save_gray_png(rect_mask(20, 24, 5, 5, 15, 20), (dir / "mask.png").string());

    ManifestEntry e{"s", (dir / "img.png").string(), (dir / "mask.png").string()};
    auto s = load_sample(e, 32);
    CHECK(s.image.shape == std::vector<std::size_t>{3, 32, 32});
    CHECK(s.mask.shape == std::vector<std::size_t>{1, 32, 32});
    CHECK(s.edge.shape == std::vector<std::size_t>{1, 8, 8});
    for (float v : s.mask.data) CHECK((v == 0.0f || v == 1.0f));
    for (float v : s.image.data) {
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
    }

    ManifestEntry authentic{"a", (dir / "img.png").string(), ""};
    auto sa = load_sample(authentic, 32);
    for (float v : sa.mask.data) CHECK(v == 0.0f);
    for (float v : sa.edge.data) CHECK(v == 0.0f);
}

TEST_CASE("edge ground truth derivation") {
    SUBCASE("all-zero mask") {
        auto e = derive_edge_gt(Tensor<float>::zeros({1, 32, 32}));
        for (float v : e.data) CHECK(v == 0.0f);
    }
    SUBCASE("all-one mask leaves a border band only") {
        auto e = derive_edge_gt(Tensor<float>::full({1, 32, 32}, 1.0f), 3);
        // erosion clears a 3-wide frame; pooled by 4 that is the outer ring
        for (std::size_t y = 0; y < 8; ++y)
            for (std::size_t x = 0; x < 8; ++x) {
                const bool ring = y == 0 || y == 7 || x == 0 || x == 7;
                CHECK(e[y * 8 + x] == (ring ? 1.0f : 0.0f));
            }
    }
    SUBCASE("centered square matches the brute-force band oracle") {
        auto m = rect_mask(32, 32, 12, 12, 20, 20);
        auto e = derive_edge_gt(m, 3);
        auto o = edge_oracle(m, 3);
        CHECK(e.data == o.data);
    }
    SUBCASE("random masks match the oracle and band bounds") {
        std::mt19937_64 rng(8);
        std::bernoulli_distribution coin(0.3);
        for (int trial = 0; trial < 10; ++trial) {
            Tensor<float> m({1, 16, 16});
            for (auto& v : m.data) v = coin(rng) ? 1.0f : 0.0f;
            auto e = derive_edge_gt(m, 3);
            CHECK(e.data == edge_oracle(m, 3).data);
            // band lies inside the dilation and outside the erosion
            auto d = morph::dilate(m, 3);
            auto er = morph::erode(m, 3);
            for (std::size_t y = 0; y < 16; ++y)
                for (std::size_t x = 0; x < 16; ++x) {
                    const bool band = d[y * 16 + x] > 0.5f && er[y * 16 + x] <= 0.5f;
                    if (band) CHECK(e[(y / 4) * 4 + x / 4] == 1.0f);
                    if (er[y * 16 + x] > 0.5f && !band)
                        CHECK((d[y * 16 + x] > 0.5f));  // erosion subset of dilation
                }
        }
    }
    SUBCASE("indivisible size rejected") {
        CHECK_THROWS_AS(derive_edge_gt(Tensor<float>::zeros({1, 30, 30})), ShapeError);
    }
}

TEST_CASE("augmentation") {
    SampleRecord s;
    s.id = "s";
    s.image = checker_image(32, 32);
    s.mask = rect_mask(32, 32, 8, 8, 20, 24);
    s.edge = derive_edge_gt(s.mask);

    SUBCASE("all probabilities zero is the identity") {
        std::mt19937_64 rng(9);
        auto out = augment(s, AugmentConfig::off(), rng);
        CHECK(out.image.data == s.image.data);
        CHECK(out.mask.data == s.mask.data);
        CHECK(out.edge.data == s.edge.data);
    }
    SUBCASE("flip twice is the identity and the mask tracks the image") {
        AugmentConfig always = AugmentConfig::off();
        always.p_flip = 1.0;
        std::mt19937_64 rng(10);
        auto once = augment(s, always, rng);
        CHECK(once.image.data != s.image.data);
        for (std::size_t y = 0; y < 32; ++y)
            for (std::size_t x = 0; x < 32; ++x)
                CHECK(once.mask[y * 32 + x] == s.mask[y * 32 + (31 - x)]);
        auto twice = augment(once, always, rng);
        CHECK(twice.image.data == s.image.data);
        CHECK(twice.mask.data == s.mask.data);
        CHECK(twice.edge.data == s.edge.data);
    }
    SUBCASE("deterministic per seed; blur and jpeg leave the mask alone") {
        AugmentConfig cfg;  // defaults: flip 0.5, blur 0.2, jpeg 0.2
        std::mt19937_64 r1(11), r2(11);
        for (int i = 0; i < 10; ++i) {
            auto a = augment(s, cfg, r1);
            auto b = augment(s, cfg, r2);
            CHECK(a.image.data == b.image.data);
            CHECK(a.mask.data == b.mask.data);
            CHECK((a.mask.data == s.mask.data || a.mask.data == hflip(s.mask).data));
        }
    }
}

TEST_CASE("learning rate schedule") {
    TrainConfig cfg;
    cfg.max_steps = 1000;

    SUBCASE("cosine hits both endpoints and never increases") {
        CHECK(lr_at(0, 1000, cfg) == doctest::Approx(1e-4).epsilon(1e-12));
        CHECK(lr_at(1000, 1000, cfg) == doctest::Approx(1e-6).epsilon(1e-12));
        const double mid = lr_at(500, 1000, cfg);
        CHECK(mid == doctest::Approx(0.5 * (1e-4 + 1e-6)));
        double prev = lr_at(0, 1000, cfg);
        for (std::size_t t = 1; t <= 1000; ++t) {
            const double cur = lr_at(t, 1000, cfg);
            CHECK(cur <= prev + 1e-18);
            prev = cur;
        }
    }
    SUBCASE("step decay hits endpoints by decades") {
        cfg.schedule = LrSchedule::step;
        CHECK(lr_at(0, 999, cfg) == doctest::Approx(1e-4));
        CHECK(lr_at(400, 999, cfg) == doctest::Approx(1e-5));
        CHECK(lr_at(999, 999, cfg) == doctest::Approx(1e-6));
        double prev = lr_at(0, 999, cfg);
        for (std::size_t t = 1; t <= 999; ++t) {
            const double cur = lr_at(t, 999, cfg);
            CHECK(cur <= prev);
            prev = cur;
        }
    }
}

TEST_CASE("adam optimizer") {
    SUBCASE("zero gradient leaves parameters unchanged") {
        ParamStore<float> ps;
        std::mt19937_64 rng(12);
        ps.add("w", uniform_init<float>({3, 3}, -1.0, 1.0, rng));
        const auto before = ps.value(0).data;
        AdamState st;
        adam_step(ps, st, 1e-3);
        CHECK(ps.value(0).data == before);
    }
    SUBCASE("single scalar, one step from zero state, by hand") {
        // m1 = 0.1 g, v1 = 0.001 g^2; bias correction recovers g and g^2,
        // so the update is -lr * g / (|g| + eps).
        ParamStore<float> ps;
        ps.add("w", Tensor<float>::full({1}, 0.5f));
        ps.grad(0)[0] = 0.3f;
        AdamState st;
        adam_step(ps, st, 1e-2);
        const double expected = 0.5 - 1e-2 * 0.3 / (0.3 + 1e-8);
        CHECK(ps.value(0)[0] == doctest::Approx(expected).epsilon(1e-6));
        CHECK(st.step == 1);
    }
    SUBCASE("constant gradient drives the step size toward lr") {
        ParamStore<float> ps;
        ps.add("w", Tensor<float>::full({1}, 10.0f));
        AdamState st;
        float prev = ps.value(0)[0];
        double last_delta = 0.0;
        for (int i = 0; i < 500; ++i) {
            ps.grad(0)[0] = 0.02f;
            adam_step(ps, st, 1e-3);
            last_delta = static_cast<double>(prev) - ps.value(0)[0];
            prev = ps.value(0)[0];
        }
        CHECK(last_delta == doctest::Approx(1e-3).epsilon(0.01));
    }
    SUBCASE("non-trainable entries never move") {
        ParamStore<float> ps;
        ps.add("running_mean", Tensor<float>::full({2}, 1.0f), false);
        ps.grad(0).fill(5.0f);
        AdamState st;
        adam_step(ps, st, 1.0);
        CHECK(ps.value(0)[0] == 1.0f);
    }
}

namespace {

std::vector<SampleRecord> synthetic_set(std::size_t n, std::size_t size, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> pos(4, size - 12);
    std::vector<SampleRecord> out;
    for (std::size_t i = 0; i < n; ++i) {
        SampleRecord s;
        s.id = "syn" + std::to_string(i);
        s.image = checker_image(size, size);
        const std::size_t y = pos(rng), x = pos(rng);
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t yy = y; yy < y + 8; ++yy)
                for (std::size_t xx = x; xx < x + 8; ++xx)
                    s.image[(c * size + yy) * size + xx] = c == 0 ? 0.9f : 0.1f;
        s.mask = rect_mask(size, size, y, x, y + 8, x + 8);
        s.edge = derive_edge_gt(s.mask);
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace

TEST_CASE("training loop") {
    auto samples = synthetic_set(2, 32, 100);
    TrainConfig cfg;
    cfg.input_size = 32;
    cfg.batch_size = 2;
    cfg.max_steps = 3;
    cfg.lr_start = 1e-3;
    cfg.lr_end = 1e-5;
    cfg.seed = 5;
    cfg.augment = AugmentConfig::off();

    SUBCASE("losses are finite and logged") {
        MsmgNet<float> model(tiny_config(), 1);
        AdamState opt;
        std::ostringstream log;
        auto hist = train(model, opt, samples, cfg, &log);
        REQUIRE(hist.size() == 3);
        for (const auto& h : hist) {
            CHECK(std::isfinite(h.total));
            CHECK(h.total >= 0.0);
            CHECK(h.total ==
                  doctest::Approx(0.75 * h.seg + 0.25 * h.edge).epsilon(1e-5));
        }
        // one JSON record per step
        std::size_t lines = 0;
        std::string line;
        std::istringstream is(log.str());
        while (std::getline(is, line)) {
            CHECK(line.find("\"step\":") != std::string::npos);
            ++lines;
        }
        CHECK(lines == 3);
        CHECK(opt.step == 3);
    }

    SUBCASE("same seed gives bitwise identical trajectories") {
        MsmgNet<float> a(tiny_config(), 1), b(tiny_config(), 1);
        AdamState oa, ob;
        auto ha = train(a, oa, samples, cfg);
        auto hb = train(b, ob, samples, cfg);
        for (std::size_t i = 0; i < ha.size(); ++i) {
            CHECK(ha[i].total == hb[i].total);  // bitwise
            CHECK(ha[i].seg == hb[i].seg);
        }
        for (std::size_t i = 0; i < a.params().size(); ++i)
            CHECK(a.params().value(static_cast<int>(i)).data ==
                  b.params().value(static_cast<int>(i)).data);
    }

    SUBCASE("resuming past the final step changes nothing") {
        MsmgNet<float> model(tiny_config(), 1);
        AdamState opt;
        train(model, opt, samples, cfg);
        std::vector<std::vector<float>> before;
        for (std::size_t i = 0; i < model.params().size(); ++i)
            before.push_back(model.params().value(static_cast<int>(i)).data);
        auto more = train(model, opt, samples, cfg, nullptr, cfg.max_steps);
        CHECK(more.empty());
        for (std::size_t i = 0; i < model.params().size(); ++i)
            CHECK(model.params().value(static_cast<int>(i)).data == before[i]);
    }

    SUBCASE("optimizer state rides in the checkpoint") {
        MsmgNet<float> model(tiny_config(), 1);
        AdamState opt;
        train(model, opt, samples, cfg);
        auto ck = snapshot_params(model.params(), 1);
        append_optimizer(ck, model.params(), opt);

        MsmgNet<float> fresh(tiny_config(), 2);
        restore_params(fresh.params(), ck, 1);
        auto opt2 = extract_optimizer(ck, fresh.params());
        CHECK(opt2.step == opt.step);
        REQUIRE(opt2.m.size() == opt.m.size());
        for (std::size_t i = 0; i < opt.m.size(); ++i) {
            CHECK(opt2.m[i].data == opt.m[i].data);
            CHECK(opt2.v[i].data == opt.v[i].data);
        }
    }
}

TEST_CASE("evaluation") {
    auto samples = synthetic_set(2, 32, 200);
    SampleRecord authentic;
    authentic.id = "auth";
    authentic.image = checker_image(32, 32);
    authentic.mask = Tensor<float>::zeros({1, 32, 32});
    authentic.edge = derive_edge_gt(authentic.mask);
    samples.push_back(authentic);

    MsmgNet<float> model(tiny_config(), 4);
    auto summary = evaluate(model, samples);
    REQUIRE(summary.per_image.size() == 3);
    CHECK(!summary.per_image[2].auc.has_value());  // single-class ground truth
    CHECK(summary.per_image[0].auc.has_value());
    for (const auto& m : summary.per_image) {
        CHECK(m.f1 >= 0.0);
        CHECK(m.f1 <= 1.0);
        CHECK(m.score >= 0.0);
        CHECK(m.score <= 1.0);
    }
    // AUC mean excludes the undefined image
    if (summary.auc_mean)
        CHECK(*summary.auc_mean ==
              doctest::Approx(0.5 * (*summary.per_image[0].auc + *summary.per_image[1].auc)));

    SUBCASE("pooled mode concatenates pixels") {
        auto pooled = evaluate(model, samples, true);
        CHECK(pooled.per_image.size() == 3);
        CHECK(pooled.auc_mean.has_value());  // pool includes both classes
    }

    SUBCASE("prediction is deterministic") {
        auto p1 = predict(model, samples[0].image);
        auto p2 = predict(model, samples[0].image);
        CHECK(p1.seg.data == p2.seg.data);
        CHECK(p1.edge.data == p2.edge.data);
    }
}
