#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "msmg/objective.hpp"
#include "gradcheck_util.hpp"

using namespace msmg;
namespace op = msmg::ops;

namespace {

template <class T>
double dice_value(const Tensor<T>& pred, const Tensor<T>& target, T smooth) {
    Graph<T> g;
    return g.value(dice_loss(g, g.leaf(pred), g.leaf(target), smooth))[0];
}

}  // namespace

TEST_CASE("dice loss closed-form values") {
    SUBCASE("exact binary match gives zero loss") {
        Tensor<double> y({1, 1, 2, 2});
        y.data = {1, 0, 1, 0};
        CHECK(dice_value(y, y, 1.0) == doctest::Approx(0.0));
        CHECK(dice_value(y, y, 0.0) == doctest::Approx(0.0));
    }
    SUBCASE("uniform half prediction against a half-full mask") {
        Tensor<double> p = Tensor<double>::full({1, 1, 2, 2}, 0.5);
        Tensor<double> y({1, 1, 2, 2});
        y.data = {1, 1, 0, 0};
        CHECK(dice_value(p, y, 0.0) == doctest::Approx(0.5));
    }
    SUBCASE("empty prediction against an empty mask") {
        auto z = Tensor<double>::zeros({2, 1, 3, 3});
        CHECK(dice_value(z, z, 1.0) == doctest::Approx(0.0));
        CHECK(dice_value(z, z, 0.25) == doctest::Approx(0.0));
    }
    SUBCASE("shape mismatch rejected") {
        Graph<double> g;
        int a = g.leaf(Tensor<double>::zeros({1, 1, 2, 2}));
        int b = g.leaf(Tensor<double>::zeros({1, 1, 2, 3}));
        CHECK_THROWS_AS(dice_loss(g, a, b), ShapeError);
    }
}

TEST_CASE("dice loss properties") {
    std::mt19937_64 rng(41);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::bernoulli_distribution coin(0.4);

    SUBCASE("bounded in [0,1] and invariant under joint pixel permutation") {
        for (int trial = 0; trial < 20; ++trial) {
            Tensor<double> p({1, 1, 3, 4}), y({1, 1, 3, 4});
            for (auto& v : p.data) v = unit(rng);
            for (auto& v : y.data) v = coin(rng) ? 1.0 : 0.0;
            const double d = dice_value(p, y, 1.0);
            CHECK(d >= 0.0);
            CHECK(d <= 1.0);
            std::vector<std::size_t> perm(p.size());
            std::iota(perm.begin(), perm.end(), 0);
            std::shuffle(perm.begin(), perm.end(), rng);
            Tensor<double> ps = p, ys = y;
            for (std::size_t i = 0; i < perm.size(); ++i) {
                ps.data[i] = p.data[perm[i]];
                ys.data[i] = y.data[perm[i]];
            }
            CHECK(dice_value(ps, ys, 1.0) == doctest::Approx(d));
        }
    }

    SUBCASE("batch loss is the mean of per-sample losses") {
        Tensor<double> p({2, 1, 2, 2}), y({2, 1, 2, 2});
        for (auto& v : p.data) v = unit(rng);
        y.data = {1, 0, 0, 1, 0, 0, 1, 1};
        Tensor<double> p0({1, 1, 2, 2}), y0({1, 1, 2, 2}), p1({1, 1, 2, 2}), y1({1, 1, 2, 2});
        for (std::size_t i = 0; i < 4; ++i) {
            p0.data[i] = p.data[i];
            y0.data[i] = y.data[i];
            p1.data[i] = p.data[4 + i];
            y1.data[i] = y.data[4 + i];
        }
        CHECK(dice_value(p, y, 1.0) ==
              doctest::Approx(0.5 * (dice_value(p0, y0, 1.0) + dice_value(p1, y1, 1.0))));
    }

    SUBCASE("gradient matches finite differences") {
        for (int trial = 0; trial < 5; ++trial) {
            Tensor<double> y({2, 1, 3, 3});
            for (auto& v : y.data) v = coin(rng) ? 1.0 : 0.0;
            auto p = random_tensor({2, 1, 3, 3}, rng, 0.05, 0.95);
            auto build = [&](Graph<double>& g, const std::vector<int>& in) {
                return dice_loss(g, in[0], g.leaf(y), 1.0);
            };
            CHECK(graph_gradcheck(build, {p}, rng) < 1e-6);
        }
    }

    SUBCASE("raising a predicted pixel where the mask is 1 lowers the loss") {
        Tensor<double> p = Tensor<double>::full({1, 1, 2, 2}, 0.5);
        Tensor<double> y({1, 1, 2, 2});
        y.data = {1, 0, 1, 0};
        const double before = dice_value(p, y, 1.0);
        p.data[0] = 0.9;
        CHECK(dice_value(p, y, 1.0) < before);
    }
}

TEST_CASE("combined loss is the stated convex combination") {
    // uniform prediction p over n pixels with k positives and no smoothing
    // gives 1 - 2pk/(np + k); p = 0.75 and p = 0.125 pin the two terms at
    // 0.4 and 0.8.
    Tensor<double> y({1, 1, 2, 2});
    y.data = {1, 1, 0, 0};
    auto run = [&](LossWeights w) {
        Graph<double> g;
        int seg = g.leaf(Tensor<double>::full({1, 1, 2, 2}, 0.75));
        int edg = g.leaf(Tensor<double>::full({1, 1, 2, 2}, 0.125));
        int gt = g.leaf(y);
        auto l = combined_loss(g, seg, edg, gt, gt, w, 0.0);
        return std::array<double, 3>{g.value(l.total)[0], g.value(l.seg)[0], g.value(l.edge)[0]};
    };
    auto [total, seg, edge] = run({0.75, 0.25});
    CHECK(seg == doctest::Approx(0.4));
    CHECK(edge == doctest::Approx(0.8));
    CHECK(total == doctest::Approx(0.5));

    auto seg_only = run({1.0, 0.0});
    CHECK(seg_only[0] == doctest::Approx(seg_only[1]));

    SUBCASE("zero terms give zero total") {
        Graph<double> g;
        Tensor<double> bin({1, 1, 2, 2});
        bin.data = {1, 0, 0, 1};
        int b = g.leaf(bin);
        auto l = combined_loss(g, b, b, b, b, LossWeights{0.75, 0.25}, 1.0);
        CHECK(g.value(l.total)[0] == doctest::Approx(0.0));
    }
    SUBCASE("invalid weights rejected") {
        CHECK_THROWS_AS(LossWeights({-0.1, 1.1}).validate(), ConfigError);
        CHECK_THROWS_AS(LossWeights({0.5, 0.4}).validate(), ConfigError);
        CHECK_NOTHROW(LossWeights{}.validate());
    }
}

TEST_CASE("pixel F1") {
    Tensor<double> p({1, 1, 1, 4}), y({1, 1, 1, 4});

    p.data = {0.9, 0.9, 0.1, 0.1};
    y.data = {1, 0, 0, 0};
    CHECK(pixel_f1(p, y) == doctest::Approx(2.0 / 3.0));

    y.data = {1, 1, 0, 0};
    CHECK(pixel_f1(p, y) == doctest::Approx(1.0));

    SUBCASE("degenerate cases") {
        auto z = Tensor<double>::zeros({1, 1, 1, 4});
        CHECK(pixel_f1(z, z) == doctest::Approx(1.0));
        CHECK(pixel_f1(z, y) == doctest::Approx(0.0));
        CHECK(pixel_f1(p, z) == doctest::Approx(0.0));
    }

    SUBCASE("invariant to score changes that do not cross the threshold") {
        Tensor<double> q = p;
        q.data = {0.51, 0.99, 0.49, 0.02};
        CHECK(pixel_f1(q, y) == doctest::Approx(pixel_f1(p, y)));
    }
}

namespace {

// independent oracle: enumerate every (positive, negative) pair
template <class T>
std::optional<double> auc_pairwise(const Tensor<T>& pred, const Tensor<T>& gt) {
    std::vector<double> pos, neg;
    for (std::size_t i = 0; i < pred.size(); ++i)
        (gt[i] > T(0.5) ? pos : neg).push_back(static_cast<double>(pred[i]));
    if (pos.empty() || neg.empty()) return std::nullopt;
    double wins = 0.0;
    for (double a : pos)
        for (double b : neg) wins += a > b ? 1.0 : (a == b ? 0.5 : 0.0);
    return wins / (static_cast<double>(pos.size()) * static_cast<double>(neg.size()));
}

}  // namespace

TEST_CASE("pixel AUC") {
    Tensor<double> p({1, 1, 1, 4}), y({1, 1, 1, 4});
    y.data = {1, 1, 0, 0};

    p.data = {0.9, 0.8, 0.2, 0.1};
    CHECK(pixel_auc(p, y).value() == doctest::Approx(1.0));

    p.data = {0.1, 0.2, 0.8, 0.9};
    CHECK(pixel_auc(p, y).value() == doctest::Approx(0.0));

    p.data = {0.5, 0.5, 0.5, 0.5};
    CHECK(pixel_auc(p, y).value() == doctest::Approx(0.5));

    SUBCASE("single-class ground truth is reported missing") {
        auto z = Tensor<double>::zeros({1, 1, 1, 4});
        CHECK(!pixel_auc(p, z).has_value());
        CHECK(!pixel_auc(p, Tensor<double>::full({1, 1, 1, 4}, 1.0)).has_value());
    }

    SUBCASE("matches pairwise enumeration on random cases with ties") {
        std::mt19937_64 rng(42);
        std::uniform_int_distribution<int> npix(2, 50);
        std::uniform_int_distribution<int> level(0, 7);  // coarse scores force ties
        std::bernoulli_distribution coin(0.5);
        int compared = 0;
        for (int trial = 0; trial < 200; ++trial) {
            const std::size_t n = static_cast<std::size_t>(npix(rng));
            Tensor<double> pr({1, 1, 1, n}), gt({1, 1, 1, n});
            for (auto& v : pr.data) v = level(rng) / 7.0;
            for (auto& v : gt.data) v = coin(rng) ? 1.0 : 0.0;
            auto fast = pixel_auc(pr, gt);
            auto slow = auc_pairwise(pr, gt);
            REQUIRE(fast.has_value() == slow.has_value());
            if (fast) {
                CHECK(*fast == doctest::Approx(*slow).epsilon(1e-12));
                ++compared;
            }
        }
        CHECK(compared >= 100);
    }

    SUBCASE("invariant under strictly monotone score transforms") {
        std::mt19937_64 rng(43);
        std::uniform_real_distribution<double> unit(0.0, 1.0);
        std::bernoulli_distribution coin(0.5);
        for (int trial = 0; trial < 20; ++trial) {
            Tensor<double> pr({1, 1, 1, 16}), gt({1, 1, 1, 16});
            for (auto& v : pr.data) v = unit(rng);
            gt.data[0] = 1.0;
            gt.data[1] = 0.0;
            for (std::size_t i = 2; i < 16; ++i) gt.data[i] = coin(rng) ? 1.0 : 0.0;
            Tensor<double> warped = pr;
            for (auto& v : warped.data) v = std::exp(3.0 * v) - 0.5;
            CHECK(pixel_auc(warped, gt).value() ==
                  doctest::Approx(pixel_auc(pr, gt).value()).epsilon(1e-12));
        }
    }
}

TEST_CASE("image-level score is the segmentation map maximum") {
    auto half = Tensor<double>::full({1, 1, 4, 4}, 0.5);
    CHECK(image_score(half) == doctest::Approx(0.5));

    Tensor<double> peak = half;
    peak.at4(0, 0, 2, 1) = 0.99;
    CHECK(image_score(peak) == doctest::Approx(0.99));

    // raising any pixel never lowers the score
    Tensor<double> raised = peak;
    raised.at4(0, 0, 0, 0) = 0.7;
    CHECK(image_score(raised) >= image_score(peak));
}
