#include <doctest.h>

#include <cmath>
#include <functional>
#include <random>

#include "hsda/losses.hpp"

using namespace hsda;

namespace {

double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6}); }

double central(const std::function<double()>& f, double& x, double h = 1e-5) {
    const double saved = x;
    x = saved + h;
    const double up = f();
    x = saved - h;
    const double down = f();
    x = saved;
    return (up - down) / (2 * h);
}

FeatureQuad random_quad(std::mt19937_64& rng, std::size_t len = 12) {
    std::normal_distribution<double> n(0.0, 1.0);
    FeatureQuad q;
    for (std::size_t k = 0; k < 4; ++k) {
        q.content[k].resize(len);
        q.style[k].resize(len);
        for (auto& x : q.content[k]) x = n(rng);
        for (auto& x : q.style[k]) x = n(rng);
    }
    return q;
}

}  // namespace

TEST_CASE("softmax from logits") {
    const Dims d{2, 1, 1};
    const std::vector<double> logits{0.0, 800.0, 0.0, 0.0};
    const Prob2 p = Prob2::from_logits(d, logits);
    CHECK(p.bg[0] == 0.5);
    CHECK(p.fg[0] == 0.5);
    CHECK(p.bg[1] == 1.0);
    CHECK(p.fg[1] == 0.0);
    CHECK(std::isfinite(p.log_fg[1]));
    CHECK(p.log_fg[1] == doctest::Approx(-800.0));
    CHECK_THROWS_AS(Prob2::from_logits(d, std::vector<double>(3)), LossError);
}

TEST_CASE("dice+ce at p = 0.5 with half the voxels labelled is 0.5 + ln 2") {
    const Dims d = cube(4);
    const Prob2 p = Prob2::from_logits(d, std::vector<double>(2 * d.count(), 0.0));
    SegMask y(d);
    for (std::size_t i = 0; i < y.data.size(); i += 2) y.data[i] = 1;
    const LogitLoss l = dice_ce_loss(p, y);
    CHECK(l.dice == doctest::Approx(0.5).epsilon(1e-6));
    CHECK(l.cross_entropy == doctest::Approx(std::log(2.0)).epsilon(1e-14));
    CHECK(l.value == doctest::Approx(1.1931).epsilon(1e-4));
}

TEST_CASE("dice+ce is near zero for a confident correct prediction and positive otherwise") {
    const Dims d = cube(4);
    const std::size_t n = d.count();
    SegMask y(d);
    for (std::size_t i = 0; i < n; i += 3) y.data[i] = 1;
    std::vector<double> logits(2 * n);
    for (std::size_t i = 0; i < n; ++i) logits[n + i] = y.data[i] ? 30.0 : -30.0;
    CHECK(dice_ce_loss(Prob2::from_logits(d, logits), y).value < 1e-9);
    for (std::size_t i = 0; i < n; ++i) logits[n + i] = -logits[n + i];
    CHECK(dice_ce_loss(Prob2::from_logits(d, logits), y).value > 1.0);
}

TEST_CASE("dice+ce with an empty label is finite") {
    const Dims d = cube(2);
    const Prob2 p = Prob2::from_logits(d, std::vector<double>(16, 0.0));
    const LogitLoss l = dice_ce_loss(p, SegMask(d));
    CHECK(std::isfinite(l.value));
    for (double g : l.grad_logits) CHECK(std::isfinite(g));
}

TEST_CASE("dice+ce rejects mismatched dims and NaN") {
    const Prob2 p = Prob2::from_logits(cube(2), std::vector<double>(16, 0.0));
    CHECK_THROWS_AS(dice_ce_loss(p, SegMask(cube(4))), LossError);
    Prob2 q = p;
    q.fg[3] = NAN;
    CHECK_THROWS_AS(dice_ce_loss(q, SegMask(cube(2))), LossError);
}

TEST_CASE("dice+ce gradient matches central differences") {
    std::mt19937_64 rng(4);
    std::normal_distribution<double> n(0.0, 2.0);
    const Dims d{4, 2, 3};
    std::vector<double> logits(2 * d.count());
    for (auto& l : logits) l = n(rng);
    SegMask y(d);
    for (auto& v : y.data) v = rng() % 3 == 0;
    const auto f = [&] { return dice_ce_loss(Prob2::from_logits(d, logits), y).value; };
    const auto g = dice_ce_loss(Prob2::from_logits(d, logits), y).grad_logits;
    double worst = 0;
    for (std::size_t i = 0; i < logits.size(); ++i) worst = std::max(worst, rel_err(g[i], central(f, logits[i])));
    CHECK(worst < 1e-4);
}

TEST_CASE("probability input falls back to the log floor") {
    const Dims d{1, 1, 1};
    Prob2 p{d, {1.0}, {0.0}, {}, {}};
    SegMask y(d);
    y.data[0] = 1;
    const LogitLoss l = dice_ce_loss(p, y);
    CHECK(l.cross_entropy == doctest::Approx(-std::log(log_floor)));
}

TEST_CASE("semi mse value, detach and gradient") {
    const std::vector<double> s{0.2, 0.4}, st{0.1, 0.8}, ts{1.0, 0.0}, t{0.5, 0.5};
    const SemiMseLoss l = semi_mse_loss(s, st, ts, t, true);
    CHECK(l.value == doctest::Approx((0.01 + 0.16) / 2 + (0.25 + 0.25) / 2));
    for (double g : l.grad_s) CHECK(g == 0.0);
    for (double g : l.grad_ts) CHECK(g == 0.0);
    CHECK(l.grad_st[1] == doctest::Approx(0.4));

    std::mt19937_64 rng(8);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::array<std::vector<double>, 4> p;
    for (auto& v : p) {
        v.resize(20);
        for (auto& x : v) x = u(rng);
    }
    const auto f = [&] { return semi_mse_loss(p[0], p[1], p[2], p[3], false).value; };
    const auto g = semi_mse_loss(p[0], p[1], p[2], p[3], false);
    const std::array<const std::vector<double>*, 4> gs{&g.grad_s, &g.grad_st, &g.grad_ts, &g.grad_t};
    double worst = 0;
    for (int k = 0; k < 4; ++k)
        for (std::size_t i = 0; i < 20; ++i) worst = std::max(worst, rel_err((*gs[k])[i], central(f, p[k][i])));
    CHECK(worst < 1e-4);

    CHECK(semi_mse_loss(p[0], p[0], p[3], p[3]).value == 0.0);
    CHECK_THROWS_AS(semi_mse_loss(s, std::vector<double>{1.0}, ts, t), LossError);
}

TEST_CASE("cosine scale invariance and bounds") {
    std::mt19937_64 rng(1);
    std::normal_distribution<double> n(0.0, 1.0);
    std::vector<double> u(9), v(9);
    for (auto& x : u) x = n(rng);
    for (auto& x : v) x = n(rng);
    const double h = cosine(u, v);
    std::vector<double> u2(u), v2(v);
    for (auto& x : u2) x *= 3.7;
    for (auto& x : v2) x *= 0.02;
    CHECK(std::abs(cosine(u2, v2) - h) < 1e-12);
    CHECK(cosine(u, u) == doctest::Approx(1.0));
    std::vector<double> neg(u);
    for (auto& x : neg) x = -x;
    CHECK(cosine(u, neg) == doctest::Approx(-1.0));
    CHECK_THROWS_AS(cosine(u, std::vector<double>(9, 0.0)), LossError);
}

TEST_CASE("transwarp at the identical-feature point with tau = 1") {
    FeatureQuad q;
    for (int k = 0; k < 4; ++k) q.content[k] = q.style[k] = {1.0, -2.0, 0.5};
    const TranswarpLoss l = transwarp_loss(q, 1.0);
    CHECK(l.terms.pos_content == doctest::Approx(2.0));
    CHECK(l.terms.neg_content == doctest::Approx(2.0));
    CHECK(l.terms.pos_style == doctest::Approx(4.0));
    const double e2 = std::exp(2.0), e4 = std::exp(4.0);
    const double direct = -std::log((e2 + e4) / (2 * e2 + e4));
    CHECK(std::abs(l.value - direct) < 1e-14);
    CHECK(std::abs(l.value - 0.11261675517891194) < 1e-14);
    CHECK(std::abs(l.value - 0.11265) < 1e-4);
}

TEST_CASE("transwarp with tau = 1 is nonnegative on fuzzed quads") {
    std::mt19937_64 rng(99);
    for (int i = 0; i < 1000; ++i) {
        const FeatureQuad q = random_quad(rng, 1 + rng() % 16);
        CHECK(transwarp_loss(q, 1.0).value >= 0.0);
    }
}

TEST_CASE("transwarp strictly increases with neg_c") {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(-2.0, 2.0);
    for (TauMode mode : {TauMode::printed, TauMode::infonce})
        for (int i = 0; i < 100; ++i) {
            TranswarpTerms t{u(rng), u(rng), 2.0 * u(rng)};
            const double h = 1e-6;
            const double lo = transwarp_from_terms(t, 0.5, mode);
            t.neg_content += h;
            CHECK(transwarp_from_terms(t, 0.5, mode) > lo);
        }
}

TEST_CASE("transwarp is invariant to positive rescaling of any feature") {
    std::mt19937_64 rng(6);
    FeatureQuad q = random_quad(rng);
    const double base = transwarp_loss(q, 0.5).value;
    for (int k = 0; k < 4; ++k) {
        FeatureQuad r = q;
        for (auto& x : r.content[k]) x *= 4.5;
        for (auto& x : r.style[(k + 1) % 4]) x *= 0.3;
        CHECK(std::abs(transwarp_loss(r, 0.5).value - base) < 1e-9);
    }
}

TEST_CASE("transwarp swap facts") {
    std::mt19937_64 rng(7);
    for (int i = 0; i < 50; ++i) {
        const FeatureQuad q = random_quad(rng);
        const TranswarpTerms t = transwarp_terms(q);

        // exchanging the two restyled content slots exchanges pos_c and neg_c
        FeatureQuad a = q;
        std::swap(a.content[slot::st], a.content[slot::ts]);
        const TranswarpTerms ta = transwarp_terms(a);
        CHECK(ta.pos_content == t.neg_content);
        CHECK(ta.neg_content == t.pos_content);

        // the role swap s<->ts, st<->t (content and style) keeps every sum
        FeatureQuad b = q;
        std::swap(b.content[slot::s], b.content[slot::ts]);
        std::swap(b.content[slot::st], b.content[slot::t]);
        std::swap(b.style[slot::s], b.style[slot::ts]);
        std::swap(b.style[slot::st], b.style[slot::t]);
        const TranswarpTerms tb = transwarp_terms(b);
        CHECK(std::abs(tb.pos_content - t.pos_content) < 1e-14);
        CHECK(std::abs(tb.neg_content - t.neg_content) < 1e-14);
        CHECK(std::abs(tb.pos_style - t.pos_style) < 1e-14);
        CHECK(std::abs(transwarp_loss(b, 0.5).value - transwarp_loss(q, 0.5).value) < 1e-13);
    }
}

TEST_CASE("transwarp gradients match central differences in both tau modes") {
    std::mt19937_64 rng(11);
    for (TauMode mode : {TauMode::printed, TauMode::infonce}) {
        FeatureQuad q = random_quad(rng, 10);
        const auto f = [&] { return transwarp_loss(q, 0.5, mode).value; };
        const TranswarpLoss g = transwarp_loss(q, 0.5, mode);
        double worst = 0;
        for (int k = 0; k < 4; ++k)
            for (std::size_t i = 0; i < 10; ++i) {
                worst = std::max(worst, rel_err(g.grad_content[k][i], central(f, q.content[k][i])));
                worst = std::max(worst, rel_err(g.grad_style[k][i], central(f, q.style[k][i])));
            }
        CHECK(worst < 1e-4);
    }
}

TEST_CASE("transwarp tau modes differ only in where tau enters") {
    const TranswarpTerms t{1.2, -0.3, 2.5};
    const double a = std::exp(1.2), b = std::exp(2.5), c = std::exp(-0.3);
    CHECK(transwarp_from_terms(t, 0.5, TauMode::printed) == doctest::Approx(-std::log((a + b) / 0.5 / (a + b + c))));
    const double a2 = std::exp(2.4), b2 = std::exp(5.0), c2 = std::exp(-0.6);
    CHECK(transwarp_from_terms(t, 0.5, TauMode::infonce) == doctest::Approx(-std::log((a2 + b2) / (a2 + b2 + c2))));
    CHECK(parse_tau_mode("infonce") == TauMode::infonce);
    CHECK_THROWS(parse_tau_mode("x"));
}

TEST_CASE("feature quad validation") {
    std::mt19937_64 rng(2);
    FeatureQuad q = random_quad(rng);
    q.content[2].assign(12, 0.0);
    CHECK_THROWS_AS(transwarp_loss(q, 0.5), LossError);
    q = random_quad(rng);
    q.style[1].pop_back();
    CHECK_THROWS_AS(transwarp_loss(q, 0.5), LossError);
    q = random_quad(rng);
    q.content[0][0] = INFINITY;
    CHECK_THROWS_AS(transwarp_loss(q, 0.5), LossError);
}

TEST_CASE("composite loss weights") {
    const LossWeights w;
    CHECK(w.lambda1 == 0.8);
    CHECK(w.lambda2 == 0.1);
    CHECK(w.lambda3 == 0.1);
    CHECK(total_loss(1.0, 2.0, 3.0, w) == doctest::Approx(0.8 + 0.2 + 0.3));
    CHECK_THROWS_AS((LossWeights{0, 0, 0, 0.5}.validate()), LossError);
    CHECK_THROWS_AS((LossWeights{1, 0, 0, 0.0}.validate()), LossError);
}
