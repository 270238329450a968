#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "hsda/gradcheck.hpp"
#include "hsda/model.hpp"

using namespace hsda;
namespace fs = std::filesystem;

namespace {

Volume randn_volume(Dims d, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, 1.0);
    Volume v(d);
    for (auto& x : v.data) x = n(rng);
    return v;
}

}  // namespace

TEST_CASE("parameter count and layout") {
    const NetSpec spec;
    CHECK(spec.param_count() == 21562);
    const ParamLayout l = ParamLayout::of(spec);
    CHECK(l.total == 21562);
    CHECK(l.w1.size == 8 * 27);
    CHECK(l.w2.size == 16 * 8 * 27);
    CHECK(l.w3.size == 32 * 16 * 27);
    CHECK(l.bh.size == 2);
    CHECK(l.bh.offset + l.bh.size == l.total);
    CHECK(spec.latent_dims() == cube(8));
    CHECK(spec.latent_size() == 32 * 512);
}

TEST_CASE("net spec validation") {
    CHECK_THROWS_AS((NetSpec{cube(8), 8, 16, 32}.validate()), ModelError);
    CHECK_THROWS_AS((NetSpec{Dims{32, 24, 32}, 8, 16, 32}.validate()), ModelError);
    CHECK_THROWS_AS((NetSpec{cube(32), 0, 16, 32}.validate()), ModelError);
    CHECK_NOTHROW((NetSpec{Dims{16, 32, 64}, 2, 3, 4}.validate()));
}

TEST_CASE("init is seeded, bounded by the fan-in scale, biases zero") {
    const NetSpec spec;
    const ParamVector a = init_params(spec, 5), b = init_params(spec, 5), c = init_params(spec, 6);
    CHECK(a.values == b.values);
    CHECK(a.values != c.values);
    const ParamLayout l = ParamLayout::of(spec);
    const double bound1 = std::sqrt(6.0 / 27.0);
    for (std::size_t i = 0; i < l.w1.size; ++i) CHECK(std::abs(a.values[l.w1.offset + i]) <= bound1);
    const double bound3 = std::sqrt(6.0 / (16.0 * 27.0));
    for (std::size_t i = 0; i < l.w3.size; ++i) CHECK(std::abs(a.values[l.w3.offset + i]) <= bound3);
    for (auto s : {l.b1, l.b2, l.b3, l.bp, l.b4, l.bh})
        for (std::size_t i = 0; i < s.size; ++i) CHECK(a.values[s.offset + i] == 0.0);
}

TEST_CASE("zero parameters predict 0.5 everywhere") {
    const NetSpec spec{cube(16), 2, 3, 4};
    const std::vector<double> w(spec.param_count(), 0.0);
    const ForwardTrace tr = forward(spec, w, randn_volume(cube(16), 1));
    for (double p : tr.probs.fg) CHECK(p == 0.5);
}

TEST_CASE("forward shapes and determinism") {
    const NetSpec spec{cube(16), 4, 6, 8};
    const ParamVector p = init_params(spec, 1);
    const Volume x = randn_volume(cube(16), 2);
    const ForwardTrace a = forward(spec, p, x), b = forward(spec, p, x);
    CHECK(a.logits == b.logits);
    CHECK(a.a1.size() == 4 * 4096);
    CHECK(a.p1.size() == 4 * 512);
    CHECK(a.a2.size() == 6 * 512);
    CHECK(a.latent.size() == 8 * 64);
    CHECK(a.logits.size() == 2 * 4096);
    for (std::size_t i = 0; i < 4096; ++i) CHECK(a.probs.fg[i] + a.probs.bg[i] == doctest::Approx(1.0));
    for (double v : a.latent) CHECK(v >= 0.0);
}

TEST_CASE("forward rejects bad inputs") {
    const NetSpec spec{cube(16), 2, 3, 4};
    const ParamVector p = init_params(spec, 1);
    CHECK_THROWS_AS(forward(spec, p, Volume(cube(32))), ModelError);
    CHECK_THROWS_AS(forward(spec, std::vector<double>(5), Volume(cube(16))), ModelError);
    Volume bad(cube(16));
    bad.data[7] = NAN;
    CHECK_THROWS_AS(forward(spec, p, bad), ModelError);
}

TEST_CASE("backward matches central differences for linear upstreams") {
    const NetSpec spec{cube(16), 2, 3, 4};
    const std::vector<double> w = init_params(spec, 3).values;
    const Volume x = randn_volume(cube(16), 4);
    std::mt19937_64 rng(5);
    std::normal_distribution<double> n(0.0, 1.0);
    Upstream up;
    up.d_logits.resize(2 * 4096);
    up.d_latent.resize(spec.latent_size());
    for (auto& v : up.d_logits) v = n(rng) * 1e-2;
    for (auto& v : up.d_latent) v = n(rng);

    const auto f = [&](const std::vector<double>& ww) {
        const ForwardTrace tr = forward(spec, ww, x);
        double s = 0;
        for (std::size_t i = 0; i < tr.logits.size(); ++i) s += tr.logits[i] * up.d_logits[i];
        for (std::size_t i = 0; i < tr.latent.size(); ++i) s += tr.latent[i] * up.d_latent[i];
        return s;
    };
    std::vector<double> grad(w.size(), 0.0);
    backward(w, forward(spec, w, x), up, grad);

    const ParamLayout l = ParamLayout::of(spec);
    double worst = 0;
    for (auto s : {l.w1, l.b1, l.w2, l.b2, l.w3, l.b3, l.wp, l.bp, l.w4, l.b4, l.wh, l.bh})
        for (std::size_t i : {s.offset, s.offset + s.size / 2, s.offset + s.size - 1}) {
            std::vector<double> wp(w), wm(w);
            const double h = 1e-7;
            wp[i] += h, wm[i] -= h;
            const double num = (f(wp) - f(wm)) / (2 * h);
            worst = std::max(worst, std::abs(num - grad[i]) / std::max({std::abs(num), std::abs(grad[i]), 1e-6}));
        }
    CHECK(worst < 1e-4);
}

TEST_CASE("fg probability gradient through the softmax") {
    const Dims d{3, 1, 1};
    const std::vector<double> logits{0.1, -0.4, 2.0, 1.0, 0.3, -1.0};
    const Prob2 p = Prob2::from_logits(d, logits);
    const std::vector<double> dfg{1.0, -2.0, 0.5};
    std::vector<double> dl(6, 0.0);
    fg_prob_grad_to_logits(p, dfg, dl);
    for (std::size_t i = 0; i < 3; ++i) {
        const double j = p.fg[i] * p.bg[i];
        CHECK(dl[3 + i] == doctest::Approx(dfg[i] * j));
        CHECK(dl[i] == doctest::Approx(-dfg[i] * j));
    }
}

TEST_CASE("gradient suite passes on seeded inputs") {
    for (std::uint64_t seed : {1u, 2u}) {
        const auto rows = run_gradcheck(seed);
        REQUIRE(rows.size() == 5);
        for (const auto& r : rows) {
            INFO(r.loss);
            CHECK(r.checked > 0);
            CHECK(r.max_rel_err < (r.loss == "end_to_end" ? 1e-3 : 1e-4));
        }
        CHECK(rows[4].checked == 25);
    }
}

TEST_CASE("adam first step is lr times the gradient sign") {
    ParamVector p(3);
    p.grads = {2.0, -0.5, 0.0};
    adam_step(p, AdamOptions{0.1});
    CHECK(p.values[0] == doctest::Approx(-0.1).epsilon(1e-6));
    CHECK(p.values[1] == doctest::Approx(0.1).epsilon(1e-6));
    CHECK(p.values[2] == 0.0);
    CHECK(p.step == 1);
    for (double g : p.grads) CHECK(g == 0.0);

    p.grads = {NAN, 0.0, 0.0};
    CHECK_THROWS_AS(adam_step(p, AdamOptions{}), ModelError);
}

TEST_CASE("adam reduces a quadratic") {
    ParamVector p(1);
    p.values[0] = 3.0;
    for (int i = 0; i < 500; ++i) {
        p.grads[0] = 2.0 * p.values[0];
        adam_step(p, AdamOptions{0.05});
    }
    CHECK(std::abs(p.values[0]) < 0.05);
}

TEST_CASE("ema alpha schedule") {
    CHECK(ema_alpha(0, 0.99) == 0.0);
    CHECK(ema_alpha(9, 0.99) == doctest::Approx(0.9));
    CHECK(ema_alpha(99, 0.99) == doctest::Approx(0.99));
    CHECK(ema_alpha(1000, 0.99) == 0.99);
    CHECK(ema_alpha(1, 0.3) == 0.3);
}

TEST_CASE("ema update direction per role") {
    ParamVector s(2), t(2);
    s.values = {1.0, 1.0};
    t.values = {0.0, 2.0};

    ParamVector s1 = s, t1 = t;
    ema_update(s1, t1, 0, 0.99, EmaRole::as_printed);
    CHECK(s1.values == t.values);  // alpha 0: hard copy
    CHECK(t1.values == t.values);

    s1 = s, t1 = t;
    ema_update(s1, t1, 9, 0.99, EmaRole::as_printed);
    CHECK(s1.values[0] == doctest::Approx(0.9));
    CHECK(s1.values[1] == doctest::Approx(1.1));

    s1 = s, t1 = t;
    ema_update(s1, t1, 9, 0.99, EmaRole::teacher_is_ema);
    CHECK(s1.values == s.values);
    CHECK(t1.values[0] == doctest::Approx(0.1));
    CHECK(t1.values[1] == doctest::Approx(1.9));

    CHECK(parse_ema_role("teacher_is_ema") == EmaRole::teacher_is_ema);
    CHECK_THROWS(parse_ema_role("both"));
    ParamVector short_vec(1);
    CHECK_THROWS_AS(ema_update(short_vec, t, 1, 0.99), ModelError);
}

TEST_CASE("checkpoint round trip and rejection") {
    const NetSpec spec{cube(16), 2, 3, 4};
    const ParamVector p = init_params(spec, 7);
    const auto bytes = encode_checkpoint(spec, p.values);
    CHECK(bytes.size() == 5 + 6 * 4 + 8 + 8 * spec.param_count());
    const Checkpoint c = decode_checkpoint(bytes);
    CHECK(c.spec == spec);
    CHECK(c.values == p.values);

    const fs::path path = fs::temp_directory_path() / "hsda_tests_model.ckpt";
    save_checkpoint(path, spec, p.values);
    CHECK(load_checkpoint(path).values == p.values);

    auto bad = bytes;
    bad[0] = 'X';
    CHECK_THROWS_AS(decode_checkpoint(bad), ModelError);
    bad = bytes;
    bad.pop_back();
    CHECK_THROWS_AS(decode_checkpoint(bad), ModelError);
    bad = bytes;
    bad.push_back(0);
    CHECK_THROWS_AS(decode_checkpoint(bad), ModelError);
    CHECK_THROWS_AS(encode_checkpoint(spec, std::vector<double>(3)), ModelError);
    CHECK_THROWS_AS(load_checkpoint(fs::temp_directory_path() / "hsda_no_such.ckpt"), ModelError);
}
