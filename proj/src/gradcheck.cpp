#include "hsda/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <random>

#include "hsda/trainer.hpp"

namespace hsda {

double relative_error(double analytic, double numeric) {
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
}

EndToEndProblem EndToEndProblem::make(std::uint64_t seed, std::uint32_t patch) {
    EndToEndProblem p;
    p.spec = NetSpec{cube(patch), 8, 16, 32};
    const double rmax = std::min(2.0, patch / 4.0);
    const auto src = generate_phantom(PhantomSpec{cube(patch), 2, 1.0, rmax, Modality::A, seed});
    const auto tgt = generate_phantom(PhantomSpec{cube(patch), 2, 1.0, rmax, Modality::B, seed + 1});
    TrainConfig cfg;
    cfg.patch = patch;
    const StyledInputs raw = make_inputs(src.volume, tgt.volume, cfg);
    p.inputs = {normalize(raw.s), normalize(raw.st), normalize(raw.ts), normalize(raw.t)};
    p.label = src.mask;
    return p;
}

double EndToEndProblem::value(std::span<const double> params) const {
    std::vector<double> scratch(params.size(), 0.0);
    return value_and_grad(params, scratch);
}

double EndToEndProblem::value_and_grad(std::span<const double> params, std::span<double> grad) const {
    const Dims ld = spec.latent_dims();
    const std::size_t latent_len = spec.latent_size();
    const SpectralMask style_mask = make_hsg_mask(ld, 0.1);

    std::array<ForwardTrace, 4> tr;
    for (std::size_t k = 0; k < 4; ++k) tr[k] = forward(spec, params, inputs[k]);
    const std::size_t n0 = tr[0].probs.fg.size();

    std::array<Upstream, 4> up;
    for (auto& u : up) {
        u.d_logits.assign(2 * n0, 0.0);
        u.d_latent.assign(latent_len, 0.0);
    }

    const LogitLoss fully = dice_ce_loss(tr[slot::s].probs, label);
    for (std::size_t i = 0; i < 2 * n0; ++i) up[slot::s].d_logits[i] += weights.lambda1 * fully.grad_logits[i];

    const SemiMseLoss semi = semi_mse_loss(tr[slot::s].probs.fg, tr[slot::st].probs.fg, tr[slot::ts].probs.fg,
                                           tr[slot::t].probs.fg, /*detach_student=*/false);
    const std::array<const std::vector<double>*, 4> semi_grads{&semi.grad_s, &semi.grad_st, &semi.grad_ts,
                                                               &semi.grad_t};
    for (std::size_t k = 0; k < 4; ++k) {
        std::vector<double> g(*semi_grads[k]);
        for (auto& v : g) v *= weights.lambda2;
        fg_prob_grad_to_logits(tr[k].probs, g, up[k].d_logits);
    }

    FeatureQuad q;
    for (std::size_t k = 0; k < 4; ++k) {
        q.content[k] = tr[k].latent;
        q.style[k].resize(latent_len);
        lowpass_channels(tr[k].latent, q.style[k], ld, spec.c3, style_mask);
    }
    const TranswarpLoss tw = transwarp_loss(q, weights.tau, tau_mode);
    std::vector<double> back(latent_len);
    for (std::size_t k = 0; k < 4; ++k) {
        lowpass_channels(tw.grad_style[k], back, ld, spec.c3, style_mask);
        for (std::size_t i = 0; i < latent_len; ++i)
            up[k].d_latent[i] += weights.lambda3 * (tw.grad_content[k][i] + back[i]);
    }

    for (std::size_t k = 0; k < 4; ++k) backward(params, tr[k], up[k], grad);
    return total_loss(fully.value, semi.value, tw.value, weights);
}

std::vector<std::uint8_t> EndToEndProblem::activation_pattern(std::span<const double> params) const {
    std::vector<std::uint8_t> out;
    const auto signs = [&](const std::vector<double>& v) {
        for (double x : v) out.push_back(x > 0.0 ? 1 : 0);
    };
    const auto picks = [&](const std::vector<std::uint32_t>& v) {
        for (std::uint32_t x : v)
            for (int b = 0; b < 4; ++b) out.push_back(static_cast<std::uint8_t>(x >> (8 * b)));
    };
    for (const auto& x : inputs) {
        const ForwardTrace tr = forward(spec, params, x);
        signs(tr.a1), signs(tr.a2), signs(tr.latent), signs(tr.a4);
        picks(tr.p1_arg), picks(tr.p2_arg);
    }
    return out;
}

namespace {

double central_difference(const std::function<double()>& f, double& x, double h) {
    const double saved = x;
    x = saved + h;
    const double up = f();
    x = saved - h;
    const double down = f();
    x = saved;
    return (up - down) / (2 * h);
}

GradcheckRow check_dice_ce(std::mt19937_64& rng) {
    const Dims d = cube(4);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> logits(2 * d.count());
    for (auto& l : logits) l = normal(rng);
    SegMask y(d);
    for (auto& v : y.data) v = static_cast<std::uint8_t>(rng() & 1u);

    const auto f = [&] { return dice_ce_loss(Prob2::from_logits(d, logits), y).value; };
    const auto analytic = dice_ce_loss(Prob2::from_logits(d, logits), y).grad_logits;
    GradcheckRow row{"dice_ce", logits.size(), 0.0};
    for (std::size_t i = 0; i < logits.size(); ++i)
        row.max_rel_err = std::max(row.max_rel_err, relative_error(analytic[i], central_difference(f, logits[i], 1e-5)));
    return row;
}

GradcheckRow check_semi_mse(std::mt19937_64& rng) {
    const std::size_t n = 64;
    std::uniform_real_distribution<double> u(0.01, 0.99);
    std::array<std::vector<double>, 4> p;
    for (auto& v : p) {
        v.resize(n);
        for (auto& x : v) x = u(rng);
    }
    const auto f = [&] { return semi_mse_loss(p[0], p[1], p[2], p[3], false).value; };
    const auto g = semi_mse_loss(p[0], p[1], p[2], p[3], false);
    const std::array<const std::vector<double>*, 4> grads{&g.grad_s, &g.grad_st, &g.grad_ts, &g.grad_t};
    GradcheckRow row{"semi_mse", 4 * n, 0.0};
    for (std::size_t k = 0; k < 4; ++k)
        for (std::size_t i = 0; i < n; ++i)
            row.max_rel_err =
                std::max(row.max_rel_err, relative_error((*grads[k])[i], central_difference(f, p[k][i], 1e-5)));
    return row;
}

GradcheckRow check_transwarp(std::mt19937_64& rng, TauMode mode) {
    std::normal_distribution<double> normal(0.0, 1.0);
    FeatureQuad q;
    for (std::size_t k = 0; k < 4; ++k) {
        q.content[k].resize(16);
        q.style[k].resize(16);
        for (auto& x : q.content[k]) x = normal(rng);
        for (auto& x : q.style[k]) x = normal(rng);
    }
    const double tau = 0.5;
    const auto f = [&] { return transwarp_loss(q, tau, mode).value; };
    const auto g = transwarp_loss(q, tau, mode);
    GradcheckRow row{std::string("transwarp_") + to_string(mode), 0, 0.0};
    for (std::size_t k = 0; k < 4; ++k)
        for (std::size_t i = 0; i < 16; ++i) {
            row.max_rel_err =
                std::max(row.max_rel_err, relative_error(g.grad_content[k][i], central_difference(f, q.content[k][i], 1e-5)));
            row.max_rel_err =
                std::max(row.max_rel_err, relative_error(g.grad_style[k][i], central_difference(f, q.style[k][i], 1e-5)));
            row.checked += 2;
        }
    return row;
}

GradcheckRow check_end_to_end(std::uint64_t seed) {
    const EndToEndProblem prob = EndToEndProblem::make(seed);
    std::vector<double> params = init_params(prob.spec, seed + 2).values;
    std::vector<double> grad(params.size(), 0.0);
    prob.value_and_grad(params, grad);

    std::mt19937_64 rng(seed + 3);
    std::uniform_int_distribution<std::size_t> pick(0, params.size() - 1);
    const auto f = [&] { return prob.value(params); };
    const double h = 1e-4;
    const auto base = prob.activation_pattern(params);
    GradcheckRow row{"end_to_end", 0, 0.0};
    while (row.checked < 25) {
        const std::size_t i = pick(rng);
        const double saved = params[i];
        params[i] = saved + h;
        bool smooth = prob.activation_pattern(params) == base;
        params[i] = saved - h;
        smooth = smooth && prob.activation_pattern(params) == base;
        params[i] = saved;
        if (!smooth) {
            ++row.skipped;
            continue;
        }
        row.max_rel_err = std::max(row.max_rel_err, relative_error(grad[i], central_difference(f, params[i], h)));
        ++row.checked;
    }
    return row;
}

}  // namespace

std::vector<GradcheckRow> run_gradcheck(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::vector<GradcheckRow> rows;
    rows.push_back(check_dice_ce(rng));
    rows.push_back(check_semi_mse(rng));
    rows.push_back(check_transwarp(rng, TauMode::printed));
    rows.push_back(check_transwarp(rng, TauMode::infonce));
    rows.push_back(check_end_to_end(seed));
    return rows;
}

std::string gradcheck_csv(const std::vector<GradcheckRow>& rows) {
    std::string s = "loss,checked,max_rel_err,skipped\n";
    for (const auto& r : rows) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "%.6e", r.max_rel_err);
        s += r.loss + "," + std::to_string(r.checked) + "," + buf + "," + std::to_string(r.skipped) + "\n";
    }
    return s;
}

}  // namespace hsda
