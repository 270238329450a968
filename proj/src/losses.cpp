#include "hsda/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace hsda {

Prob2 Prob2::from_logits(const Dims& dims, std::span<const double> logits) {
    const std::size_t n = dims.count();
    if (logits.size() != 2 * n) throw LossError("from_logits: expected 2 channels of " + std::to_string(n));
    Prob2 p{dims, std::vector<double>(n), std::vector<double>(n), std::vector<double>(n), std::vector<double>(n)};
    for (std::size_t i = 0; i < n; ++i) {
        const double l0 = logits[i], l1 = logits[n + i];
        const double m = std::max(l0, l1);
        const double e0 = std::exp(l0 - m), e1 = std::exp(l1 - m);
        const double lse = m + std::log(e0 + e1);
        p.bg[i] = e0 / (e0 + e1);
        p.fg[i] = e1 / (e0 + e1);
        p.log_bg[i] = l0 - lse;
        p.log_fg[i] = l1 - lse;
    }
    return p;
}

LogitLoss dice_ce_loss(const Prob2& p, const SegMask& y) {
    if (p.dims != y.dims) throw LossError("dice_ce_loss: prediction dims " + p.dims.str() + " vs label dims " + y.dims.str());
    const std::size_t n = y.dims.count();
    if (p.fg.size() != n || p.bg.size() != n || y.data.size() != n) throw LossError("dice_ce_loss: buffer length mismatch");
    const bool exact_log = p.log_fg.size() == n && p.log_bg.size() == n;

    double inter = 0.0, sum_p = 0.0, sum_y = 0.0, ce = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double fg = p.fg[i], bg = p.bg[i];
        if (std::isnan(fg) || std::isnan(bg)) throw LossError("dice_ce_loss: NaN probability at voxel " + std::to_string(i));
        const double yi = y.data[i];
        inter += fg * yi;
        sum_p += fg;
        sum_y += yi;
        if (exact_log)
            ce -= yi * p.log_fg[i] + (1.0 - yi) * p.log_bg[i];
        else
            ce -= yi * std::log(std::max(fg, log_floor)) + (1.0 - yi) * std::log(std::max(bg, log_floor));
    }
    const double denom = sum_p + sum_y + dice_epsilon;
    const double ratio = (2.0 * inter + dice_epsilon) / denom;

    LogitLoss out;
    out.dice = 1.0 - ratio;
    out.cross_entropy = ce / double(n);
    out.value = out.dice + out.cross_entropy;
    out.grad_logits.assign(2 * n, 0.0);
    const double inv_n = 1.0 / double(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double fg = p.fg[i], bg = p.bg[i];
        const double yi = y.data[i];
        // d(dice)/d(fg_i), then through the two-class softmax Jacobian.
        const double d_dice_dfg = -(2.0 * yi * denom - (2.0 * inter + dice_epsilon)) / (denom * denom);
        const double jac = fg * bg;
        out.grad_logits[n + i] = d_dice_dfg * jac + (fg - yi) * inv_n;
        out.grad_logits[i] = -d_dice_dfg * jac + (bg - (1.0 - yi)) * inv_n;
    }
    return out;
}

SemiMseLoss semi_mse_loss(std::span<const double> p_s, std::span<const double> p_st, std::span<const double> p_ts,
                          std::span<const double> p_t, bool detach_student) {
    if (p_s.size() != p_st.size()) throw LossError("semi_mse_loss: source pair length mismatch");
    if (p_ts.size() != p_t.size()) throw LossError("semi_mse_loss: target pair length mismatch");
    if (p_s.empty() || p_t.empty()) throw LossError("semi_mse_loss: empty input");

    SemiMseLoss out;
    out.grad_s.assign(p_s.size(), 0.0);
    out.grad_st.assign(p_st.size(), 0.0);
    out.grad_ts.assign(p_ts.size(), 0.0);
    out.grad_t.assign(p_t.size(), 0.0);

    const double inv_ns = 1.0 / double(p_s.size());
    const double inv_nt = 1.0 / double(p_t.size());
    double src = 0.0, tgt = 0.0;
    for (std::size_t i = 0; i < p_s.size(); ++i) {
        const double d = p_s[i] - p_st[i];
        src += d * d;
        out.grad_st[i] = -2.0 * d * inv_ns;
        if (!detach_student) out.grad_s[i] = 2.0 * d * inv_ns;
    }
    for (std::size_t i = 0; i < p_t.size(); ++i) {
        const double d = p_ts[i] - p_t[i];
        tgt += d * d;
        out.grad_t[i] = -2.0 * d * inv_nt;
        if (!detach_student) out.grad_ts[i] = 2.0 * d * inv_nt;
    }
    out.value = src * inv_ns + tgt * inv_nt;
    return out;
}

namespace {

double norm2(std::span<const double> u) { return std::sqrt(std::inner_product(u.begin(), u.end(), u.begin(), 0.0)); }

}  // namespace

double cosine(std::span<const double> u, std::span<const double> v) {
    if (u.size() != v.size()) throw LossError("cosine: length mismatch");
    const double nu = norm2(u), nv = norm2(v);
    if (!(nu > 0.0) || !(nv > 0.0)) throw LossError("cosine: zero-norm input");
    const double h = std::inner_product(u.begin(), u.end(), v.begin(), 0.0) / (nu * nv);
    return std::clamp(h, -1.0, 1.0);
}

void cosine_backward(std::span<const double> u, std::span<const double> v, double scale, std::span<double> gu,
                     std::span<double> gv) {
    const double nu = norm2(u), nv = norm2(v);
    if (!(nu > 0.0) || !(nv > 0.0)) throw LossError("cosine: zero-norm input");
    const double h = std::inner_product(u.begin(), u.end(), v.begin(), 0.0) / (nu * nv);
    const double inv = 1.0 / (nu * nv);
    const double hu = h / (nu * nu), hv = h / (nv * nv);
    for (std::size_t i = 0; i < u.size(); ++i) {
        gu[i] += scale * (v[i] * inv - hu * u[i]);
        gv[i] += scale * (u[i] * inv - hv * v[i]);
    }
}

void FeatureQuad::validate() const {
    const auto check_group = [](const std::array<std::vector<double>, 4>& g, const char* name) {
        const std::size_t len = g[0].size();
        if (len == 0) throw LossError(std::string("FeatureQuad: empty ") + name + " vectors");
        for (const auto& v : g) {
            if (v.size() != len) throw LossError(std::string("FeatureQuad: ") + name + " vectors differ in length");
            bool nonzero = false;
            for (double x : v) {
                if (!std::isfinite(x)) throw LossError(std::string("FeatureQuad: non-finite ") + name + " feature");
                nonzero = nonzero || x != 0.0;
            }
            if (!nonzero) throw LossError(std::string("FeatureQuad: all-zero ") + name + " feature");
        }
    };
    check_group(content, "content");
    check_group(style, "style");
}

TauMode parse_tau_mode(const std::string& s) {
    if (s == "printed") return TauMode::printed;
    if (s == "infonce") return TauMode::infonce;
    throw std::invalid_argument("unknown tau_mode '" + s + "' (expected printed or infonce)");
}

const char* to_string(TauMode m) { return m == TauMode::printed ? "printed" : "infonce"; }

TranswarpTerms transwarp_terms(const FeatureQuad& q) {
    using namespace slot;
    const auto& z = q.content;
    const auto& st_ = q.style;
    TranswarpTerms r;
    r.pos_content = cosine(z[s], z[st]) + cosine(z[ts], z[t]);
    r.neg_content = cosine(z[s], z[ts]) + cosine(z[st], z[t]);
    r.pos_style = cosine(st_[s], st_[ts]) + cosine(st_[s], st_[t]) + cosine(st_[st], st_[t]) + cosine(st_[st], st_[ts]);
    return r;
}

namespace {

struct TermGrads {
    double value, d_pos_content, d_neg_content, d_pos_style;
};

// L = -log(a + b) + log(a + b + c) [+ log tau], with a = e^{pc'}, b = e^{ps'},
// c = e^{nc'} and primes marking the mode's exponent scaling.
TermGrads evaluate_terms(const TranswarpTerms& tt, double tau, TauMode mode) {
    if (!(tau > 0.0)) throw LossError("transwarp: tau must be positive");
    const double scale = mode == TauMode::infonce ? 1.0 / tau : 1.0;
    const double pc = tt.pos_content * scale, ps = tt.pos_style * scale, nc = tt.neg_content * scale;
    const double m = std::max({pc, ps, nc});
    const double a = std::exp(pc - m), b = std::exp(ps - m), c = std::exp(nc - m);
    const double pos = a + b, all = a + b + c;
    // ratio = (pos / tau) / all in printed mode; strictly positive by construction.
    double value = -std::log(pos) + std::log(all);
    if (mode == TauMode::printed) value += std::log(tau);
    TermGrads g{};
    g.value = value;
    g.d_pos_content = (-a / pos + a / all) * scale;
    g.d_pos_style = (-b / pos + b / all) * scale;
    g.d_neg_content = (c / all) * scale;
    return g;
}

}  // namespace

double transwarp_from_terms(const TranswarpTerms& terms, double tau, TauMode mode) {
    return evaluate_terms(terms, tau, mode).value;
}

TranswarpLoss transwarp_loss(const FeatureQuad& q, double tau, TauMode mode) {
    using namespace slot;
    q.validate();
    TranswarpLoss out;
    out.terms = transwarp_terms(q);
    const TermGrads g = evaluate_terms(out.terms, tau, mode);
    out.value = g.value;
    for (std::size_t k = 0; k < 4; ++k) {
        out.grad_content[k].assign(q.content[k].size(), 0.0);
        out.grad_style[k].assign(q.style[k].size(), 0.0);
    }
    const auto& z = q.content;
    auto& gz = out.grad_content;
    cosine_backward(z[s], z[st], g.d_pos_content, gz[s], gz[st]);
    cosine_backward(z[ts], z[t], g.d_pos_content, gz[ts], gz[t]);
    cosine_backward(z[s], z[ts], g.d_neg_content, gz[s], gz[ts]);
    cosine_backward(z[st], z[t], g.d_neg_content, gz[st], gz[t]);

    const auto& sv = q.style;
    auto& gs = out.grad_style;
    cosine_backward(sv[s], sv[ts], g.d_pos_style, gs[s], gs[ts]);
    cosine_backward(sv[s], sv[t], g.d_pos_style, gs[s], gs[t]);
    cosine_backward(sv[st], sv[t], g.d_pos_style, gs[st], gs[t]);
    cosine_backward(sv[st], sv[ts], g.d_pos_style, gs[st], gs[ts]);
    return out;
}

void LossWeights::validate() const {
    if (lambda1 < 0 || lambda2 < 0 || lambda3 < 0) throw LossError("loss weights must be nonnegative");
    if (!(lambda1 + lambda2 + lambda3 > 0)) throw LossError("loss weights must not all be zero");
    if (!(tau > 0)) throw LossError("tau must be positive");
}

double total_loss(double l_fully, double l_semi, double l_trans, const LossWeights& w) {
    return w.lambda1 * l_fully + w.lambda2 * l_semi + w.lambda3 * l_trans;
}

}  // namespace hsda
