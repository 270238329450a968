#include "hsda/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <random>

#include "bytes.hpp"
#include "hsda/io.hpp"
#include "hsda/kernels.hpp"
#include "hsda/spectral.hpp"

namespace hsda {

namespace k = kernels;

void NetSpec::validate() const {
    for (std::uint32_t n : {in_dims.nx, in_dims.ny, in_dims.nz})
        if (n < 16 || !is_power_of_two(n))
            throw ModelError("network input extents must be powers of two >= 16, got " + in_dims.str());
    if (c1 == 0 || c2 == 0 || c3 == 0) throw ModelError("channel counts must be positive");
}

ParamLayout ParamLayout::of(const NetSpec& s) {
    ParamLayout l;
    std::size_t off = 0;
    const auto take = [&](std::size_t n) {
        Slice sl{off, n};
        off += n;
        return sl;
    };
    l.w1 = take(std::size_t(s.c1) * 1 * k::taps);
    l.b1 = take(s.c1);
    l.w2 = take(std::size_t(s.c2) * s.c1 * k::taps);
    l.b2 = take(s.c2);
    l.w3 = take(std::size_t(s.c3) * s.c2 * k::taps);
    l.b3 = take(s.c3);
    l.wp = take(std::size_t(s.c2) * s.c3);
    l.bp = take(s.c2);
    l.w4 = take(std::size_t(s.c1) * s.c2 * k::taps);
    l.b4 = take(s.c1);
    l.wh = take(std::size_t(2) * s.c1);
    l.bh = take(2);
    l.total = off;
    return l;
}

std::size_t NetSpec::param_count() const { return ParamLayout::of(*this).total; }

void ParamVector::zero_grads() { std::fill(grads.begin(), grads.end(), 0.0); }

ParamVector init_params(const NetSpec& spec, std::uint64_t seed) {
    spec.validate();
    const ParamLayout l = ParamLayout::of(spec);
    ParamVector p(l.total);
    std::mt19937_64 rng(seed);
    const auto fill = [&](ParamLayout::Slice w, std::size_t fan_in) {
        std::uniform_real_distribution<double> u(-std::sqrt(6.0 / double(fan_in)), std::sqrt(6.0 / double(fan_in)));
        for (std::size_t i = 0; i < w.size; ++i) p.values[w.offset + i] = u(rng);
    };
    fill(l.w1, 1 * k::taps);
    fill(l.w2, std::size_t(spec.c1) * k::taps);
    fill(l.w3, std::size_t(spec.c2) * k::taps);
    fill(l.wp, spec.c3);
    fill(l.w4, std::size_t(spec.c2) * k::taps);
    fill(l.wh, spec.c1);
    return p;
}

namespace {

std::span<const double> view(std::span<const double> all, ParamLayout::Slice s) { return all.subspan(s.offset, s.size); }
std::span<double> view(std::span<double> all, ParamLayout::Slice s) { return all.subspan(s.offset, s.size); }

void require_finite(std::span<const double> v, const char* layer) {
    for (double x : v)
        if (!std::isfinite(x)) throw ModelError(std::string("non-finite activation in layer ") + layer);
}

}  // namespace

ForwardTrace forward(const NetSpec& spec, std::span<const double> weights, const Volume& x) {
    spec.validate();
    if (x.dims != spec.in_dims)
        throw ModelError("input dims " + x.dims.str() + " do not match network dims " + spec.in_dims.str());
    const ParamLayout l = ParamLayout::of(spec);
    if (weights.size() != l.total)
        throw ModelError("parameter vector has " + std::to_string(weights.size()) + " entries, expected " +
                         std::to_string(l.total));

    const Dims d0 = spec.in_dims, d1 = k::half(d0), d2 = k::half(d1);
    const std::size_t n0 = d0.count(), n1 = d1.count(), n2 = d2.count();
    const std::size_t c1 = spec.c1, c2 = spec.c2, c3 = spec.c3;

    ForwardTrace t;
    t.spec = spec;
    t.x = x.data;
    require_finite(t.x, "input");

    t.a1.resize(c1 * n0);
    k::conv3_forward(t.x, d0, 1, view(weights, l.w1), view(weights, l.b1), c1, t.a1);
    k::relu_inplace(t.a1);
    require_finite(t.a1, "enc1");

    t.p1.resize(c1 * n1);
    t.p1_arg.resize(c1 * n1);
    k::maxpool2_forward(t.a1, d0, c1, t.p1, t.p1_arg);

    t.a2.resize(c2 * n1);
    k::conv3_forward(t.p1, d1, c1, view(weights, l.w2), view(weights, l.b2), c2, t.a2);
    k::relu_inplace(t.a2);
    require_finite(t.a2, "enc2");

    t.p2.resize(c2 * n2);
    t.p2_arg.resize(c2 * n2);
    k::maxpool2_forward(t.a2, d1, c2, t.p2, t.p2_arg);

    t.latent.resize(c3 * n2);
    k::conv3_forward(t.p2, d2, c2, view(weights, l.w3), view(weights, l.b3), c3, t.latent);
    k::relu_inplace(t.latent);
    require_finite(t.latent, "enc3");

    // 1x1 projection commutes with nearest upsampling, so it runs at the coarse level.
    std::vector<double> proj(c2 * n2);
    k::pointwise_forward(t.latent, n2, c3, view(weights, l.wp), view(weights, l.bp), c2, proj);
    t.u2.resize(c2 * n1);
    k::upsample2_forward(proj, d2, c2, t.u2);
    for (std::size_t i = 0; i < t.u2.size(); ++i) t.u2[i] += t.a2[i];
    require_finite(t.u2, "dec2");

    t.a4.resize(c1 * n1);
    k::conv3_forward(t.u2, d1, c2, view(weights, l.w4), view(weights, l.b4), c1, t.a4);
    k::relu_inplace(t.a4);
    require_finite(t.a4, "dec1");

    t.u1.resize(c1 * n0);
    k::upsample2_forward(t.a4, d1, c1, t.u1);
    for (std::size_t i = 0; i < t.u1.size(); ++i) t.u1[i] += t.a1[i];

    t.logits.resize(2 * n0);
    k::pointwise_forward(t.u1, n0, c1, view(weights, l.wh), view(weights, l.bh), 2, t.logits);
    require_finite(t.logits, "head");
    t.probs = Prob2::from_logits(d0, t.logits);
    return t;
}

void backward(std::span<const double> weights, const ForwardTrace& t, const Upstream& up, std::span<double> grads) {
    const NetSpec& spec = t.spec;
    const ParamLayout l = ParamLayout::of(spec);
    if (weights.size() != l.total || grads.size() != l.total)
        throw ModelError("backward: parameter vector length does not match the traced network");
    const Dims d0 = spec.in_dims, d1 = k::half(d0), d2 = k::half(d1);
    const std::size_t n0 = d0.count(), n1 = d1.count(), n2 = d2.count();
    const std::size_t c1 = spec.c1, c2 = spec.c2, c3 = spec.c3;
    if (t.logits.size() != 2 * n0 || t.latent.size() != c3 * n2)
        throw ModelError("backward: trace does not match its network spec");
    if (!up.d_logits.empty() && up.d_logits.size() != 2 * n0)
        throw ModelError("backward: logit gradient has wrong length");
    if (!up.d_latent.empty() && up.d_latent.size() != c3 * n2)
        throw ModelError("backward: latent gradient has wrong length");

    std::vector<double> d_a1(c1 * n0, 0.0);
    std::vector<double> d_a2(c2 * n1, 0.0);
    std::vector<double> d_latent(c3 * n2, 0.0);

    if (!up.d_logits.empty()) {
        std::vector<double> d_u1(c1 * n0, 0.0);
        k::pointwise_backward(t.u1, up.d_logits, n0, c1, 2, view(weights, l.wh), d_u1, view(grads, l.wh),
                              view(grads, l.bh));
        d_a1 = d_u1;  // skip branch

        std::vector<double> d_a4(c1 * n1, 0.0);
        k::upsample2_backward(d_u1, d1, c1, d_a4);
        k::relu_backward_inplace(t.a4, d_a4);

        std::vector<double> d_u2(c2 * n1, 0.0);
        k::conv3_backward_weights(t.u2, d_a4, d1, c2, c1, view(grads, l.w4), view(grads, l.b4));
        k::conv3_backward_input(d_a4, d1, c2, c1, view(weights, l.w4), d_u2);
        d_a2 = d_u2;  // skip branch

        std::vector<double> d_proj(c2 * n2, 0.0);
        k::upsample2_backward(d_u2, d2, c2, d_proj);
        k::pointwise_backward(t.latent, d_proj, n2, c3, c2, view(weights, l.wp), d_latent, view(grads, l.wp),
                              view(grads, l.bp));
    }
    if (!up.d_latent.empty())
        for (std::size_t i = 0; i < d_latent.size(); ++i) d_latent[i] += up.d_latent[i];

    k::relu_backward_inplace(t.latent, d_latent);
    std::vector<double> d_p2(c2 * n2, 0.0);
    k::conv3_backward_weights(t.p2, d_latent, d2, c2, c3, view(grads, l.w3), view(grads, l.b3));
    k::conv3_backward_input(d_latent, d2, c2, c3, view(weights, l.w3), d_p2);
    k::maxpool2_backward(d_p2, t.p2_arg, d1, c2, d_a2);

    k::relu_backward_inplace(t.a2, d_a2);
    std::vector<double> d_p1(c1 * n1, 0.0);
    k::conv3_backward_weights(t.p1, d_a2, d1, c1, c2, view(grads, l.w2), view(grads, l.b2));
    k::conv3_backward_input(d_a2, d1, c1, c2, view(weights, l.w2), d_p1);
    k::maxpool2_backward(d_p1, t.p1_arg, d0, c1, d_a1);

    k::relu_backward_inplace(t.a1, d_a1);
    k::conv3_backward_weights(t.x, d_a1, d0, 1, c1, view(grads, l.w1), view(grads, l.b1));
}

void fg_prob_grad_to_logits(const Prob2& p, std::span<const double> d_fg, std::span<double> d_logits) {
    const std::size_t n = p.fg.size();
    if (d_fg.size() != n || d_logits.size() != 2 * n) throw ModelError("fg_prob_grad_to_logits: length mismatch");
    for (std::size_t i = 0; i < n; ++i) {
        const double g = d_fg[i] * p.fg[i] * p.bg[i];
        d_logits[n + i] += g;
        d_logits[i] -= g;
    }
}

void adam_step(ParamVector& p, const AdamOptions& opt) {
    for (double g : p.grads)
        if (!std::isfinite(g)) throw ModelError("adam_step: non-finite gradient");
    ++p.step;
    const double bc1 = 1.0 - std::pow(opt.beta1, double(p.step));
    const double bc2 = 1.0 - std::pow(opt.beta2, double(p.step));
    for (std::size_t i = 0; i < p.values.size(); ++i) {
        const double g = p.grads[i];
        p.adam_m[i] = opt.beta1 * p.adam_m[i] + (1.0 - opt.beta1) * g;
        p.adam_v[i] = opt.beta2 * p.adam_v[i] + (1.0 - opt.beta2) * g * g;
        const double m_hat = p.adam_m[i] / bc1;
        const double v_hat = p.adam_v[i] / bc2;
        p.values[i] -= opt.lr * m_hat / (std::sqrt(v_hat) + opt.eps);
    }
    p.zero_grads();
}

EmaRole parse_ema_role(const std::string& s) {
    if (s == "as_printed") return EmaRole::as_printed;
    if (s == "teacher_is_ema") return EmaRole::teacher_is_ema;
    throw std::invalid_argument("unknown ema_role '" + s + "' (expected as_printed or teacher_is_ema)");
}

const char* to_string(EmaRole r) { return r == EmaRole::as_printed ? "as_printed" : "teacher_is_ema"; }

double ema_alpha(std::uint64_t iter, double decay) {
    return std::min(1.0 - 1.0 / (double(iter) + 1.0), decay);
}

void ema_update(ParamVector& student, ParamVector& teacher, std::uint64_t iter, double decay, EmaRole role) {
    if (student.size() != teacher.size()) throw ModelError("ema_update: parameter vectors differ in length");
    if (!(decay >= 0.0 && decay < 1.0)) throw ModelError("ema_update: decay must lie in [0, 1)");
    const double alpha = ema_alpha(iter, decay);
    auto& dst = role == EmaRole::as_printed ? student.values : teacher.values;
    const auto& src = role == EmaRole::as_printed ? teacher.values : student.values;
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = alpha * dst[i] + (1.0 - alpha) * src[i];
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {

constexpr char ckpt_magic[5] = {'C', 'K', 'P', 'T', '1'};
constexpr std::size_t ckpt_header = 5 + 6 * 4 + 8;

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const NetSpec& spec, std::span<const double> values) {
    if (values.size() != spec.param_count()) throw ModelError("checkpoint: parameter count does not match spec");
    std::vector<std::uint8_t> out(std::begin(ckpt_magic), std::end(ckpt_magic));
    out.reserve(ckpt_header + 8 * values.size());
    for (std::uint32_t v : {spec.in_dims.nx, spec.in_dims.ny, spec.in_dims.nz, spec.c1, spec.c2, spec.c3})
        detail::put_le(out, v);
    detail::put_le(out, std::uint64_t(values.size()));
    for (double v : values) detail::put_f64(out, v);
    return out;
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 5 || !std::equal(std::begin(ckpt_magic), std::end(ckpt_magic), bytes.begin()))
        throw ModelError("not a CKPT1 file (bad magic)");
    if (bytes.size() < ckpt_header) throw ModelError("CKPT1 header truncated");
    const std::uint8_t* p = bytes.data() + 5;
    Checkpoint c;
    c.spec.in_dims = Dims{detail::get_le<std::uint32_t>(p), detail::get_le<std::uint32_t>(p + 4),
                          detail::get_le<std::uint32_t>(p + 8)};
    c.spec.c1 = detail::get_le<std::uint32_t>(p + 12);
    c.spec.c2 = detail::get_le<std::uint32_t>(p + 16);
    c.spec.c3 = detail::get_le<std::uint32_t>(p + 20);
    const auto count = detail::get_le<std::uint64_t>(p + 24);
    c.spec.validate();
    if (count != c.spec.param_count()) throw ModelError("CKPT1 parameter count does not match its network spec");
    if (bytes.size() != ckpt_header + 8 * count) throw ModelError("CKPT1 payload truncated or has trailing bytes");
    c.values.resize(count);
    for (std::size_t i = 0; i < count; ++i) c.values[i] = detail::get_f64(bytes.data() + ckpt_header + 8 * i);
    return c;
}

void save_checkpoint(const std::filesystem::path& path, const NetSpec& spec, std::span<const double> values) {
    write_file_atomic(path, encode_checkpoint(spec, values));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ModelError("cannot open checkpoint '" + path.string() + "'");
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_checkpoint(bytes);
}

}  // namespace hsda
