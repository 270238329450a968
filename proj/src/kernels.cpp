#include "hsda/kernels.hpp"

#include <algorithm>
#include <array>
#include <cassert>
#include <vector>

namespace hsda::kernels {

namespace {

using idx = std::ptrdiff_t;

// Zero-padded copy of a channel-major volume: every channel is stored on the
// (nx+2)(ny+2)(nz+2) grid followed by `chunk` spare zeros, so a 3x3x3 stencil
// becomes 27 constant offsets into one flat array. Positions are computed over
// the contiguous run from the first to the last interior voxel (rounded up to
// whole chunks); the padding positions inside that run are computed and
// discarded.
constexpr idx chunk = 16;
constexpr idx block = 4;

struct Padded {
    idx px, py, pz, pxy, pn;
    idx first, run;  // first interior position, chunk-rounded run length
    std::array<idx, taps> off;

    explicit Padded(const Dims& d)
        : px(idx(d.nx) + 2), py(idx(d.ny) + 2), pz(idx(d.nz) + 2), pxy(px * py), pn(pxy * pz + chunk) {
        first = pxy + px + 1;
        const idx last = idx(d.nz) * pxy + idx(d.ny) * px + idx(d.nx);
        run = (last - first + chunk) / chunk * chunk;
        for (idx kz = 0; kz < 3; ++kz)
            for (idx ky = 0; ky < 3; ++ky)
                for (idx kx = 0; kx < 3; ++kx) off[kz * 9 + ky * 3 + kx] = (kz - 1) * pxy + (ky - 1) * px + (kx - 1);
    }

    std::vector<double> pad(const double* src, const Dims& d, std::size_t channels) const {
        std::vector<double> out(channels * std::size_t(pn), 0.0);
        const idx nx = d.nx, ny = d.ny, nz = d.nz;
        for (std::size_t c = 0; c < channels; ++c)
            for (idx z = 0; z < nz; ++z)
                for (idx y = 0; y < ny; ++y)
                    std::copy_n(src + ((idx(c) * nz + z) * ny + y) * nx, nx,
                                out.data() + idx(c) * pn + (z + 1) * pxy + (y + 1) * px + 1);
        return out;
    }

    // dst[c](interior) (+)= src[c](padded interior)
    template <bool Accumulate>
    void unpad(const double* src, const Dims& d, std::size_t channels, double* dst) const {
        const idx nx = d.nx, ny = d.ny, nz = d.nz;
        for (std::size_t c = 0; c < channels; ++c)
            for (idx z = 0; z < nz; ++z)
                for (idx y = 0; y < ny; ++y) {
                    const double* s = src + idx(c) * pn + (z + 1) * pxy + (y + 1) * px + 1;
                    double* o = dst + ((idx(c) * nz + z) * ny + y) * nx;
                    for (idx x = 0; x < nx; ++x) {
                        if constexpr (Accumulate)
                            o[x] += s[x];
                        else
                            o[x] = s[x];
                    }
                }
    }
};

// out[co] = bias[co] + sum_ci sum_k w[co][ci][k] * in[ci](p + off[k]) on padded
// buffers, J output channels per pass so each input load feeds J FMAs.
template <idx J>
void stencil_block(const Padded& g, const double* in, std::size_t cin, const double* w, const double* bias, idx p,
                   double* out) {
    double a[J][chunk];
    for (idx j = 0; j < J; ++j)
        for (idx l = 0; l < chunk; ++l) a[j][l] = bias[j];
    for (idx ci = 0; ci < idx(cin); ++ci) {
        const double* s = in + ci * g.pn + p;
        for (idx k = 0; k < idx(taps); ++k) {
            const double* sk = s + g.off[std::size_t(k)];
            for (idx j = 0; j < J; ++j) {
                const double wv = w[(j * idx(cin) + ci) * idx(taps) + k];
#pragma omp simd
                for (idx l = 0; l < chunk; ++l) a[j][l] += wv * sk[l];
            }
        }
    }
    for (idx j = 0; j < J; ++j) std::copy_n(a[j], chunk, out + j * g.pn + p);
}

void stencil(const Padded& g, const double* in, std::size_t cin, const double* w, const double* bias,
             std::size_t cout, double* out) {
    const idx full = idx(cout) / block, rest = idx(cout) % block;
    const idx nchunks = g.run / chunk;
#pragma omp parallel for collapse(2) schedule(static)
    for (idx b = 0; b < full + rest; ++b)
        for (idx c = 0; c < nchunks; ++c) {
            const idx p = g.first + c * chunk;
            if (b < full) {
                const idx co = b * block;
                stencil_block<block>(g, in, cin, w + co * idx(cin) * idx(taps), bias + co, p, out + co * g.pn);
            } else {
                const idx co = full * block + (b - full);
                stencil_block<1>(g, in, cin, w + co * idx(cin) * idx(taps), bias + co, p, out + co * g.pn);
            }
        }
}

}  // namespace

void conv3_forward(std::span<const double> in, const Dims& d, std::size_t cin, std::span<const double> weights,
                   std::span<const double> bias, std::size_t cout, std::span<double> out) {
    assert(in.size() == cin * d.count() && out.size() == cout * d.count());
    assert(weights.size() == cout * cin * taps && bias.size() == cout);
    const Padded g(d);
    const auto pin = g.pad(in.data(), d, cin);
    std::vector<double> pout(cout * std::size_t(g.pn));
    stencil(g, pin.data(), cin, weights.data(), bias.data(), cout, pout.data());
    g.unpad<false>(pout.data(), d, cout, out.data());
}

void conv3_backward_input(std::span<const double> grad_out, const Dims& d, std::size_t cin, std::size_t cout,
                          std::span<const double> weights, std::span<double> grad_in) {
    assert(grad_out.size() == cout * d.count() && grad_in.size() == cin * d.count());
    // The adjoint of a zero-padded convolution is the convolution of the
    // zero-padded output gradient with channel-transposed, tap-flipped weights.
    std::vector<double> wt(cin * cout * taps);
    for (std::size_t co = 0; co < cout; ++co)
        for (std::size_t ci = 0; ci < cin; ++ci)
            for (std::size_t k = 0; k < taps; ++k)
                wt[(ci * cout + co) * taps + (taps - 1 - k)] = weights[(co * cin + ci) * taps + k];
    const std::vector<double> zero(cin, 0.0);
    const Padded g(d);
    const auto pg = g.pad(grad_out.data(), d, cout);
    std::vector<double> pin(cin * std::size_t(g.pn));
    stencil(g, pg.data(), cout, wt.data(), zero.data(), cin, pin.data());
    g.unpad<true>(pin.data(), d, cin, grad_in.data());
}

void conv3_backward_weights(std::span<const double> in, std::span<const double> grad_out, const Dims& d,
                            std::size_t cin, std::size_t cout, std::span<double> grad_weights,
                            std::span<double> grad_bias) {
    assert(in.size() == cin * d.count() && grad_out.size() == cout * d.count());
    assert(grad_weights.size() == cout * cin * taps && grad_bias.size() == cout);
    const Padded g(d);
    const auto pin = g.pad(in.data(), d, cin);
    const auto pg = g.pad(grad_out.data(), d, cout);
    const idx n = g.run;

#pragma omp parallel for schedule(static)
    for (idx co = 0; co < idx(cout); ++co) {
        const double* gr = pg.data() + co * g.pn + g.first;
        double bsum = 0.0;
#pragma omp simd reduction(+ : bsum)
        for (idx q = 0; q < n; ++q) bsum += gr[q];
        grad_bias[std::size_t(co)] += bsum;

        for (idx ci = 0; ci < idx(cin); ++ci) {
            double* gw = grad_weights.data() + (co * idx(cin) + ci) * idx(taps);
            for (idx kz = 0; kz < 3; ++kz) {
                // One (ky, kx) plane of taps per pass: nine independent sums.
                const double* s = pin.data() + ci * g.pn + g.first + g.off[std::size_t(kz * 9)];
                const double* s0 = s;
                const double* s1 = s + g.px;
                const double* s2 = s + 2 * g.px;
                double a0 = 0, a1 = 0, a2 = 0, a3 = 0, a4 = 0, a5 = 0, a6 = 0, a7 = 0, a8 = 0;
#pragma omp simd reduction(+ : a0, a1, a2, a3, a4, a5, a6, a7, a8)
                for (idx q = 0; q < n; ++q) {
                    const double v = gr[q];
                    a0 += v * s0[q];
                    a1 += v * s0[q + 1];
                    a2 += v * s0[q + 2];
                    a3 += v * s1[q];
                    a4 += v * s1[q + 1];
                    a5 += v * s1[q + 2];
                    a6 += v * s2[q];
                    a7 += v * s2[q + 1];
                    a8 += v * s2[q + 2];
                }
                double* t = gw + kz * 9;
                t[0] += a0, t[1] += a1, t[2] += a2, t[3] += a3, t[4] += a4;
                t[5] += a5, t[6] += a6, t[7] += a7, t[8] += a8;
            }
        }
    }
}

void pointwise_forward(std::span<const double> in, std::size_t n, std::size_t cin, std::span<const double> weights,
                       std::span<const double> bias, std::size_t cout, std::span<double> out) {
    assert(in.size() == cin * n && out.size() == cout * n);
#pragma omp parallel for schedule(static)
    for (std::size_t co = 0; co < cout; ++co) {
        double* o = out.data() + co * n;
        std::fill(o, o + n, bias[co]);
        for (std::size_t ci = 0; ci < cin; ++ci) {
            const double w = weights[co * cin + ci];
            const double* s = in.data() + ci * n;
#pragma omp simd
            for (std::size_t i = 0; i < n; ++i) o[i] += w * s[i];
        }
    }
}

void pointwise_backward(std::span<const double> in, std::span<const double> grad_out, std::size_t n, std::size_t cin,
                        std::size_t cout, std::span<const double> weights, std::span<double> grad_in,
                        std::span<double> grad_weights, std::span<double> grad_bias) {
#pragma omp parallel for schedule(static)
    for (std::size_t co = 0; co < cout; ++co) {
        const double* g = grad_out.data() + co * n;
        double bsum = 0.0;
#pragma omp simd reduction(+ : bsum)
        for (std::size_t i = 0; i < n; ++i) bsum += g[i];
        grad_bias[co] += bsum;
        for (std::size_t ci = 0; ci < cin; ++ci) {
            const double* s = in.data() + ci * n;
            double acc = 0.0;
#pragma omp simd reduction(+ : acc)
            for (std::size_t i = 0; i < n; ++i) acc += g[i] * s[i];
            grad_weights[co * cin + ci] += acc;
        }
    }
    if (grad_in.empty()) return;
#pragma omp parallel for schedule(static)
    for (std::size_t ci = 0; ci < cin; ++ci) {
        double* gi = grad_in.data() + ci * n;
        for (std::size_t co = 0; co < cout; ++co) {
            const double w = weights[co * cin + ci];
            const double* g = grad_out.data() + co * n;
#pragma omp simd
            for (std::size_t i = 0; i < n; ++i) gi[i] += w * g[i];
        }
    }
}

void maxpool2_forward(std::span<const double> in, const Dims& d, std::size_t channels, std::span<double> out,
                      std::span<std::uint32_t> argmax) {
    const Dims h = half(d);
    const std::size_t n = d.count(), m = h.count();
    assert(in.size() == channels * n && out.size() == channels * m && argmax.size() == channels * m);
#pragma omp parallel for schedule(static)
    for (std::size_t c = 0; c < channels; ++c) {
        const double* src = in.data() + c * n;
        for (std::size_t z = 0; z < h.nz; ++z)
            for (std::size_t y = 0; y < h.ny; ++y)
                for (std::size_t x = 0; x < h.nx; ++x) {
                    std::size_t best = d.index(2 * x, 2 * y, 2 * z);
                    for (std::size_t dz = 0; dz < 2; ++dz)
                        for (std::size_t dy = 0; dy < 2; ++dy)
                            for (std::size_t dx = 0; dx < 2; ++dx) {
                                const std::size_t i = d.index(2 * x + dx, 2 * y + dy, 2 * z + dz);
                                if (src[i] > src[best]) best = i;
                            }
                    const std::size_t o = c * m + h.index(x, y, z);
                    out[o] = src[best];
                    argmax[o] = static_cast<std::uint32_t>(best);
                }
    }
}

void maxpool2_backward(std::span<const double> grad_out, std::span<const std::uint32_t> argmax, const Dims& d,
                       std::size_t channels, std::span<double> grad_in) {
    const std::size_t n = d.count(), m = half(d).count();
#pragma omp parallel for schedule(static)
    for (std::size_t c = 0; c < channels; ++c)
        for (std::size_t j = 0; j < m; ++j) grad_in[c * n + argmax[c * m + j]] += grad_out[c * m + j];
}

void upsample2_forward(std::span<const double> in, const Dims& coarse, std::size_t channels, std::span<double> out) {
    const Dims fine{coarse.nx * 2, coarse.ny * 2, coarse.nz * 2};
    const std::size_t n = fine.count(), m = coarse.count();
    assert(in.size() == channels * m && out.size() == channels * n);
#pragma omp parallel for schedule(static)
    for (std::size_t c = 0; c < channels; ++c)
        for (std::size_t z = 0; z < fine.nz; ++z)
            for (std::size_t y = 0; y < fine.ny; ++y) {
                const double* src = in.data() + c * m + coarse.index(0, y / 2, z / 2);
                double* dst = out.data() + c * n + fine.index(0, y, z);
                for (std::size_t x = 0; x < fine.nx; ++x) dst[x] = src[x / 2];
            }
}

void upsample2_backward(std::span<const double> grad_out, const Dims& coarse, std::size_t channels,
                        std::span<double> grad_in) {
    const Dims fine{coarse.nx * 2, coarse.ny * 2, coarse.nz * 2};
    const std::size_t n = fine.count(), m = coarse.count();
#pragma omp parallel for schedule(static)
    for (std::size_t c = 0; c < channels; ++c)
        for (std::size_t z = 0; z < fine.nz; ++z)
            for (std::size_t y = 0; y < fine.ny; ++y) {
                const double* src = grad_out.data() + c * n + fine.index(0, y, z);
                double* dst = grad_in.data() + c * m + coarse.index(0, y / 2, z / 2);
                for (std::size_t x = 0; x < fine.nx; ++x) dst[x / 2] += src[x];
            }
}

void relu_inplace(std::span<double> x) {
    for (auto& v : x) v = v > 0.0 ? v : 0.0;
}

void relu_backward_inplace(std::span<const double> activated, std::span<double> grad) {
    for (std::size_t i = 0; i < grad.size(); ++i)
        if (!(activated[i] > 0.0)) grad[i] = 0.0;
}

// ---------------------------------------------------------------------------
// Serial reference loops
// ---------------------------------------------------------------------------

namespace reference {

namespace {

inline bool inside(idx v, idx n) { return v >= 0 && v < n; }

}  // namespace

void conv3_forward(std::span<const double> in, const Dims& d, std::size_t cin, std::span<const double> weights,
                   std::span<const double> bias, std::size_t cout, std::span<double> out) {
    const idx nx = d.nx, ny = d.ny, nz = d.nz;
    const std::size_t n = d.count();
    for (std::size_t co = 0; co < cout; ++co)
        for (idx z = 0; z < nz; ++z)
            for (idx y = 0; y < ny; ++y)
                for (idx x = 0; x < nx; ++x) {
                    double acc = bias[co];
                    for (std::size_t ci = 0; ci < cin; ++ci)
                        for (idx kz = 0; kz < 3; ++kz)
                            for (idx ky = 0; ky < 3; ++ky)
                                for (idx kx = 0; kx < 3; ++kx) {
                                    const idx sx = x + kx - 1, sy = y + ky - 1, sz = z + kz - 1;
                                    if (!inside(sx, nx) || !inside(sy, ny) || !inside(sz, nz)) continue;
                                    acc += weights[(co * cin + ci) * taps + std::size_t(kz * 9 + ky * 3 + kx)] *
                                           in[ci * n + d.index(sx, sy, sz)];
                                }
                    out[co * n + d.index(x, y, z)] = acc;
                }
}

void conv3_backward_input(std::span<const double> grad_out, const Dims& d, std::size_t cin, std::size_t cout,
                          std::span<const double> weights, std::span<double> grad_in) {
    const idx nx = d.nx, ny = d.ny, nz = d.nz;
    const std::size_t n = d.count();
    // Scatter form: each output gradient feeds the inputs it read.
    for (std::size_t co = 0; co < cout; ++co)
        for (idx z = 0; z < nz; ++z)
            for (idx y = 0; y < ny; ++y)
                for (idx x = 0; x < nx; ++x) {
                    const double g = grad_out[co * n + d.index(x, y, z)];
                    for (std::size_t ci = 0; ci < cin; ++ci)
                        for (idx kz = 0; kz < 3; ++kz)
                            for (idx ky = 0; ky < 3; ++ky)
                                for (idx kx = 0; kx < 3; ++kx) {
                                    const idx sx = x + kx - 1, sy = y + ky - 1, sz = z + kz - 1;
                                    if (!inside(sx, nx) || !inside(sy, ny) || !inside(sz, nz)) continue;
                                    grad_in[ci * n + d.index(sx, sy, sz)] +=
                                        g * weights[(co * cin + ci) * taps + std::size_t(kz * 9 + ky * 3 + kx)];
                                }
                }
}

void conv3_backward_weights(std::span<const double> in, std::span<const double> grad_out, const Dims& d,
                            std::size_t cin, std::size_t cout, std::span<double> grad_weights,
                            std::span<double> grad_bias) {
    const idx nx = d.nx, ny = d.ny, nz = d.nz;
    const std::size_t n = d.count();
    for (std::size_t co = 0; co < cout; ++co)
        for (idx z = 0; z < nz; ++z)
            for (idx y = 0; y < ny; ++y)
                for (idx x = 0; x < nx; ++x) {
                    const double g = grad_out[co * n + d.index(x, y, z)];
                    grad_bias[co] += g;
                    for (std::size_t ci = 0; ci < cin; ++ci)
                        for (idx kz = 0; kz < 3; ++kz)
                            for (idx ky = 0; ky < 3; ++ky)
                                for (idx kx = 0; kx < 3; ++kx) {
                                    const idx sx = x + kx - 1, sy = y + ky - 1, sz = z + kz - 1;
                                    if (!inside(sx, nx) || !inside(sy, ny) || !inside(sz, nz)) continue;
                                    grad_weights[(co * cin + ci) * taps + std::size_t(kz * 9 + ky * 3 + kx)] +=
                                        g * in[ci * n + d.index(sx, sy, sz)];
                                }
                }
}

void maxpool2_forward(std::span<const double> in, const Dims& d, std::size_t channels, std::span<double> out) {
    const Dims h = half(d);
    for (std::size_t c = 0; c < channels; ++c)
        for (std::size_t z = 0; z < h.nz; ++z)
            for (std::size_t y = 0; y < h.ny; ++y)
                for (std::size_t x = 0; x < h.nx; ++x) {
                    double m = in[c * d.count() + d.index(2 * x, 2 * y, 2 * z)];
                    for (std::size_t k = 0; k < 8; ++k)
                        m = std::max(m, in[c * d.count() + d.index(2 * x + (k & 1), 2 * y + ((k >> 1) & 1),
                                                                   2 * z + ((k >> 2) & 1))]);
                    out[c * h.count() + h.index(x, y, z)] = m;
                }
}

}  // namespace reference

}  // namespace hsda::kernels
