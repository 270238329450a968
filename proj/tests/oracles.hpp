#pragma once

// Independent brute-force references. Nothing here calls into the library
// except for the plain data types.

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <numbers>
#include <vector>

#include "hsda/volume.hpp"

namespace oracle {

using cplx = std::complex<double>;

// Direct O(N^2) 3D DFT, unnormalized forward, 1/N inverse, Volume order.
inline std::vector<cplx> dft3(const std::vector<cplx>& in, const hsda::Dims& d, bool inverse = false) {
    const double sign = inverse ? 1.0 : -1.0;
    const double two_pi = 2.0 * std::numbers::pi;
    std::vector<cplx> out(d.count());
    for (std::size_t kz = 0; kz < d.nz; ++kz)
        for (std::size_t ky = 0; ky < d.ny; ++ky)
            for (std::size_t kx = 0; kx < d.nx; ++kx) {
                cplx acc = 0.0;
                for (std::size_t z = 0; z < d.nz; ++z)
                    for (std::size_t y = 0; y < d.ny; ++y)
                        for (std::size_t x = 0; x < d.nx; ++x) {
                            const double ph = sign * two_pi *
                                              (double(kx * x) / d.nx + double(ky * y) / d.ny + double(kz * z) / d.nz);
                            acc += in[d.index(x, y, z)] * cplx(std::cos(ph), std::sin(ph));
                        }
                out[d.index(kx, ky, kz)] = inverse ? acc / double(d.count()) : acc;
            }
    return out;
}

inline std::vector<cplx> dft3(const hsda::Volume& v) {
    std::vector<cplx> c(v.data.begin(), v.data.end());
    return dft3(c, v.dims);
}

// Centered mask weight for unshifted frequency index i along an axis of n.
inline std::size_t centered(std::size_t i, std::size_t n) { return (i + n / 2) % n; }

// Amplitude blend with source phase, written out from the definition:
// A = K*|F(t)| + (1-K)*|F(s)|, out = Re F^-1[A e^{i arg F(s)}].
// `centered_mask` uses the DC-at-center layout.
inline hsda::Volume hsda_transfer(const hsda::Volume& s, const hsda::Volume& t,
                                  const std::vector<double>& centered_mask) {
    const hsda::Dims d = s.dims;
    const auto fs = dft3(s);
    const auto ft = dft3(t);
    std::vector<cplx> blended(d.count());
    for (std::size_t z = 0; z < d.nz; ++z)
        for (std::size_t y = 0; y < d.ny; ++y)
            for (std::size_t x = 0; x < d.nx; ++x) {
                const std::size_t i = d.index(x, y, z);
                const double k = centered_mask[d.index(centered(x, d.nx), centered(y, d.ny), centered(z, d.nz))];
                const double amp = k * std::abs(ft[i]) + (1.0 - k) * std::abs(fs[i]);
                const double ph = std::abs(fs[i]) == 0.0 ? 0.0 : std::arg(fs[i]);
                blended[i] = std::polar(amp, ph);
            }
    const auto back = dft3(blended, d, true);
    hsda::Volume out(d);
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = back[i].real();
    return out;
}

// Chebyshev-radius Gaussian from its definition, DC at the center.
inline double hsg_weight(const hsda::Dims& d, std::size_t x, std::size_t y, std::size_t z, double sigma) {
    const auto axis = [](std::size_t i, std::uint32_t n) {
        const double h = n / 2;
        return std::abs(double(i) - double(n / 2)) / h;
    };
    const double r = std::max({axis(x, d.nx), axis(y, d.ny), axis(z, d.nz)});
    return std::exp(-r * r / (2.0 * sigma * sigma));
}

// "Same" 3x3x3 convolution, channel-major, weights [cout][cin][kz][ky][kx].
inline std::vector<double> conv3(const std::vector<double>& in, const hsda::Dims& d, std::size_t cin,
                                 const std::vector<double>& w, const std::vector<double>& b, std::size_t cout) {
    const std::size_t n = d.count();
    std::vector<double> out(cout * n);
    for (std::size_t o = 0; o < cout; ++o)
        for (long z = 0; z < long(d.nz); ++z)
            for (long y = 0; y < long(d.ny); ++y)
                for (long x = 0; x < long(d.nx); ++x) {
                    double acc = b[o];
                    for (std::size_t c = 0; c < cin; ++c)
                        for (long dz = -1; dz <= 1; ++dz)
                            for (long dy = -1; dy <= 1; ++dy)
                                for (long dx = -1; dx <= 1; ++dx) {
                                    const long xx = x + dx, yy = y + dy, zz = z + dz;
                                    if (xx < 0 || yy < 0 || zz < 0 || xx >= long(d.nx) || yy >= long(d.ny) ||
                                        zz >= long(d.nz))
                                        continue;
                                    const std::size_t tap = std::size_t((dz + 1) * 9 + (dy + 1) * 3 + (dx + 1));
                                    acc += w[(o * cin + c) * 27 + tap] * in[c * n + d.index(xx, yy, zz)];
                                }
                    out[o * n + d.index(x, y, z)] = acc;
                }
    return out;
}

// Maximum along `axis` (0 = x, 1 = y, 2 = z); remaining axes keep their order.
inline std::vector<double> mip(const hsda::Volume& v, int axis) {
    const hsda::Dims d = v.dims;
    const std::uint32_t w = axis == 0 ? d.ny : d.nx;
    const std::uint32_t h = axis == 2 ? d.ny : d.nz;
    std::vector<double> out(std::size_t(w) * h, -INFINITY);
    for (std::size_t z = 0; z < d.nz; ++z)
        for (std::size_t y = 0; y < d.ny; ++y)
            for (std::size_t x = 0; x < d.nx; ++x) {
                const std::size_t i = axis == 0 ? y : x;
                const std::size_t j = axis == 2 ? y : z;
                auto& o = out[i + w * j];
                o = std::max(o, v(x, y, z));
            }
    return out;
}

struct Counts {
    std::uint64_t tp = 0, fp = 0, fn = 0;
};

inline Counts count(const hsda::SegMask& pred, const hsda::SegMask& truth) {
    Counts c;
    for (std::size_t i = 0; i < pred.data.size(); ++i) {
        c.tp += pred.data[i] && truth.data[i];
        c.fp += pred.data[i] && !truth.data[i];
        c.fn += !pred.data[i] && truth.data[i];
    }
    return c;
}

}  // namespace oracle
