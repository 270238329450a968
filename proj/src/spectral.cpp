#include "hsda/spectral.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace hsda {

bool is_power_of_two(std::uint32_t n) noexcept { return n != 0 && (n & (n - 1)) == 0; }

void require_fft_dims(const Dims& dims) {
    const auto ok = [](std::uint32_t n) { return n >= 2 && is_power_of_two(n); };
    if (!ok(dims.nx) || !ok(dims.ny) || !ok(dims.nz))
        throw SpectralError(SpectralError::Code::unsupported_size,
                            "FFT requires power-of-two extents >= 2, got " + dims.str());
}

namespace {

void require_same(const Dims& a, const Dims& b, const char* what) {
    if (a != b)
        throw SpectralError(SpectralError::Code::dims_mismatch,
                            std::string(what) + ": dims " + a.str() + " and " + b.str() + " differ");
}

// Twiddle factors exp(sign * 2 pi i j / n), j < n/2, each evaluated directly
// rather than by recurrence to keep the error at rounding level.
std::vector<cplx> twiddles(std::size_t n, bool inverse) {
    const double sign = inverse ? 1.0 : -1.0;
    std::vector<cplx> w(n / 2);
    for (std::size_t j = 0; j < n / 2; ++j) {
        const double angle = sign * 2.0 * std::numbers::pi * double(j) / double(n);
        w[j] = cplx(std::cos(angle), std::sin(angle));
    }
    return w;
}

// Iterative radix-2 transform of a contiguous line.
void fft_line(std::span<cplx> a, std::span<const cplx> tw) {
    const std::size_t n = a.size();
    for (std::size_t i = 1, j = 0; i < n; ++i) {
        std::size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[i], a[j]);
    }
    for (std::size_t len = 2; len <= n; len <<= 1) {
        const std::size_t half = len / 2, step = n / len;
        for (std::size_t k = 0; k < half; ++k) {
            const double wr = tw[k * step].real(), wi = tw[k * step].imag();
            for (std::size_t start = 0; start < n; start += len) {
                const cplx u = a[start + k];
                const cplx x = a[start + k + half];
                const cplx v(x.real() * wr - x.imag() * wi, x.real() * wi + x.imag() * wr);
                a[start + k] = u + v;
                a[start + k + half] = u - v;
            }
        }
    }
}

// Transforms every line along one axis. Lines are independent, so the
// outer loop is split across threads with a private scratch line each.
void fft_axis(std::span<cplx> data, const Dims& d, int axis, bool inverse) {
    const std::size_t nx = d.nx, ny = d.ny, nz = d.nz;
    const std::size_t len = axis == 0 ? nx : axis == 1 ? ny : nz;
    const std::size_t stride = axis == 0 ? 1 : axis == 1 ? nx : nx * ny;
    const std::size_t lines = d.count() / len;
    const auto line_start = [&](std::size_t l) -> std::size_t {
        switch (axis) {
            case 0: return l * nx;                                  // l = y + ny*z
            case 1: return (l % nx) + (l / nx) * nx * ny;           // l = x + nx*z
            default: return l;                                      // l = x + nx*y
        }
    };
    const std::vector<cplx> tw = twiddles(len, inverse);
#pragma omp parallel
    {
        std::vector<cplx> scratch(len);
#pragma omp for schedule(static)
        for (std::size_t l = 0; l < lines; ++l) {
            const std::size_t base = line_start(l);
            if (stride == 1) {
                fft_line(data.subspan(base, len), tw);
            } else {
                for (std::size_t i = 0; i < len; ++i) scratch[i] = data[base + i * stride];
                fft_line(scratch, tw);
                for (std::size_t i = 0; i < len; ++i) data[base + i * stride] = scratch[i];
            }
        }
    }
}

std::size_t centered_to_unshifted(std::size_t i, std::size_t n) { return (i + n - n / 2) % n; }

}  // namespace

void fft3_inplace(std::span<cplx> data, const Dims& dims, bool inverse) {
    require_fft_dims(dims);
    if (data.size() != dims.count())
        throw SpectralError(SpectralError::Code::dims_mismatch, "buffer length does not match dims " + dims.str());
    for (int axis = 0; axis < 3; ++axis) fft_axis(data, dims, axis, inverse);
    if (inverse) {
        const double scale = 1.0 / double(dims.count());
        for (auto& c : data) c *= scale;
    }
}

Spectrum fft3(const Volume& v) {
    require_fft_dims(v.dims);
    Spectrum s{v.dims, std::vector<cplx>(v.data.begin(), v.data.end())};
    fft3_inplace(s.data, s.dims, false);
    return s;
}

InverseResult ifft3(const Spectrum& s) {
    std::vector<cplx> buf = s.data;
    fft3_inplace(buf, s.dims, true);
    InverseResult r{Volume(s.dims), 0.0};
    for (std::size_t i = 0; i < buf.size(); ++i) {
        r.volume.data[i] = buf[i].real();
        r.max_imag = std::max(r.max_imag, std::abs(buf[i].imag()));
    }
    return r;
}

AmpPhase amp_phase(const Spectrum& s) {
    AmpPhase ap{Volume(s.dims), Volume(s.dims)};
    for (std::size_t i = 0; i < s.data.size(); ++i) {
        const cplx c = s.data[i];
        ap.amplitude.data[i] = std::abs(c);
        double phase = (c == cplx(0.0, 0.0)) ? 0.0 : std::arg(c);
        // std::arg yields [-pi, pi]; fold -pi onto pi.
        if (phase == -std::numbers::pi) phase = std::numbers::pi;
        ap.phase.data[i] = phase;
    }
    return ap;
}

Spectrum from_amp_phase(const AmpPhase& ap) {
    require_same(ap.amplitude.dims, ap.phase.dims, "from_amp_phase");
    Spectrum s{ap.amplitude.dims, std::vector<cplx>(ap.amplitude.data.size())};
    for (std::size_t i = 0; i < s.data.size(); ++i) s.data[i] = std::polar(ap.amplitude.data[i], ap.phase.data[i]);
    return s;
}

std::vector<double> SpectralMask::unshifted() const {
    std::vector<double> out(weights.size());
    for (std::size_t z = 0; z < dims.nz; ++z) {
        const std::size_t uz = centered_to_unshifted(z, dims.nz);
        for (std::size_t y = 0; y < dims.ny; ++y) {
            const std::size_t uy = centered_to_unshifted(y, dims.ny);
            for (std::size_t x = 0; x < dims.nx; ++x)
                out[dims.index(centered_to_unshifted(x, dims.nx), uy, uz)] = weights[dims.index(x, y, z)];
        }
    }
    return out;
}

namespace {

template <typename Fn>
SpectralMask build_centered(const Dims& dims, Fn&& weight_of_offset) {
    SpectralMask m{dims, std::vector<double>(dims.count())};
    const auto off = [](std::size_t i, std::uint32_t n) { return std::abs(std::int64_t(i) - std::int64_t(n / 2)); };
    for (std::size_t z = 0; z < dims.nz; ++z)
        for (std::size_t y = 0; y < dims.ny; ++y)
            for (std::size_t x = 0; x < dims.nx; ++x)
                m.weights[dims.index(x, y, z)] = weight_of_offset(off(x, dims.nx), off(y, dims.ny), off(z, dims.nz));
    return m;
}

}  // namespace

SpectralMask make_hsg_mask(const Dims& dims, double sigma) {
    if (!(sigma > 0.0) || !std::isfinite(sigma))
        throw SpectralError(SpectralError::Code::invalid_parameter, "HSG sigma must be positive");
    if (dims.count() == 0) throw SpectralError(SpectralError::Code::invalid_parameter, "mask dims must be positive");
    const double hx = std::max<std::uint32_t>(dims.nx / 2, 1);
    const double hy = std::max<std::uint32_t>(dims.ny / 2, 1);
    const double hz = std::max<std::uint32_t>(dims.nz / 2, 1);
    const double denom = 2.0 * sigma * sigma;
    return build_centered(dims, [&](std::int64_t du, std::int64_t dv, std::int64_t dw) {
        const double d = std::max({double(du) / hx, double(dv) / hy, double(dw) / hz});
        return std::exp(-d * d / denom);
    });
}

SpectralMask make_fda_mask(const Dims& dims, double beta) {
    if (!(beta > 0.0 && beta <= 0.5))
        throw SpectralError(SpectralError::Code::invalid_parameter, "FDA beta must lie in (0, 0.5]");
    if (dims.count() == 0) throw SpectralError(SpectralError::Code::invalid_parameter, "mask dims must be positive");
    const auto bx = std::int64_t(std::floor(beta * dims.nx));
    const auto by = std::int64_t(std::floor(beta * dims.ny));
    const auto bz = std::int64_t(std::floor(beta * dims.nz));
    return build_centered(dims, [&](std::int64_t du, std::int64_t dv, std::int64_t dw) {
        return (du <= bx && dv <= by && dw <= bz) ? 1.0 : 0.0;
    });
}

TransferResult hsda_transfer_ex(const Volume& src, const Volume& tgt, const SpectralMask& mask) {
    require_same(src.dims, tgt.dims, "hsda_transfer");
    require_same(src.dims, mask.dims, "hsda_transfer mask");
    require_fft_dims(src.dims);

    const Spectrum fs = fft3(src);
    const Spectrum ft = fft3(tgt);
    const std::vector<double> k = mask.unshifted();
    Spectrum out{src.dims, std::vector<cplx>(fs.data.size())};
    for (std::size_t i = 0; i < fs.data.size(); ++i) {
        const double amp_s = std::abs(fs.data[i]);
        const double amp_t = std::abs(ft.data[i]);
        const double amp = amp_t * k[i] + amp_s * (1.0 - k[i]);
        // Unit phasor of the source coefficient; a zero coefficient has phase 0.
        const cplx phasor = amp_s > 0.0 ? fs.data[i] / amp_s : cplx(1.0, 0.0);
        out.data[i] = amp * phasor;
    }
    auto inv = ifft3(out);
    return {std::move(inv.volume), inv.max_imag};
}

Volume hsda_transfer(const Volume& src, const Volume& tgt, const SpectralMask& mask) {
    return hsda_transfer_ex(src, tgt, mask).volume;
}

std::vector<Volume> hsda_transfer_batch(std::span<const Volume> src, std::span<const Volume> tgt,
                                        const SpectralMask& mask) {
    if (src.size() != tgt.size())
        throw SpectralError(SpectralError::Code::dims_mismatch, "hsda_transfer_batch: batch sizes differ");
    std::vector<Volume> out(src.size());
    // Exceptions cannot cross the parallel region, so validate up front.
    for (std::size_t i = 0; i < src.size(); ++i) {
        require_same(src[i].dims, tgt[i].dims, "hsda_transfer");
        require_same(src[i].dims, mask.dims, "hsda_transfer mask");
        require_fft_dims(src[i].dims);
    }
#pragma omp parallel for schedule(static)
    for (std::size_t i = 0; i < src.size(); ++i) out[i] = hsda_transfer(src[i], tgt[i], mask);
    return out;
}

Volume lowpass_style(const Volume& z, const SpectralMask& mask) {
    require_same(z.dims, mask.dims, "lowpass_style");
    Volume out(z.dims);
    lowpass_channels(z.data, out.data, z.dims, 1, mask);
    return out;
}

void lowpass_channels(std::span<const double> in, std::span<double> out, const Dims& dims, std::size_t channels,
                      const SpectralMask& mask) {
    require_same(dims, mask.dims, "lowpass_channels");
    require_fft_dims(dims);
    const std::size_t n = dims.count();
    if (in.size() != n * channels || out.size() != n * channels)
        throw SpectralError(SpectralError::Code::dims_mismatch, "lowpass_channels: buffer length mismatch");
    const std::vector<double> k = mask.unshifted();
    std::vector<cplx> buf(n);
    for (std::size_t c = 0; c < channels; ++c) {
        for (std::size_t i = 0; i < n; ++i) buf[i] = cplx(in[c * n + i], 0.0);
        fft3_inplace(buf, dims, false);
        for (std::size_t i = 0; i < n; ++i) buf[i] *= k[i];
        fft3_inplace(buf, dims, true);
        for (std::size_t i = 0; i < n; ++i) out[c * n + i] = buf[i].real();
    }
}

}  // namespace hsda
