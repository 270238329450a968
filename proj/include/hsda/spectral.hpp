#pragma once

#include <complex>
#include <span>
#include <stdexcept>
#include <vector>

#include "hsda/volume.hpp"

namespace hsda {

using cplx = std::complex<double>;

class SpectralError : public std::runtime_error {
public:
    enum class Code { unsupported_size, dims_mismatch, invalid_parameter };

    SpectralError(Code code, const std::string& what) : std::runtime_error(what), code_(code) {}
    [[nodiscard]] Code code() const noexcept { return code_; }

private:
    Code code_;
};

// Complex coefficients in Volume order with DC at linear index 0 (unshifted).
struct Spectrum {
    Dims dims;
    std::vector<cplx> data;
};

// Real weights in [0, 1] stored in centered frequency coordinates: the DC
// term sits at (nx/2, ny/2, nz/2). Symmetric under i -> (n - i) mod n per axis.
struct SpectralMask {
    Dims dims;
    std::vector<double> weights;

    double operator()(std::size_t x, std::size_t y, std::size_t z) const { return weights[dims.index(x, y, z)]; }

    // The same weights re-indexed to the unshifted layout used by Spectrum.
    [[nodiscard]] std::vector<double> unshifted() const;
    [[nodiscard]] Volume as_volume() const { return Volume(dims, weights); }
};

// Rejects anything but power-of-two extents >= 2.
void require_fft_dims(const Dims& dims);
[[nodiscard]] bool is_power_of_two(std::uint32_t n) noexcept;

Spectrum fft3(const Volume& v);

struct InverseResult {
    Volume volume;          // real part
    double max_imag = 0.0;  // largest |imaginary part| before it was dropped
    [[nodiscard]] bool residue_warning() const noexcept { return max_imag > imag_warning_threshold; }

    static constexpr double imag_warning_threshold = 1e-3;
};

InverseResult ifft3(const Spectrum& s);

// In-place transforms on a raw complex buffer laid out per `dims`.
// Forward is unnormalized; inverse includes the 1/(nx*ny*nz) factor.
void fft3_inplace(std::span<cplx> data, const Dims& dims, bool inverse);

struct AmpPhase {
    Volume amplitude;  // >= 0
    Volume phase;      // in (-pi, pi]; 0 where the coefficient is 0
};

AmpPhase amp_phase(const Spectrum& s);
Spectrum from_amp_phase(const AmpPhase& ap);

// Gaussian of the normalized Chebyshev radius
//   d = max(|du|/hx, |dv|/hy, |dw|/hz),  h = floor(n/2),
// value exp(-d^2 / (2 sigma^2)). Level sets are concentric cubes.
SpectralMask make_hsg_mask(const Dims& dims, double sigma);

// Binary cube of half-width floor(beta * n) per axis around the center.
SpectralMask make_fda_mask(const Dims& dims, double beta);

struct TransferResult {
    Volume volume;
    double max_imag = 0.0;
};

// Keeps the source phase and blends amplitudes: target weighted by the mask,
// source by its complement. The output is not clamped.
TransferResult hsda_transfer_ex(const Volume& src, const Volume& tgt, const SpectralMask& mask);
Volume hsda_transfer(const Volume& src, const Volume& tgt, const SpectralMask& mask);

// Transfers each pair independently; pairs are processed in parallel.
std::vector<Volume> hsda_transfer_batch(std::span<const Volume> src, std::span<const Volume> tgt,
                                        const SpectralMask& mask);

// Real part of F^-1[F(z) * K]. The operator is self-adjoint for
// center-symmetric masks, so the same call back-propagates gradients.
Volume lowpass_style(const Volume& z, const SpectralMask& mask);

// Channel-major variant used by the network: `data` holds `channels`
// consecutive volumes of `dims`, each filtered independently.
void lowpass_channels(std::span<const double> in, std::span<double> out, const Dims& dims, std::size_t channels,
                      const SpectralMask& mask);

}  // namespace hsda
