#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace hsda {

// Grid extents. Linear order is x-fastest, then y, then z.
struct Dims {
    std::uint32_t nx = 0;
    std::uint32_t ny = 0;
    std::uint32_t nz = 0;

    [[nodiscard]] std::size_t count() const noexcept {
        return std::size_t(nx) * std::size_t(ny) * std::size_t(nz);
    }
    [[nodiscard]] std::size_t index(std::size_t x, std::size_t y, std::size_t z) const noexcept {
        return x + std::size_t(nx) * (y + std::size_t(ny) * z);
    }
    [[nodiscard]] std::uint32_t min_extent() const noexcept;
    [[nodiscard]] std::string str() const;

    friend bool operator==(const Dims&, const Dims&) = default;
};

inline Dims cube(std::uint32_t n) { return Dims{n, n, n}; }

// Dense scalar field. Holds image patches and latent feature maps alike.
struct Volume {
    Dims dims;
    std::vector<double> data;

    Volume() = default;
    explicit Volume(Dims d, double fill = 0.0) : dims(d), data(d.count(), fill) {}
    Volume(Dims d, std::vector<double> values);

    double& operator()(std::size_t x, std::size_t y, std::size_t z) { return data[dims.index(x, y, z)]; }
    double operator()(std::size_t x, std::size_t y, std::size_t z) const { return data[dims.index(x, y, z)]; }

    [[nodiscard]] bool all_finite() const noexcept;

    friend bool operator==(const Volume&, const Volume&) = default;
};

// Binary label field; every value is exactly 0 or 1.
struct SegMask {
    Dims dims;
    std::vector<std::uint8_t> data;

    SegMask() = default;
    explicit SegMask(Dims d) : dims(d), data(d.count(), 0) {}

    [[nodiscard]] std::size_t foreground() const noexcept;
    [[nodiscard]] double foreground_fraction() const noexcept;

    friend bool operator==(const SegMask&, const SegMask&) = default;
};

class VolumeError : public std::runtime_error {
public:
    enum class Code { bad_magic, truncated, dims_overflow, dims_mismatch, bad_header, io_failure, invalid_spec };

    VolumeError(Code code, const std::string& what) : std::runtime_error(what), code_(code) {}
    [[nodiscard]] Code code() const noexcept { return code_; }

private:
    Code code_;
};

// ---------------------------------------------------------------------------
// VOL1 file format (little-endian):
//   0..3    magic "VOL1"
//   4..15   u32 nx, ny, nz
//   16..19  u32 flags, bit 0 = mask present
//   20..23  reserved, zero
//   then nx*ny*nz f32 intensities, then (if flagged) nx*ny*nz u8 mask values.
//
// Intensities are stored as f32, so write rounds each value to the nearest
// float. Volumes whose values are already float-representable round trip
// bit-exactly.
// ---------------------------------------------------------------------------
inline constexpr std::size_t vol1_header_size = 24;

struct VolumeFile {
    Volume volume;
    std::optional<SegMask> mask;
};

VolumeFile vol_read(const std::filesystem::path& path);
void vol_write(const std::filesystem::path& path, const Volume& volume,
               const std::optional<SegMask>& mask = std::nullopt);

std::vector<std::uint8_t> vol_encode(const Volume& volume, const std::optional<SegMask>& mask = std::nullopt);
VolumeFile vol_decode(const std::vector<std::uint8_t>& bytes);

// Rounds every value to the nearest f32, i.e. to what a VOL1 file can hold.
void quantize_to_f32(Volume& v);

// ---------------------------------------------------------------------------
// Synthetic vessel phantoms
// ---------------------------------------------------------------------------
enum class Modality { A, B };

Modality parse_modality(const std::string& s);
const char* to_string(Modality m);

struct PhantomSpec {
    Dims dims = cube(32);
    std::uint32_t n_tubes = 3;
    double radius_min = 1.0;
    double radius_max = 3.0;
    Modality modality = Modality::A;
    std::uint64_t seed = 0;

    // Throws VolumeError(invalid_spec) when the radius range is not
    // within [1, min(dims)/4] or n_tubes is zero.
    void validate() const;
};

inline constexpr double phantom_min_fraction = 0.005;
inline constexpr double phantom_max_fraction = 0.15;

struct Phantom {
    Volume volume;
    SegMask mask;
};

// Tube geometry depends only on (dims, n_tubes, radius range, seed); the
// modality changes the rendered intensities and nothing else.
Phantom generate_phantom(const PhantomSpec& spec);

// ---------------------------------------------------------------------------
// Maximum intensity projection
// ---------------------------------------------------------------------------
enum class Axis { x, y, z };

Axis parse_axis(const std::string& s);

struct Image2D {
    std::uint32_t width = 0;
    std::uint32_t height = 0;
    std::vector<double> data;  // row-major, width fastest

    double operator()(std::size_t i, std::size_t j) const { return data[i + std::size_t(width) * j]; }
};

// Output keeps the two remaining axes in their original order:
// axis x -> (y, z), axis y -> (x, z), axis z -> (x, y).
Image2D mip_project(const Volume& v, Axis axis);

// Binary PGM (P5), 8-bit, min-max scaled.
void write_pgm(const std::filesystem::path& path, const Image2D& image);

}  // namespace hsda
