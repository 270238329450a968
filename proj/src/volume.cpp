#include "hsda/volume.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <limits>
#include <numbers>
#include <random>

#include "bytes.hpp"
#include "hsda/io.hpp"

namespace hsda {

std::uint32_t Dims::min_extent() const noexcept { return std::min({nx, ny, nz}); }

std::string Dims::str() const {
    return "(" + std::to_string(nx) + ", " + std::to_string(ny) + ", " + std::to_string(nz) + ")";
}

Volume::Volume(Dims d, std::vector<double> values) : dims(d), data(std::move(values)) {
    if (data.size() != dims.count())
        throw VolumeError(VolumeError::Code::dims_mismatch,
                          "volume data length " + std::to_string(data.size()) + " does not match dims " + d.str());
}

bool Volume::all_finite() const noexcept {
    return std::all_of(data.begin(), data.end(), [](double v) { return std::isfinite(v); });
}

std::size_t SegMask::foreground() const noexcept {
    return static_cast<std::size_t>(std::count(data.begin(), data.end(), std::uint8_t{1}));
}

double SegMask::foreground_fraction() const noexcept {
    return data.empty() ? 0.0 : double(foreground()) / double(data.size());
}

// ---------------------------------------------------------------------------
// VOL1
// ---------------------------------------------------------------------------

namespace {

constexpr std::uint32_t flag_mask_present = 1u;
constexpr std::uint64_t max_voxels = std::uint64_t(1) << 30;

}  // namespace

void quantize_to_f32(Volume& v) {
    for (auto& x : v.data) x = static_cast<double>(static_cast<float>(x));
}

std::vector<std::uint8_t> vol_encode(const Volume& volume, const std::optional<SegMask>& mask) {
    if (volume.data.size() != volume.dims.count())
        throw VolumeError(VolumeError::Code::dims_mismatch, "volume data length does not match its dims");
    if (mask) {
        if (mask->dims != volume.dims)
            throw VolumeError(VolumeError::Code::dims_mismatch,
                              "mask dims " + mask->dims.str() + " differ from volume dims " + volume.dims.str());
        if (mask->data.size() != mask->dims.count())
            throw VolumeError(VolumeError::Code::dims_mismatch, "mask data length does not match its dims");
    }

    std::vector<std::uint8_t> out;
    const std::size_t n = volume.dims.count();
    out.reserve(vol1_header_size + 4 * n + (mask ? n : 0));
    out.insert(out.end(), {'V', 'O', 'L', '1'});
    detail::put_le(out, volume.dims.nx);
    detail::put_le(out, volume.dims.ny);
    detail::put_le(out, volume.dims.nz);
    detail::put_le(out, mask ? flag_mask_present : 0u);
    detail::put_le(out, 0u);
    for (double v : volume.data) detail::put_f32(out, static_cast<float>(v));
    if (mask) {
        for (std::uint8_t m : mask->data) {
            if (m > 1) throw VolumeError(VolumeError::Code::invalid_spec, "mask values must be 0 or 1");
            out.push_back(m);
        }
    }
    return out;
}

VolumeFile vol_decode(const std::vector<std::uint8_t>& bytes) {
    using Code = VolumeError::Code;
    if (bytes.size() < 4 || !std::equal(bytes.begin(), bytes.begin() + 4, "VOL1"))
        throw VolumeError(Code::bad_magic, "not a VOL1 file (bad magic)");
    if (bytes.size() < vol1_header_size)
        throw VolumeError(Code::truncated, "VOL1 header truncated: " + std::to_string(bytes.size()) + " bytes");

    const std::uint8_t* p = bytes.data();
    const Dims dims{detail::get_le<std::uint32_t>(p + 4), detail::get_le<std::uint32_t>(p + 8),
                    detail::get_le<std::uint32_t>(p + 12)};
    const auto flags = detail::get_le<std::uint32_t>(p + 16);
    const auto reserved = detail::get_le<std::uint32_t>(p + 20);
    if ((flags & ~flag_mask_present) != 0 || reserved != 0)
        throw VolumeError(Code::bad_header, "VOL1 header has unknown flags or nonzero reserved field");

    const std::uint64_t n64 = std::uint64_t(dims.nx) * dims.ny * dims.nz;
    if (dims.nx == 0 || dims.ny == 0 || dims.nz == 0 || n64 > max_voxels || n64 / dims.nx / dims.ny != dims.nz)
        throw VolumeError(Code::dims_overflow, "VOL1 dims " + dims.str() + " are zero or exceed the voxel limit");

    const bool has_mask = (flags & flag_mask_present) != 0;
    const std::size_t n = static_cast<std::size_t>(n64);
    const std::size_t expected = vol1_header_size + 4 * n + (has_mask ? n : 0);
    if (bytes.size() < expected)
        throw VolumeError(Code::truncated, "VOL1 payload truncated: expected " + std::to_string(expected) +
                                               " bytes, got " + std::to_string(bytes.size()));
    if (bytes.size() > expected)
        throw VolumeError(Code::bad_header, "VOL1 file has " + std::to_string(bytes.size() - expected) +
                                                " trailing bytes");

    VolumeFile file;
    file.volume = Volume(dims);
    const std::uint8_t* payload = p + vol1_header_size;
    for (std::size_t i = 0; i < n; ++i) file.volume.data[i] = detail::get_f32(payload + 4 * i);
    if (has_mask) {
        SegMask mask(dims);
        const std::uint8_t* mp = payload + 4 * n;
        for (std::size_t i = 0; i < n; ++i) {
            if (mp[i] > 1) throw VolumeError(Code::bad_header, "VOL1 mask value is neither 0 nor 1");
            mask.data[i] = mp[i];
        }
        file.mask = std::move(mask);
    }
    return file;
}

VolumeFile vol_read(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw VolumeError(VolumeError::Code::io_failure, "cannot open '" + path.string() + "'");
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return vol_decode(bytes);
}

void vol_write(const std::filesystem::path& path, const Volume& volume, const std::optional<SegMask>& mask) {
    const auto bytes = vol_encode(volume, mask);
    try {
        write_file_atomic(path, bytes);
    } catch (const std::runtime_error& e) {
        throw VolumeError(VolumeError::Code::io_failure, e.what());
    }
}

// ---------------------------------------------------------------------------
// Phantoms
// ---------------------------------------------------------------------------

Modality parse_modality(const std::string& s) {
    if (s == "A" || s == "a") return Modality::A;
    if (s == "B" || s == "b") return Modality::B;
    throw std::invalid_argument("unknown modality '" + s + "' (expected A or B)");
}

const char* to_string(Modality m) { return m == Modality::A ? "A" : "B"; }

void PhantomSpec::validate() const {
    using Code = VolumeError::Code;
    if (dims.count() == 0) throw VolumeError(Code::invalid_spec, "phantom dims must be positive");
    if (n_tubes == 0) throw VolumeError(Code::invalid_spec, "phantom needs at least one tube");
    if (!(radius_min >= 1.0) || !(radius_max >= radius_min))
        throw VolumeError(Code::invalid_spec, "phantom radius range must satisfy 1 <= min <= max");
    if (radius_max > dims.min_extent() / 4.0)
        throw VolumeError(Code::invalid_spec, "phantom radius max " + std::to_string(radius_max) +
                                                  " exceeds min(dims)/4 = " + std::to_string(dims.min_extent() / 4.0));
}

namespace {

using Point = std::array<double, 3>;

double segment_distance(const Point& p, const Point& a, const Point& b) {
    Point ab{b[0] - a[0], b[1] - a[1], b[2] - a[2]};
    Point ap{p[0] - a[0], p[1] - a[1], p[2] - a[2]};
    const double len2 = ab[0] * ab[0] + ab[1] * ab[1] + ab[2] * ab[2];
    double t = len2 > 0 ? (ap[0] * ab[0] + ap[1] * ab[1] + ap[2] * ab[2]) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    const double dx = ap[0] - t * ab[0], dy = ap[1] - t * ab[1], dz = ap[2] - t * ab[2];
    return std::sqrt(dx * dx + dy * dy + dz * dz);
}

struct Tube {
    std::vector<Point> points;
    double radius = 1.0;
};

std::vector<Tube> sample_tubes(const PhantomSpec& spec, std::mt19937_64& rng) {
    constexpr int control_points = 3;
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::uniform_real_distribution<double> radius(spec.radius_min, spec.radius_max);
    std::vector<Tube> tubes(spec.n_tubes);
    const std::array<double, 3> extent{double(spec.dims.nx - 1), double(spec.dims.ny - 1), double(spec.dims.nz - 1)};
    for (auto& tube : tubes) {
        tube.radius = radius(rng);
        // Endpoints start on opposite faces along a random axis so that tubes cross the patch.
        const int axis = static_cast<int>(rng() % 3);
        for (int k = 0; k < control_points; ++k) {
            Point p{};
            for (int a = 0; a < 3; ++a) p[a] = unit(rng) * extent[a];
            if (k == 0) p[axis] = 0.0;
            if (k == control_points - 1) p[axis] = extent[axis];
            tube.points.push_back(p);
        }
    }
    return tubes;
}

// Signed margin r - d of the closest tube surface; >= 0 inside a vessel.
std::vector<double> tube_margin(const PhantomSpec& spec, const std::vector<Tube>& tubes) {
    const Dims& d = spec.dims;
    std::vector<double> margin(d.count(), -std::numeric_limits<double>::infinity());
    for (std::size_t z = 0; z < d.nz; ++z)
        for (std::size_t y = 0; y < d.ny; ++y)
            for (std::size_t x = 0; x < d.nx; ++x) {
                const Point p{double(x), double(y), double(z)};
                double best = -std::numeric_limits<double>::infinity();
                for (const auto& tube : tubes)
                    for (std::size_t s = 0; s + 1 < tube.points.size(); ++s)
                        best = std::max(best, tube.radius - segment_distance(p, tube.points[s], tube.points[s + 1]));
                margin[d.index(x, y, z)] = best;
            }
    return margin;
}

// Sum of a few random low-frequency plane waves, scaled to max |field| = 1.
std::vector<double> smooth_field(const Dims& d, std::mt19937_64& rng) {
    constexpr int waves = 6;
    std::uniform_int_distribution<int> freq(-2, 2);
    std::uniform_real_distribution<double> amp(0.5, 1.0);
    std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
    struct Wave {
        std::array<int, 3> k;
        double a, phi;
    };
    std::vector<Wave> ws;
    while (ws.size() < waves) {
        Wave w{{freq(rng), freq(rng), freq(rng)}, amp(rng), phase(rng)};
        if (w.k[0] == 0 && w.k[1] == 0 && w.k[2] == 0) continue;
        ws.push_back(w);
    }
    std::vector<double> field(d.count(), 0.0);
    double peak = 0.0;
    for (std::size_t z = 0; z < d.nz; ++z)
        for (std::size_t y = 0; y < d.ny; ++y)
            for (std::size_t x = 0; x < d.nx; ++x) {
                double v = 0.0;
                for (const auto& w : ws) {
                    const double arg = 2.0 * std::numbers::pi *
                                       (w.k[0] * double(x) / d.nx + w.k[1] * double(y) / d.ny + w.k[2] * double(z) / d.nz);
                    v += w.a * std::cos(arg + w.phi);
                }
                field[d.index(x, y, z)] = v;
                peak = std::max(peak, std::abs(v));
            }
    if (peak > 0)
        for (auto& v : field) v /= peak;
    return field;
}

struct Rendering {
    double background;   // mean background level
    double bias;         // amplitude of the smooth background field
    double contrast;     // vessel minus background at full partial volume
    double noise_sigma;  // additive white noise
};

// Modality A: bright vessels on a dark, nearly flat background.
// Modality B: bright background carrying a strong smooth bias field, vessels
// compressed into a narrow contrast window, heavier noise.
Rendering rendering_for(Modality m) {
    return m == Modality::A ? Rendering{0.10, 0.03, 0.90, 0.02} : Rendering{0.45, 0.30, 0.35, 0.06};
}

}  // namespace

Phantom generate_phantom(const PhantomSpec& spec) {
    spec.validate();
    constexpr int max_attempts = 1000;
    std::mt19937_64 geometry_rng(spec.seed);

    std::vector<double> margin;
    SegMask mask(spec.dims);
    bool accepted = false;
    for (int attempt = 0; attempt < max_attempts && !accepted; ++attempt) {
        margin = tube_margin(spec, sample_tubes(spec, geometry_rng));
        for (std::size_t i = 0; i < margin.size(); ++i) mask.data[i] = margin[i] >= 0.0 ? 1 : 0;
        const double frac = mask.foreground_fraction();
        accepted = frac >= phantom_min_fraction && frac <= phantom_max_fraction;
    }
    if (!accepted)
        throw VolumeError(VolumeError::Code::invalid_spec,
                          "could not place tubes with foreground fraction in [0.005, 0.15]; adjust radius or tube count");

    // Intensity noise comes from its own stream so that geometry is shared across modalities.
    std::mt19937_64 intensity_rng(spec.seed ^ 0x9e3779b97f4a7c15ULL);
    const auto field = smooth_field(spec.dims, intensity_rng);
    const Rendering r = rendering_for(spec.modality);
    std::normal_distribution<double> noise(0.0, r.noise_sigma);

    Volume volume(spec.dims);
    for (std::size_t i = 0; i < volume.data.size(); ++i) {
        const double partial = std::clamp(margin[i] + 0.5, 0.0, 1.0);
        volume.data[i] = r.background + r.bias * field[i] + r.contrast * partial + noise(intensity_rng);
    }
    quantize_to_f32(volume);
    return {std::move(volume), std::move(mask)};
}

// ---------------------------------------------------------------------------
// MIP
// ---------------------------------------------------------------------------

Axis parse_axis(const std::string& s) {
    if (s == "x") return Axis::x;
    if (s == "y") return Axis::y;
    if (s == "z") return Axis::z;
    throw std::invalid_argument("unknown axis '" + s + "' (expected x, y or z)");
}

Image2D mip_project(const Volume& v, Axis axis) {
    const Dims& d = v.dims;
    Image2D out;
    switch (axis) {
        case Axis::x: out.width = d.ny, out.height = d.nz; break;
        case Axis::y: out.width = d.nx, out.height = d.nz; break;
        case Axis::z: out.width = d.nx, out.height = d.ny; break;
    }
    out.data.assign(std::size_t(out.width) * out.height, -std::numeric_limits<double>::infinity());
    for (std::size_t z = 0; z < d.nz; ++z)
        for (std::size_t y = 0; y < d.ny; ++y)
            for (std::size_t x = 0; x < d.nx; ++x) {
                std::size_t o = 0;
                switch (axis) {
                    case Axis::x: o = y + std::size_t(out.width) * z; break;
                    case Axis::y: o = x + std::size_t(out.width) * z; break;
                    case Axis::z: o = x + std::size_t(out.width) * y; break;
                }
                out.data[o] = std::max(out.data[o], v(x, y, z));
            }
    return out;
}

void write_pgm(const std::filesystem::path& path, const Image2D& image) {
    const auto [lo, hi] = std::minmax_element(image.data.begin(), image.data.end());
    const double min = image.data.empty() ? 0.0 : *lo;
    const double range = image.data.empty() ? 0.0 : *hi - *lo;
    std::string header = "P5\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n";
    std::vector<std::uint8_t> bytes(header.begin(), header.end());
    for (double v : image.data) {
        const double t = range > 0 ? (v - min) / range : 0.0;
        bytes.push_back(static_cast<std::uint8_t>(std::lround(255.0 * t)));
    }
    write_file_atomic(path, bytes);
}

}  // namespace hsda
