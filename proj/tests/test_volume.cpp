#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "hsda/volume.hpp"
#include "oracles.hpp"

using namespace hsda;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / "hsda_tests";
    fs::create_directories(dir);
    return dir / name;
}

Volume random_f32_volume(Dims d, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, 1.0);
    Volume v(d);
    for (auto& x : v.data) x = n(rng);
    quantize_to_f32(v);
    return v;
}

}  // namespace

TEST_CASE("dims index is x fastest") {
    const Dims d{3, 4, 5};
    CHECK(d.count() == 60);
    CHECK(d.index(1, 0, 0) == 1);
    CHECK(d.index(0, 1, 0) == 3);
    CHECK(d.index(0, 0, 1) == 12);
    CHECK(d.min_extent() == 3);
}

TEST_CASE("volume rejects data of the wrong length") {
    CHECK_THROWS_AS(Volume(cube(2), std::vector<double>(7)), VolumeError);
}

TEST_CASE("VOL1 size for 2^3 is header plus f32 payload") {
    const Volume v(cube(2), 1.5);
    CHECK(vol_encode(v).size() == 24 + 32);
    SegMask m(cube(2));
    CHECK(vol_encode(v, m).size() == 24 + 32 + 8);
}

TEST_CASE("VOL1 round trip is bit exact with and without mask") {
    const Volume v = random_f32_volume(Dims{4, 8, 2}, 3);
    SegMask m(v.dims);
    for (std::size_t i = 0; i < m.data.size(); i += 3) m.data[i] = 1;

    const auto back = vol_decode(vol_encode(v, m));
    CHECK(back.volume == v);
    REQUIRE(back.mask.has_value());
    CHECK(*back.mask == m);
    CHECK_FALSE(vol_decode(vol_encode(v)).mask.has_value());

    const auto path = scratch("rt.vol");
    vol_write(path, v, m);
    const auto f = vol_read(path);
    CHECK(f.volume == v);
    CHECK(*f.mask == m);
}

TEST_CASE("VOL1 decode errors") {
    const Volume v(cube(2), 0.25);
    auto bytes = vol_encode(v);

    SUBCASE("bad magic") {
        bytes[0] = 'X';
        try {
            vol_decode(bytes);
            FAIL("no throw");
        } catch (const VolumeError& e) {
            CHECK(e.code() == VolumeError::Code::bad_magic);
        }
    }
    SUBCASE("truncated payload") {
        bytes.pop_back();
        try {
            vol_decode(bytes);
            FAIL("no throw");
        } catch (const VolumeError& e) {
            CHECK(e.code() == VolumeError::Code::truncated);
        }
    }
    SUBCASE("short header") {
        bytes.resize(10);
        CHECK_THROWS_AS(vol_decode(bytes), VolumeError);
    }
    SUBCASE("overflowing dims") {
        for (int i = 4; i < 16; ++i) bytes[i] = 0xff;
        CHECK_THROWS_AS(vol_decode(bytes), VolumeError);
    }
}

TEST_CASE("vol_read of a missing file throws") {
    CHECK_THROWS_AS(vol_read(scratch("does_not_exist.vol")), VolumeError);
}

TEST_CASE("quantize is idempotent and rounds to float") {
    Volume v(cube(2));
    v.data[0] = 0.1;
    quantize_to_f32(v);
    CHECK(v.data[0] == double(0.1f));
    const Volume w = v;
    quantize_to_f32(v);
    CHECK(v == w);
}

TEST_CASE("phantom spec validation") {
    PhantomSpec s;
    s.radius_max = 9.0;  // > 32/4
    CHECK_THROWS_AS(generate_phantom(s), VolumeError);
    s = PhantomSpec{};
    s.radius_min = 0.5;
    CHECK_THROWS_AS(generate_phantom(s), VolumeError);
    s = PhantomSpec{};
    s.n_tubes = 0;
    CHECK_THROWS_AS(generate_phantom(s), VolumeError);
}

TEST_CASE("phantoms: deterministic, finite, foreground in range, geometry shared by modality") {
    for (std::uint64_t seed : {0u, 1u, 7u, 123u}) {
        PhantomSpec s{cube(32), 3, 1.0, 3.0, Modality::A, seed};
        const Phantom a = generate_phantom(s);
        const Phantom a2 = generate_phantom(s);
        CHECK(a.volume == a2.volume);
        CHECK(a.mask == a2.mask);
        CHECK(a.volume.all_finite());
        CHECK(a.mask.foreground_fraction() >= phantom_min_fraction);
        CHECK(a.mask.foreground_fraction() <= phantom_max_fraction);
        CHECK(std::all_of(a.mask.data.begin(), a.mask.data.end(), [](auto m) { return m <= 1; }));

        s.modality = Modality::B;
        const Phantom b = generate_phantom(s);
        CHECK(b.mask == a.mask);
        CHECK(b.volume != a.volume);

        Volume q = a.volume;
        quantize_to_f32(q);
        CHECK(q == a.volume);
    }
}

TEST_CASE("modality A vessels are brighter than background, B has a narrower window") {
    PhantomSpec s{cube(32), 3, 1.0, 3.0, Modality::A, 5};
    const auto contrast = [](const Phantom& p) {
        double fg = 0, bg = 0;
        std::size_t nf = 0, nb = 0;
        for (std::size_t i = 0; i < p.mask.data.size(); ++i)
            if (p.mask.data[i]) fg += p.volume.data[i], ++nf;
            else bg += p.volume.data[i], ++nb;
        return fg / nf - bg / nb;
    };
    const double ca = contrast(generate_phantom(s));
    s.modality = Modality::B;
    const double cb = contrast(generate_phantom(s));
    CHECK(ca > 0.3);
    CHECK(cb > 0.0);
    CHECK(cb < ca);
}

TEST_CASE("mip matches brute force on every axis") {
    const Volume v = random_f32_volume(Dims{4, 6, 8}, 11);
    const Axis axes[] = {Axis::x, Axis::y, Axis::z};
    for (int a = 0; a < 3; ++a) {
        const Image2D img = mip_project(v, axes[a]);
        const auto ref = oracle::mip(v, a);
        CHECK(img.data == ref);
    }
    const Image2D ix = mip_project(v, Axis::x);
    CHECK(ix.width == 6);
    CHECK(ix.height == 8);
    const Image2D iz = mip_project(v, Axis::z);
    CHECK(iz.width == 4);
    CHECK(iz.height == 6);
}

TEST_CASE("pgm header and scaling") {
    Image2D img{3, 2, {0, 1, 2, 3, 4, 5}};
    const auto path = scratch("t.pgm");
    write_pgm(path, img);
    std::ifstream in(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), {});
    const std::string header = "P5\n3 2\n255\n";
    REQUIRE(bytes.size() == header.size() + 6);
    CHECK(bytes.substr(0, header.size()) == header);
    CHECK(std::uint8_t(bytes[header.size()]) == 0);
    CHECK(std::uint8_t(bytes.back()) == 255);
}

TEST_CASE("parse helpers") {
    CHECK(parse_modality("A") == Modality::A);
    CHECK(parse_modality("B") == Modality::B);
    CHECK(parse_axis("y") == Axis::y);
    CHECK_THROWS(parse_modality("C"));
    CHECK_THROWS(parse_axis("w"));
}
