#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "dsl/volume_io.hpp"

using namespace dsl;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / "dsl_test_volume_io";
    fs::create_directories(dir);
    return dir / name;
}

CtVolume sample_volume() {
    CtVolume v;
    v.hu = Grid<std::int16_t>(Dims{5, 6, 7});
    for (std::size_t i = 0; i < v.hu.size(); ++i) v.hu[i] = static_cast<std::int16_t>(-1024 + 37 * static_cast<int>(i) % 1600);
    v.spacing = {1.25, 0.7, 0.6};
    v.origin = {-10.0, 4.5, 2.0};
    return v;
}

}  // namespace

TEST_CASE("volume round trip in every format") {
    const auto v = sample_volume();
    for (const char* name : {"v.nii", "v.nii.gz", "v.raw"}) {
        const auto p = scratch(name).string();
        save_volume(p, v, "abc123");
        const auto back = load_volume(p);
        CHECK(back.hu == v.hu);
        for (int a = 0; a < 3; ++a) {
            CHECK(back.spacing[a] == doctest::Approx(v.spacing[a]));
            CHECK(back.origin[a] == doctest::Approx(v.origin[a]));
        }
        CHECK(read_volume_tag(p) == "abc123");
    }
}

TEST_CASE("compressed output is byte-stable") {
    const auto v = sample_volume();
    const auto a = scratch("a.nii.gz").string(), b = scratch("b.nii.gz").string();
    save_volume(a, v, "x");
    save_volume(b, v, "x");
    std::ifstream fa(a, std::ios::binary), fb(b, std::ios::binary);
    const std::string sa((std::istreambuf_iterator<char>(fa)), {}), sb((std::istreambuf_iterator<char>(fb)), {});
    CHECK(sa == sb);
}

TEST_CASE("labels and float volumes round trip") {
    LabelVolume l(Dims{3, 4, 5}, 0);
    for (std::size_t i = 0; i < l.size(); ++i) l[i] = static_cast<std::uint8_t>(i % 5);
    const auto p = scratch("l.nii.gz").string();
    save_labels(p, l, {1, 2, 3}, {0, 0, 0});
    Vec3 sp{};
    CHECK(load_labels(p, &sp) == l);
    CHECK(sp[1] == doctest::Approx(2.0));

    Grid<float> f(Dims{2, 3, 4});
    for (std::size_t i = 0; i < f.size(); ++i) f[i] = 0.125f * static_cast<float>(i);
    const auto q = scratch("f.raw").string();
    save_float_volume(q, f, {1, 1, 1}, {0, 0, 0});
    CHECK(load_float_volume(q) == f);
}

TEST_CASE("invalid label values are rejected") {
    LabelVolume l(Dims{2, 2, 2}, 9);
    const auto p = scratch("bad_labels.nii").string();
    save_labels(p, l, {1, 1, 1}, {0, 0, 0});
    CHECK_THROWS_AS(load_labels(p), IoError);
}

TEST_CASE("missing and malformed inputs") {
    CHECK_THROWS_WITH_AS(load_volume(scratch("nope.nii").string()), doctest::Contains("unreadable file"), IoError);
    {
        std::ofstream os(scratch("junk.nii"), std::ios::binary);
        os << "not a volume";
    }
    CHECK_THROWS_AS(load_volume(scratch("junk.nii").string()), IoError);
    CHECK_THROWS_AS(format_from_path("x.png"), IoError);

    // raw without sidecar
    {
        std::ofstream os(scratch("lonely.raw"), std::ios::binary);
        os << std::string(16, '\0');
    }
    fs::remove(scratch("lonely.json"));
    CHECK_THROWS_WITH_AS(load_volume(scratch("lonely.raw").string()), doctest::Contains("missing spacing metadata"),
                         IoError);
}

TEST_CASE("out-of-range HU is reported") {
    Grid<float> f(Dims{2, 2, 2}, -2000.0f);
    const auto p = scratch("cold.nii").string();
    save_float_volume(p, f, {1, 1, 1}, {0, 0, 0});
    CHECK_THROWS_WITH_AS(load_volume(p), doctest::Contains("HU out of range"), IoError);
}
