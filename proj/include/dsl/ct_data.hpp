#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dsl/grid.hpp"
#include "dsl/labels.hpp"

namespace dsl {

inline constexpr int kMinHu = -1024;
inline constexpr int kMaxHu = 3071;

using LabelVolume = Grid<std::uint8_t>;
using MaskVolume = Grid<std::uint8_t>;

struct CtVolume {
    Grid<std::int16_t> hu;
    Vec3 spacing{1.0, 1.0, 1.0};  // mm, (z, y, x)
    Vec3 origin{0.0, 0.0, 0.0};   // mm, (z, y, x)

    const Dims& dims() const { return hu.dims(); }

    // Throws InvalidArgument on out-of-range HU or non-positive spacing.
    void validate() const;
};

struct HuWindow {
    double lo = -1024.0;
    double hi = 600.0;
};

struct NormalizedVolume {
    Grid<float> voxels;  // in [-1, 1]
    HuWindow window;
    Vec3 spacing{1.0, 1.0, 1.0};
    Vec3 origin{0.0, 0.0, 0.0};
};

// Affine HU -> [-1, 1] over `window`, clipping outside it.
NormalizedVolume normalize_hu(const CtVolume& v, HuWindow window = {});
CtVolume denormalize_hu(const NormalizedVolume& v);

double normalize_hu_value(double hu, HuWindow window);
double denormalize_hu_value(double n, HuWindow window);

// 8-bit display quantization of the window: values are snapped to the centre
// of one of 256 equal bins. Models training on 8-bit exports.
CtVolume quantize_8bit(const CtVolume& v, HuWindow window);
// Centre of the 8-bit bin containing `hu` (unrounded).
double quantize_8bit_value(double hu, HuWindow window);

struct Patch {
    int side = 0;
    Index3 origin;  // voxel index of the patch corner in the parent volume
    std::vector<std::int16_t> voxels;  // side^3, x fastest

    std::int16_t at(int z, int y, int x) const {
        return voxels[(static_cast<std::size_t>(z) * side + y) * side + x];
    }
    double mean_hu() const;
};

Patch extract_patch(const CtVolume& v, Index3 origin, int side);

// `count` patches with uniformly drawn origins. With a mask, only origins whose
// voxel lies inside the mask support are eligible.
std::vector<Patch> sample_patches(const CtVolume& v, int side, int count, std::uint64_t seed,
                                  const MaskVolume* lung_mask = nullptr);

// Every grid-aligned origin (multiples of `stride`) whose patch fits inside.
std::vector<Index3> grid_origins(const Dims& dims, int side, int stride);

enum class TextureKind { Flat, Stripes, Speckle };

std::string texture_name(TextureKind t);
TextureKind texture_from_name(const std::string& s);

struct BoxGeometry {
    Index3 lo;  // inclusive
    Index3 hi;  // exclusive
};

struct SphereGeometry {
    Vec3 center;  // voxel coordinates
    double radius = 0.0;
};

struct PhantomRegion {
    PathologyLabel label = PathologyLabel::Healthy;
    bool is_sphere = false;
    BoxGeometry box;
    SphereGeometry sphere;
    double hu_mean = 0.0;
    double hu_std = 0.0;
    TextureKind texture = TextureKind::Flat;
    double texture_amplitude = 0.0;  // HU; 0 means "use hu_std"

    bool contains(int z, int y, int x) const;
};

struct PhantomSpec {
    Dims shape{64, 64, 64};
    Vec3 spacing{0.6, 0.6, 0.6};
    std::vector<PhantomRegion> regions;
    std::uint64_t seed = 0;

    // Geometry inside the shape and hu_mean inside its class band.
    void validate(const HuThresholds& bands = HuThresholds{}) const;
};

inline constexpr double kAirHu = -1000.0;

struct Phantom {
    CtVolume volume;
    LabelVolume labels;
};

Phantom generate_phantom(const PhantomSpec& spec, const HuThresholds& bands = HuThresholds{});

// Four-tissue benchmark phantom with seed-dependent layout.
PhantomSpec benchmark_phantom_spec(std::uint64_t seed, Dims shape = {64, 64, 64});

}  // namespace dsl
