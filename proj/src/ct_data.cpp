#include "dsl/ct_data.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

namespace dsl {

void CtVolume::validate() const {
    for (double s : spacing) {
        if (!(s > 0.0) || !std::isfinite(s)) throw InvalidArgument("spacing components must be strictly positive");
    }
    if (hu.size() != hu.dims().size()) throw InvalidArgument("voxel buffer does not match dims");
    int lo = kMaxHu, hi = kMinHu;
    std::size_t bad = 0;
    for (auto v : hu.data()) {
        lo = std::min<int>(lo, v);
        hi = std::max<int>(hi, v);
        if (v < kMinHu || v > kMaxHu) ++bad;
    }
    if (bad > 0) {
        throw InvalidArgument("HU out of range [-1024, 3071]: " + std::to_string(bad) + " voxels, observed [" +
                              std::to_string(lo) + ", " + std::to_string(hi) + "]");
    }
}

double normalize_hu_value(double hu, HuWindow w) {
    double c = std::clamp(hu, w.lo, w.hi);
    return 2.0 * (c - w.lo) / (w.hi - w.lo) - 1.0;
}

double denormalize_hu_value(double n, HuWindow w) { return w.lo + (n + 1.0) * 0.5 * (w.hi - w.lo); }

NormalizedVolume normalize_hu(const CtVolume& v, HuWindow window) {
    if (!(window.lo < window.hi)) throw InvalidArgument("degenerate HU window (hu_min >= hu_max)");
    NormalizedVolume out;
    out.voxels = Grid<float>(v.dims());
    out.window = window;
    out.spacing = v.spacing;
    out.origin = v.origin;
    for (std::size_t i = 0; i < v.hu.size(); ++i)
        out.voxels[i] = static_cast<float>(normalize_hu_value(v.hu[i], window));
    return out;
}

CtVolume denormalize_hu(const NormalizedVolume& v) {
    if (!(v.window.lo < v.window.hi)) throw InvalidArgument("degenerate HU window (hu_min >= hu_max)");
    CtVolume out;
    out.hu = Grid<std::int16_t>(v.voxels.dims());
    out.spacing = v.spacing;
    out.origin = v.origin;
    for (std::size_t i = 0; i < v.voxels.size(); ++i) {
        double hu = std::round(denormalize_hu_value(v.voxels[i], v.window));
        out.hu[i] = static_cast<std::int16_t>(std::clamp(hu, double(kMinHu), double(kMaxHu)));
    }
    return out;
}

double quantize_8bit_value(double hu, HuWindow w) {
    const double width = (w.hi - w.lo) / 256.0;
    const double c = std::clamp(hu, w.lo, w.hi);
    const int bin = std::min(255, static_cast<int>(std::floor((c - w.lo) / width)));
    return w.lo + (bin + 0.5) * width;
}

CtVolume quantize_8bit(const CtVolume& v, HuWindow w) {
    if (!(w.lo < w.hi)) throw InvalidArgument("degenerate HU window (hu_min >= hu_max)");
    CtVolume out = v;
    for (auto& h : out.hu.data()) h = static_cast<std::int16_t>(std::lround(quantize_8bit_value(h, w)));
    return out;
}

double Patch::mean_hu() const {
    if (voxels.empty()) return 0.0;
    double s = 0.0;
    for (auto v : voxels) s += v;
    return s / static_cast<double>(voxels.size());
}

Patch extract_patch(const CtVolume& v, Index3 o, int side) {
    const Dims& d = v.dims();
    if (side <= 0 || o.z < 0 || o.y < 0 || o.x < 0 || o.z + side > d.z || o.y + side > d.y || o.x + side > d.x)
        throw InvalidArgument("patch at origin (" + std::to_string(o.z) + "," + std::to_string(o.y) + "," +
                              std::to_string(o.x) + ") with side " + std::to_string(side) +
                              " crosses volume boundary " + to_string(d));
    Patch p;
    p.side = side;
    p.origin = o;
    p.voxels.resize(static_cast<std::size_t>(side) * side * side);
    std::size_t k = 0;
    for (int z = 0; z < side; ++z)
        for (int y = 0; y < side; ++y) {
            const auto* row = &v.hu(o.z + z, o.y + y, o.x);
            std::copy(row, row + side, p.voxels.begin() + static_cast<std::ptrdiff_t>(k));
            k += static_cast<std::size_t>(side);
        }
    return p;
}

std::vector<Patch> sample_patches(const CtVolume& v, int side, int count, std::uint64_t seed,
                                  const MaskVolume* lung_mask) {
    const Dims& d = v.dims();
    if (side <= 0 || side > d.z || side > d.y || side > d.x)
        throw InvalidArgument("patch side " + std::to_string(side) + " exceeds a volume dimension " + to_string(d));
    if (count < 0) throw InvalidArgument("patch count must be nonnegative");
    std::vector<Patch> out;
    if (count == 0) return out;
    std::mt19937_64 rng(seed);
    out.reserve(static_cast<std::size_t>(count));
    if (lung_mask == nullptr) {
        std::uniform_int_distribution<int> dz(0, d.z - side), dy(0, d.y - side), dx(0, d.x - side);
        for (int i = 0; i < count; ++i) {
            Index3 o;
            o.z = dz(rng);
            o.y = dy(rng);
            o.x = dx(rng);
            out.push_back(extract_patch(v, o, side));
        }
        return out;
    }
    if (!(lung_mask->dims() == d)) throw InvalidArgument("lung mask shape does not match volume");
    std::vector<Index3> candidates;
    for (int z = 0; z <= d.z - side; ++z)
        for (int y = 0; y <= d.y - side; ++y)
            for (int x = 0; x <= d.x - side; ++x)
                if ((*lung_mask)(z, y, x) != 0) candidates.push_back({z, y, x});
    if (candidates.empty()) throw InvalidArgument("lung mask leaves no admissible patch origin");
    std::uniform_int_distribution<std::size_t> pick(0, candidates.size() - 1);
    for (int i = 0; i < count; ++i) out.push_back(extract_patch(v, candidates[pick(rng)], side));
    return out;
}

std::vector<Index3> grid_origins(const Dims& d, int side, int stride) {
    if (stride < 1) throw InvalidArgument("grid stride must be >= 1");
    if (side > d.z || side > d.y || side > d.x)
        throw InvalidArgument("volume " + to_string(d) + " is smaller than patch side " + std::to_string(side));
    std::vector<Index3> out;
    for (int z = 0; z + side <= d.z; z += stride)
        for (int y = 0; y + side <= d.y; y += stride)
            for (int x = 0; x + side <= d.x; x += stride) out.push_back({z, y, x});
    return out;
}

std::string texture_name(TextureKind t) {
    switch (t) {
        case TextureKind::Flat: return "flat";
        case TextureKind::Stripes: return "stripes";
        case TextureKind::Speckle: return "speckle";
    }
    return "flat";
}

TextureKind texture_from_name(const std::string& s) {
    if (s == "flat") return TextureKind::Flat;
    if (s == "stripes") return TextureKind::Stripes;
    if (s == "speckle") return TextureKind::Speckle;
    throw InvalidArgument("unknown texture kind '" + s + "'");
}

bool PhantomRegion::contains(int z, int y, int x) const {
    if (is_sphere) {
        double dz = z - sphere.center[0], dy = y - sphere.center[1], dx = x - sphere.center[2];
        return dz * dz + dy * dy + dx * dx <= sphere.radius * sphere.radius;
    }
    return z >= box.lo.z && z < box.hi.z && y >= box.lo.y && y < box.hi.y && x >= box.lo.x && x < box.hi.x;
}

void PhantomSpec::validate(const HuThresholds& bands) const {
    if (shape.z <= 0 || shape.y <= 0 || shape.x <= 0) throw InvalidArgument("phantom shape must be positive");
    for (double s : spacing)
        if (!(s > 0.0)) throw InvalidArgument("phantom spacing must be positive");
    for (std::size_t i = 0; i < regions.size(); ++i) {
        const auto& r = regions[i];
        const std::string tag = "region " + std::to_string(i) + " (" + std::string(label_name(r.label)) + ")";
        if (r.is_sphere) {
            for (int a = 0; a < 3; ++a) {
                int extent = a == 0 ? shape.z : (a == 1 ? shape.y : shape.x);
                if (r.sphere.center[a] - r.sphere.radius < -0.5 || r.sphere.center[a] + r.sphere.radius > extent - 0.5)
                    throw InvalidArgument(tag + ": sphere outside phantom shape");
            }
            if (!(r.sphere.radius > 0.0)) throw InvalidArgument(tag + ": sphere radius must be positive");
        } else {
            const auto& b = r.box;
            if (b.lo.z < 0 || b.lo.y < 0 || b.lo.x < 0 || b.hi.z > shape.z || b.hi.y > shape.y || b.hi.x > shape.x ||
                b.lo.z >= b.hi.z || b.lo.y >= b.hi.y || b.lo.x >= b.hi.x)
                throw InvalidArgument(tag + ": box outside phantom shape or empty");
        }
        if (r.hu_std < 0.0 || r.texture_amplitude < 0.0) throw InvalidArgument(tag + ": negative noise level");
        const auto iv = bands.interval(r.label);
        if (!(r.hu_mean > iv.lo && r.hu_mean <= iv.hi))
            throw InvalidArgument(tag + ": hu_mean " + std::to_string(r.hu_mean) + " outside class band (" +
                                  std::to_string(iv.lo) + ", " + std::to_string(iv.hi) + "]");
    }
}

namespace {

// Gaussian-smoothed white noise rescaled to unit variance.
std::vector<float> speckle_field(const Dims& d, std::mt19937_64& rng, double sigma) {
    std::normal_distribution<double> n01(0.0, 1.0);
    std::vector<float> f(d.size());
    for (auto& v : f) v = static_cast<float>(n01(rng));
    const int r = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> k(2 * r + 1);
    double ksum = 0.0;
    for (int i = -r; i <= r; ++i) ksum += k[i + r] = std::exp(-0.5 * i * i / (sigma * sigma));
    double k2 = 0.0;
    for (auto& w : k) {
        w /= ksum;
        k2 += w * w;
    }
    std::vector<float> tmp(f.size());
    auto pass = [&](int axis) {
        for (int z = 0; z < d.z; ++z)
            for (int y = 0; y < d.y; ++y)
                for (int x = 0; x < d.x; ++x) {
                    double acc = 0.0;
                    for (int i = -r; i <= r; ++i) {
                        int zz = z, yy = y, xx = x;
                        if (axis == 0) zz = std::clamp(z + i, 0, d.z - 1);
                        if (axis == 1) yy = std::clamp(y + i, 0, d.y - 1);
                        if (axis == 2) xx = std::clamp(x + i, 0, d.x - 1);
                        acc += k[i + r] * f[d.offset(zz, yy, xx)];
                    }
                    tmp[d.offset(z, y, x)] = static_cast<float>(acc);
                }
        f.swap(tmp);
    };
    pass(0);
    pass(1);
    pass(2);
    // Variance of a separable normalized smoother applied to unit white noise is (sum k^2)^3.
    const double scale = 1.0 / std::sqrt(k2 * k2 * k2);
    for (auto& v : f) v = static_cast<float>(v * scale);
    return f;
}

constexpr double kStripePeriod = 6.0;  // voxels

}  // namespace

Phantom generate_phantom(const PhantomSpec& spec, const HuThresholds& bands) {
    spec.validate(bands);
    const Dims d = spec.shape;
    Phantom ph;
    ph.volume.spacing = spec.spacing;
    ph.volume.hu = Grid<std::int16_t>(d, static_cast<std::int16_t>(kAirHu));
    ph.labels = LabelVolume(d, static_cast<std::uint8_t>(PathologyLabel::Background));

    // Owner region per voxel; reject ambiguous ground truth.
    std::vector<int> owner(d.size(), -1);
    for (int z = 0; z < d.z; ++z)
        for (int y = 0; y < d.y; ++y)
            for (int x = 0; x < d.x; ++x) {
                auto& o = owner[d.offset(z, y, x)];
                for (int r = 0; r < static_cast<int>(spec.regions.size()); ++r) {
                    if (!spec.regions[r].contains(z, y, x)) continue;
                    if (o >= 0 && spec.regions[o].label != spec.regions[r].label)
                        throw InvalidArgument("regions " + std::to_string(o) + " and " + std::to_string(r) +
                                              " overlap with different labels");
                    o = r;
                }
            }

    std::mt19937_64 rng(spec.seed);
    std::normal_distribution<double> n01(0.0, 1.0);
    std::uniform_real_distribution<double> u01(0.0, 1.0);

    for (int r = 0; r < static_cast<int>(spec.regions.size()); ++r) {
        const auto& reg = spec.regions[r];
        const double amp = reg.texture_amplitude > 0.0 ? reg.texture_amplitude : reg.hu_std;
        std::vector<float> speckle;
        double phase = 0.0;
        if (reg.texture == TextureKind::Speckle) speckle = speckle_field(d, rng, 1.0);
        if (reg.texture == TextureKind::Stripes) phase = 2.0 * std::numbers::pi * u01(rng);
        for (int z = 0; z < d.z; ++z)
            for (int y = 0; y < d.y; ++y)
                for (int x = 0; x < d.x; ++x) {
                    const std::size_t i = d.offset(z, y, x);
                    if (owner[i] != r) continue;
                    double hu = reg.hu_mean + reg.hu_std * n01(rng);
                    if (reg.texture == TextureKind::Stripes)
                        hu += amp * std::sin(2.0 * std::numbers::pi * x / kStripePeriod + phase);
                    else if (reg.texture == TextureKind::Speckle)
                        hu += amp * speckle[i];
                    ph.volume.hu[i] = static_cast<std::int16_t>(std::clamp(std::round(hu), double(kMinHu), double(kMaxHu)));
                    ph.labels[i] = static_cast<std::uint8_t>(reg.label);
                }
    }
    return ph;
}

PhantomSpec benchmark_phantom_spec(std::uint64_t seed, Dims shape) {
    PhantomSpec spec;
    spec.shape = shape;
    spec.seed = seed;
    std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
    const int m = std::max(2, shape.y / 16);
    Index3 lo{m, m, m};
    Index3 hi{shape.z - m, shape.y - m, shape.x - m};
    auto cut = [&](int a, int b) {
        int span = b - a;
        std::uniform_int_distribution<int> c(a + span * 3 / 8, a + span * 5 / 8);
        return c(rng);
    };
    const int cy = cut(lo.y, hi.y);
    const int cx = cut(lo.x, hi.x);

    struct Tissue {
        PathologyLabel label;
        double mean, std;
        TextureKind tex;
        double amp;
    };
    std::vector<Tissue> tissues{
        {PathologyLabel::Healthy, -800.0, 25.0, TextureKind::Flat, 0.0},
        {PathologyLabel::GGO, -520.0, 40.0, TextureKind::Flat, 0.0},
        {PathologyLabel::Fibrosis, -100.0, 50.0, TextureKind::Stripes, 80.0},
        {PathologyLabel::Emphysema, -925.0, 20.0, TextureKind::Speckle, 30.0},
    };
    std::shuffle(tissues.begin(), tissues.end(), rng);

    const BoxGeometry quads[4] = {
        {{lo.z, lo.y, lo.x}, {hi.z, cy, cx}},
        {{lo.z, lo.y, cx}, {hi.z, cy, hi.x}},
        {{lo.z, cy, lo.x}, {hi.z, hi.y, cx}},
        {{lo.z, cy, cx}, {hi.z, hi.y, hi.x}},
    };
    for (int q = 0; q < 4; ++q) {
        PhantomRegion r;
        r.label = tissues[q].label;
        r.box = quads[q];
        r.hu_mean = tissues[q].mean;
        r.hu_std = tissues[q].std;
        r.texture = tissues[q].tex;
        r.texture_amplitude = tissues[q].amp;
        spec.regions.push_back(r);
    }
    return spec;
}

}  // namespace dsl
