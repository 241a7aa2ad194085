#include "dsl/inference.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "json.hpp"

namespace dsl {

namespace fs = std::filesystem;

namespace {

std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

std::uint64_t patch_noise_seed(const FeatureOptions& opt, Index3 o, int t) {
    std::uint64_t h = mix64(opt.noise_seed);
    if (opt.shared_noise) return mix64(h ^ static_cast<std::uint32_t>(t));
    h = mix64(h ^ static_cast<std::uint32_t>(o.z));
    h = mix64(h ^ static_cast<std::uint32_t>(o.y));
    h = mix64(h ^ static_cast<std::uint32_t>(o.x));
    return mix64(h ^ static_cast<std::uint32_t>(t));
}

void fill_noise(float* dst, std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> g(0.0f, 1.0f);
    for (std::size_t k = 0; k < n; ++k) dst[k] = g(rng);
}

std::vector<int> checked_timesteps(const std::vector<int>& ts, const NoiseSchedule& s) {
    if (ts.empty()) throw InvalidArgument("timestep set is empty");
    std::set<int> seen;
    for (int t : ts) {
        if (t < 0 || t >= s.steps)
            throw InvalidArgument("timestep " + std::to_string(t) + " outside [0, " + std::to_string(s.steps) + ")");
        if (!seen.insert(t).second) throw InvalidArgument("duplicate timestep " + std::to_string(t));
    }
    return ts;
}

// x_s -> x_t with the deterministic first-order update, in place.
template <class T>
void ddim_update(T* x, const T* eps, std::size_t n, double ab_s, double ab_t) {
    const double as = std::sqrt(ab_s), ss = std::sqrt(1.0 - ab_s);
    const double at = std::sqrt(ab_t), st = std::sqrt(1.0 - ab_t);
    for (std::size_t k = 0; k < n; ++k) {
        const double x0 = (x[k] - ss * eps[k]) / as;
        x[k] = static_cast<T>(at * x0 + st * eps[k]);
    }
}

// Runs the model on a batch and returns per-sample z (B x 128) and pooled f (B x 256).
void record(const Model& m, const nn::Tensor<float>& x, const std::vector<double>& ts, nn::Tensor<float>* eps_out,
            std::vector<float>& z, std::vector<float>& pooled) {
    auto out = m.denoiser.forward(x, ts);
    pooled = pool_bottleneck(out.bottleneck);
    z = m.head.forward(pooled, x.n);
    if (eps_out != nullptr) *eps_out = std::move(out.eps);
}

void extract_batch(std::span<const Patch> patches, const Model& m, const FeatureOptions& opt,
                   std::span<PatchDescriptor> out, FeatureTrace* trace) {
    const int S = m.unet.patch_side;
    const int B = static_cast<int>(patches.size());
    const std::size_t vox = static_cast<std::size_t>(S) * S * S;
    nn::Tensor<float> x0(B, 1, S, S, S);
    for (int i = 0; i < B; ++i) {
        if (patches[i].side != S) throw InvalidArgument("patch side does not match the model");
        const auto v = m.prepare(patches[i]);
        std::copy(v.begin(), v.end(), x0.sample(i));
    }
    std::vector<std::vector<double>> sums(B, std::vector<double>(kDescriptorDim, 0.0));
    auto accumulate = [&](const std::vector<float>& z, const std::vector<float>& pooled, int t) {
        for (int i = 0; i < B; ++i) {
            for (int k = 0; k < kEmbeddingDim; ++k) sums[i][k] += z[static_cast<std::size_t>(i) * kEmbeddingDim + k];
            for (int k = 0; k < kBottleneckChannels; ++k)
                sums[i][kEmbeddingDim + k] += pooled[static_cast<std::size_t>(i) * kBottleneckChannels + k];
        }
        if (trace != nullptr) {
            trace->timesteps.push_back(t);
            trace->z.emplace_back(z.begin(), z.begin() + kEmbeddingDim);
            trace->pooled.emplace_back(pooled.begin(), pooled.begin() + kBottleneckChannels);
        }
    };

    std::vector<float> z, pooled;
    if (opt.mode == FeatureMode::Forward) {
        for (int t : opt.timesteps) {
            nn::Tensor<float> xt(B, 1, S, S, S);
            const double a = std::sqrt(m.schedule.alpha_bars[t]), s = std::sqrt(1.0 - m.schedule.alpha_bars[t]);
            std::vector<float> eps(vox);
            for (int i = 0; i < B; ++i) {
                fill_noise(eps.data(), vox, patch_noise_seed(opt, patches[i].origin, t));
                const float* src = x0.sample(i);
                float* dst = xt.sample(i);
                for (std::size_t k = 0; k < vox; ++k) dst[k] = static_cast<float>(a * src[k] + s * eps[k]);
            }
            record(m, xt, std::vector<double>(B, double(t)), nullptr, z, pooled);
            accumulate(z, pooled, t);
        }
    } else {
        std::vector<int> ts = opt.timesteps;
        std::sort(ts.begin(), ts.end(), std::greater<>());
        const int t0 = ts.front();
        nn::Tensor<float> xt(B, 1, S, S, S);
        const double a = std::sqrt(m.schedule.alpha_bars[t0]), s = std::sqrt(1.0 - m.schedule.alpha_bars[t0]);
        std::vector<float> eps(vox);
        for (int i = 0; i < B; ++i) {
            fill_noise(eps.data(), vox, patch_noise_seed(opt, patches[i].origin, t0));
            const float* src = x0.sample(i);
            float* dst = xt.sample(i);
            for (std::size_t k = 0; k < vox; ++k) dst[k] = static_cast<float>(a * src[k] + s * eps[k]);
        }
        for (std::size_t j = 0; j < ts.size(); ++j) {
            nn::Tensor<float> e;
            record(m, xt, std::vector<double>(B, double(ts[j])), &e, z, pooled);
            accumulate(z, pooled, ts[j]);
            if (j + 1 < ts.size())
                ddim_update(xt.v.data(), e.v.data(), xt.v.size(), m.schedule.alpha_bars[ts[j]],
                            m.schedule.alpha_bars[ts[j + 1]]);
        }
    }
    const double inv = 1.0 / static_cast<double>(opt.timesteps.size());
    for (int i = 0; i < B; ++i) {
        out[i].values.resize(kDescriptorDim);
        for (int k = 0; k < kDescriptorDim; ++k) out[i].values[k] = sums[i][k] * inv;
        out[i].origin = patches[i].origin;
    }
}

}  // namespace

std::string feature_mode_name(FeatureMode m) { return m == FeatureMode::Forward ? "forward" : "trajectory"; }

FeatureMode feature_mode_from_name(const std::string& s) {
    if (s == "forward") return FeatureMode::Forward;
    if (s == "trajectory") return FeatureMode::Trajectory;
    throw InvalidArgument("unknown feature mode '" + s + "' (expected forward or trajectory)");
}

PatchDescriptor extract_features(const Patch& x0, const Model& m, const FeatureOptions& opt, FeatureTrace* trace) {
    checked_timesteps(opt.timesteps, m.schedule);
    PatchDescriptor d;
    extract_batch(std::span<const Patch>(&x0, 1), m, opt, std::span<PatchDescriptor>(&d, 1), trace);
    return d;
}

std::vector<PatchDescriptor> extract_patches(std::span<const Patch> patches, const Model& m, const FeatureOptions& opt) {
    checked_timesteps(opt.timesteps, m.schedule);
    if (opt.batch < 1) throw InvalidArgument("feature batch must be >= 1");
    std::vector<PatchDescriptor> out(patches.size());
    for (std::size_t i = 0; i < patches.size(); i += static_cast<std::size_t>(opt.batch)) {
        const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(opt.batch), patches.size() - i);
        extract_batch(patches.subspan(i, n), m, opt, std::span<PatchDescriptor>(out).subspan(i, n), nullptr);
    }
    return out;
}

std::vector<PatchDescriptor> extract_corpus(const CtVolume& v, const Model& m, int stride, const FeatureOptions& opt) {
    const auto origins = grid_origins(v.dims(), m.unet.patch_side, stride);
    std::vector<Patch> patches;
    patches.reserve(origins.size());
    for (const auto& o : origins) patches.push_back(extract_patch(v, o, m.unet.patch_side));
    return extract_patches(patches, m, opt);
}

void save_descriptors(const std::string& path, std::span<const PatchDescriptor> d, const std::string& config_hash) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write descriptors '" + path + "'");
    nlohmann::ordered_json idx;
    idx["rows"] = d.size();
    idx["cols"] = kDescriptorDim;
    idx["dtype"] = "float32";
    idx["config_hash"] = config_hash;
    auto origins = nlohmann::json::array();
    for (const auto& p : d) {
        if (p.values.size() != static_cast<std::size_t>(kDescriptorDim)) throw InvalidArgument("descriptor is not 384-d");
        origins.push_back({p.origin.z, p.origin.y, p.origin.x});
        for (double v : p.values) {
            const float f = static_cast<float>(v);
            std::uint32_t u;
            std::memcpy(&u, &f, 4);
            const unsigned char b[4] = {static_cast<unsigned char>(u), static_cast<unsigned char>(u >> 8),
                                        static_cast<unsigned char>(u >> 16), static_cast<unsigned char>(u >> 24)};
            os.write(reinterpret_cast<const char*>(b), 4);
        }
    }
    idx["origins"] = origins;
    std::ofstream js(fs::path(path).replace_extension(".json"));
    if (!js) throw IoError("cannot write descriptor index for '" + path + "'");
    js << idx.dump(1) << '\n';
}

std::vector<PatchDescriptor> load_descriptors(const std::string& path) {
    std::ifstream js(fs::path(path).replace_extension(".json"));
    if (!js) throw IoError("missing descriptor index for '" + path + "'");
    nlohmann::json idx;
    try {
        idx = nlohmann::json::parse(js);
    } catch (const nlohmann::json::exception& e) {
        throw IoError("malformed descriptor index: " + std::string(e.what()));
    }
    const std::size_t rows = idx.at("rows"), cols = idx.at("cols");
    if (cols != static_cast<std::size_t>(kDescriptorDim)) throw IoError("descriptor dump is not 384 columns");
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("unreadable file '" + path + "'");
    std::vector<PatchDescriptor> out(rows);
    std::vector<unsigned char> buf(cols * 4);
    for (std::size_t r = 0; r < rows; ++r) {
        if (!is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size())))
            throw IoError("truncated descriptor dump '" + path + "'");
        out[r].values.resize(cols);
        for (std::size_t c = 0; c < cols; ++c) {
            std::uint32_t u = 0;
            for (int k = 0; k < 4; ++k) u |= std::uint32_t(buf[c * 4 + k]) << (8 * k);
            float f;
            std::memcpy(&f, &u, 4);
            out[r].values[c] = f;
        }
        const auto& o = idx.at("origins").at(r);
        out[r].origin = {o.at(0).get<int>(), o.at(1).get<int>(), o.at(2).get<int>()};
    }
    return out;
}

std::vector<double> dpm_solve(std::vector<double> x, const EpsFn& eps, const NoiseSchedule& s, int steps, int order) {
    if (steps < 1) throw InvalidArgument("solver needs at least one step");
    if (steps > s.steps) throw InvalidArgument("solver steps exceed the training schedule length");
    if (order != 1 && order != 2) throw InvalidArgument("solver order must be 1 or 2");
    const double tmax = s.steps - 1;
    std::vector<double> grid(steps);
    for (int i = 0; i < steps; ++i) grid[i] = steps == 1 ? tmax : tmax - double(i) * tmax / double(steps - 1);
    auto lam = [&](double t) {
        const double ab = s.alpha_bar_at(t);
        return 0.5 * std::log(ab) - 0.5 * std::log1p(-ab);
    };

    std::vector<double> e_prev;
    double h_prev = 0.0;
    for (int i = 0; i < steps; ++i) {
        const double ts = grid[i];
        const auto e = eps(x, ts);
        if (e.size() != x.size()) throw InvalidArgument("noise model returned the wrong shape");
        const double ab_s = s.alpha_bar_at(ts);
        if (i + 1 == steps) {
            // last step lands on the clean signal: x0 = (x - sigma eps) / alpha
            ddim_update(x.data(), e.data(), x.size(), ab_s, 1.0);
            break;
        }
        const double tt = grid[i + 1];
        const double ab_t = s.alpha_bar_at(tt);
        const double h = lam(tt) - lam(ts);
        if (order == 2 && !e_prev.empty()) {
            const double as = std::sqrt(ab_s), at = std::sqrt(ab_t), st = std::sqrt(1.0 - ab_t);
            const double phi = st * std::expm1(h);
            const double r = h_prev / h;
            for (std::size_t k = 0; k < x.size(); ++k)
                x[k] = (at / as) * x[k] - phi * e[k] - phi / (2.0 * r) * (e[k] - e_prev[k]);
        } else {
            ddim_update(x.data(), e.data(), x.size(), ab_s, ab_t);
        }
        e_prev = e;
        h_prev = h;
    }
    return x;
}

CtVolume dpm_generate(const Model& m, Dims shape, int steps, std::uint64_t seed, Vec3 spacing) {
    const int S = m.unet.patch_side;
    if (shape.z <= 0 || shape.y <= 0 || shape.x <= 0 || shape.z % S != 0 || shape.y % S != 0 || shape.x % S != 0)
        throw InvalidArgument("generation shape " + to_string(shape) + " must be a positive multiple of " +
                              std::to_string(S));
    if (steps < 1 || steps > m.schedule.steps)
        throw InvalidArgument("generation steps must lie in [1, " + std::to_string(m.schedule.steps) + "]");
    const int nz = shape.z / S, ny = shape.y / S, nx = shape.x / S;
    const int tiles = nz * ny * nx;
    const std::size_t vox = static_cast<std::size_t>(S) * S * S;
    std::vector<double> x(vox * tiles);
    for (int i = 0; i < tiles; ++i) {
        std::mt19937_64 rng(mix64(seed ^ mix64(static_cast<std::uint64_t>(i))));
        std::normal_distribution<double> g(0.0, 1.0);
        for (std::size_t k = 0; k < vox; ++k) x[i * vox + k] = g(rng);
    }
    EpsFn eps = [&](const std::vector<double>& xs, double t) {
        nn::Tensor<float> in(tiles, 1, S, S, S);
        for (std::size_t k = 0; k < xs.size(); ++k) in.v[k] = static_cast<float>(xs[k]);
        const auto out = m.denoiser.forward(in, std::vector<double>(tiles, t));
        return std::vector<double>(out.eps.v.begin(), out.eps.v.end());
    };
    x = dpm_solve(std::move(x), eps, m.schedule, steps, 2);

    CtVolume v;
    v.hu = Grid<std::int16_t>(shape);
    v.spacing = spacing;
    int i = 0;
    for (int tz = 0; tz < nz; ++tz)
        for (int ty = 0; ty < ny; ++ty)
            for (int tx = 0; tx < nx; ++tx, ++i)
                for (int z = 0; z < S; ++z)
                    for (int y = 0; y < S; ++y)
                        for (int xx = 0; xx < S; ++xx) {
                            const double n = std::clamp(x[i * vox + (static_cast<std::size_t>(z) * S + y) * S + xx], -1.0, 1.0);
                            v.hu(tz * S + z, ty * S + y, tx * S + xx) =
                                static_cast<std::int16_t>(std::lround(denormalize_hu_value(n, m.window)));
                        }
    return v;
}

}  // namespace dsl
