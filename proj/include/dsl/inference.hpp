#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "dsl/model.hpp"

namespace dsl {

inline constexpr int kDescriptorDim = kEmbeddingDim + kBottleneckChannels;  // 384

struct PatchDescriptor {
    std::vector<double> values;  // [mean z_t (128) | mean pooled f_t (256)]
    Index3 origin;
};

enum class FeatureMode {
    Forward,     // noise x0 to each t, one denoiser pass per t
    Trajectory,  // noise x0 to max(t), then follow deterministic solver steps down through the set
};

std::string feature_mode_name(FeatureMode m);
FeatureMode feature_mode_from_name(const std::string& s);

inline const std::vector<int> kDefaultTimesteps{50, 100, 150, 200};

struct FeatureOptions {
    std::vector<int> timesteps = kDefaultTimesteps;
    std::uint64_t noise_seed = 0;
    // One noise field per timestep for every patch; otherwise noise also
    // depends on the patch origin.
    bool shared_noise = true;
    FeatureMode mode = FeatureMode::Forward;
    int batch = 32;
};

// Per-t raw values behind one descriptor, for inspection and tests.
struct FeatureTrace {
    std::vector<int> timesteps;
    std::vector<std::vector<double>> z;       // per t, 128
    std::vector<std::vector<double>> pooled;  // per t, 256
};

PatchDescriptor extract_features(const Patch& x0, const Model& m, const FeatureOptions& opt,
                                 FeatureTrace* trace = nullptr);

// Batched extraction. Noise is derived from (noise_seed, t) and, without
// shared noise, the patch origin; every descriptor matches what
// extract_features gives for that patch alone, up to float summation order.
std::vector<PatchDescriptor> extract_patches(std::span<const Patch> patches, const Model& m,
                                             const FeatureOptions& opt);

std::vector<PatchDescriptor> extract_corpus(const CtVolume& v, const Model& m, int stride, const FeatureOptions& opt);

// N x 384 float32 little-endian matrix at `path`, origins in `<stem>.json`.
void save_descriptors(const std::string& path, std::span<const PatchDescriptor> d, const std::string& config_hash);
std::vector<PatchDescriptor> load_descriptors(const std::string& path);

// Noise-prediction model over continuous time: eps(x, t) for one flat sample.
using EpsFn = std::function<std::vector<double>(const std::vector<double>& x, double t)>;

// Multistep DPM-Solver from x_T. Evaluates eps at `steps` times evenly spaced
// from T-1 down to 0, then takes a final first-order step to the clean signal.
// order 1 is the deterministic DDIM update.
std::vector<double> dpm_solve(std::vector<double> x, const EpsFn& eps, const NoiseSchedule& s, int steps, int order = 2);

// Samples a volume by tiling independent patch-sized draws. Every dimension
// of `shape` must be a multiple of the model patch side.
CtVolume dpm_generate(const Model& m, Dims shape, int steps, std::uint64_t seed, Vec3 spacing = {1.0, 1.0, 1.0});

}  // namespace dsl
