#pragma once

// Everything inference needs from a training run, plus the on-disk archive.
//
// Archive layout: 8-byte magic "DSLCKPT1", uint64 LE manifest length,
// UTF-8 JSON manifest, then the tensors as little-endian float32 in
// manifest order.

#include <cstdint>
#include <string>

#include "dsl/ct_data.hpp"
#include "dsl/diffusion.hpp"
#include "dsl/radiomics.hpp"

namespace dsl {

struct Model {
    NoiseSchedule schedule;
    UNetConfig unet;
    Denoiser<float> denoiser;
    StudentHead<float> head;
    HuWindow window;
    bool eight_bit = false;  // inputs quantized to 256 levels before normalization
    RadiomicScaler scaler;
    std::uint64_t teacher_seed = 0;
    std::string config_hash;  // hash of the full experiment config
    std::string train_hash;   // hash of the training-relevant part only

    Model(const UNetConfig& cfg, const NoiseSchedule& s, std::uint64_t seed)
        : schedule(s), unet(cfg), denoiser(cfg, seed), head(seed ^ 0x9e3779b97f4a7c15ULL) {}

    // Patch voxels to the network input domain, applying the 8-bit
    // quantization when the model was trained that way.
    std::vector<float> prepare(const Patch& p) const;
};

void save_checkpoint(const std::string& path, const Model& m);
Model load_checkpoint(const std::string& path);

}  // namespace dsl
