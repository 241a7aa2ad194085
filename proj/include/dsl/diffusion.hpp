#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "dsl/nn.hpp"
#include "dsl/radiomics.hpp"

namespace dsl {

inline constexpr int kBottleneckChannels = 256;

struct NoiseSchedule {
    int steps = 0;  // T
    double beta_start = 0.0;
    double beta_end = 0.0;
    std::vector<double> betas;
    std::vector<double> alpha_bars;

    // Continuous-time cumulative product, log-linear between integer steps.
    // t in [0, T-1]; t = -1 denotes the clean signal (alpha_bar = 1).
    double alpha_bar_at(double t) const;
};

NoiseSchedule make_schedule(int steps, double beta_start, double beta_end);

// sqrt(ab) * x0 + sqrt(1 - ab) * eps
std::vector<double> q_sample(std::span<const double> x0, std::span<const double> eps, double alpha_bar);
std::vector<double> q_sample(std::span<const double> x0, int t, std::span<const double> eps, const NoiseSchedule& s);
std::vector<float> q_sample(std::span<const float> x0, int t, std::span<const float> eps, const NoiseSchedule& s);

// Mean squared error; `grad` (optional) receives d loss / d pred.
template <class T>
double diffusion_loss(std::span<const T> pred, std::span<const T> eps, std::vector<T>* grad = nullptr);

struct UNetConfig {
    int patch_side = 32;
    std::vector<int> widths{32, 64, 128};
    int bottleneck_channels = kBottleneckChannels;
    int max_groups = 8;
    int time_embed_dim = 32;
    int time_hidden = 64;

    int levels() const { return static_cast<int>(widths.size()); }
    int bottleneck_side() const { return patch_side >> levels(); }
    void validate() const;
};

template <class T>
struct BlockCache {
    nn::Tensor<T> x, a1, s1, h1, a2, s2;
    nn::GroupNormCache<T> gn1, gn2;
};

template <class T>
struct DenoiserCache {
    nn::Tensor<T> x;
    std::vector<T> temb_raw, temb_pre, temb;
    std::vector<BlockCache<T>> enc;
    BlockCache<T> mid;
    std::vector<BlockCache<T>> dec;
    std::vector<int> dec_up_channels;
    nn::Tensor<T> last;
};

// 3D U-Net noise predictor built from pre-activation residual blocks
// (GroupNorm, SiLU, conv, twice, plus a skip path). Encoder levels with
// average-pool downsampling, a bottleneck block widened to 256 channels
// (second conv 1x1x1), nearest-upsampling decoder with skip concatenation,
// sinusoidal timestep embedding. Normalization is per sample, so batch rows
// never interact.
template <class T>
class Denoiser {
public:
    Denoiser(const UNetConfig& cfg, std::uint64_t seed);

    struct Output {
        nn::Tensor<T> eps;         // same shape as input
        nn::Tensor<T> bottleneck;  // B x 256 x d^3, output of the bottleneck block
    };

    Output forward(const nn::Tensor<T>& x, std::span<const double> t, DenoiserCache<T>* cache = nullptr) const;

    // Accumulates parameter gradients. `d_bottleneck` may be null.
    void backward(const DenoiserCache<T>& cache, const nn::Tensor<T>& d_eps, const nn::Tensor<T>* d_bottleneck);

    nn::ParamStore<T>& params() { return params_; }
    const nn::ParamStore<T>& params() const { return params_; }
    const UNetConfig& config() const { return cfg_; }

private:
    struct Block {
        int cin = 0, cout = 0, groups_in = 1, groups = 1, k2 = 3;
        int gn1_g, gn1_b, conv1_w, conv1_b, tproj_w, tproj_b, gn2_g, gn2_b, conv2_w, conv2_b;
        int skip_w = -1, skip_b = -1;  // 1x1x1 projection when cin != cout
    };

    Block make_block(const std::string& name, int cin, int cout, int k2 = 3);
    nn::Tensor<T> block_forward(const Block& b, const nn::Tensor<T>& x, const std::vector<T>& temb,
                                BlockCache<T>* cache) const;
    nn::Tensor<T> block_backward(const Block& b, const BlockCache<T>& cache, const std::vector<T>& temb,
                                 const nn::Tensor<T>& dout, std::vector<T>& dtemb);

    UNetConfig cfg_;
    nn::ParamStore<T> params_;
    int conv_in_w_, conv_in_b_, time1_w_, time1_b_, conv_out_w_, conv_out_b_;
    std::vector<Block> enc_, dec_;
    Block mid_{};
};

template <class T>
struct StudentCache {
    std::vector<T> pooled, pre, relu, out;
    std::vector<double> norms;
    int batch = 0;
};

// phi_s: global average pool of the bottleneck, then l2(V2 relu(V1 u + b1) + b2).
template <class T>
class StudentHead {
public:
    explicit StudentHead(std::uint64_t seed, int in_dim = kBottleneckChannels);

    // pooled: batch x in_dim row-major. Returns batch x 128 unit rows.
    std::vector<T> forward(const std::vector<T>& pooled, int batch, StudentCache<T>* cache = nullptr) const;
    // Returns d loss / d pooled.
    std::vector<T> backward(const StudentCache<T>& cache, const std::vector<T>& dz);

    nn::ParamStore<T>& params() { return params_; }
    const nn::ParamStore<T>& params() const { return params_; }
    int in_dim() const { return in_dim_; }

private:
    int in_dim_;
    nn::ParamStore<T> params_;
};

// Spatial global average per channel: batch x channels, row-major.
template <class T>
std::vector<T> pool_bottleneck(const nn::Tensor<T>& f);
template <class T>
nn::Tensor<T> pool_bottleneck_backward(const std::vector<T>& dpooled, int n, int c, int d, int h, int w);

// Single bottleneck map (256 x d^3, channel-major) through phi_s.
Embedding student_project(std::span<const float> f, int spatial, const StudentHead<float>& head);
Embedding student_project(std::span<const double> f, int spatial, const StudentHead<double>& head);

// Adaptive-moment optimizer bound to one parameter store.
template <class T>
class Adam {
public:
    explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}
    void step(nn::ParamStore<T>& store);

private:
    double lr_, b1_, b2_, eps_;
    long t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

}  // namespace dsl
