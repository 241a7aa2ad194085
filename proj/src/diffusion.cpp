#include "dsl/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace dsl {

using nn::Tensor;

NoiseSchedule make_schedule(int steps, double beta_start, double beta_end) {
    if (steps < 1) throw InvalidArgument("schedule needs T >= 1");
    if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
        throw InvalidArgument("schedule needs 0 < beta_start <= beta_end < 1");
    NoiseSchedule s;
    s.steps = steps;
    s.beta_start = beta_start;
    s.beta_end = beta_end;
    s.betas.resize(steps);
    s.alpha_bars.resize(steps);
    double prod = 1.0;
    for (int t = 0; t < steps; ++t) {
        s.betas[t] = steps == 1 ? beta_start : beta_start + (beta_end - beta_start) * t / double(steps - 1);
        prod *= 1.0 - s.betas[t];
        s.alpha_bars[t] = prod;
    }
    return s;
}

double NoiseSchedule::alpha_bar_at(double t) const {
    if (t <= -1.0) return 1.0;
    if (t > steps - 1) throw InvalidArgument("timestep beyond schedule");
    if (t < 0.0) {
        // between the clean signal (t = -1) and the first step
        const double w = t + 1.0;
        return std::exp(w * std::log(alpha_bars[0]));
    }
    const int lo = static_cast<int>(std::floor(t));
    if (lo >= steps - 1) return alpha_bars[steps - 1];
    const double w = t - lo;
    return std::exp((1.0 - w) * std::log(alpha_bars[lo]) + w * std::log(alpha_bars[lo + 1]));
}

std::vector<double> q_sample(std::span<const double> x0, std::span<const double> eps, double ab) {
    if (x0.size() != eps.size()) throw InvalidArgument("q_sample: x0 and noise shapes differ");
    if (!(ab >= 0.0 && ab <= 1.0)) throw InvalidArgument("q_sample: alpha_bar outside [0, 1]");
    const double a = std::sqrt(ab), s = std::sqrt(1.0 - ab);
    std::vector<double> out(x0.size());
    for (std::size_t i = 0; i < x0.size(); ++i) out[i] = a * x0[i] + s * eps[i];
    return out;
}

std::vector<double> q_sample(std::span<const double> x0, int t, std::span<const double> eps, const NoiseSchedule& s) {
    if (t < 0 || t >= s.steps) throw InvalidArgument("q_sample: timestep outside [0, T)");
    return q_sample(x0, eps, s.alpha_bars[t]);
}

std::vector<float> q_sample(std::span<const float> x0, int t, std::span<const float> eps, const NoiseSchedule& s) {
    if (t < 0 || t >= s.steps) throw InvalidArgument("q_sample: timestep outside [0, T)");
    if (x0.size() != eps.size()) throw InvalidArgument("q_sample: x0 and noise shapes differ");
    const double a = std::sqrt(s.alpha_bars[t]), b = std::sqrt(1.0 - s.alpha_bars[t]);
    std::vector<float> out(x0.size());
    for (std::size_t i = 0; i < x0.size(); ++i) out[i] = static_cast<float>(a * x0[i] + b * eps[i]);
    return out;
}

template <class T>
double diffusion_loss(std::span<const T> pred, std::span<const T> eps, std::vector<T>* grad) {
    if (pred.size() != eps.size() || pred.empty()) throw InvalidArgument("diffusion_loss: shape mismatch");
    double acc = 0.0;
    const double n = static_cast<double>(pred.size());
    if (grad != nullptr) grad->resize(pred.size());
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double d = double(pred[i]) - double(eps[i]);
        acc += d * d;
        if (grad != nullptr) (*grad)[i] = static_cast<T>(2.0 * d / n);
    }
    return acc / n;
}

template double diffusion_loss<float>(std::span<const float>, std::span<const float>, std::vector<float>*);
template double diffusion_loss<double>(std::span<const double>, std::span<const double>, std::vector<double>*);

void UNetConfig::validate() const {
    if (widths.empty()) throw InvalidArgument("U-Net needs at least one level");
    if (bottleneck_channels != kBottleneckChannels)
        throw InvalidArgument("bottleneck channel count must be exactly 256");
    if (patch_side <= 0 || patch_side % (1 << levels()) != 0)
        throw InvalidArgument("patch side must be a positive multiple of 2^levels");
    for (int w : widths)
        if (w <= 0) throw InvalidArgument("U-Net widths must be positive");
    if (time_embed_dim <= 0 || time_embed_dim % 2 != 0 || time_hidden <= 0)
        throw InvalidArgument("time embedding dims must be positive (embed dim even)");
}

namespace {

template <class T>
void init_uniform(nn::Param<T>& p, double bound, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(-bound, bound);
    for (auto& v : p.value) v = static_cast<T>(u(rng));
}

template <class T>
std::vector<T> sinusoidal_embedding(std::span<const double> t, int dim) {
    const int half = dim / 2;
    std::vector<T> out(t.size() * static_cast<std::size_t>(dim));
    for (std::size_t i = 0; i < t.size(); ++i)
        for (int k = 0; k < half; ++k) {
            const double f = std::exp(-std::log(10000.0) * k / double(half));
            out[i * dim + k] = static_cast<T>(std::sin(t[i] * f));
            out[i * dim + half + k] = static_cast<T>(std::cos(t[i] * f));
        }
    return out;
}

// y[n][c][:] += bias[n][c]
template <class T>
void add_channel_bias(Tensor<T>& y, const std::vector<T>& bias) {
    for (int i = 0; i < y.n; ++i)
        for (int c = 0; c < y.c; ++c) {
            const T b = bias[static_cast<std::size_t>(i) * y.c + c];
            T* p = y.channel(i, c);
            for (std::size_t k = 0; k < y.spatial(); ++k) p[k] += b;
        }
}

template <class T>
std::vector<T> sum_spatial(const Tensor<T>& y) {
    std::vector<T> out(static_cast<std::size_t>(y.n) * y.c, T(0));
    for (int i = 0; i < y.n; ++i)
        for (int c = 0; c < y.c; ++c) {
            const T* p = y.channel(i, c);
            double acc = 0.0;
            for (std::size_t k = 0; k < y.spatial(); ++k) acc += p[k];
            out[static_cast<std::size_t>(i) * y.c + c] = static_cast<T>(acc);
        }
    return out;
}

template <class T>
void add_into(Tensor<T>& a, const Tensor<T>& b) {
    for (std::size_t k = 0; k < a.size(); ++k) a.v[k] += b.v[k];
}

}  // namespace

template <class T>
typename Denoiser<T>::Block Denoiser<T>::make_block(const std::string& name, int cin, int cout, int k2) {
    Block b;
    b.cin = cin;
    b.cout = cout;
    b.k2 = k2;
    b.groups_in = nn::group_count(cin, cfg_.max_groups);
    b.groups = nn::group_count(cout, cfg_.max_groups);
    b.gn1_g = params_.add(name + ".norm1.weight", {cin});
    b.gn1_b = params_.add(name + ".norm1.bias", {cin});
    b.conv1_w = params_.add(name + ".conv1.weight", {cout, cin, 3, 3, 3});
    b.conv1_b = params_.add(name + ".conv1.bias", {cout});
    b.tproj_w = params_.add(name + ".time_proj.weight", {cout, cfg_.time_hidden});
    b.tproj_b = params_.add(name + ".time_proj.bias", {cout});
    b.gn2_g = params_.add(name + ".norm2.weight", {cout});
    b.gn2_b = params_.add(name + ".norm2.bias", {cout});
    b.conv2_w = params_.add(name + ".conv2.weight", {cout, cout, k2, k2, k2});
    b.conv2_b = params_.add(name + ".conv2.bias", {cout});
    if (cin != cout) {
        b.skip_w = params_.add(name + ".skip.weight", {cout, cin, 1, 1, 1});
        b.skip_b = params_.add(name + ".skip.bias", {cout});
    }
    return b;
}

template <class T>
Denoiser<T>::Denoiser(const UNetConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    const int L = cfg_.levels();
    const auto& w = cfg_.widths;
    conv_in_w_ = params_.add("conv_in.weight", {w[0], 1, 3, 3, 3});
    conv_in_b_ = params_.add("conv_in.bias", {w[0]});
    time1_w_ = params_.add("time_mlp.weight", {cfg_.time_hidden, cfg_.time_embed_dim});
    time1_b_ = params_.add("time_mlp.bias", {cfg_.time_hidden});
    for (int l = 0; l < L; ++l) enc_.push_back(make_block("enc" + std::to_string(l), l == 0 ? w[0] : w[l - 1], w[l]));
    // 1x1x1 second conv at the bottleneck keeps the 256-wide tap within the parameter budget
    mid_ = make_block("mid", w[L - 1], cfg_.bottleneck_channels, 1);
    dec_.resize(L);
    for (int l = L - 1; l >= 0; --l) {
        const int up = l == L - 1 ? cfg_.bottleneck_channels : w[l + 1];
        dec_[l] = make_block("dec" + std::to_string(l), up + w[l], w[l]);
    }
    conv_out_w_ = params_.add("conv_out.weight", {1, w[0], 3, 3, 3});
    conv_out_b_ = params_.add("conv_out.bias", {1});

    std::mt19937_64 rng(seed);
    for (auto& p : params_.all()) {
        const bool is_norm = p.name.find(".norm") != std::string::npos;
        if (is_norm) {
            const bool weight = p.name.ends_with(".weight");
            std::fill(p.value.begin(), p.value.end(), T(weight ? 1 : 0));
            continue;
        }
        // fan_in from the matching weight shape: product of all but the first dim
        std::string wname = p.name;
        if (wname.ends_with(".bias")) wname = wname.substr(0, wname.size() - 5) + ".weight";
        std::size_t fan_in = 1;
        for (const auto& q : params_.all())
            if (q.name == wname) {
                for (std::size_t k = 1; k < q.shape.size(); ++k) fan_in *= static_cast<std::size_t>(q.shape[k]);
                break;
            }
        init_uniform(p, 1.0 / std::sqrt(double(fan_in)), rng);
    }
}

template <class T>
Tensor<T> Denoiser<T>::block_forward(const Block& b, const Tensor<T>& x, const std::vector<T>& temb,
                                     BlockCache<T>* cache) const {
    BlockCache<T> local;
    BlockCache<T>& c = cache != nullptr ? *cache : local;
    if (cache != nullptr) c.x = x;
    nn::groupnorm_forward(x, params_[b.gn1_g], params_[b.gn1_b], b.groups_in, c.a1, c.gn1);
    nn::silu_forward(c.a1, c.s1);
    nn::conv3d_forward(c.s1, params_[b.conv1_w], params_[b.conv1_b], b.cout, 3, c.h1);
    std::vector<T> tb;
    nn::linear_forward(temb, x.n, cfg_.time_hidden, params_[b.tproj_w], params_[b.tproj_b], b.cout, tb);
    add_channel_bias(c.h1, tb);
    nn::groupnorm_forward(c.h1, params_[b.gn2_g], params_[b.gn2_b], b.groups, c.a2, c.gn2);
    nn::silu_forward(c.a2, c.s2);
    Tensor<T> out;
    nn::conv3d_forward(c.s2, params_[b.conv2_w], params_[b.conv2_b], b.cout, b.k2, out);
    if (b.skip_w >= 0) {
        Tensor<T> sk;
        nn::conv3d_forward(x, params_[b.skip_w], params_[b.skip_b], b.cout, 1, sk);
        add_into(out, sk);
    } else {
        add_into(out, x);
    }
    return out;
}

template <class T>
Tensor<T> Denoiser<T>::block_backward(const Block& b, const BlockCache<T>& c, const std::vector<T>& temb,
                                      const Tensor<T>& dout, std::vector<T>& dtemb) {
    Tensor<T> ds2, da2, dh1, ds1, da1, dx;
    nn::conv3d_backward(c.s2, params_[b.conv2_w], params_[b.conv2_b], b.cout, b.k2, dout, &ds2);
    nn::silu_backward(c.a2, ds2, da2);
    nn::groupnorm_backward(params_[b.gn2_g], params_[b.gn2_b], b.groups, c.gn2, da2, dh1);
    const std::vector<T> dtb = sum_spatial(dh1);
    std::vector<T> dte;
    nn::linear_backward(temb, c.x.n, cfg_.time_hidden, params_[b.tproj_w], params_[b.tproj_b], b.cout, dtb, &dte);
    for (std::size_t k = 0; k < dte.size(); ++k) dtemb[k] += dte[k];
    nn::conv3d_backward(c.s1, params_[b.conv1_w], params_[b.conv1_b], b.cout, 3, dh1, &ds1);
    nn::silu_backward(c.a1, ds1, da1);
    nn::groupnorm_backward(params_[b.gn1_g], params_[b.gn1_b], b.groups_in, c.gn1, da1, dx);
    if (b.skip_w >= 0) {
        Tensor<T> dsk;
        nn::conv3d_backward(c.x, params_[b.skip_w], params_[b.skip_b], b.cout, 1, dout, &dsk);
        add_into(dx, dsk);
    } else {
        add_into(dx, dout);
    }
    return dx;
}

template <class T>
typename Denoiser<T>::Output Denoiser<T>::forward(const Tensor<T>& x, std::span<const double> t,
                                                  DenoiserCache<T>* cache) const {
    const int S = cfg_.patch_side;
    if (x.c != 1 || x.d != S || x.h != S || x.w != S)
        throw InvalidArgument("denoiser expects B x 1 x " + std::to_string(S) + "^3 input");
    if (static_cast<int>(t.size()) != x.n) throw InvalidArgument("one timestep per batch row required");
    const int L = cfg_.levels();
    DenoiserCache<T> local;
    DenoiserCache<T>& c = cache != nullptr ? *cache : local;
    c.enc.assign(L, {});
    c.dec.assign(L, {});
    if (cache != nullptr) c.x = x;

    c.temb_raw = sinusoidal_embedding<T>(t, cfg_.time_embed_dim);
    nn::linear_forward(c.temb_raw, x.n, cfg_.time_embed_dim, params_[time1_w_], params_[time1_b_], cfg_.time_hidden,
                       c.temb_pre);
    c.temb.resize(c.temb_pre.size());
    for (std::size_t k = 0; k < c.temb.size(); ++k) c.temb[k] = c.temb_pre[k] / (T(1) + std::exp(-c.temb_pre[k]));

    Tensor<T> h;
    nn::conv3d_forward(x, params_[conv_in_w_], params_[conv_in_b_], cfg_.widths[0], 3, h);
    std::vector<Tensor<T>> skips(L);
    for (int l = 0; l < L; ++l) {
        skips[l] = block_forward(enc_[l], h, c.temb, cache ? &c.enc[l] : nullptr);
        nn::avgpool2_forward(skips[l], h);
    }
    Output out;
    h = block_forward(mid_, h, c.temb, cache ? &c.mid : nullptr);
    out.bottleneck = h;
    c.dec_up_channels.assign(L, 0);
    for (int l = L - 1; l >= 0; --l) {
        Tensor<T> up, cat;
        nn::upsample2_forward(h, up);
        c.dec_up_channels[l] = up.c;
        nn::concat_channels(up, skips[l], cat);
        h = block_forward(dec_[l], cat, c.temb, cache ? &c.dec[l] : nullptr);
    }
    if (cache != nullptr) c.last = h;
    nn::conv3d_forward(h, params_[conv_out_w_], params_[conv_out_b_], 1, 3, out.eps);
    return out;
}

template <class T>
void Denoiser<T>::backward(const DenoiserCache<T>& c, const Tensor<T>& d_eps, const Tensor<T>* d_bottleneck) {
    const int L = cfg_.levels();
    std::vector<T> dtemb(c.temb.size(), T(0));
    Tensor<T> dh;
    nn::conv3d_backward(c.last, params_[conv_out_w_], params_[conv_out_b_], 1, 3, d_eps, &dh);
    std::vector<Tensor<T>> dskips(L);
    for (int l = 0; l < L; ++l) {
        Tensor<T> dcat = block_backward(dec_[l], c.dec[l], c.temb, dh, dtemb);
        Tensor<T> dup;
        nn::split_channels(dcat, c.dec_up_channels[l], dup, dskips[l]);
        nn::upsample2_backward(dup, dh);
    }
    if (d_bottleneck != nullptr) add_into(dh, *d_bottleneck);
    dh = block_backward(mid_, c.mid, c.temb, dh, dtemb);
    for (int l = L - 1; l >= 0; --l) {
        Tensor<T> dpool;
        nn::avgpool2_backward(dh, dpool);
        add_into(dpool, dskips[l]);
        dh = block_backward(enc_[l], c.enc[l], c.temb, dpool, dtemb);
    }
    nn::conv3d_backward(c.x, params_[conv_in_w_], params_[conv_in_b_], cfg_.widths[0], 3, dh, static_cast<Tensor<T>*>(nullptr));
    for (std::size_t k = 0; k < dtemb.size(); ++k) {
        const T s = T(1) / (T(1) + std::exp(-c.temb_pre[k]));
        dtemb[k] *= s * (T(1) + c.temb_pre[k] * (T(1) - s));
    }
    nn::linear_backward(c.temb_raw, c.x.n, cfg_.time_embed_dim, params_[time1_w_], params_[time1_b_],
                        cfg_.time_hidden, dtemb, static_cast<std::vector<T>*>(nullptr));
}

template class Denoiser<float>;
template class Denoiser<double>;

template <class T>
StudentHead<T>::StudentHead(std::uint64_t seed, int in_dim) : in_dim_(in_dim) {
    params_.add("student.v1.weight", {kEmbeddingDim, in_dim});
    params_.add("student.v1.bias", {kEmbeddingDim});
    params_.add("student.v2.weight", {kEmbeddingDim, kEmbeddingDim});
    params_.add("student.v2.bias", {kEmbeddingDim});
    std::mt19937_64 rng(seed);
    init_uniform(params_[0], 1.0 / std::sqrt(double(in_dim)), rng);
    init_uniform(params_[1], 1.0 / std::sqrt(double(in_dim)), rng);
    init_uniform(params_[2], 1.0 / std::sqrt(double(kEmbeddingDim)), rng);
    init_uniform(params_[3], 1.0 / std::sqrt(double(kEmbeddingDim)), rng);
}

template <class T>
std::vector<T> StudentHead<T>::forward(const std::vector<T>& pooled, int batch, StudentCache<T>* cache) const {
    StudentCache<T> local;
    StudentCache<T>& c = cache != nullptr ? *cache : local;
    c.batch = batch;
    c.pooled = pooled;
    nn::linear_forward(pooled, batch, in_dim_, params_[0], params_[1], kEmbeddingDim, c.pre);
    c.relu = c.pre;
    for (auto& v : c.relu) v = std::max(v, T(0));
    nn::linear_forward(c.relu, batch, kEmbeddingDim, params_[2], params_[3], kEmbeddingDim, c.out);
    c.norms.assign(batch, 0.0);
    std::vector<T> z(c.out.size());
    for (int i = 0; i < batch; ++i) {
        double n2 = 0.0;
        for (int k = 0; k < kEmbeddingDim; ++k) n2 += double(c.out[i * kEmbeddingDim + k]) * c.out[i * kEmbeddingDim + k];
        const double n = std::sqrt(n2);
        if (!(n >= 1e-12)) throw Error("degenerate embedding: pre-normalization norm below 1e-12");
        c.norms[i] = n;
        for (int k = 0; k < kEmbeddingDim; ++k) z[i * kEmbeddingDim + k] = static_cast<T>(c.out[i * kEmbeddingDim + k] / n);
    }
    return z;
}

template <class T>
std::vector<T> StudentHead<T>::backward(const StudentCache<T>& c, const std::vector<T>& dz) {
    const int B = c.batch;
    std::vector<T> dout(dz.size());
    for (int i = 0; i < B; ++i) {
        const double n = c.norms[i];
        double dot = 0.0;
        for (int k = 0; k < kEmbeddingDim; ++k) dot += double(dz[i * kEmbeddingDim + k]) * c.out[i * kEmbeddingDim + k] / n;
        for (int k = 0; k < kEmbeddingDim; ++k) {
            const double zk = c.out[i * kEmbeddingDim + k] / n;
            dout[i * kEmbeddingDim + k] = static_cast<T>((dz[i * kEmbeddingDim + k] - zk * dot) / n);
        }
    }
    std::vector<T> drelu, dpooled;
    nn::linear_backward(c.relu, B, kEmbeddingDim, params_[2], params_[3], kEmbeddingDim, dout, &drelu);
    for (std::size_t k = 0; k < drelu.size(); ++k)
        if (c.pre[k] <= T(0)) drelu[k] = T(0);
    nn::linear_backward(c.pooled, B, in_dim_, params_[0], params_[1], kEmbeddingDim, drelu, &dpooled);
    return dpooled;
}

template class StudentHead<float>;
template class StudentHead<double>;

template <class T>
std::vector<T> pool_bottleneck(const Tensor<T>& f) {
    std::vector<T> out(static_cast<std::size_t>(f.n) * f.c);
    for (int i = 0; i < f.n; ++i)
        for (int c = 0; c < f.c; ++c) {
            const T* p = f.channel(i, c);
            double acc = 0.0;
            for (std::size_t k = 0; k < f.spatial(); ++k) acc += p[k];
            out[static_cast<std::size_t>(i) * f.c + c] = static_cast<T>(acc / double(f.spatial()));
        }
    return out;
}

template <class T>
Tensor<T> pool_bottleneck_backward(const std::vector<T>& dp, int n, int c, int d, int h, int w) {
    Tensor<T> out(n, c, d, h, w);
    const T inv = T(1) / static_cast<T>(out.spatial());
    for (int i = 0; i < n; ++i)
        for (int ch = 0; ch < c; ++ch) {
            T* p = out.channel(i, ch);
            std::fill(p, p + out.spatial(), dp[static_cast<std::size_t>(i) * c + ch] * inv);
        }
    return out;
}

template std::vector<float> pool_bottleneck<float>(const Tensor<float>&);
template std::vector<double> pool_bottleneck<double>(const Tensor<double>&);
template Tensor<float> pool_bottleneck_backward<float>(const std::vector<float>&, int, int, int, int, int);
template Tensor<double> pool_bottleneck_backward<double>(const std::vector<double>&, int, int, int, int, int);

namespace {

template <class T>
Embedding student_project_impl(std::span<const T> f, int spatial, const StudentHead<T>& head) {
    const int C = head.in_dim();
    if (spatial <= 0 || f.size() != static_cast<std::size_t>(C) * spatial)
        throw InvalidArgument("student_project expects a " + std::to_string(C) + "-channel bottleneck map");
    std::vector<T> pooled(C);
    for (int c = 0; c < C; ++c) {
        double acc = 0.0;
        for (int k = 0; k < spatial; ++k) acc += f[static_cast<std::size_t>(c) * spatial + k];
        pooled[c] = static_cast<T>(acc / spatial);
    }
    auto z = head.forward(pooled, 1);
    Embedding e(kEmbeddingDim);
    for (int k = 0; k < kEmbeddingDim; ++k) e(k) = z[k];
    return e;
}

}  // namespace

Embedding student_project(std::span<const float> f, int spatial, const StudentHead<float>& head) {
    return student_project_impl(f, spatial, head);
}
Embedding student_project(std::span<const double> f, int spatial, const StudentHead<double>& head) {
    return student_project_impl(f, spatial, head);
}

template <class T>
void Adam<T>::step(nn::ParamStore<T>& store) {
    auto& ps = store.all();
    if (m_.empty()) {
        for (const auto& p : ps) {
            m_.emplace_back(p.size(), 0.0);
            v_.emplace_back(p.size(), 0.0);
        }
    }
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, double(t_)), c2 = 1.0 - std::pow(b2_, double(t_));
    for (std::size_t i = 0; i < ps.size(); ++i) {
        auto& p = ps[i];
        auto& m = m_[i];
        auto& v = v_[i];
        for (std::size_t k = 0; k < p.size(); ++k) {
            const double g = p.grad[k];
            m[k] = b1_ * m[k] + (1.0 - b1_) * g;
            v[k] = b2_ * v[k] + (1.0 - b2_) * g * g;
            p.value[k] -= static_cast<T>(lr_ * (m[k] / c1) / (std::sqrt(v[k] / c2) + eps_));
        }
    }
}

template class Adam<float>;
template class Adam<double>;

}  // namespace dsl
