#include "dsl/nn.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>

#include "dsl/grid.hpp"

namespace dsl::nn {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapM = Eigen::Map<RowMat<T>>;
template <class T>
using CMapM = Eigen::Map<const RowMat<T>>;

template <class T>
int ParamStore<T>::add(std::string name, std::vector<int> shape) {
    Param<T> p;
    p.name = std::move(name);
    p.shape = std::move(shape);
    std::size_t n = 1;
    for (int s : p.shape) n *= static_cast<std::size_t>(s);
    p.value.assign(n, T(0));
    p.grad.assign(n, T(0));
    params_.push_back(std::move(p));
    return static_cast<int>(params_.size()) - 1;
}

template <class T>
std::size_t ParamStore<T>::count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.size();
    return n;
}

template <class T>
void ParamStore<T>::zero_grad() {
    for (auto& p : params_) std::fill(p.grad.begin(), p.grad.end(), T(0));
}

int group_count(int channels, int max_groups) {
    for (int g = std::min(channels, max_groups); g >= 1; --g)
        if (channels % g == 0) return g;
    return 1;
}

namespace {

// col[(ci*27 + kz*9 + ky*3 + kx) * P + voxel] for a 3x3x3 same-padded kernel.
template <class T>
void im2col3(const T* x, int c, int d, int h, int w, T* col) {
    const std::size_t P = static_cast<std::size_t>(d) * h * w;
    for (int ci = 0; ci < c; ++ci) {
        const T* xc = x + P * ci;
        for (int kz = 0; kz < 3; ++kz)
            for (int ky = 0; ky < 3; ++ky)
                for (int kx = 0; kx < 3; ++kx) {
                    T* row = col + P * (static_cast<std::size_t>(ci) * 27 + kz * 9 + ky * 3 + kx);
                    const int xlo = std::max(0, 1 - kx), xhi = std::min(w, w + 1 - kx);
                    for (int z = 0; z < d; ++z) {
                        const int zz = z + kz - 1;
                        for (int y = 0; y < h; ++y) {
                            const int yy = y + ky - 1;
                            T* out = row + (static_cast<std::size_t>(z) * h + y) * w;
                            if (zz < 0 || zz >= d || yy < 0 || yy >= h) {
                                std::fill(out, out + w, T(0));
                                continue;
                            }
                            const T* in = xc + (static_cast<std::size_t>(zz) * h + yy) * w + (kx - 1);
                            for (int xx = 0; xx < xlo; ++xx) out[xx] = T(0);
                            for (int xx = xlo; xx < xhi; ++xx) out[xx] = in[xx];
                            for (int xx = xhi; xx < w; ++xx) out[xx] = T(0);
                        }
                    }
                }
    }
}

template <class T>
void col2im3(const T* col, int c, int d, int h, int w, T* dx) {
    const std::size_t P = static_cast<std::size_t>(d) * h * w;
    for (int ci = 0; ci < c; ++ci) {
        T* xc = dx + P * ci;
        for (int kz = 0; kz < 3; ++kz)
            for (int ky = 0; ky < 3; ++ky)
                for (int kx = 0; kx < 3; ++kx) {
                    const T* row = col + P * (static_cast<std::size_t>(ci) * 27 + kz * 9 + ky * 3 + kx);
                    const int xlo = std::max(0, 1 - kx), xhi = std::min(w, w + 1 - kx);
                    for (int z = 0; z < d; ++z) {
                        const int zz = z + kz - 1;
                        if (zz < 0 || zz >= d) continue;
                        for (int y = 0; y < h; ++y) {
                            const int yy = y + ky - 1;
                            if (yy < 0 || yy >= h) continue;
                            const T* in = row + (static_cast<std::size_t>(z) * h + y) * w;
                            T* out = xc + (static_cast<std::size_t>(zz) * h + yy) * w + (kx - 1);
                            for (int xx = xlo; xx < xhi; ++xx) out[xx] += in[xx];
                        }
                    }
                }
    }
}

}  // namespace

template <class T>
void conv3d_forward(const Tensor<T>& x, const Param<T>& weight, const Param<T>& bias, int cout, int k, Tensor<T>& y) {
    if (k != 1 && k != 3) throw InvalidArgument("conv3d supports kernel 1 or 3");
    const int K = k * k * k * x.c;
    if (weight.size() != static_cast<std::size_t>(cout) * K || bias.size() != static_cast<std::size_t>(cout))
        throw InvalidArgument("conv3d weight shape mismatch for '" + weight.name + "'");
    const auto P = static_cast<Eigen::Index>(x.spatial());
    y = Tensor<T>(x.n, cout, x.d, x.h, x.w);
    CMapM<T> W(weight.value.data(), cout, K);
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> b(bias.value.data(), cout);
    std::vector<T> col;
    if (k == 3) col.resize(static_cast<std::size_t>(K) * P);
    for (int i = 0; i < x.n; ++i) {
        const T* src = x.sample(i);
        if (k == 3) {
            im2col3(src, x.c, x.d, x.h, x.w, col.data());
            src = col.data();
        }
        MapM<T> Y(y.sample(i), cout, P);
        Y.noalias() = W * CMapM<T>(src, K, P);
        Y.colwise() += b;
    }
}

template <class T>
void conv3d_backward(const Tensor<T>& x, Param<T>& weight, Param<T>& bias, int cout, int k, const Tensor<T>& dy,
                     Tensor<T>* dx) {
    const int K = k * k * k * x.c;
    const auto P = static_cast<Eigen::Index>(x.spatial());
    CMapM<T> W(weight.value.data(), cout, K);
    MapM<T> dW(weight.grad.data(), cout, K);
    Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> db(bias.grad.data(), cout);
    std::vector<T> col, dcol;
    if (k == 3) {
        col.resize(static_cast<std::size_t>(K) * P);
        if (dx != nullptr) dcol.resize(col.size());
    }
    if (dx != nullptr) *dx = Tensor<T>(x.n, x.c, x.d, x.h, x.w);
    for (int i = 0; i < x.n; ++i) {
        CMapM<T> dY(dy.sample(i), cout, P);
        const T* src = x.sample(i);
        if (k == 3) {
            im2col3(src, x.c, x.d, x.h, x.w, col.data());
            src = col.data();
        }
        dW.noalias() += dY * CMapM<T>(src, K, P).transpose();
        // plain loop: Eigen's vectorized reductions over a Map peel by runtime
        // alignment, which would make the summation order allocation-dependent
        for (int co = 0; co < cout; ++co) {
            const T* row = dy.channel(i, co);
            T acc = T(0);
            for (Eigen::Index k = 0; k < P; ++k) acc += row[k];
            db(co) += acc;
        }
        if (dx == nullptr) continue;
        if (k == 3) {
            MapM<T>(dcol.data(), K, P).noalias() = W.transpose() * dY;
            col2im3(dcol.data(), x.c, x.d, x.h, x.w, dx->sample(i));
        } else {
            MapM<T>(dx->sample(i), K, P).noalias() = W.transpose() * dY;
        }
    }
}

template <class T>
void groupnorm_forward(const Tensor<T>& x, const Param<T>& gamma, const Param<T>& beta, int groups, Tensor<T>& y,
                       GroupNormCache<T>& cache) {
    if (x.c % groups != 0) throw InvalidArgument("group count must divide channels");
    constexpr double eps = 1e-5;
    const int cg = x.c / groups;
    const std::size_t P = x.spatial(), M = P * cg;
    y = Tensor<T>(x.n, x.c, x.d, x.h, x.w);
    cache.xhat = Tensor<T>(x.n, x.c, x.d, x.h, x.w);
    cache.rstd.assign(static_cast<std::size_t>(x.n) * groups, T(0));
    for (int i = 0; i < x.n; ++i)
        for (int g = 0; g < groups; ++g) {
            const T* src = x.channel(i, g * cg);
            double mean = 0.0;
            for (std::size_t k = 0; k < M; ++k) mean += src[k];
            mean /= double(M);
            double var = 0.0;
            for (std::size_t k = 0; k < M; ++k) var += (src[k] - mean) * (src[k] - mean);
            var /= double(M);
            const double rstd = 1.0 / std::sqrt(var + eps);
            cache.rstd[static_cast<std::size_t>(i) * groups + g] = T(rstd);
            T* xh = cache.xhat.channel(i, g * cg);
            T* out = y.channel(i, g * cg);
            for (int cc = 0; cc < cg; ++cc) {
                const int ch = g * cg + cc;
                const T ga = gamma.value[ch], be = beta.value[ch];
                for (std::size_t k = 0; k < P; ++k) {
                    const std::size_t o = cc * P + k;
                    xh[o] = T((src[o] - mean) * rstd);
                    out[o] = ga * xh[o] + be;
                }
            }
        }
}

template <class T>
void groupnorm_backward(Param<T>& gamma, Param<T>& beta, int groups, const GroupNormCache<T>& cache,
                        const Tensor<T>& dy, Tensor<T>& dx) {
    const auto& xh = cache.xhat;
    const int cg = xh.c / groups;
    const std::size_t P = xh.spatial(), M = P * cg;
    dx = Tensor<T>(xh.n, xh.c, xh.d, xh.h, xh.w);
    for (int i = 0; i < xh.n; ++i)
        for (int g = 0; g < groups; ++g) {
            double sum_dxh = 0.0, sum_dxh_xh = 0.0;
            for (int cc = 0; cc < cg; ++cc) {
                const int ch = g * cg + cc;
                const T* d = dy.channel(i, ch);
                const T* h = xh.channel(i, ch);
                double sg = 0.0, sb = 0.0;
                for (std::size_t k = 0; k < P; ++k) {
                    sg += double(d[k]) * h[k];
                    sb += d[k];
                }
                gamma.grad[ch] += T(sg);
                beta.grad[ch] += T(sb);
                sum_dxh += sb * gamma.value[ch];
                sum_dxh_xh += sg * gamma.value[ch];
            }
            const double rstd = cache.rstd[static_cast<std::size_t>(i) * groups + g];
            const double inv_m = 1.0 / double(M);
            for (int cc = 0; cc < cg; ++cc) {
                const int ch = g * cg + cc;
                const T* d = dy.channel(i, ch);
                const T* h = xh.channel(i, ch);
                T* out = dx.channel(i, ch);
                const double ga = gamma.value[ch];
                for (std::size_t k = 0; k < P; ++k)
                    out[k] = T(rstd * (ga * d[k] - inv_m * sum_dxh - h[k] * inv_m * sum_dxh_xh));
            }
        }
}

template <class T>
void silu_forward(const Tensor<T>& x, Tensor<T>& y) {
    y = Tensor<T>(x.n, x.c, x.d, x.h, x.w);
    for (std::size_t k = 0; k < x.size(); ++k) {
        const T s = T(1) / (T(1) + std::exp(-x.v[k]));
        y.v[k] = x.v[k] * s;
    }
}

template <class T>
void silu_backward(const Tensor<T>& x, const Tensor<T>& dy, Tensor<T>& dx) {
    dx = Tensor<T>(x.n, x.c, x.d, x.h, x.w);
    for (std::size_t k = 0; k < x.size(); ++k) {
        const T s = T(1) / (T(1) + std::exp(-x.v[k]));
        dx.v[k] = dy.v[k] * s * (T(1) + x.v[k] * (T(1) - s));
    }
}

template <class T>
void avgpool2_forward(const Tensor<T>& x, Tensor<T>& y) {
    if (x.d % 2 || x.h % 2 || x.w % 2) throw InvalidArgument("avgpool2 needs even spatial dims");
    y = Tensor<T>(x.n, x.c, x.d / 2, x.h / 2, x.w / 2);
    for (int i = 0; i < x.n; ++i)
        for (int c = 0; c < x.c; ++c) {
            const T* src = x.channel(i, c);
            T* dst = y.channel(i, c);
            for (int z = 0; z < y.d; ++z)
                for (int yy = 0; yy < y.h; ++yy)
                    for (int xx = 0; xx < y.w; ++xx) {
                        T acc = 0;
                        for (int a = 0; a < 2; ++a)
                            for (int b = 0; b < 2; ++b)
                                for (int e = 0; e < 2; ++e)
                                    acc += src[(static_cast<std::size_t>(2 * z + a) * x.h + 2 * yy + b) * x.w + 2 * xx + e];
                        dst[(static_cast<std::size_t>(z) * y.h + yy) * y.w + xx] = acc / T(8);
                    }
        }
}

template <class T>
void avgpool2_backward(const Tensor<T>& dy, Tensor<T>& dx) {
    dx = Tensor<T>(dy.n, dy.c, dy.d * 2, dy.h * 2, dy.w * 2);
    for (int i = 0; i < dy.n; ++i)
        for (int c = 0; c < dy.c; ++c) {
            const T* src = dy.channel(i, c);
            T* dst = dx.channel(i, c);
            for (int z = 0; z < dx.d; ++z)
                for (int yy = 0; yy < dx.h; ++yy)
                    for (int xx = 0; xx < dx.w; ++xx)
                        dst[(static_cast<std::size_t>(z) * dx.h + yy) * dx.w + xx] =
                            src[(static_cast<std::size_t>(z / 2) * dy.h + yy / 2) * dy.w + xx / 2] / T(8);
        }
}

template <class T>
void upsample2_forward(const Tensor<T>& x, Tensor<T>& y) {
    y = Tensor<T>(x.n, x.c, x.d * 2, x.h * 2, x.w * 2);
    for (int i = 0; i < x.n; ++i)
        for (int c = 0; c < x.c; ++c) {
            const T* src = x.channel(i, c);
            T* dst = y.channel(i, c);
            for (int z = 0; z < y.d; ++z)
                for (int yy = 0; yy < y.h; ++yy)
                    for (int xx = 0; xx < y.w; ++xx)
                        dst[(static_cast<std::size_t>(z) * y.h + yy) * y.w + xx] =
                            src[(static_cast<std::size_t>(z / 2) * x.h + yy / 2) * x.w + xx / 2];
        }
}

template <class T>
void upsample2_backward(const Tensor<T>& dy, Tensor<T>& dx) {
    dx = Tensor<T>(dy.n, dy.c, dy.d / 2, dy.h / 2, dy.w / 2);
    for (int i = 0; i < dy.n; ++i)
        for (int c = 0; c < dy.c; ++c) {
            const T* src = dy.channel(i, c);
            T* dst = dx.channel(i, c);
            for (int z = 0; z < dy.d; ++z)
                for (int yy = 0; yy < dy.h; ++yy)
                    for (int xx = 0; xx < dy.w; ++xx)
                        dst[(static_cast<std::size_t>(z / 2) * dx.h + yy / 2) * dx.w + xx / 2] +=
                            src[(static_cast<std::size_t>(z) * dy.h + yy) * dy.w + xx];
        }
}

template <class T>
void concat_channels(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& y) {
    if (a.n != b.n || a.d != b.d || a.h != b.h || a.w != b.w) throw InvalidArgument("concat shape mismatch");
    y = Tensor<T>(a.n, a.c + b.c, a.d, a.h, a.w);
    for (int i = 0; i < a.n; ++i) {
        std::copy(a.sample(i), a.sample(i) + a.per_sample(), y.sample(i));
        std::copy(b.sample(i), b.sample(i) + b.per_sample(), y.sample(i) + a.per_sample());
    }
}

template <class T>
void split_channels(const Tensor<T>& dy, int ca, Tensor<T>& da, Tensor<T>& db) {
    da = Tensor<T>(dy.n, ca, dy.d, dy.h, dy.w);
    db = Tensor<T>(dy.n, dy.c - ca, dy.d, dy.h, dy.w);
    for (int i = 0; i < dy.n; ++i) {
        const T* src = dy.sample(i);
        std::copy(src, src + da.per_sample(), da.sample(i));
        std::copy(src + da.per_sample(), src + dy.per_sample(), db.sample(i));
    }
}

template <class T>
void linear_forward(const std::vector<T>& x, int batch, int in, const Param<T>& w, const Param<T>& b, int out,
                    std::vector<T>& y) {
    if (x.size() != static_cast<std::size_t>(batch) * in || w.size() != static_cast<std::size_t>(out) * in)
        throw InvalidArgument("linear layer shape mismatch for '" + w.name + "'");
    y.assign(static_cast<std::size_t>(batch) * out, T(0));
    CMapM<T> X(x.data(), batch, in);
    CMapM<T> W(w.value.data(), out, in);
    MapM<T> Y(y.data(), batch, out);
    Y.noalias() = X * W.transpose();
    Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> bv(b.value.data(), out);
    Y.rowwise() += bv;
}

template <class T>
void linear_backward(const std::vector<T>& x, int batch, int in, Param<T>& w, Param<T>& b, int out,
                     const std::vector<T>& dy, std::vector<T>* dx) {
    CMapM<T> X(x.data(), batch, in);
    CMapM<T> W(w.value.data(), out, in);
    CMapM<T> dY(dy.data(), batch, out);
    MapM<T>(w.grad.data(), out, in).noalias() += dY.transpose() * X;
    for (int i = 0; i < batch; ++i)
        for (int o = 0; o < out; ++o) b.grad[o] += dy[static_cast<std::size_t>(i) * out + o];
    if (dx != nullptr) {
        dx->assign(static_cast<std::size_t>(batch) * in, T(0));
        MapM<T>(dx->data(), batch, in).noalias() = dY * W;
    }
}

#define DSL_NN_INSTANTIATE(T)                                                                                       \
    template class ParamStore<T>;                                                                                   \
    template void conv3d_forward<T>(const Tensor<T>&, const Param<T>&, const Param<T>&, int, int, Tensor<T>&);     \
    template void conv3d_backward<T>(const Tensor<T>&, Param<T>&, Param<T>&, int, int, const Tensor<T>&,          \
                                     Tensor<T>*);                                                                   \
    template void groupnorm_forward<T>(const Tensor<T>&, const Param<T>&, const Param<T>&, int, Tensor<T>&,        \
                                       GroupNormCache<T>&);                                                         \
    template void groupnorm_backward<T>(Param<T>&, Param<T>&, int, const GroupNormCache<T>&, const Tensor<T>&,     \
                                        Tensor<T>&);                                                                \
    template void silu_forward<T>(const Tensor<T>&, Tensor<T>&);                                                    \
    template void silu_backward<T>(const Tensor<T>&, const Tensor<T>&, Tensor<T>&);                                 \
    template void avgpool2_forward<T>(const Tensor<T>&, Tensor<T>&);                                                \
    template void avgpool2_backward<T>(const Tensor<T>&, Tensor<T>&);                                               \
    template void upsample2_forward<T>(const Tensor<T>&, Tensor<T>&);                                               \
    template void upsample2_backward<T>(const Tensor<T>&, Tensor<T>&);                                              \
    template void concat_channels<T>(const Tensor<T>&, const Tensor<T>&, Tensor<T>&);                               \
    template void split_channels<T>(const Tensor<T>&, int, Tensor<T>&, Tensor<T>&);                                 \
    template void linear_forward<T>(const std::vector<T>&, int, int, const Param<T>&, const Param<T>&, int,        \
                                    std::vector<T>&);                                                               \
    template void linear_backward<T>(const std::vector<T>&, int, int, Param<T>&, Param<T>&, int,                   \
                                     const std::vector<T>&, std::vector<T>*);

DSL_NN_INSTANTIATE(float)
DSL_NN_INSTANTIATE(double)

}  // namespace dsl::nn
