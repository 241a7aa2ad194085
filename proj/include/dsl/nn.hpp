#pragma once

// Minimal 3D convolutional building blocks with explicit backward passes.
// Backward functions accumulate into Param::grad.
// Tensors are NCDHW, contiguous, x fastest. Instantiated for float (training,
// inference) and double (gradient checks).

#include <cstddef>
#include <string>
#include <vector>

namespace dsl::nn {

template <class T>
struct Tensor {
    int n = 0, c = 0, d = 0, h = 0, w = 0;
    std::vector<T> v;

    Tensor() = default;
    Tensor(int n_, int c_, int d_, int h_, int w_, T fill = T(0))
        : n(n_), c(c_), d(d_), h(h_), w(w_), v(static_cast<std::size_t>(n_) * c_ * d_ * h_ * w_, fill) {}

    std::size_t spatial() const { return static_cast<std::size_t>(d) * h * w; }
    std::size_t per_sample() const { return spatial() * c; }
    std::size_t size() const { return v.size(); }
    T* sample(int i) { return v.data() + per_sample() * i; }
    const T* sample(int i) const { return v.data() + per_sample() * i; }
    T* channel(int i, int ch) { return sample(i) + spatial() * ch; }
    const T* channel(int i, int ch) const { return sample(i) + spatial() * ch; }
    bool same_shape(const Tensor& o) const { return n == o.n && c == o.c && d == o.d && h == o.h && w == o.w; }
};

template <class T>
struct Param {
    std::string name;
    std::vector<int> shape;
    std::vector<T> value;
    std::vector<T> grad;

    std::size_t size() const { return value.size(); }
};

// Named parameter list; indices are stable once the model is built.
template <class T>
class ParamStore {
public:
    int add(std::string name, std::vector<int> shape);
    Param<T>& operator[](int i) { return params_[static_cast<std::size_t>(i)]; }
    const Param<T>& operator[](int i) const { return params_[static_cast<std::size_t>(i)]; }
    std::vector<Param<T>>& all() { return params_; }
    const std::vector<Param<T>>& all() const { return params_; }
    std::size_t count() const;
    void zero_grad();

private:
    std::vector<Param<T>> params_;
};

// 3D convolution, stride 1, same padding, kernel 1 or 3.
template <class T>
void conv3d_forward(const Tensor<T>& x, const Param<T>& weight, const Param<T>& bias, int cout, int k, Tensor<T>& y);
template <class T>
void conv3d_backward(const Tensor<T>& x, Param<T>& weight, Param<T>& bias, int cout, int k, const Tensor<T>& dy,
                     Tensor<T>* dx);

template <class T>
struct GroupNormCache {
    Tensor<T> xhat;
    std::vector<T> rstd;  // n * groups
};

template <class T>
void groupnorm_forward(const Tensor<T>& x, const Param<T>& gamma, const Param<T>& beta, int groups, Tensor<T>& y,
                       GroupNormCache<T>& cache);
template <class T>
void groupnorm_backward(Param<T>& gamma, Param<T>& beta, int groups, const GroupNormCache<T>& cache,
                        const Tensor<T>& dy, Tensor<T>& dx);

template <class T>
void silu_forward(const Tensor<T>& x, Tensor<T>& y);
template <class T>
void silu_backward(const Tensor<T>& x, const Tensor<T>& dy, Tensor<T>& dx);

template <class T>
void avgpool2_forward(const Tensor<T>& x, Tensor<T>& y);
template <class T>
void avgpool2_backward(const Tensor<T>& dy, Tensor<T>& dx);

template <class T>
void upsample2_forward(const Tensor<T>& x, Tensor<T>& y);
template <class T>
void upsample2_backward(const Tensor<T>& dy, Tensor<T>& dx);

template <class T>
void concat_channels(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& y);
template <class T>
void split_channels(const Tensor<T>& dy, int ca, Tensor<T>& da, Tensor<T>& db);

// Row-major batch linear layer: y[n][out] = W[out][in] x[n][in] + b[out].
template <class T>
void linear_forward(const std::vector<T>& x, int batch, int in, const Param<T>& w, const Param<T>& b, int out,
                    std::vector<T>& y);
template <class T>
void linear_backward(const std::vector<T>& x, int batch, int in, Param<T>& w, Param<T>& b, int out,
                     const std::vector<T>& dy, std::vector<T>* dx);

// Largest divisor of `channels` not exceeding `max_groups`.
int group_count(int channels, int max_groups);

}  // namespace dsl::nn
