#include "dsl/radiomics.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>

namespace dsl {

std::vector<int> quantize_gray_levels(const Patch& p, int levels) {
    if (levels < 1) throw InvalidArgument("GLCM needs at least one gray level");
    std::vector<int> q(p.voxels.size(), 0);
    if (p.voxels.empty()) return q;
    auto [lo_it, hi_it] = std::minmax_element(p.voxels.begin(), p.voxels.end());
    const double lo = *lo_it, range = double(*hi_it) - lo;
    if (range <= 0.0) return q;
    for (std::size_t i = 0; i < q.size(); ++i) {
        int g = static_cast<int>(std::floor((p.voxels[i] - lo) / range * levels));
        q[i] = std::min(g, levels - 1);
    }
    return q;
}

std::vector<double> glcm_matrix(const Patch& p, int levels, Index3 off) {
    const auto q = quantize_gray_levels(p, levels);
    const int s = p.side;
    std::vector<double> m(static_cast<std::size_t>(levels) * levels, 0.0);
    double total = 0.0;
    for (int z = 0; z < s; ++z)
        for (int y = 0; y < s; ++y)
            for (int x = 0; x < s; ++x) {
                const int z2 = z + off.z, y2 = y + off.y, x2 = x + off.x;
                if (z2 < 0 || y2 < 0 || x2 < 0 || z2 >= s || y2 >= s || x2 >= s) continue;
                const int a = q[(static_cast<std::size_t>(z) * s + y) * s + x];
                const int b = q[(static_cast<std::size_t>(z2) * s + y2) * s + x2];
                m[static_cast<std::size_t>(a) * levels + b] += 1.0;
                m[static_cast<std::size_t>(b) * levels + a] += 1.0;
                total += 2.0;
            }
    if (total > 0.0)
        for (auto& v : m) v /= total;
    return m;
}

std::array<double, 14> haralick_features(std::span<const double> P, int L) {
    if (static_cast<int>(P.size()) != L * L) throw InvalidArgument("GLCM size does not match level count");
    auto at = [&](int i, int j) { return P[static_cast<std::size_t>(i) * L + j]; };
    auto xlogx = [](double v) { return v > 0.0 ? v * std::log(v) : 0.0; };

    std::vector<double> px(L, 0.0), py(L, 0.0), psum(2 * L - 1, 0.0), pdiff(L, 0.0);
    double asm_ = 0, contrast = 0, idm = 0, entropy = 0, sum_ij = 0;
    for (int i = 0; i < L; ++i)
        for (int j = 0; j < L; ++j) {
            const double p = at(i, j);
            if (p == 0.0) continue;
            px[i] += p;
            py[j] += p;
            psum[i + j] += p;
            pdiff[std::abs(i - j)] += p;
            asm_ += p * p;
            contrast += double(i - j) * double(i - j) * p;
            idm += p / (1.0 + double(i - j) * double(i - j));
            entropy -= xlogx(p);
            sum_ij += double(i) * double(j) * p;
        }
    double mux = 0, muy = 0;
    for (int i = 0; i < L; ++i) {
        mux += i * px[i];
        muy += i * py[i];
    }
    double varx = 0, vary = 0;
    for (int i = 0; i < L; ++i) {
        varx += (i - mux) * (i - mux) * px[i];
        vary += (i - muy) * (i - muy) * py[i];
    }
    const double sdxy = std::sqrt(varx * vary);
    const double correlation = sdxy > 1e-15 ? (sum_ij - mux * muy) / sdxy : 0.0;

    double sum_avg = 0, sum_entropy = 0;
    for (int k = 0; k < 2 * L - 1; ++k) {
        sum_avg += k * psum[k];
        sum_entropy -= xlogx(psum[k]);
    }
    double sum_var = 0;
    for (int k = 0; k < 2 * L - 1; ++k) sum_var += (k - sum_avg) * (k - sum_avg) * psum[k];

    double diff_mean = 0, diff_entropy = 0;
    for (int k = 0; k < L; ++k) {
        diff_mean += k * pdiff[k];
        diff_entropy -= xlogx(pdiff[k]);
    }
    double diff_var = 0;
    for (int k = 0; k < L; ++k) diff_var += (k - diff_mean) * (k - diff_mean) * pdiff[k];

    double hx = 0, hy = 0, hxy1 = 0, hxy2 = 0;
    for (int i = 0; i < L; ++i) {
        hx -= xlogx(px[i]);
        hy -= xlogx(py[i]);
    }
    for (int i = 0; i < L; ++i)
        for (int j = 0; j < L; ++j) {
            const double q = px[i] * py[j];
            if (q <= 0.0) continue;
            hxy1 -= at(i, j) * std::log(q);
            hxy2 -= q * std::log(q);
        }
    const double hmax = std::max(hx, hy);
    const double imc1 = hmax > 1e-15 ? (entropy - hxy1) / hmax : 0.0;
    const double imc2 = std::sqrt(std::max(0.0, 1.0 - std::exp(-2.0 * (hxy2 - entropy))));

    // MCC: Q = D^-1 P D^-1 P is similar to A^2 with A = D^-1/2 P D^-1/2 (P symmetric).
    std::vector<int> support;
    for (int i = 0; i < L; ++i)
        if (px[i] > 0.0) support.push_back(i);
    double mcc = 0.0;
    if (support.size() > 1) {
        const int n = static_cast<int>(support.size());
        Eigen::MatrixXd A(n, n);
        for (int a = 0; a < n; ++a)
            for (int b = 0; b < n; ++b)
                A(a, b) = 0.5 * (at(support[a], support[b]) + at(support[b], support[a])) /
                          std::sqrt(px[support[a]] * px[support[b]]);
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(A, Eigen::EigenvaluesOnly);
        std::vector<double> sq(n);
        for (int a = 0; a < n; ++a) sq[a] = es.eigenvalues()(a) * es.eigenvalues()(a);
        std::sort(sq.begin(), sq.end(), std::greater<>());
        mcc = std::sqrt(std::clamp(sq[1], 0.0, 1.0));
    }

    return {asm_,        contrast, correlation, varx,     idm,  sum_avg, sum_var,
            sum_entropy, entropy,  diff_var,    diff_entropy, imc1, imc2,    mcc};
}

std::array<double, 14> glcm_features(const Patch& p, const GlcmOptions& opt) {
    if (opt.offsets.empty()) throw InvalidArgument("GLCM needs at least one offset");
    std::array<double, 14> acc{};
    for (const auto& off : opt.offsets) {
        const auto m = glcm_matrix(p, opt.levels, off);
        const auto f = haralick_features(m, opt.levels);
        for (int k = 0; k < 14; ++k) acc[k] += f[k];
    }
    for (auto& v : acc) v /= static_cast<double>(opt.offsets.size());
    return acc;
}

std::array<double, 8> lbp_histogram(const Patch& p) {
    const int s = p.side;
    if (s < 3) throw InvalidArgument("LBP needs a patch side of at least 3");
    static constexpr int dy[8] = {-1, -1, -1, 0, 1, 1, 1, 0};
    static constexpr int dx[8] = {-1, 0, 1, 1, 1, 0, -1, -1};
    std::array<double, 8> hist{};
    double total = 0.0;
    for (int z = 0; z < s; ++z)
        for (int y = 1; y < s - 1; ++y)
            for (int x = 1; x < s - 1; ++x) {
                const int c = p.at(z, y, x);
                int ones = 0;
                for (int k = 0; k < 8; ++k) ones += p.at(z, y + dy[k], x + dx[k]) >= c ? 1 : 0;
                hist[std::max(0, ones - 1)] += 1.0;
                total += 1.0;
            }
    for (auto& h : hist) h /= total;
    return hist;
}

std::array<GaborFilter, 8> gabor_bank() {
    std::array<GaborFilter, 8> bank{};
    const double freqs[2] = {0.1, 0.2};
    for (int f = 0; f < 2; ++f)
        for (int o = 0; o < 4; ++o) bank[f * 4 + o] = {freqs[f], o * std::numbers::pi / 4.0};
    return bank;
}

namespace {

int reflect(int i, int n) {
    if (n == 1) return 0;
    while (i < 0 || i >= n) {
        if (i < 0) i = -i;
        if (i >= n) i = 2 * n - 2 - i;
    }
    return i;
}

}  // namespace

double gabor_response(const std::vector<double>& img, int rows, int cols, const GaborFilter& f) {
    // Envelope width tied to wavelength (about one-octave bandwidth).
    const double sigma = 0.5 / f.frequency;
    const int radius = std::min({static_cast<int>(std::ceil(2.5 * sigma)), rows - 1, cols - 1});
    const int w = 2 * radius + 1;
    std::vector<double> kre(static_cast<std::size_t>(w) * w), kim(kre.size()), env(kre.size());
    double sre = 0, sim = 0, senv = 0;
    const double c = std::cos(f.orientation), s = std::sin(f.orientation);
    for (int v = -radius; v <= radius; ++v)
        for (int u = -radius; u <= radius; ++u) {
            const double xr = u * c + v * s;
            const double yr = -u * s + v * c;
            const double g = std::exp(-(xr * xr + yr * yr) / (2.0 * sigma * sigma));
            const std::size_t k = static_cast<std::size_t>(v + radius) * w + (u + radius);
            env[k] = g;
            kre[k] = g * std::cos(2.0 * std::numbers::pi * f.frequency * xr);
            kim[k] = g * std::sin(2.0 * std::numbers::pi * f.frequency * xr);
            sre += kre[k];
            sim += kim[k];
            senv += g;
        }
    // Zero-mean: subtract the matching multiple of the envelope (DC removal).
    for (std::size_t k = 0; k < env.size(); ++k) {
        kre[k] -= env[k] * sre / senv;
        kim[k] -= env[k] * sim / senv;
    }
    double acc = 0.0;
    for (int y = 0; y < rows; ++y)
        for (int x = 0; x < cols; ++x) {
            double re = 0, im = 0;
            for (int v = -radius; v <= radius; ++v) {
                const int yy = reflect(y + v, rows);
                for (int u = -radius; u <= radius; ++u) {
                    const double px = img[static_cast<std::size_t>(yy) * cols + reflect(x + u, cols)];
                    const std::size_t k = static_cast<std::size_t>(v + radius) * w + (u + radius);
                    re += kre[k] * px;
                    im += kim[k] * px;
                }
            }
            acc += std::sqrt(re * re + im * im);
        }
    return acc / (static_cast<double>(rows) * cols);
}

std::array<double, 8> gabor_features(const Patch& p) {
    const int s = p.side;
    if (s < 2) throw InvalidArgument("Gabor bank needs a patch side of at least 2");
    const int zc = s / 2;
    std::vector<double> slice(static_cast<std::size_t>(s) * s);
    for (int y = 0; y < s; ++y)
        for (int x = 0; x < s; ++x) slice[static_cast<std::size_t>(y) * s + x] = p.at(zc, y, x);
    std::array<double, 8> out{};
    const auto bank = gabor_bank();
    for (int k = 0; k < 8; ++k) out[k] = gabor_response(slice, s, s, bank[k]);
    return out;
}

std::array<double, 4> firstorder_features(const Patch& p) {
    const double n = static_cast<double>(p.voxels.size());
    if (n == 0) throw InvalidArgument("empty patch");
    double mean = 0;
    for (auto v : p.voxels) mean += v;
    mean /= n;
    double m2 = 0, m3 = 0, m4 = 0;
    for (auto v : p.voxels) {
        const double d = v - mean;
        m2 += d * d;
        m3 += d * d * d;
        m4 += d * d * d * d;
    }
    m2 /= n;
    m3 /= n;
    m4 /= n;
    if (m2 <= 0.0) return {mean, 0.0, 0.0, 0.0};
    return {mean, std::sqrt(m2), m3 / std::pow(m2, 1.5), m4 / (m2 * m2) - 3.0};
}

RadiomicVector radiomic_vector(const Patch& p, const GlcmOptions& opt) {
    RadiomicVector r{};
    auto place = [&](const auto& block, int offset, const char* family) {
        for (std::size_t k = 0; k < block.size(); ++k) {
            if (!std::isfinite(block[k]))
                throw Error(std::string("non-finite radiomic feature in family ") + family + " (entry " +
                            std::to_string(offset + static_cast<int>(k)) + ")");
            r[offset + k] = block[k];
        }
    };
    place(glcm_features(p, opt), kGlcmOffset, "GLCM");
    place(lbp_histogram(p), kLbpOffset, "LBP");
    place(gabor_features(p), kGaborOffset, "Gabor");
    place(firstorder_features(p), kFirstOrderOffset, "first-order");
    return r;
}

RadiomicScaler RadiomicScaler::fit(std::span<const RadiomicVector> corpus) {
    if (corpus.empty()) throw InvalidArgument("cannot fit radiomic scaler on an empty corpus");
    RadiomicScaler s;
    const double n = static_cast<double>(corpus.size());
    for (const auto& r : corpus)
        for (int k = 0; k < kRadiomicDim; ++k) s.mean[k] += r[k];
    for (auto& m : s.mean) m /= n;
    RadiomicVector var{};
    for (const auto& r : corpus)
        for (int k = 0; k < kRadiomicDim; ++k) var[k] += (r[k] - s.mean[k]) * (r[k] - s.mean[k]);
    for (int k = 0; k < kRadiomicDim; ++k) {
        const double sd = std::sqrt(var[k] / n);
        s.scale[k] = sd > 1e-12 ? sd : 1.0;
    }
    return s;
}

RadiomicVector RadiomicScaler::apply(const RadiomicVector& r) const {
    RadiomicVector out{};
    for (int k = 0; k < kRadiomicDim; ++k) out[k] = (r[k] - mean[k]) / scale[k];
    return out;
}

TeacherHeadParams TeacherHeadParams::init(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    auto fill = [&](Eigen::MatrixXd& m, int rows, int cols, double bound) {
        std::uniform_real_distribution<double> u(-bound, bound);
        m.resize(rows, cols);
        for (int c = 0; c < cols; ++c)
            for (int r = 0; r < rows; ++r) m(r, c) = u(rng);
    };
    TeacherHeadParams p;
    Eigen::MatrixXd tmp;
    const double b1 = 1.0 / std::sqrt(double(kRadiomicDim)), b2 = 1.0 / std::sqrt(double(kEmbeddingDim));
    fill(p.w1, kEmbeddingDim, kRadiomicDim, b1);
    fill(tmp, kEmbeddingDim, 1, b1);
    p.b1 = tmp.col(0);
    fill(p.w2, kEmbeddingDim, kEmbeddingDim, b2);
    fill(tmp, kEmbeddingDim, 1, b2);
    p.b2 = tmp.col(0);
    return p;
}

void TeacherHeadParams::validate() const {
    if (w1.rows() != kEmbeddingDim || w1.cols() != kRadiomicDim || b1.size() != kEmbeddingDim ||
        w2.rows() != kEmbeddingDim || w2.cols() != kEmbeddingDim || b2.size() != kEmbeddingDim)
        throw InvalidArgument("teacher head parameter shapes must be W1 128x34, W2 128x128, b 128");
}

Embedding teacher_project(const RadiomicVector& r, const TeacherHeadParams& p) {
    p.validate();
    Eigen::Map<const Eigen::VectorXd> rv(r.data(), kRadiomicDim);
    Eigen::VectorXd h = (p.w1 * rv + p.b1).cwiseMax(0.0);
    Eigen::VectorXd o = p.w2 * h + p.b2;
    const double n = o.norm();
    if (!(n >= 1e-12)) throw Error("degenerate embedding: pre-normalization norm below 1e-12");
    return o / n;
}

void write_radiomics_csv(const std::string& path, std::span<const Patch> patches,
                         std::span<const RadiomicVector> vectors) {
    if (patches.size() != vectors.size()) throw InvalidArgument("patch and radiomic vector counts differ");
    if (auto parent = std::filesystem::path(path).parent_path(); !parent.empty())
        std::filesystem::create_directories(parent);
    std::ofstream os(path);
    if (!os) throw IoError("cannot write '" + path + "'");
    os << "origin_z,origin_y,origin_x";
    for (int k = 0; k < 14; ++k) os << ",glcm_" << k;
    for (int k = 0; k < 8; ++k) os << ",lbp_" << k;
    for (int k = 0; k < 8; ++k) os << ",gabor_" << k;
    os << ",fo_mean,fo_std,fo_skewness,fo_kurtosis\n";
    os.precision(17);
    for (std::size_t i = 0; i < patches.size(); ++i) {
        os << patches[i].origin.z << ',' << patches[i].origin.y << ',' << patches[i].origin.x;
        for (double v : vectors[i]) os << ',' << v;
        os << '\n';
    }
}

}  // namespace dsl
