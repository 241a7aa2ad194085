#pragma once

// Independent reference implementations shared by the unit tests and the
// acceptance run. Written for clarity, not speed.

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <vector>

#include "dsl/ct_data.hpp"

namespace oracle {

using namespace dsl;

// Oracle: co-occurrence by listing every ordered voxel pair (a, a+off) and (a+off, a).
inline std::vector<double> brute_glcm(const Patch& p, int L, Index3 off) {
    const int s = p.side;
    int lo = 1 << 20, hi = -(1 << 20);
    for (auto v : p.voxels) lo = std::min<int>(lo, v), hi = std::max<int>(hi, v);
    auto level = [&](int v) {
        if (hi == lo) return 0;
        // integer arithmetic version of floor((v-lo)/(hi-lo)*L)
        return std::min(L - 1, (v - lo) * L / (hi - lo));
    };
    std::map<std::pair<int, int>, int> counts;
    int n = 0;
    for (int z = 0; z < s; ++z)
        for (int y = 0; y < s; ++y)
            for (int x = 0; x < s; ++x) {
                int z2 = z + off.z, y2 = y + off.y, x2 = x + off.x;
                if (z2 < 0 || y2 < 0 || x2 < 0 || z2 >= s || y2 >= s || x2 >= s) continue;
                int a = level(p.at(z, y, x)), b = level(p.at(z2, y2, x2));
                counts[{a, b}]++;
                counts[{b, a}]++;
                n += 2;
            }
    std::vector<double> m(static_cast<std::size_t>(L) * L, 0.0);
    for (auto& [k, c] : counts) m[static_cast<std::size_t>(k.first) * L + k.second] = double(c) / n;
    return m;
}

// Oracle: textbook Haralick definitions, written out term by term.
inline std::array<double, 14> oracle_haralick(const std::vector<double>& P, int L) {
    auto p = [&](int i, int j) { return P[static_cast<std::size_t>(i) * L + j]; };
    auto H = [](const std::vector<double>& v) {
        double h = 0;
        for (double x : v)
            if (x > 0) h -= x * std::log(x);
        return h;
    };
    std::vector<double> px(L), py(L), ps(2 * L - 1), pd(L), all;
    for (int i = 0; i < L; ++i)
        for (int j = 0; j < L; ++j) {
            px[i] += p(i, j);
            py[j] += p(i, j);
            ps[i + j] += p(i, j);
            pd[std::abs(i - j)] += p(i, j);
            all.push_back(p(i, j));
        }
    double mx = 0, my = 0, sx = 0, sy = 0;
    for (int i = 0; i < L; ++i) mx += i * px[i], my += i * py[i];
    for (int i = 0; i < L; ++i) sx += (i - mx) * (i - mx) * px[i], sy += (i - my) * (i - my) * py[i];
    double f1 = 0, f2 = 0, f3 = 0, f5 = 0;
    for (int i = 0; i < L; ++i)
        for (int j = 0; j < L; ++j) {
            f1 += p(i, j) * p(i, j);
            f2 += (i - j) * (i - j) * p(i, j);
            f3 += (i - mx) * (j - my) * p(i, j);
            f5 += p(i, j) / (1.0 + (i - j) * (i - j));
        }
    f3 = (sx > 0 && sy > 0) ? f3 / std::sqrt(sx * sy) : 0.0;
    double f6 = 0, f7 = 0, f10m = 0, f10 = 0;
    for (int k = 0; k < 2 * L - 1; ++k) f6 += k * ps[k];
    for (int k = 0; k < 2 * L - 1; ++k) f7 += (k - f6) * (k - f6) * ps[k];
    for (int k = 0; k < L; ++k) f10m += k * pd[k];
    for (int k = 0; k < L; ++k) f10 += (k - f10m) * (k - f10m) * pd[k];
    const double hxy = H(all);
    double hxy1 = 0, hxy2 = 0;
    for (int i = 0; i < L; ++i)
        for (int j = 0; j < L; ++j) {
            double q = px[i] * py[j];
            if (q > 0) hxy1 -= p(i, j) * std::log(q), hxy2 -= q * std::log(q);
        }
    const double hx = H(px), hy = H(py);
    const double f12 = std::max(hx, hy) > 0 ? (hxy - hxy1) / std::max(hx, hy) : 0.0;
    const double f13 = std::sqrt(std::max(0.0, 1.0 - std::exp(-2.0 * (hxy2 - hxy))));
    // MCC from the (non-symmetric) Q matrix over occupied levels.
    std::vector<int> occ;
    for (int i = 0; i < L; ++i)
        if (px[i] > 0) occ.push_back(i);
    double f14 = 0;
    if (occ.size() > 1) {
        const int n = static_cast<int>(occ.size());
        Eigen::MatrixXd Q = Eigen::MatrixXd::Zero(n, n);
        for (int a = 0; a < n; ++a)
            for (int b = 0; b < n; ++b)
                for (int k = 0; k < n; ++k)
                    Q(a, b) += p(occ[a], occ[k]) * p(occ[b], occ[k]) / (px[occ[a]] * py[occ[k]]);
        Eigen::EigenSolver<Eigen::MatrixXd> es(Q);
        std::vector<double> ev;
        for (int a = 0; a < n; ++a) ev.push_back(es.eigenvalues()(a).real());
        std::sort(ev.rbegin(), ev.rend());
        f14 = std::sqrt(std::clamp(ev[1], 0.0, 1.0));
    }
    return {f1, f2, f3, sx, f5, f6, f7, H(ps), hxy, f10, H(pd), f12, f13, f14};
}

// Oracle: surface by explicit 6-neighbour scan, all-pairs distances, sorted
// pooled set, linearly interpolated 95th percentile.
inline double brute_hd95(const MaskVolume& a, const MaskVolume& b, Vec3 sp) {
    auto surface = [](const MaskVolume& m) {
        std::vector<Index3> s;
        const Dims d = m.dims();
        for (int z = 0; z < d.z; ++z)
            for (int y = 0; y < d.y; ++y)
                for (int x = 0; x < d.x; ++x) {
                    if (!m(z, y, x)) continue;
                    bool edge = false;
                    const int n[6][3] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
                    for (auto& o : n) {
                        const int zz = z + o[0], yy = y + o[1], xx = x + o[2];
                        if (zz < 0 || yy < 0 || xx < 0 || zz >= d.z || yy >= d.y || xx >= d.x || !m(zz, yy, xx))
                            edge = true;
                    }
                    if (edge) s.push_back({z, y, x});
                }
        return s;
    };
    const auto sa = surface(a), sb = surface(b);
    auto nearest = [&](const Index3& p, const std::vector<Index3>& set) {
        double best = 1e300;
        for (const auto& q : set) {
            const double dz = (p.z - q.z) * sp[0], dy = (p.y - q.y) * sp[1], dx = (p.x - q.x) * sp[2];
            best = std::min(best, std::sqrt(dz * dz + dy * dy + dx * dx));
        }
        return best;
    };
    std::vector<double> all;
    for (const auto& p : sa) all.push_back(nearest(p, sb));
    for (const auto& p : sb) all.push_back(nearest(p, sa));
    std::sort(all.begin(), all.end());
    const double pos = 0.95 * (all.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(pos);
    const std::size_t hi = std::min(lo + 1, all.size() - 1);
    return all[lo] + (pos - lo) * (all[hi] - all[lo]);
}

// Oracle: textbook EM with full covariances written with plain loops on 2-D data.
struct OracleFit {
    std::vector<std::array<double, 2>> mu;
    std::vector<std::array<double, 3>> cov;  // xx, xy, yy
    std::vector<double> w;
    std::vector<std::vector<double>> resp;
};

inline OracleFit oracle_em(const Eigen::MatrixXd& D, std::vector<std::array<double, 2>> mu, int iters) {
    const int N = static_cast<int>(D.rows()), K = static_cast<int>(mu.size());
    OracleFit f;
    f.mu = mu;
    f.cov.assign(K, {1, 0, 1});
    f.w.assign(K, 1.0 / K);
    f.resp.assign(N, std::vector<double>(K));
    for (int it = 0; it < iters; ++it) {
        for (int i = 0; i < N; ++i) {
            double tot = 0;
            for (int k = 0; k < K; ++k) {
                const auto& c = f.cov[k];
                const double det = c[0] * c[2] - c[1] * c[1];
                const double dx = D(i, 0) - f.mu[k][0], dy = D(i, 1) - f.mu[k][1];
                const double q = (c[2] * dx * dx - 2 * c[1] * dx * dy + c[0] * dy * dy) / det;
                f.resp[i][k] = f.w[k] * std::exp(-0.5 * q) / (2 * M_PI * std::sqrt(det));
                tot += f.resp[i][k];
            }
            for (int k = 0; k < K; ++k) f.resp[i][k] /= tot;
        }
        for (int k = 0; k < K; ++k) {
            double nk = 0, mx = 0, my = 0;
            for (int i = 0; i < N; ++i) nk += f.resp[i][k], mx += f.resp[i][k] * D(i, 0), my += f.resp[i][k] * D(i, 1);
            mx /= nk;
            my /= nk;
            double sxx = 0, sxy = 0, syy = 0;
            for (int i = 0; i < N; ++i) {
                const double dx = D(i, 0) - mx, dy = D(i, 1) - my;
                sxx += f.resp[i][k] * dx * dx;
                sxy += f.resp[i][k] * dx * dy;
                syy += f.resp[i][k] * dy * dy;
            }
            f.mu[k] = {mx, my};
            f.cov[k] = {sxx / nk + 1e-6, sxy / nk, syy / nk + 1e-6};
            f.w[k] = nk / N;
        }
    }
    return f;
}

inline bool same_partition(const std::vector<int>& a, const std::vector<int>& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t j = 0; j < a.size(); ++j)
            if ((a[i] == a[j]) != (b[i] == b[j])) return false;
    return true;
}

// Oracle: per-anchor loop over explicit sums, anchors without positives skipped.
inline double oracle_info_nce(const Eigen::MatrixXd& Z, const Eigen::MatrixXd& S, double tau, double kappa) {
    const int B = static_cast<int>(Z.rows());
    double total = 0;
    int anchors = 0;
    for (int i = 0; i < B; ++i) {
        double num = 0, den = 0;
        bool has = false;
        for (int j = 0; j < B; ++j) {
            if (j == i) continue;
            const double e = std::exp(Z.row(i).dot(Z.row(j)) / kappa);
            den += e;
            if (S(i, j) > tau) num += e, has = true;
        }
        if (!has) continue;
        total += -std::log(num / den);
        ++anchors;
    }
    return anchors ? total / anchors : 0.0;
}

}  // namespace oracle
