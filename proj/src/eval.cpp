#include "dsl/eval.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>

#include "json.hpp"

namespace dsl {

namespace {

constexpr double kFar = 1e30;

void check_same(const Dims& a, const Dims& b, const char* what) {
    if (!(a == b)) throw InvalidArgument(std::string(what) + ": shape mismatch " + to_string(a) + " vs " + to_string(b));
}

// Lower envelope of parabolas over samples f at positions i * h. Samples at
// kFar carry no seed and are left out of the envelope.
void edt_1d(const double* f, double* d, int n, double h, std::vector<int>& v, std::vector<double>& z) {
    v.assign(static_cast<std::size_t>(n), 0);
    z.assign(static_cast<std::size_t>(n) + 1, 0.0);
    auto pos = [h](int i) { return i * h; };
    auto meet = [&](int q, int p) {
        return ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)));
    };
    int k = -1;
    for (int q = 0; q < n; ++q) {
        if (f[q] >= kFar) continue;
        if (k < 0) {
            k = 0;
            v[0] = q;
            z[0] = -INFINITY;
            z[1] = INFINITY;
            continue;
        }
        double s = meet(q, v[k]);
        while (k > 0 && s <= z[k]) s = meet(q, v[--k]);
        ++k;
        v[k] = q;
        z[k] = s;
        z[k + 1] = INFINITY;
    }
    if (k < 0) {
        for (int q = 0; q < n; ++q) d[q] = kFar;
        return;
    }
    k = 0;
    for (int q = 0; q < n; ++q) {
        while (z[k + 1] < pos(q)) ++k;
        const double dx = (q - v[k]) * h;  // integer offset first, so coincident points give exactly 0
        d[q] = dx * dx + f[v[k]];
    }
}

double percentile95(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const double pos = 0.95 * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

std::vector<double> gaussian_window() {
    std::vector<double> w(11);
    double s = 0.0;
    for (int i = 0; i < 11; ++i) s += w[i] = std::exp(-0.5 * (i - 5) * (i - 5) / (1.5 * 1.5));
    for (auto& x : w) x /= s;
    return w;
}

Grid<float> to_float(const CtVolume& v) {
    Grid<float> g(v.dims());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = v.hu[i];
    return g;
}

nlohmann::json number_or_null(double x) {
    if (std::isnan(x)) return nullptr;
    if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
    return x;
}

}  // namespace

double dice(const MaskVolume& pred, const MaskVolume& gt) {
    check_same(pred.dims(), gt.dims(), "dice");
    std::size_t inter = 0, a = 0, b = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool p = pred[i] != 0, g = gt[i] != 0;
        a += p;
        b += g;
        inter += p && g;
    }
    if (a + b == 0) return 1.0;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(a + b);
}

MaskVolume label_mask(const LabelVolume& labels, PathologyLabel l) {
    MaskVolume m(labels.dims(), 0);
    const auto v = static_cast<std::uint8_t>(l);
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = labels[i] == v ? 1 : 0;
    return m;
}

std::vector<Index3> surface_voxels(const MaskVolume& m, bool planar) {
    const Dims d = m.dims();
    std::vector<Index3> out;
    static constexpr int nb[6][3] = {{0, 0, 1}, {0, 0, -1}, {0, 1, 0}, {0, -1, 0}, {1, 0, 0}, {-1, 0, 0}};
    const int count = planar ? 4 : 6;
    for (int z = 0; z < d.z; ++z)
        for (int y = 0; y < d.y; ++y)
            for (int x = 0; x < d.x; ++x) {
                if (m(z, y, x) == 0) continue;
                for (int k = 0; k < count; ++k) {
                    const int zz = z + nb[k][0], yy = y + nb[k][1], xx = x + nb[k][2];
                    if (!d.contains(zz, yy, xx) || m(zz, yy, xx) == 0) {
                        out.push_back({z, y, x});
                        break;
                    }
                }
            }
    return out;
}

Grid<double> squared_distance_transform(const MaskVolume& seeds, const Vec3& spacing) {
    const Dims d = seeds.dims();
    Grid<double> g(d);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = seeds[i] != 0 ? 0.0 : kFar;
    std::vector<double> f, out;
    std::vector<int> v;
    std::vector<double> z;
    // x
    f.resize(static_cast<std::size_t>(d.x));
    out.resize(f.size());
    for (int zz = 0; zz < d.z; ++zz)
        for (int y = 0; y < d.y; ++y) {
            for (int x = 0; x < d.x; ++x) f[x] = g(zz, y, x);
            edt_1d(f.data(), out.data(), d.x, spacing[2], v, z);
            for (int x = 0; x < d.x; ++x) g(zz, y, x) = out[x];
        }
    // y
    f.resize(static_cast<std::size_t>(d.y));
    out.resize(f.size());
    for (int zz = 0; zz < d.z; ++zz)
        for (int x = 0; x < d.x; ++x) {
            for (int y = 0; y < d.y; ++y) f[y] = g(zz, y, x);
            edt_1d(f.data(), out.data(), d.y, spacing[1], v, z);
            for (int y = 0; y < d.y; ++y) g(zz, y, x) = out[y];
        }
    // z
    f.resize(static_cast<std::size_t>(d.z));
    out.resize(f.size());
    for (int y = 0; y < d.y; ++y)
        for (int x = 0; x < d.x; ++x) {
            for (int zz = 0; zz < d.z; ++zz) f[zz] = g(zz, y, x);
            edt_1d(f.data(), out.data(), d.z, spacing[0], v, z);
            for (int zz = 0; zz < d.z; ++zz) g(zz, y, x) = out[zz];
        }
    return g;
}

double hd95(const MaskVolume& pred, const MaskVolume& gt, const Vec3& spacing, bool planar) {
    check_same(pred.dims(), gt.dims(), "hd95");
    const auto sp = surface_voxels(pred, planar), sg = surface_voxels(gt, planar);
    if (sp.empty() || sg.empty()) throw InvalidArgument("undefined HD95: empty mask");
    auto seed_mask = [&](const std::vector<Index3>& s) {
        MaskVolume m(pred.dims(), 0);
        for (const auto& p : s) m(p.z, p.y, p.x) = 1;
        return m;
    };
    const Grid<double> dp = squared_distance_transform(seed_mask(sp), spacing);
    const Grid<double> dg = squared_distance_transform(seed_mask(sg), spacing);
    std::vector<double> all;
    all.reserve(sp.size() + sg.size());
    for (const auto& p : sp) all.push_back(std::sqrt(dg(p.z, p.y, p.x)));
    for (const auto& p : sg) all.push_back(std::sqrt(dp(p.z, p.y, p.x)));
    return percentile95(std::move(all));
}

double ssim(const Grid<float>& a, const Grid<float>& b, double L) {
    check_same(a.dims(), b.dims(), "ssim");
    const Dims d = a.dims();
    if (d.y < 11 || d.x < 11) throw InvalidArgument("ssim needs slices of at least 11 x 11");
    if (!(L > 0.0)) throw InvalidArgument("ssim data range must be positive");
    const auto w = gaussian_window();
    const double c1 = (0.01 * L) * (0.01 * L), c2 = (0.03 * L) * (0.03 * L);
    double total = 0.0;
    std::size_t count = 0;
    for (int z = 0; z < d.z; ++z)
        for (int y = 0; y + 11 <= d.y; ++y)
            for (int x = 0; x + 11 <= d.x; ++x) {
                double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
                for (int j = 0; j < 11; ++j)
                    for (int i = 0; i < 11; ++i) {
                        const double wt = w[j] * w[i];
                        const double va = a(z, y + j, x + i), vb = b(z, y + j, x + i);
                        ma += wt * va;
                        mb += wt * vb;
                        saa += wt * va * va;
                        sbb += wt * vb * vb;
                        sab += wt * va * vb;
                    }
                const double va = saa - ma * ma, vb = sbb - mb * mb, cov = sab - ma * mb;
                total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                ++count;
            }
    return total / static_cast<double>(count);
}

double ssim(const CtVolume& a, const CtVolume& b, double data_range) { return ssim(to_float(a), to_float(b), data_range); }

double psnr(const Grid<float>& a, const Grid<float>& b, double L) {
    check_same(a.dims(), b.dims(), "psnr");
    if (a.size() == 0) throw InvalidArgument("psnr of empty volumes");
    double mse = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double e = double(a[i]) - double(b[i]);
        mse += e * e;
    }
    mse /= static_cast<double>(a.size());
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(L * L / mse);
}

double psnr(const CtVolume& a, const CtVolume& b, double data_range) { return psnr(to_float(a), to_float(b), data_range); }

double frechet_proxy(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B, double shrinkage) {
    if (A.cols() != B.cols()) throw InvalidArgument("frechet_proxy: feature dimensions differ");
    if (A.rows() < 2 || B.rows() < 2) throw InvalidArgument("frechet_proxy needs at least two samples per set");
    const Eigen::Index d = A.cols();
    if (shrinkage < 0.0) shrinkage = (A.rows() <= d || B.rows() <= d) ? 0.1 : 0.0;
    if (shrinkage > 1.0) throw InvalidArgument("shrinkage must lie in [0, 1]");
    auto stats = [&](const Eigen::MatrixXd& F, Eigen::VectorXd& mu, Eigen::MatrixXd& cov) {
        mu = F.colwise().mean().transpose();
        const Eigen::MatrixXd X = F.rowwise() - mu.transpose();
        cov = X.transpose() * X / static_cast<double>(F.rows() - 1);
        const double avg = cov.trace() / static_cast<double>(d);
        cov = (1.0 - shrinkage) * cov + shrinkage * avg * Eigen::MatrixXd::Identity(d, d);
    };
    Eigen::VectorXd m1, m2;
    Eigen::MatrixXd s1, s2;
    stats(A, m1, s1);
    stats(B, m2, s2);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> e1(s1);
    const Eigen::MatrixXd r1 = e1.eigenvectors() * e1.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal() *
                               e1.eigenvectors().transpose();
    Eigen::MatrixXd M = r1 * s2 * r1;
    M = 0.5 * (M + M.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> em(M, Eigen::EigenvaluesOnly);
    const double tr_sqrt = em.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
    return (m1 - m2).squaredNorm() + s1.trace() + s2.trace() - 2.0 * tr_sqrt;
}

std::string MetricReport::to_json() const {
    nlohmann::ordered_json j;
    j["mode"] = mode;
    nlohmann::ordered_json pc;
    for (const auto& [l, m] : per_class)
        pc[std::string(label_name(l))] = {{"dsc", number_or_null(m.dsc)}, {"hd95_mm", number_or_null(m.hd95)}};
    j["per_class"] = pc;
    j["mean_dsc"] = number_or_null(mean_dsc);
    j["mean_hd95_mm"] = number_or_null(mean_hd95);
    j["ssim"] = number_or_null(ssim);
    j["psnr"] = number_or_null(psnr);
    j["psnr_data_range"] = data_range;
    j["frechet_proxy"] = number_or_null(frechet);
    j["config_hash"] = config_hash;
    return j.dump(2);
}

namespace {

void finalize_means(MetricReport& r) {
    double ds = 0.0, hs = 0.0;
    int hn = 0;
    for (const auto& [l, m] : r.per_class) {
        ds += m.dsc;
        if (!std::isnan(m.hd95)) {
            hs += m.hd95;
            ++hn;
        }
    }
    r.mean_dsc = r.per_class.empty() ? NAN : ds / static_cast<double>(r.per_class.size());
    r.mean_hd95 = hn > 0 ? hs / hn : NAN;
}

ClassMetrics score(const MaskVolume& p, const MaskVolume& g, const Vec3& spacing, bool planar) {
    ClassMetrics m;
    m.dsc = dice(p, g);
    const bool pe = std::none_of(p.data().begin(), p.data().end(), [](auto v) { return v != 0; });
    const bool ge = std::none_of(g.data().begin(), g.data().end(), [](auto v) { return v != 0; });
    m.hd95 = (pe || ge) ? NAN : hd95(p, g, spacing, planar);
    return m;
}

}  // namespace

MetricReport evaluate_segmentation(const LabelVolume& pred, const LabelVolume& gt, const Vec3& spacing) {
    check_same(pred.dims(), gt.dims(), "evaluate");
    MetricReport r;
    for (auto l : kTissueLabels) r.per_class[l] = score(label_mask(pred, l), label_mask(gt, l), spacing, false);
    finalize_means(r);
    return r;
}

MetricReport evaluate_slices(const LabelVolume& pred, const LabelVolume& gt, const Vec3& spacing,
                             const std::vector<int>& slices) {
    check_same(pred.dims(), gt.dims(), "evaluate");
    if (slices.empty()) throw InvalidArgument("no slices to evaluate");
    const Dims d = pred.dims();
    MetricReport r;
    r.mode = "slicewise";
    for (auto l : kTissueLabels) {
        double ds = 0.0, hs = 0.0;
        int hn = 0;
        for (int z : slices) {
            if (z < 0 || z >= d.z) throw InvalidArgument("slice index " + std::to_string(z) + " out of range");
            MaskVolume p(Dims{1, d.y, d.x}, 0), g(Dims{1, d.y, d.x}, 0);
            for (int y = 0; y < d.y; ++y)
                for (int x = 0; x < d.x; ++x) {
                    p(0, y, x) = pred(z, y, x) == static_cast<std::uint8_t>(l);
                    g(0, y, x) = gt(z, y, x) == static_cast<std::uint8_t>(l);
                }
            const auto m = score(p, g, spacing, true);
            ds += m.dsc;
            if (!std::isnan(m.hd95)) {
                hs += m.hd95;
                ++hn;
            }
        }
        r.per_class[l] = {ds / static_cast<double>(slices.size()), hn > 0 ? hs / hn : NAN};
    }
    finalize_means(r);
    return r;
}

void write_metric_csv(std::ostream& os, const std::vector<std::pair<std::string, MetricReport>>& rows) {
    os << "method";
    for (auto l : kTissueLabels) os << ",dsc_" << label_name(l);
    os << ",mean_dsc,mean_hd95_mm\n";
    os << std::setprecision(6);
    for (const auto& [name, r] : rows) {
        os << name;
        for (auto l : kTissueLabels) {
            auto it = r.per_class.find(l);
            os << ',' << (it == r.per_class.end() ? NAN : it->second.dsc);
        }
        os << ',' << r.mean_dsc << ',' << r.mean_hd95 << '\n';
    }
}

}  // namespace dsl
