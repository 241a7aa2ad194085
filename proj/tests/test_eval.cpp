#include <algorithm>
#include <numeric>
#include <cmath>
#include <random>

#include "doctest.h"
#include "oracles.hpp"
#include "dsl/eval.hpp"
#include "json.hpp"

using namespace dsl;

using namespace oracle;

namespace {

MaskVolume cube(Dims d, Index3 lo, int side) {
    MaskVolume m(d, 0);
    for (int z = lo.z; z < lo.z + side; ++z)
        for (int y = lo.y; y < lo.y + side; ++y)
            for (int x = lo.x; x < lo.x + side; ++x) m(z, y, x) = 1;
    return m;
}

MaskVolume random_mask(Dims d, std::mt19937_64& rng, double p) {
    std::bernoulli_distribution b(p);
    MaskVolume m(d, 0);
    for (auto& v : m.data()) v = b(rng) ? 1 : 0;
    if (std::none_of(m.data().begin(), m.data().end(), [](auto v) { return v != 0; })) m[0] = 1;
    return m;
}


// Oracle: SSIM for one 2-D window position with the 2-D Gaussian built directly.
double brute_ssim(const Grid<float>& a, const Grid<float>& b, double L) {
    const Dims d = a.dims();
    double w2[11][11], tot = 0;
    for (int j = 0; j < 11; ++j)
        for (int i = 0; i < 11; ++i) tot += w2[j][i] = std::exp(-((j - 5) * (j - 5) + (i - 5) * (i - 5)) / (2 * 2.25));
    const double c1 = std::pow(0.01 * L, 2), c2 = std::pow(0.03 * L, 2);
    double sum = 0;
    int n = 0;
    for (int z = 0; z < d.z; ++z)
        for (int y = 0; y + 11 <= d.y; ++y)
            for (int x = 0; x + 11 <= d.x; ++x) {
                double ma = 0, mb = 0;
                for (int j = 0; j < 11; ++j)
                    for (int i = 0; i < 11; ++i) {
                        ma += w2[j][i] / tot * a(z, y + j, x + i);
                        mb += w2[j][i] / tot * b(z, y + j, x + i);
                    }
                double va = 0, vb = 0, cv = 0;
                for (int j = 0; j < 11; ++j)
                    for (int i = 0; i < 11; ++i) {
                        const double da = a(z, y + j, x + i) - ma, db = b(z, y + j, x + i) - mb;
                        va += w2[j][i] / tot * da * da;
                        vb += w2[j][i] / tot * db * db;
                        cv += w2[j][i] / tot * da * db;
                    }
                sum += (2 * ma * mb + c1) * (2 * cv + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                ++n;
            }
    return sum / n;
}

}  // namespace

TEST_CASE("dice examples and symmetry") {
    const Dims d{2, 2, 2};
    MaskVolume g(d, 1), p(d, 0);
    for (int x = 0; x < 2; ++x)
        for (int y = 0; y < 2; ++y) p(0, y, x) = 1;
    CHECK(dice(p, g) == doctest::Approx(2.0 / 3.0));
    CHECK(dice(g, g) == 1.0);
    CHECK(dice(MaskVolume(d, 0), MaskVolume(d, 0)) == 1.0);
    MaskVolume q(d, 0);
    q(1, 1, 1) = 1;
    CHECK(dice(p, q) == 0.0);
    CHECK_THROWS_AS(dice(p, MaskVolume(Dims{1, 2, 2}, 0)), InvalidArgument);

    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        const auto a = random_mask({5, 6, 7}, rng, 0.4), b = random_mask({5, 6, 7}, rng, 0.3);
        CHECK(dice(a, b) == dice(b, a));
        // same permutation applied to both masks
        std::vector<std::size_t> perm(a.size());
        std::iota(perm.begin(), perm.end(), 0);
        std::shuffle(perm.begin(), perm.end(), rng);
        MaskVolume pa(a.dims()), pb(b.dims());
        for (std::size_t i = 0; i < perm.size(); ++i) pa[i] = a[perm[i]], pb[i] = b[perm[i]];
        CHECK(dice(pa, pb) == dice(a, b));
        const double v = dice(a, b);
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }
}

TEST_CASE("hd95 examples") {
    const Vec3 sp{0.6, 0.6, 0.6};
    const Dims d{8, 8, 8};
    const auto a = cube(d, {2, 2, 0}, 1), b = cube(d, {2, 2, 3}, 1);
    CHECK(hd95(a, b, sp) == doctest::Approx(1.8).epsilon(1e-12));
    CHECK(brute_hd95(a, b, sp) == doctest::Approx(1.8).epsilon(1e-12));
    const auto c = cube(d, {1, 1, 1}, 3);
    CHECK(hd95(c, c, sp) == 0.0);
    CHECK_THROWS_WITH_AS(hd95(c, MaskVolume(d, 0), sp), doctest::Contains("undefined HD95"), InvalidArgument);
}

TEST_CASE("hd95 equals the all-pairs oracle on small masks") {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 40; ++trial) {
        std::uniform_int_distribution<int> side(2, 10);
        const Dims d{side(rng), side(rng), side(rng)};
        const Vec3 sp{0.5 + 0.1 * (trial % 4), 0.7, 1.25};
        const auto a = random_mask(d, rng, 0.3), b = random_mask(d, rng, 0.5);
        CHECK(hd95(a, b, sp) == doctest::Approx(brute_hd95(a, b, sp)).epsilon(1e-12));
        CHECK(hd95(a, b, sp) == hd95(b, a, sp));
        CHECK(hd95(a, b, sp) >= 0.0);
    }
    // a shifted cube pair at the maximal size
    const Dims d{10, 10, 10};
    const auto a = cube(d, {1, 2, 1}, 5), b = cube(d, {3, 2, 4}, 5);
    CHECK(hd95(a, b, {0.6, 0.6, 0.6}) == doctest::Approx(brute_hd95(a, b, {0.6, 0.6, 0.6})).epsilon(1e-12));
}

TEST_CASE("hd95 does not grow as pred dilates toward gt") {
    const Dims d{10, 10, 16};
    const Vec3 sp{0.6, 0.6, 0.6};
    const auto gt = cube(d, {3, 3, 2}, 4);
    MaskVolume pred = cube(d, {3, 3, 9}, 4);
    double prev = hd95(pred, gt, sp);
    for (int step = 1; step <= 7; ++step) {
        const auto grow = cube(d, {3, 3, 9 - step}, 4);
        for (std::size_t i = 0; i < pred.size(); ++i) pred[i] = pred[i] | grow[i];
        const double h = hd95(pred, gt, sp);
        CHECK(h <= prev + 1e-12);
        prev = h;
    }
}

TEST_CASE("SSIM and PSNR") {
    std::mt19937_64 rng(3);
    std::normal_distribution<double> nd(0.0, 40.0);
    CtVolume a;
    a.hu = Grid<std::int16_t>(Dims{3, 14, 13});
    for (auto& v : a.hu.data()) v = static_cast<std::int16_t>(-600 + nd(rng));
    CtVolume b = a;
    CHECK(ssim(a, a) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(std::isinf(psnr(a, a)));
    for (auto& v : b.hu.data()) v = static_cast<std::int16_t>(v + 25);
    CHECK(psnr(a, b) == doctest::Approx(20.0 * std::log10(1624.0 / 25.0)).epsilon(1e-12));
    CHECK(psnr(a, b, 1000.0) == doctest::Approx(20.0 * std::log10(1000.0 / 25.0)).epsilon(1e-12));

    // seeded noisy pair against direct evaluation
    CtVolume c = a;
    for (auto& v : c.hu.data()) v = static_cast<std::int16_t>(v + nd(rng));
    Grid<float> fa(a.dims()), fc(a.dims());
    double mse = 0;
    for (std::size_t i = 0; i < fa.size(); ++i) {
        fa[i] = a.hu[i];
        fc[i] = c.hu[i];
        mse += std::pow(double(a.hu[i]) - c.hu[i], 2);
    }
    mse /= double(fa.size());
    CHECK(psnr(a, c) == doctest::Approx(10 * std::log10(1624.0 * 1624.0 / mse)).epsilon(1e-12));
    const double s = ssim(a, c);
    CHECK(s == doctest::Approx(brute_ssim(fa, fc, 1624.0)).epsilon(1e-9));
    CHECK(s < 1.0);
    CHECK(s >= -1.0);
    CHECK(ssim(a, c) == doctest::Approx(ssim(c, a)).epsilon(1e-12));

    CHECK_THROWS_AS(ssim(a, CtVolume{Grid<std::int16_t>(Dims{3, 14, 12})}), InvalidArgument);
    CHECK_THROWS_AS(psnr(a, CtVolume{Grid<std::int16_t>(Dims{3, 14, 12})}), InvalidArgument);
}

TEST_CASE("Frechet proxy") {
    std::mt19937_64 rng(9);
    std::normal_distribution<double> nd;
    Eigen::MatrixXd F(60, 5);
    for (int i = 0; i < F.rows(); ++i)
        for (int j = 0; j < F.cols(); ++j) F(i, j) = nd(rng) * (j + 1);
    CHECK(std::abs(frechet_proxy(F, F)) <= 1e-6);

    // equal covariances: a translated copy
    Eigen::RowVectorXd v(5);
    v << 1, -2, 0.5, 3, 0;
    const Eigen::MatrixXd G = F.rowwise() + v;
    CHECK(frechet_proxy(F, G) == doctest::Approx(v.squaredNorm()).epsilon(1e-8));

    // axis-aligned +-a_i points have exactly diagonal sample covariance
    auto axis_set = [](const Eigen::VectorXd& mu, const Eigen::VectorXd& a) {
        const int d = static_cast<int>(mu.size());
        Eigen::MatrixXd X(2 * d, d);
        for (int i = 0; i < d; ++i) {
            X.row(2 * i) = mu.transpose();
            X.row(2 * i + 1) = mu.transpose();
            X(2 * i, i) += a(i);
            X(2 * i + 1, i) -= a(i);
        }
        return X;
    };
    Eigen::VectorXd mu1(3), mu2(3), a1(3), a2(3);
    mu1 << 0, 1, 2;
    mu2 << 1, 1, -1;
    a1 << 1, 2, 3;
    a2 << 2, 2, 0.5;
    const int n = 6;
    double oracle = (mu1 - mu2).squaredNorm();
    for (int i = 0; i < 3; ++i) {
        const double s1 = 2 * a1(i) * a1(i) / (n - 1), s2 = 2 * a2(i) * a2(i) / (n - 1);
        oracle += std::pow(std::sqrt(s1) - std::sqrt(s2), 2);
    }
    CHECK(frechet_proxy(axis_set(mu1, a1), axis_set(mu2, a2), 0.0) == doctest::Approx(oracle).epsilon(1e-9));

    // nonnegative on random pairs, including the shrunk small-sample case
    for (int trial = 0; trial < 10; ++trial) {
        Eigen::MatrixXd A(8, 12), B(9, 12);
        for (int i = 0; i < A.size(); ++i) A.data()[i] = nd(rng);
        for (int i = 0; i < B.size(); ++i) B.data()[i] = nd(rng) + 0.3;
        CHECK(frechet_proxy(A, B) >= -1e-6);
        CHECK(std::abs(frechet_proxy(A, A)) <= 1e-6);
    }
    CHECK_THROWS_AS(frechet_proxy(F, Eigen::MatrixXd::Zero(10, 4)), InvalidArgument);
}

TEST_CASE("segmentation report") {
    LabelVolume gt(Dims{4, 8, 8}, 0);
    for (int z = 0; z < 4; ++z)
        for (int y = 0; y < 8; ++y)
            for (int x = 0; x < 8; ++x) gt(z, y, x) = static_cast<std::uint8_t>(1 + (y / 4) * 2 + x / 4);
    const auto same = evaluate_segmentation(gt, gt, {0.6, 0.6, 0.6});
    CHECK(same.mean_dsc == 1.0);
    CHECK(same.mean_hd95 == 0.0);
    CHECK(same.per_class.size() == 4);
    CHECK(same.per_class.count(PathologyLabel::Background) == 0);

    // a class missing from the prediction has DSC 0 and undefined HD95
    LabelVolume pred = gt;
    for (auto& v : pred.data())
        if (v == static_cast<std::uint8_t>(PathologyLabel::Emphysema)) v = 1;
    const auto r = evaluate_segmentation(pred, gt, {0.6, 0.6, 0.6});
    CHECK(r.per_class.at(PathologyLabel::Emphysema).dsc == 0.0);
    CHECK(std::isnan(r.per_class.at(PathologyLabel::Emphysema).hd95));
    const auto j = nlohmann::json::parse(r.to_json());
    CHECK(j["per_class"]["Emphysema"]["hd95_mm"].is_null());
    CHECK(j["psnr_data_range"] == 1624.0);

    const auto s = evaluate_slices(gt, gt, {0.6, 0.6, 0.6}, {0, 3});
    CHECK(s.mode == "slicewise");
    CHECK(s.mean_dsc == 1.0);
    CHECK_THROWS_AS(evaluate_slices(gt, gt, {0.6, 0.6, 0.6}, {4}), InvalidArgument);

    MetricReport inf;
    inf.psnr = INFINITY;
    CHECK(nlohmann::json::parse(inf.to_json())["psnr"] == "inf");
}
