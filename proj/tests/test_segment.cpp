#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"
#include "oracles.hpp"
#include "dsl/segment.hpp"

using namespace dsl;

using namespace oracle;

namespace {

// 10 + 10 points around (0,0) and (6,6).
Eigen::MatrixXd two_blobs(std::uint64_t seed, int per = 10) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd(0.0, 0.7);
    Eigen::MatrixXd D(2 * per, 2);
    for (int i = 0; i < 2 * per; ++i) {
        const double c = i < per ? 0.0 : 6.0;
        D(i, 0) = c + nd(rng);
        D(i, 1) = c + 0.5 * nd(rng);
    }
    return D;
}


void check_trace_monotone(const GmmModel& m) {
    for (std::size_t i = 1; i < m.loglik_trace.size(); ++i) {
        const double prev = m.loglik_trace[i - 1];
        CHECK(m.loglik_trace[i] >= prev - 1e-8 * std::max(1.0, std::abs(prev)));
    }
}

CtVolume constant_volume(Dims d, std::int16_t hu) {
    CtVolume v;
    v.hu = Grid<std::int16_t>(d, hu);
    return v;
}

}  // namespace

TEST_CASE("EM agrees with the 20-point oracle") {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        const auto D = two_blobs(seed);
        GmmOptions opt;
        opt.k = 2;
        opt.seed = seed;
        const auto m = fit_gmm(D, opt);
        const auto a = assign_clusters(m, D);
        const auto o = oracle_em(D, {{{D(0, 0), D(0, 1)}}, {{D(19, 0), D(19, 1)}}}, 200);
        std::vector<int> ol;
        for (const auto& r : o.resp) ol.push_back(r[1] > r[0] ? 1 : 0);
        CHECK(same_partition(a.labels, ol));
        for (int i = 0; i < 20; ++i) {
            const int own = i < 10 ? a.labels[0] : a.labels[19];
            CHECK(a.labels[i] == own);
            CHECK(a.resp(i, own) >= 0.99);
        }
        // component parameters match the oracle up to ordering
        const int k0 = a.labels[0], o0 = ol[0];
        CHECK(m.means[k0](0) == doctest::Approx(o.mu[o0][0]).epsilon(1e-6));
        CHECK(m.means[k0](1) == doctest::Approx(o.mu[o0][1]).epsilon(1e-6));
        CHECK(m.covariances[k0](0, 1) == doctest::Approx(o.cov[o0][1]).epsilon(1e-5).scale(1e-8));
        CHECK(m.weights.sum() == doctest::Approx(1.0).epsilon(1e-12));
        check_trace_monotone(m);
    }
}

TEST_CASE("single component is the sample mean and covariance") {
    const auto D = two_blobs(7);
    GmmOptions opt;
    opt.k = 1;
    const auto m = fit_gmm(D, opt);
    Eigen::Vector2d mean = Eigen::Vector2d::Zero();
    for (int i = 0; i < 20; ++i) mean += D.row(i).transpose() / 20.0;
    Eigen::Matrix2d cov = Eigen::Matrix2d::Zero();
    for (int i = 0; i < 20; ++i) cov += (D.row(i).transpose() - mean) * (D.row(i).transpose() - mean).transpose() / 20.0;
    CHECK((m.means[0] - mean).norm() < 1e-12);
    CHECK((m.covariances[0] - cov).norm() < 1e-10);
    CHECK(m.weights(0) == 1.0);

    opt.reg_mode = CovarianceReg::Ridge;
    opt.reg = 0.5;
    const auto r = fit_gmm(D, opt);
    CHECK((r.covariances[0] - cov - 0.5 * Eigen::Matrix2d::Identity()).norm() < 1e-10);
}

TEST_CASE("GMM determinism and input validation") {
    const auto D = two_blobs(3, 30);
    GmmOptions opt;
    opt.k = 3;
    opt.seed = 11;
    const auto a = fit_gmm(D, opt), b = fit_gmm(D, opt);
    CHECK(a.weights == b.weights);
    for (int c = 0; c < 3; ++c) {
        CHECK(a.means[c] == b.means[c]);
        CHECK(a.covariances[c] == b.covariances[c]);
    }
    CHECK(a.loglik_trace == b.loglik_trace);
    opt.k = 60;
    CHECK_THROWS_AS(fit_gmm(D, opt), InvalidArgument);
    opt.k = 2;
    auto m = fit_gmm(D, opt);
    CHECK_THROWS_AS(assign_clusters(m, Eigen::MatrixXd::Zero(3, 5)), InvalidArgument);
}

TEST_CASE("responsibilities and log-likelihood invariants on random data") {
    for (std::uint64_t seed = 0; seed < 8; ++seed) {
        std::mt19937_64 rng(seed);
        std::normal_distribution<double> nd;
        const int N = 200, d = 4;
        Eigen::MatrixXd D(N, d);
        for (int i = 0; i < N; ++i)
            for (int j = 0; j < d; ++j) D(i, j) = nd(rng) + (i % 3) * 2.0 * (j == 0);
        GmmOptions opt;
        opt.seed = seed;
        const auto m = fit_gmm(D, opt);
        check_trace_monotone(m);
        const auto a = assign_clusters(m, D);
        for (int i = 0; i < N; ++i) {
            CHECK(std::abs(a.resp.row(i).sum() - 1.0) <= 1e-9);
            CHECK(a.resp.row(i).minCoeff() >= 0.0);
        }
        CHECK(m.weights.sum() == doctest::Approx(1.0).epsilon(1e-9));
        for (const auto& c : m.covariances) {
            CHECK((c - c.transpose()).norm() == 0.0);
            Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(c);
            CHECK(es.eigenvalues().minCoeff() > 0.0);
        }
    }
}

TEST_CASE("fit is equivariant under uniform rescaling") {
    std::mt19937_64 rng(4);
    std::normal_distribution<double> nd;
    Eigen::MatrixXd D(120, 3);
    for (int i = 0; i < 120; ++i)
        for (int j = 0; j < 3; ++j) D(i, j) = nd(rng) + 3.0 * (i % 4 == 0) * (j + 1);
    GmmOptions opt;
    opt.k = 3;
    opt.seed = 5;
    opt.reg = 1e-12;
    const auto a = assign_clusters(fit_gmm(D, opt), D);
    const double s = 37.5;
    auto so = opt;
    so.reg = opt.reg * s * s;
    const Eigen::MatrixXd Ds = D * s;
    const auto b = assign_clusters(fit_gmm(Ds, so), Ds);
    CHECK(a.labels == b.labels);
}

TEST_CASE("a component mean wins when it dominates") {
    GmmModel m;
    m.k = 2;
    m.dim = 2;
    m.weights = Eigen::Vector2d(0.9, 0.1);
    m.means = {Eigen::Vector2d(1, 1), Eigen::Vector2d(1.5, 1)};
    m.covariances = {Eigen::Matrix2d::Identity(), Eigen::Matrix2d::Identity()};
    Eigen::MatrixXd x(1, 2);
    x << 1, 1;
    CHECK(assign_clusters(m, x).labels[0] == 0);
}

TEST_CASE("HU label assignment") {
    HuThresholds t;
    const std::vector<double> hu{-960, -955, -500, -480, -100, -1000, -800};
    const std::vector<int> hard{0, 0, 1, 1, 2, 3, 4};
    const auto a = hu_label_assignment(6, hu, hard, t);
    CHECK(a.cluster_to_label[0] == PathologyLabel::Emphysema);
    CHECK(a.cluster_mean_hu[0] == doctest::Approx(-957.5));
    CHECK(a.cluster_to_label[1] == PathologyLabel::GGO);
    CHECK(a.cluster_to_label[2] == PathologyLabel::Fibrosis);
    CHECK(a.cluster_to_label[3] == PathologyLabel::Background);
    CHECK(a.cluster_to_label[4] == PathologyLabel::Healthy);
    // empty cluster
    CHECK(a.cluster_to_label[5] == PathologyLabel::Background);
    CHECK(std::isnan(a.cluster_mean_hu[5]));
    REQUIRE(a.warnings.size() == 1);
    CHECK(a.warnings[0].find("empty") != std::string::npos);
    // boundary value goes to the lower-HU class; two clusters may share a label
    const std::vector<double> hb{-860, -700, -650};
    const auto b = hu_label_assignment(3, hb, std::vector<int>{0, 1, 2}, t);
    CHECK(b.cluster_to_label[0] == PathologyLabel::Emphysema);
    CHECK(b.cluster_to_label[1] == PathologyLabel::Healthy);
    CHECK(b.cluster_to_label[2] == PathologyLabel::GGO);
}

TEST_CASE("soft masks from patch votes") {
    const Dims d{8, 8, 8};
    const std::vector<PathologyLabel> map{PathologyLabel::GGO, PathologyLabel::Fibrosis};
    {
        const std::vector<Index3> o{{0, 0, 0}};
        const auto m = build_soft_masks(std::vector<int>{0}, map, o, d, 4);
        for (int z = 0; z < 8; ++z)
            for (int y = 0; y < 8; ++y)
                for (int x = 0; x < 8; ++x) {
                    const bool in = z < 4 && y < 4 && x < 4;
                    CHECK(m[label_index(PathologyLabel::GGO)](z, y, x) == (in ? 1.0f : 0.0f));
                    CHECK(m[label_index(PathologyLabel::Background)](z, y, x) == (in ? 0.0f : 1.0f));
                }
    }
    {
        const std::vector<Index3> o{{0, 0, 0}, {0, 0, 2}};
        const auto m = build_soft_masks(std::vector<int>{0, 1}, map, o, d, 4);
        CHECK(m[label_index(PathologyLabel::GGO)](1, 1, 2) == 0.5f);
        CHECK(m[label_index(PathologyLabel::Fibrosis)](1, 1, 3) == 0.5f);
        CHECK(m[label_index(PathologyLabel::GGO)](1, 1, 1) == 1.0f);
        CHECK(m[label_index(PathologyLabel::Fibrosis)](1, 1, 5) == 1.0f);
    }
    {
        // non-overlapping grid: argmax gives the hard labels back
        const auto origins = grid_origins(d, 4, 4);
        std::vector<int> hard;
        for (std::size_t i = 0; i < origins.size(); ++i) hard.push_back(static_cast<int>(i % 2));
        const auto m = build_soft_masks(hard, map, origins, d, 4);
        const auto lab = argmax_labels(m);
        for (std::size_t p = 0; p < origins.size(); ++p)
            CHECK(lab(origins[p].z + 1, origins[p].y + 2, origins[p].x + 3) ==
                  static_cast<std::uint8_t>(map[hard[p]]));
        for (std::size_t i = 0; i < d.size(); ++i) {
            float s = 0;
            for (const auto& g : m) s += g[i];
            CHECK(s == doctest::Approx(1.0f));
        }
    }
    {
        // responsibilities spread across labels and still sum to 1
        Eigen::MatrixXd resp(2, 2);
        resp << 0.25, 0.75, 0.6, 0.4;
        const std::vector<Index3> o{{0, 0, 0}, {2, 2, 2}};
        const auto m = build_soft_masks(resp, map, o, d, 4);
        CHECK(m[label_index(PathologyLabel::GGO)](0, 0, 0) == 0.25f);
        CHECK(m[label_index(PathologyLabel::GGO)](3, 3, 3) == doctest::Approx(0.425f));
        CHECK(m[label_index(PathologyLabel::Fibrosis)](3, 3, 3) == doctest::Approx(0.575f));
    }
    const std::vector<Index3> bad{{6, 0, 0}};
    CHECK_THROWS_AS(build_soft_masks(std::vector<int>{0}, map, bad, d, 4), InvalidArgument);
}

TEST_CASE("Sobel fusion identities and monotonicity") {
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<float> u(0, 1);
    Grid<float> mask(Dims{10, 10, 10}), img(Dims{10, 10, 10});
    for (auto& v : mask.data()) v = u(rng);
    for (auto& v : img.data()) v = u(rng);
    CHECK(sobel_fusion(mask, img, 0.0) == mask);
    Grid<float> flat(Dims{10, 10, 10}, 0.3f);
    CHECK(sobel_fusion(mask, flat, 2.0) == mask);
    const auto f = sobel_fusion(mask, img, 2.0, 1.5);
    for (std::size_t i = 0; i < f.size(); ++i) {
        CHECK(f[i] >= mask[i]);
        CHECK(f[i] <= mask[i] * 3.0f + 1e-6f);
    }
    // zero mask stays zero
    Grid<float> zero(Dims{10, 10, 10}, 0.0f);
    CHECK(sobel_fusion(zero, img, 2.0) == zero);
    CHECK_THROWS_AS(sobel_fusion(mask, Grid<float>(Dims{5, 5, 5}), 2.0), InvalidArgument);
}

TEST_CASE("gated fusion moves a blocky boundary toward the HU edge") {
    // x < 16 emphysema-range air, x >= 16 GGO-range tissue
    const Dims d{8, 8, 32};
    CtVolume v = constant_volume(d, -900);
    for (int z = 0; z < d.z; ++z)
        for (int y = 0; y < d.y; ++y)
            for (int x = 16; x < 32; ++x) v.hu(z, y, x) = -500;
    // overlapping patches along x; the patch straddling the edge voted GGO
    std::vector<Index3> origins;
    std::vector<int> hard;
    for (int x = 0; x + 8 <= 32; x += 4) {
        origins.push_back({0, 0, x});
        hard.push_back(x + 8 <= 16 ? 0 : 1);
    }
    const std::vector<PathologyLabel> map{PathologyLabel::Emphysema, PathologyLabel::GGO};
    const auto masks = build_soft_masks(hard, map, origins, d, 8);
    auto mean_edge_error = [&](const LabelVolume& lab) {
        // distance from each row's first GGO voxel to the true edge at x = 16
        double acc = 0;
        int rows = 0;
        for (int z = 0; z < d.z; ++z)
            for (int y = 0; y < d.y; ++y) {
                int first = d.x;
                for (int x = 0; x < d.x; ++x)
                    if (lab(z, y, x) == static_cast<std::uint8_t>(PathologyLabel::GGO)) {
                        first = x;
                        break;
                    }
                acc += std::abs(first - 16);
                ++rows;
            }
        return acc / rows;
    };
    const double before = mean_edge_error(argmax_labels(masks));
    const auto fused = sobel_fusion_gated(masks, v, HuThresholds{}, HuWindow{}, 2.0, 1.5);
    const double after = mean_edge_error(argmax_labels(fused));
    MESSAGE("edge error before " << before << " after " << after);
    CHECK(before > 0.0);
    CHECK(after < before);
    for (int l = 0; l < kNumLabels; ++l)
        for (std::size_t i = 0; i < d.size(); ++i) CHECK(fused[l][i] >= masks[l][i]);
}

TEST_CASE("HU compatibility filter") {
    HuThresholds t;
    CtVolume v = constant_volume({1, 1, 6}, 0);
    const std::int16_t hu[6] = {-960, -500, -1010, -820, -720, 300};
    for (int x = 0; x < 6; ++x) v.hu(0, 0, x) = hu[x];
    LabelVolume lab(Dims{1, 1, 6});
    const PathologyLabel given[6] = {PathologyLabel::Fibrosis, PathologyLabel::GGO, PathologyLabel::Emphysema,
                                     PathologyLabel::Emphysema, PathologyLabel::Healthy, PathologyLabel::Background};
    for (int x = 0; x < 6; ++x) lab(0, 0, x) = static_cast<std::uint8_t>(given[x]);
    const auto out = hu_compatibility_filter(lab, v, t, 50.0);
    CHECK(out(0, 0, 0) == static_cast<std::uint8_t>(PathologyLabel::Emphysema));  // -960 labelled Fibrosis
    CHECK(out(0, 0, 1) == static_cast<std::uint8_t>(PathologyLabel::GGO));        // compatible
    CHECK(out(0, 0, 2) == static_cast<std::uint8_t>(PathologyLabel::Emphysema));  // within the 50 HU margin
    CHECK(out(0, 0, 3) == static_cast<std::uint8_t>(PathologyLabel::Emphysema));  // within the margin
    CHECK(out(0, 0, 4) == static_cast<std::uint8_t>(PathologyLabel::Healthy));    // within the margin
    CHECK(out(0, 0, 5) == static_cast<std::uint8_t>(PathologyLabel::Fibrosis));   // 300 labelled Background
    CHECK(hu_compatibility_filter(out, v, t, 50.0) == out);

    // zero margin forces every voxel into its own interval
    const auto strict = hu_compatibility_filter(lab, v, t, 0.0);
    for (int x = 0; x < 6; ++x) CHECK(strict(0, 0, x) == static_cast<std::uint8_t>(t.classify(hu[x])));

    // already compatible volume is untouched
    std::mt19937_64 rng(1);
    std::uniform_int_distribution<int> uh(-1024, 600);
    CtVolume r = constant_volume({6, 6, 6}, 0);
    LabelVolume rl(Dims{6, 6, 6});
    for (std::size_t i = 0; i < r.hu.size(); ++i) {
        r.hu[i] = static_cast<std::int16_t>(uh(rng));
        rl[i] = static_cast<std::uint8_t>(t.classify(r.hu[i]));
    }
    CHECK(hu_compatibility_filter(rl, r, t, 50.0) == rl);
    // idempotence on random labels
    std::uniform_int_distribution<int> ul(0, 4);
    for (auto& l : rl.data()) l = static_cast<std::uint8_t>(ul(rng));
    const auto once = hu_compatibility_filter(rl, r, t, 50.0);
    CHECK(hu_compatibility_filter(once, r, t, 50.0) == once);
}

TEST_CASE("all-air volume segments to background") {
    const CtVolume v = constant_volume({16, 16, 16}, -1000);
    std::mt19937_64 rng(3);
    std::normal_distribution<double> nd;
    std::vector<PatchDescriptor> desc;
    for (const auto& o : grid_origins(v.dims(), 8, 2)) {
        PatchDescriptor p;
        p.origin = o;
        p.values.resize(6);
        for (auto& x : p.values) x = nd(rng);
        desc.push_back(p);
    }
    SegmentOptions opt;
    const auto r = segment_descriptors(v, desc, 8, HuWindow{}, opt);
    for (auto l : r.labels.data()) CHECK(l == static_cast<std::uint8_t>(PathologyLabel::Background));
    for (auto l : r.cluster_to_label) CHECK(l == PathologyLabel::Background);
}

TEST_CASE("final labels do not depend on component order") {
    // synthetic 4-tissue volume with descriptors that carry the patch mean
    const auto ph = generate_phantom(benchmark_phantom_spec(2, {32, 32, 32}));
    std::mt19937_64 rng(8);
    std::normal_distribution<double> nd(0.0, 0.05);
    std::vector<PatchDescriptor> desc;
    for (const auto& o : grid_origins(ph.volume.dims(), 8, 4)) {
        PatchDescriptor p;
        p.origin = o;
        const double h = extract_patch(ph.volume, o, 8).mean_hu() / 1000.0;
        p.values = {h + nd(rng), nd(rng), nd(rng)};
        desc.push_back(p);
    }
    const Eigen::MatrixXd D = descriptor_matrix(desc);
    GmmOptions g;
    g.seed = 2;
    const auto m = fit_gmm(D, g);
    std::vector<double> hu;
    std::vector<Index3> origins;
    for (const auto& p : desc) hu.push_back(extract_patch(ph.volume, p.origin, 8).mean_hu()), origins.push_back(p.origin);

    auto labels_for = [&](const GmmModel& model) {
        const auto a = assign_clusters(model, D);
        const auto lab = hu_label_assignment(model.k, hu, a.labels, HuThresholds{});
        return argmax_labels(build_soft_masks(a.resp, lab.cluster_to_label, origins, ph.volume.dims(), 8));
    };
    GmmModel p = m;
    const std::vector<int> perm{3, 0, 4, 1, 2};
    for (int c = 0; c < m.k; ++c) {
        p.weights(c) = m.weights(perm[c]);
        p.means[c] = m.means[perm[c]];
        p.covariances[c] = m.covariances[perm[c]];
    }
    CHECK(labels_for(p) == labels_for(m));
}

TEST_CASE("segmentation is deterministic and stage errors are tagged") {
    const auto ph = generate_phantom(benchmark_phantom_spec(4, {32, 32, 32}));
    std::vector<PatchDescriptor> desc;
    for (const auto& o : grid_origins(ph.volume.dims(), 8, 4)) {
        PatchDescriptor p;
        p.origin = o;
        const auto patch = extract_patch(ph.volume, o, 8);
        const auto fo = firstorder_features(patch);
        p.values = {fo[0] / 100.0, fo[1] / 10.0};
        desc.push_back(p);
    }
    SegmentOptions opt;
    const auto a = segment_descriptors(ph.volume, desc, 8, HuWindow{}, opt);
    const auto b = segment_descriptors(ph.volume, desc, 8, HuWindow{}, opt);
    CHECK(a.labels == b.labels);
    CHECK(a.hard_labels == b.hard_labels);
    CHECK(a.cluster_mean_hu == b.cluster_mean_hu);

    std::vector<PatchDescriptor> few(desc.begin(), desc.begin() + 3);
    CHECK_THROWS_WITH_AS(segment_descriptors(ph.volume, few, 8, HuWindow{}, opt), doctest::Contains("fit_gmm"),
                         StageError);
}
