#include <cmath>
#include <random>
#include <sstream>

#include "doctest.h"
#include "oracles.hpp"
#include "dsl/distill.hpp"
#include "json.hpp"

using namespace dsl;

using namespace oracle;

namespace {

Eigen::MatrixXd random_unit_rows(int B, int d, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd;
    Eigen::MatrixXd Z(B, d);
    for (int i = 0; i < B; ++i) {
        for (int j = 0; j < d; ++j) Z(i, j) = nd(rng);
        Z.row(i).normalize();
    }
    return Z;
}


Eigen::MatrixXd similarity_with_pattern(int B, const std::vector<std::pair<int, int>>& positives) {
    Eigen::MatrixXd S = Eigen::MatrixXd::Zero(B, B);
    for (int i = 0; i < B; ++i) S(i, i) = 1;
    for (auto [i, j] : positives) S(i, j) = S(j, i) = 0.9;
    return S;
}

std::vector<Patch> phantom_patches(int side, int count, std::uint64_t seed) {
    const auto ph = generate_phantom(benchmark_phantom_spec(seed, {32, 32, 32}));
    return sample_patches(ph.volume, side, count, seed + 1);
}

TrainConfig tiny_train() {
    TrainConfig c;
    c.unet.patch_side = 8;
    c.unet.widths = {4, 8};
    c.unet.max_groups = 2;
    c.unet.time_embed_dim = 8;
    c.unet.time_hidden = 8;
    c.batch = 4;
    c.steps = 10;
    c.lr = 1e-3;
    c.seed = 3;
    return c;
}

}  // namespace

TEST_CASE("distill config defaults and validation") {
    DistillConfig c;
    CHECK(c.tau == 0.5);
    CHECK(c.kappa == 0.07);
    CHECK(c.warmup_steps == 5000);
    CHECK(c.ramp_steps == 5000);
    CHECK(c.lambda_max == 0.5);
    CHECK_NOTHROW(c.validate());
    auto bad = c;
    bad.kappa = 0;
    CHECK_THROWS_AS(bad.validate(), InvalidArgument);
    bad = c;
    bad.ramp_steps = 0;
    CHECK_THROWS_AS(bad.validate(), InvalidArgument);
    bad = c;
    bad.tau = 1.0;
    CHECK_THROWS_AS(bad.validate(), InvalidArgument);
    bad = c;
    bad.lambda_max = -0.1;
    CHECK_THROWS_AS(bad.validate(), InvalidArgument);
}

TEST_CASE("radiomic similarity") {
    Eigen::MatrixXd same(2, 3);
    same << 1, 0, 0, 1, 0, 0;
    CHECK(radiomic_similarity(same) == Eigen::MatrixXd::Ones(2, 2));
    Eigen::MatrixXd orth(2, 3);
    orth << 1, 0, 0, 0, 1, 0;
    const auto So = radiomic_similarity(orth);
    CHECK(So(0, 1) == 0.0);
    CHECK(So(1, 0) == 0.0);

    const auto Z = random_unit_rows(4, 128, 8);
    const auto S = radiomic_similarity(Z);
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) {
            double dot = 0;
            for (int k = 0; k < 128; ++k) dot += Z(i, k) * Z(j, k);
            if (i == j)
                CHECK(S(i, j) == 1.0);
            else
                CHECK(S(i, j) == doctest::Approx(dot).epsilon(1e-12));
            CHECK(S(i, j) == S(j, i));
        }

    Eigen::MatrixXd bad = Z;
    bad.row(2) *= 1.01;
    CHECK_THROWS_AS(radiomic_similarity(bad), InvalidArgument);
}

TEST_CASE("InfoNCE two-element cases") {
    DistillConfig cfg;
    const auto Z = random_unit_rows(2, 16, 1);
    Eigen::MatrixXd S(2, 2);
    S << 1, 0.8, 0.8, 1;
    const auto r = info_nce(Z, S, cfg);
    CHECK(std::abs(r.loss) <= 1e-9);
    CHECK(r.anchors == 2);
    CHECK_FALSE(r.no_signal);

    S << 1, 0.5, 0.5, 1;  // s12 <= tau
    const auto n = info_nce(Z, S, cfg);
    CHECK(n.loss == 0.0);
    CHECK(n.no_signal);
    CHECK(n.anchors == 0);

    CHECK_THROWS_AS(info_nce(Z.topRows(1), S.topLeftCorner(1, 1), cfg), InvalidArgument);
}

TEST_CASE("InfoNCE three-element golden") {
    DistillConfig cfg;
    // anchor 0 pairs with 1, anchor 2 pairs with 1: every anchor has one positive and one negative
    Eigen::MatrixXd Z(3, 2);
    Z << 1, 0, std::cos(0.3), std::sin(0.3), 0, 1;
    Eigen::MatrixXd S(3, 3);
    S << 1, 0.9, 0.1, 0.9, 1, 0.8, 0.1, 0.8, 1;
    const double k = 0.07;
    const double d01 = std::cos(0.3), d02 = 0.0, d12 = std::sin(0.3);
    const double l0 = -std::log(std::exp(d01 / k) / (std::exp(d01 / k) + std::exp(d02 / k)));
    const double l1 = -std::log(1.0);  // both others positive
    const double l2 = -std::log(std::exp(d12 / k) / (std::exp(d12 / k) + std::exp(d02 / k)));
    const auto r = info_nce(Z, S, cfg);
    CHECK(r.loss == doctest::Approx((l0 + l1 + l2) / 3).epsilon(1e-12));
    CHECK(r.loss == doctest::Approx(oracle_info_nce(Z, S, 0.5, k)).epsilon(1e-12));
    CHECK(r.pos_frac == doctest::Approx(4.0 / 6.0));
}

TEST_CASE("InfoNCE matches the oracle and is non-negative") {
    DistillConfig cfg;
    for (std::uint64_t s = 0; s < 20; ++s) {
        const int B = 2 + static_cast<int>(s % 7);
        const auto Z = random_unit_rows(B, 32, 100 + s);
        const auto T = random_unit_rows(B, 4, 200 + s);
        const auto S = radiomic_similarity(T);
        const auto r = info_nce(Z, S, cfg);
        CHECK(r.loss >= 0.0);
        CHECK(r.loss == doctest::Approx(oracle_info_nce(Z, S, cfg.tau, cfg.kappa)).epsilon(1e-10));
    }
}

TEST_CASE("InfoNCE gradient matches finite differences") {
    DistillConfig cfg;
    for (std::uint64_t s = 0; s < 5; ++s) {
        const auto Z = random_unit_rows(4, 12, 300 + s);
        const auto S = similarity_with_pattern(4, {{0, 1}, {2, 3}, {1, 2}});
        Eigen::MatrixXd G;
        info_nce(Z, S, cfg, &G);
        REQUIRE(G.rows() == 4);
        REQUIRE(G.cols() == 12);
        // the loss is evaluated at the raw (unnormalized) coordinates, so perturb
        // through a function that does not renormalize
        auto raw = [&](const Eigen::MatrixXd& X) { return oracle_info_nce(X, S, cfg.tau, cfg.kappa); };
        for (int i = 0; i < 4; ++i)
            for (int j = 0; j < 12; ++j) {
                const double h = 1e-6;
                Eigen::MatrixXd P = Z, M = Z;
                P(i, j) += h;
                M(i, j) -= h;
                const double num = (raw(P) - raw(M)) / (2 * h);
                const double scale = std::max({std::abs(num), std::abs(G(i, j)), 1e-8});
                CHECK(std::abs(num - G(i, j)) / scale < 1e-4);
            }
    }
}

TEST_CASE("InfoNCE falls when a positive pair rotates together") {
    DistillConfig cfg;
    // anchor 0 has positives 1 and 2, negative 3
    const auto S = similarity_with_pattern(4, {{0, 1}, {0, 2}});
    auto at = [](double a) {
        Eigen::MatrixXd Z(4, 3);
        Z << 1, 0, 0, std::cos(a), std::sin(a), 0, 0, 0, 1, -1, 0, 0;
        return Z;
    };
    double prev = info_nce(at(1.5), S, cfg).loss;
    for (double a = 1.4; a > 0.0; a -= 0.1) {
        const double cur = info_nce(at(a), S, cfg).loss;
        CHECK(cur < prev);
        prev = cur;
    }
}

TEST_CASE("warmup schedule") {
    DistillConfig c;
    CHECK(warmup_lambda(0, c) == 0.0);
    CHECK(warmup_lambda(5000, c) == 0.0);
    CHECK(warmup_lambda(7500, c) == 0.25);
    CHECK(warmup_lambda(10000, c) == 0.5);
    CHECK(warmup_lambda(20000, c) == 0.5);
    double prev = 0;
    for (long s = 0; s <= 12000; s += 250) {
        const double l = warmup_lambda(s, c);
        CHECK(l >= prev);
        prev = l;
    }
    // linear between the breakpoints
    CHECK(warmup_lambda(6000, c) == doctest::Approx(0.1));
    CHECK(warmup_lambda(9000, c) == doctest::Approx(0.4));
    CHECK_THROWS_AS(warmup_lambda(-1, c), InvalidArgument);
}

TEST_CASE("total loss") {
    DistillConfig c;
    CHECK(total_loss(0.7, 3.0, 4999, c) == 0.7);
    CHECK(total_loss(1.0, 2.0, 10000, c) == 2.0);
    CHECK(total_loss(0.5, 0.0, 8000, c) == 0.5);
    CHECK_THROWS_AS(total_loss(NAN, 0.0, 1, c), InvalidArgument);
    CHECK_THROWS_AS(total_loss(0.1, INFINITY, 1, c), InvalidArgument);
}

TEST_CASE("metrics line format") {
    std::ostringstream os;
    write_metrics_line(os, {12, 0.5, 1.25, 0.1, 0.25});
    const auto line = os.str();
    CHECK(line.back() == '\n');
    const auto j = nlohmann::json::parse(line);
    CHECK(j["step"] == 12);
    CHECK(j["l_diff"] == 0.5);
    CHECK(j["l_nce"] == 1.25);
    CHECK(j["lambda"] == 0.1);
    CHECK(j["pos_frac"] == 0.25);
}

TEST_CASE("ten training steps before warmup keep lambda at zero") {
    const auto corpus = phantom_patches(8, 8, 4);
    auto cfg = tiny_train();
    std::vector<TrainRecord> seen;
    const auto r = train(corpus, cfg, [&](const TrainRecord& rec) { seen.push_back(rec); });
    CHECK_FALSE(r.aborted);
    REQUIRE(r.log.size() == 10);
    CHECK(seen.size() == 10);
    for (std::size_t i = 0; i < r.log.size(); ++i) {
        CHECK(r.log[i].step == long(i + 1));
        CHECK(r.log[i].lambda == 0.0);
        CHECK(std::isfinite(r.log[i].l_diff));
        CHECK(std::isfinite(r.log[i].l_nce));
    }
}

TEST_CASE("training is deterministic given the seed") {
    const auto corpus = phantom_patches(8, 8, 4);
    const auto cfg = tiny_train();
    const auto a = train(corpus, cfg), b = train(corpus, cfg);
    for (std::size_t i = 0; i < a.log.size(); ++i) CHECK(a.log[i].l_diff == b.log[i].l_diff);
    const auto& pa = a.model.denoiser.params().all();
    const auto& pb = b.model.denoiser.params().all();
    for (std::size_t k = 0; k < pa.size(); ++k) CHECK(pa[k].value == pb[k].value);
}

TEST_CASE("immediate distillation when warmup is disabled") {
    const auto corpus = phantom_patches(8, 8, 4);
    auto cfg = tiny_train();
    cfg.steps = 3;
    cfg.distill.warmup_steps = 0;
    cfg.distill.ramp_steps = 1;
    const auto r = train(corpus, cfg);
    REQUIRE(r.log.size() == 3);
    CHECK(r.log[0].lambda == cfg.distill.lambda_max);
}

TEST_CASE("teacher side stays fixed through training") {
    const auto corpus = phantom_patches(8, 16, 6);
    auto cfg = tiny_train();
    cfg.steps = 100;
    cfg.distill.warmup_steps = 0;
    cfg.distill.ramp_steps = 10;
    const auto before = TeacherHeadParams::init(cfg.teacher_seed);
    std::vector<RadiomicVector> rv;
    for (const auto& p : corpus) rv.push_back(radiomic_vector(p));
    const auto scaler = RadiomicScaler::fit(rv);

    const auto r = train(corpus, cfg);
    CHECK_FALSE(r.aborted);
    CHECK(r.model.teacher_seed == cfg.teacher_seed);
    CHECK(r.model.scaler.mean == scaler.mean);
    CHECK(r.model.scaler.scale == scaler.scale);
    const auto after = TeacherHeadParams::init(r.model.teacher_seed);
    CHECK(after.w1 == before.w1);
    CHECK(after.w2 == before.w2);
    CHECK(after.b1 == before.b1);
    CHECK(after.b2 == before.b2);
    // student parameters did move
    const StudentHead<float> fresh(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
    CHECK(r.model.head.params()[0].value != fresh.params()[0].value);
}

TEST_CASE("training input validation") {
    auto cfg = tiny_train();
    CHECK_THROWS_AS(train({}, cfg), InvalidArgument);
    const auto wrong = phantom_patches(16, 4, 1);
    CHECK_THROWS_AS(train(wrong, cfg), InvalidArgument);
}
