#include "dsl/distill.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <random>

#include "json.hpp"

namespace dsl {

void DistillConfig::validate() const {
    if (!(kappa > 0.0)) throw InvalidArgument("distill.kappa must be > 0");
    if (ramp_steps < 1) throw InvalidArgument("distill.T_ramp must be >= 1");
    if (warmup_steps < 0) throw InvalidArgument("distill.T_w must be >= 0");
    if (!(lambda_max >= 0.0)) throw InvalidArgument("distill.lambda_max must be >= 0");
    if (!(tau > -1.0 && tau < 1.0)) throw InvalidArgument("distill.tau must lie in (-1, 1)");
}

Eigen::MatrixXd radiomic_similarity(const Eigen::MatrixXd& Z) {
    for (Eigen::Index i = 0; i < Z.rows(); ++i)
        if (std::abs(Z.row(i).norm() - 1.0) > 1e-4)
            throw InvalidArgument("radiomic_similarity: embedding " + std::to_string(i) + " is not unit-norm");
    Eigen::MatrixXd S = Z * Z.transpose();
    S = 0.5 * (S + S.transpose());
    S.diagonal().setOnes();
    return S;
}

InfoNceResult info_nce(const Eigen::MatrixXd& Z, const Eigen::MatrixXd& S, const DistillConfig& cfg,
                       Eigen::MatrixXd* grad) {
    const Eigen::Index B = Z.rows();
    if (B < 2) throw InvalidArgument("info_nce needs a batch of at least 2");
    if (S.rows() != B || S.cols() != B) throw InvalidArgument("info_nce: similarity matrix does not match batch");
    if (!(cfg.kappa > 0.0)) throw InvalidArgument("info_nce: kappa must be > 0");
    for (Eigen::Index i = 0; i < B; ++i)
        if (std::abs(Z.row(i).norm() - 1.0) > 1e-4)
            throw InvalidArgument("info_nce: student embedding " + std::to_string(i) + " is not unit-norm");

    const Eigen::MatrixXd logits = (Z * Z.transpose()) / cfg.kappa;
    InfoNceResult res;
    if (grad != nullptr) grad->setZero(B, Z.cols());
    Eigen::MatrixXd dlogits = Eigen::MatrixXd::Zero(B, B);
    long positives = 0;
    double total = 0.0;
    for (Eigen::Index i = 0; i < B; ++i) {
        double mx_all = -INFINITY, mx_pos = -INFINITY;
        bool has_pos = false;
        for (Eigen::Index k = 0; k < B; ++k) {
            if (k == i) continue;
            mx_all = std::max(mx_all, logits(i, k));
            if (S(i, k) > cfg.tau) {
                has_pos = true;
                ++positives;
                mx_pos = std::max(mx_pos, logits(i, k));
            }
        }
        if (!has_pos) continue;
        double sum_all = 0.0, sum_pos = 0.0;
        for (Eigen::Index k = 0; k < B; ++k) {
            if (k == i) continue;
            sum_all += std::exp(logits(i, k) - mx_all);
            if (S(i, k) > cfg.tau) sum_pos += std::exp(logits(i, k) - mx_pos);
        }
        const double lse_all = mx_all + std::log(sum_all), lse_pos = mx_pos + std::log(sum_pos);
        total += lse_all - lse_pos;
        ++res.anchors;
        for (Eigen::Index k = 0; k < B; ++k) {
            if (k == i) continue;
            double d = std::exp(logits(i, k) - lse_all);
            if (S(i, k) > cfg.tau) d -= std::exp(logits(i, k) - lse_pos);
            dlogits(i, k) = d;
        }
    }
    res.pos_frac = static_cast<double>(positives) / static_cast<double>(B * (B - 1));
    if (res.anchors == 0) {
        res.no_signal = true;
        return res;
    }
    // each anchor term is -log of a probability; clamp away round-off below zero
    res.loss = std::max(0.0, total / res.anchors);
    if (grad != nullptr) {
        dlogits /= static_cast<double>(res.anchors);
        // logits = Z Z^T / kappa
        *grad = (dlogits + dlogits.transpose()) * Z / cfg.kappa;
    }
    return res;
}

double warmup_lambda(long step, const DistillConfig& cfg) {
    if (step < 0) throw InvalidArgument("warmup_lambda: step must be >= 0");
    const double r = static_cast<double>(step - cfg.warmup_steps) / static_cast<double>(cfg.ramp_steps);
    return cfg.lambda_max * std::clamp(r, 0.0, 1.0);
}

double total_loss(double l_diff, double l_nce, long step, const DistillConfig& cfg) {
    if (!std::isfinite(l_diff) || !std::isfinite(l_nce)) throw InvalidArgument("total_loss: non-finite loss term");
    return l_diff + warmup_lambda(step, cfg) * l_nce;
}

void write_metrics_line(std::ostream& os, const TrainRecord& r) {
    nlohmann::ordered_json j;
    j["step"] = r.step;
    j["l_diff"] = r.l_diff;
    j["l_nce"] = r.l_nce;
    j["lambda"] = r.lambda;
    j["pos_frac"] = r.pos_frac;
    os << j.dump() << '\n';
}

TrainResult train(std::span<const Patch> corpus, const TrainConfig& cfg,
                  const std::function<void(const TrainRecord&)>& on_step) {
    if (corpus.empty()) throw InvalidArgument("training corpus is empty");
    cfg.unet.validate();
    cfg.distill.validate();
    if (cfg.batch < 2) throw InvalidArgument("training batch must be >= 2");
    if (cfg.steps < 0) throw InvalidArgument("training steps must be >= 0");
    const int S = cfg.unet.patch_side;
    for (const auto& p : corpus)
        if (p.side != S) throw InvalidArgument("corpus patch side differs from the configured patch side");

    TrainResult res{Model(cfg.unet, make_schedule(cfg.schedule_steps, cfg.beta_start, cfg.beta_end), cfg.seed), {},
                    false, {}};
    Model& m = res.model;
    m.window = cfg.window;
    m.eight_bit = cfg.eight_bit;
    m.teacher_seed = cfg.teacher_seed;

    // teacher side is fixed for the whole run: compute it once
    const std::size_t N = corpus.size();
    std::vector<RadiomicVector> radiomics(N);
    for (std::size_t i = 0; i < N; ++i) radiomics[i] = radiomic_vector(corpus[i]);
    m.scaler = RadiomicScaler::fit(radiomics);
    const TeacherHeadParams teacher = TeacherHeadParams::init(cfg.teacher_seed);
    Eigen::MatrixXd teacher_z(static_cast<Eigen::Index>(N), kEmbeddingDim);
    for (std::size_t i = 0; i < N; ++i)
        teacher_z.row(static_cast<Eigen::Index>(i)) = teacher_project(m.scaler.apply(radiomics[i]), teacher).transpose();
    std::vector<std::vector<float>> inputs(N);
    for (std::size_t i = 0; i < N; ++i) inputs[i] = m.prepare(corpus[i]);

    Adam<float> opt_net(cfg.lr), opt_head(cfg.lr);
    std::mt19937_64 rng(cfg.seed);
    std::normal_distribution<float> gauss(0.0f, 1.0f);
    std::uniform_int_distribution<int> pick_t(0, cfg.schedule_steps - 1);
    const int B = cfg.batch;
    const std::size_t vox = static_cast<std::size_t>(S) * S * S;
    std::vector<std::size_t> order(N);
    std::iota(order.begin(), order.end(), 0);

    for (long step = 1; step <= cfg.steps; ++step) {
        std::vector<std::size_t> idx(B);
        if (N >= static_cast<std::size_t>(B)) {
            // partial Fisher-Yates: distinct patches within a batch
            for (int i = 0; i < B; ++i) {
                std::uniform_int_distribution<std::size_t> u(static_cast<std::size_t>(i), N - 1);
                std::swap(order[static_cast<std::size_t>(i)], order[u(rng)]);
                idx[i] = order[static_cast<std::size_t>(i)];
            }
        } else {
            std::uniform_int_distribution<std::size_t> u(0, N - 1);
            for (auto& k : idx) k = u(rng);
        }
        nn::Tensor<float> xt(B, 1, S, S, S), eps(B, 1, S, S, S);
        std::vector<double> ts(B);
        for (int i = 0; i < B; ++i) {
            const int t = pick_t(rng);
            ts[i] = t;
            const double a = std::sqrt(m.schedule.alpha_bars[t]), s = std::sqrt(1.0 - m.schedule.alpha_bars[t]);
            float* e = eps.sample(i);
            float* x = xt.sample(i);
            const auto& x0 = inputs[idx[i]];
            for (std::size_t k = 0; k < vox; ++k) {
                e[k] = gauss(rng);
                x[k] = static_cast<float>(a * x0[k] + s * e[k]);
            }
        }

        DenoiserCache<float> cache;
        auto out = m.denoiser.forward(xt, ts, &cache);
        std::vector<float> d_eps_v;
        const double l_diff = diffusion_loss<float>(out.eps.v, eps.v, &d_eps_v);

        const auto pooled = pool_bottleneck(out.bottleneck);
        StudentCache<float> scache;
        const auto z = m.head.forward(pooled, B, &scache);
        Eigen::MatrixXd Z(B, kEmbeddingDim), T(B, kEmbeddingDim);
        for (int i = 0; i < B; ++i) {
            for (int k = 0; k < kEmbeddingDim; ++k) Z(i, k) = z[static_cast<std::size_t>(i) * kEmbeddingDim + k];
            Z.row(i).normalize();  // float rounding only
            T.row(i) = teacher_z.row(static_cast<Eigen::Index>(idx[i]));
        }
        Eigen::MatrixXd dZ;
        const auto nce = info_nce(Z, radiomic_similarity(T), cfg.distill, &dZ);
        const double lambda = warmup_lambda(step, cfg.distill);
        const double total = l_diff + lambda * nce.loss;

        TrainRecord rec{step, l_diff, nce.loss, lambda, nce.pos_frac};
        if (!std::isfinite(total)) {
            res.aborted = true;
            res.message = "non-finite loss at step " + std::to_string(step);
            return res;
        }

        m.denoiser.params().zero_grad();
        m.head.params().zero_grad();
        nn::Tensor<float> d_eps(B, 1, S, S, S);
        d_eps.v = std::move(d_eps_v);
        if (lambda > 0.0 && !nce.no_signal) {
            std::vector<float> dz(static_cast<std::size_t>(B) * kEmbeddingDim);
            for (int i = 0; i < B; ++i)
                for (int k = 0; k < kEmbeddingDim; ++k)
                    dz[static_cast<std::size_t>(i) * kEmbeddingDim + k] = static_cast<float>(lambda * dZ(i, k));
            const auto dpooled = m.head.backward(scache, dz);
            const auto& f = out.bottleneck;
            const auto d_f = pool_bottleneck_backward(dpooled, f.n, f.c, f.d, f.h, f.w);
            m.denoiser.backward(cache, d_eps, &d_f);
        } else {
            m.denoiser.backward(cache, d_eps, nullptr);
        }
        opt_net.step(m.denoiser.params());
        opt_head.step(m.head.params());

        res.log.push_back(rec);
        if (on_step) on_step(rec);
    }
    return res;
}

}  // namespace dsl
