#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "dsl/ct_data.hpp"
#include "dsl/model.hpp"

namespace dsl {

struct DistillConfig {
    double tau = 0.5;
    double kappa = 0.07;
    int warmup_steps = 5000;  // T_w
    int ramp_steps = 5000;    // T_ramp
    double lambda_max = 0.5;

    void validate() const;
};

// Rows of Z are unit embeddings; returns the B x B cosine matrix with an exact unit diagonal.
Eigen::MatrixXd radiomic_similarity(const Eigen::MatrixXd& Z);

struct InfoNceResult {
    double loss = 0.0;
    int anchors = 0;         // anchors with at least one positive
    bool no_signal = false;  // no anchor had a positive
    double pos_frac = 0.0;   // positive off-diagonal pairs / B(B-1)
};

// Contrastive loss over student rows Z (B x d) with positives 1[S_ij > tau].
// When `grad` is given it receives d loss / d Z.
InfoNceResult info_nce(const Eigen::MatrixXd& Z, const Eigen::MatrixXd& S, const DistillConfig& cfg,
                       Eigen::MatrixXd* grad = nullptr);

double warmup_lambda(long step, const DistillConfig& cfg);
double total_loss(double l_diff, double l_nce, long step, const DistillConfig& cfg);

struct TrainConfig {
    UNetConfig unet;
    int schedule_steps = 1000;
    double beta_start = 1e-4;
    double beta_end = 0.02;
    DistillConfig distill;
    HuWindow window;
    bool eight_bit = false;
    int batch = 16;
    int steps = 300;
    double lr = 1e-4;
    std::uint64_t seed = 0;
    std::uint64_t teacher_seed = 17;
};

struct TrainRecord {
    long step = 0;
    double l_diff = 0.0;
    double l_nce = 0.0;
    double lambda = 0.0;
    double pos_frac = 0.0;
};

struct TrainResult {
    Model model;
    std::vector<TrainRecord> log;
    bool aborted = false;  // non-finite loss; `model` holds the last finite state
    std::string message;
};

// One NDJSON line per record.
void write_metrics_line(std::ostream& os, const TrainRecord& r);

// Trains the denoiser and student head on the given patch corpus.
// `on_step` (optional) sees every record as it is produced.
TrainResult train(std::span<const Patch> corpus, const TrainConfig& cfg,
                  const std::function<void(const TrainRecord&)>& on_step = {});

}  // namespace dsl
