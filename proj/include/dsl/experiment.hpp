#pragma once

// Config-driven training, segmentation baselines and the ablation runner.

#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "dsl/config.hpp"
#include "dsl/distill.hpp"
#include "dsl/eval.hpp"
#include "dsl/segment.hpp"

namespace dsl {

// Training patches. Configured volumes when data.train_volumes is set,
// otherwise train.phantoms phantoms seeded phantom_seed_offset +
// train.seed * phantoms + k, which keeps them apart from evaluation phantoms.
std::vector<Patch> training_corpus(const ExperimentConfig& cfg);

// Trains with the config's settings and stamps both hashes into the model.
TrainResult train_from_config(const ExperimentConfig& cfg,
                              const std::function<void(const TrainRecord&)>& on_step = {});

// Raw 34-d radiomic vectors on the patch grid.
std::vector<PatchDescriptor> radiomic_descriptors(const CtVolume& v, int side, int stride);

// Full pipeline honouring segment.baseline: "none", "kmeans-radiomics"
// (no model needed) or "diffusion-features" (GMM on the pooled bottleneck
// part of the descriptor only).
SegmentationResult segment_with_config(const CtVolume& v, const Model* m, const ExperimentConfig& cfg);

struct AblationRow {
    std::string name;
    bool hu_preserved = false;
    bool distillation = false;
    bool warmup = false;
    bool multi_timestep = false;
    bool fusion = false;
};

// The six rows in their fixed order.
const std::vector<AblationRow>& ablation_rows();

struct AblationResult {
    std::vector<std::uint64_t> seeds;
    std::vector<std::vector<MetricReport>> reports;  // [row][seed]
    double seconds = 0.0;
    std::string config_hash;

    double mean_dsc(std::size_t row) const;
    double mean_hd95(std::size_t row) const;
    std::string to_json() const;
};

// Trains four models per seed (8-bit, HU, distillation without and with
// warmup) and scores all rows on the benchmark phantom of that seed.
// Checkpoints are cached in `work_dir` and reused when their training hash
// matches.
AblationResult run_ablation(const ExperimentConfig& cfg, const std::string& work_dir,
                            const std::function<void(const std::string&)>& log = {});

// Markdown table: component checkmarks, mean DSC, mean HD95.
void write_ablation_table(std::ostream& os, const AblationResult& r);

}  // namespace dsl
