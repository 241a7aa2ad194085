#include "dsl/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <iomanip>
#include <sstream>

#include "json.hpp"

#include "dsl/radiomics.hpp"
#include "dsl/volume_io.hpp"

namespace dsl {

namespace fs = std::filesystem;
using nlohmann::json;

std::vector<Patch> training_corpus(const ExperimentConfig& cfg) {
    const int side = cfg.get<int>("model.patch_side");
    const int per = cfg.get<int>("train.patches_per_volume");
    const auto seed = cfg.get<std::uint64_t>("train.seed");
    if (per < 1) throw InvalidArgument("train.patches_per_volume must be >= 1");
    std::vector<Patch> out;
    const auto paths = cfg.get<std::vector<std::string>>("data.train_volumes");
    if (!paths.empty()) {
        for (std::size_t k = 0; k < paths.size(); ++k) {
            const auto p = sample_patches(load_volume(paths[k]), side, per, seed * 7919 + k);
            out.insert(out.end(), p.begin(), p.end());
        }
        return out;
    }
    const int n = cfg.get<int>("train.phantoms");
    if (n < 1) throw InvalidArgument("train.phantoms must be >= 1");
    const auto offset = cfg.get<std::uint64_t>("train.phantom_seed_offset");
    for (int k = 0; k < n; ++k) {
        const auto ph = generate_phantom(cfg.phantom_spec(offset + seed * n + k), cfg.thresholds());
        const auto p = sample_patches(ph.volume, side, per, seed * 7919 + k);
        out.insert(out.end(), p.begin(), p.end());
    }
    return out;
}

TrainResult train_from_config(const ExperimentConfig& cfg, const std::function<void(const TrainRecord&)>& on_step) {
    cfg.validate();
    const auto corpus = training_corpus(cfg);
    TrainResult r = train(corpus, cfg.train_config(), on_step);
    r.model.config_hash = cfg.hash();
    r.model.train_hash = cfg.train_hash();
    return r;
}

std::vector<PatchDescriptor> radiomic_descriptors(const CtVolume& v, int side, int stride) {
    std::vector<PatchDescriptor> out;
    for (const auto& o : grid_origins(v.dims(), side, stride)) {
        const auto r = radiomic_vector(extract_patch(v, o, side));
        PatchDescriptor d;
        d.origin = o;
        d.values.assign(r.begin(), r.end());
        out.push_back(std::move(d));
    }
    if (out.empty()) throw InvalidArgument("volume is smaller than one patch");
    return out;
}

SegmentationResult segment_with_config(const CtVolume& v, const Model* m, const ExperimentConfig& cfg) {
    SegmentOptions opt = cfg.segment_options();
    const auto baseline = cfg.get<std::string>("segment.baseline");
    if (baseline == "kmeans-radiomics") {
        const int side = m != nullptr ? m->unet.patch_side : cfg.get<int>("model.patch_side");
        const int stride = opt.stride > 0 ? opt.stride : std::max(1, side / 2);
        std::vector<PatchDescriptor> d;
        try {
            d = radiomic_descriptors(v, side, stride);
        } catch (const Error& e) {
            throw StageError("radiomic_descriptors", e.what());
        }
        opt.clusterer = Clusterer::KMeans;
        return segment_descriptors(v, std::move(d), side, cfg.window(), opt);
    }
    if (m == nullptr) throw InvalidArgument("a checkpoint is required for baseline '" + baseline + "'");
    if (baseline == "none") return segment_volume(v, *m, opt);
    if (baseline == "diffusion-features") {
        const int side = m->unet.patch_side;
        const int stride = opt.stride > 0 ? opt.stride : std::max(1, side / 2);
        std::vector<PatchDescriptor> d;
        try {
            d = extract_corpus(v, *m, stride, opt.features);
        } catch (const Error& e) {
            throw StageError("extract_corpus", e.what());
        }
        for (auto& p : d) p.values.erase(p.values.begin(), p.values.begin() + kEmbeddingDim);
        return segment_descriptors(v, std::move(d), side, m->window, opt);
    }
    throw InvalidArgument("segment.baseline must be none, kmeans-radiomics or diffusion-features, got '" + baseline + "'");
}

const std::vector<AblationRow>& ablation_rows() {
    static const std::vector<AblationRow> rows{
        {"Baseline (8-bit, no distil.)", false, false, false, false, false},
        {"+ HU preservation", true, false, false, false, false},
        {"+ Distillation (no warmup)", true, true, false, false, false},
        {"+ Warmup schedule", true, true, true, false, false},
        {"+ Multi-timestep aggr.", true, true, true, true, false},
        {"+ Sobel-Diffusion Fusion", true, true, true, true, true},
    };
    return rows;
}

double AblationResult::mean_dsc(std::size_t row) const {
    double s = 0.0;
    for (const auto& r : reports.at(row)) s += r.mean_dsc;
    return reports[row].empty() ? NAN : s / static_cast<double>(reports[row].size());
}

double AblationResult::mean_hd95(std::size_t row) const {
    double s = 0.0;
    int n = 0;
    for (const auto& r : reports.at(row))
        if (std::isfinite(r.mean_hd95)) s += r.mean_hd95, ++n;
    return n == 0 ? NAN : s / n;
}

namespace {

json finite_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

// Training variants shared by the rows.
enum Variant { kEightBit, kHu, kNoWarmup, kWarmup };

ExperimentConfig variant_config(const ExperimentConfig& base, Variant v, std::uint64_t seed) {
    ExperimentConfig c = base;
    const int steps = base.get<int>("train.steps");
    c.set("train.seed=" + std::to_string(seed));
    c.set(std::string("eight_bit=") + (v == kEightBit ? "true" : "false"));
    if (v == kEightBit || v == kHu) {
        c.set("distill.lambda_max=0");
    } else if (v == kNoWarmup) {
        // steps count from 1, so a one-step ramp means full weight from the start
        c.set("distill.T_w=0");
        c.set("distill.T_ramp=1");
    } else {
        const auto tw = static_cast<int>(std::lround(base.get<double>("ablation.warmup_fraction") * steps));
        const auto tr = static_cast<int>(std::lround(base.get<double>("ablation.ramp_fraction") * steps));
        c.set("distill.T_w=" + std::to_string(tw));
        c.set("distill.T_ramp=" + std::to_string(std::max(1, tr)));
    }
    return c;
}

Model trained_model(const ExperimentConfig& c, const fs::path& path, const std::function<void(const std::string&)>& log) {
    if (fs::exists(path)) {
        try {
            Model m = load_checkpoint(path.string());
            if (m.train_hash == c.train_hash()) {
                if (log) log("reusing " + path.filename().string());
                return m;
            }
        } catch (const Error&) {
        }
    }
    const auto t0 = std::chrono::steady_clock::now();
    TrainResult r = train_from_config(c);
    if (r.aborted) throw StageError("train", r.message);
    save_checkpoint(path.string(), r.model);
    if (log) {
        std::ostringstream os;
        os << "trained " << path.filename().string() << " in " << std::fixed << std::setprecision(1)
           << std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() << " s";
        log(os.str());
    }
    return std::move(r.model);
}

}  // namespace

AblationResult run_ablation(const ExperimentConfig& cfg, const std::string& work_dir,
                            const std::function<void(const std::string&)>& log) {
    cfg.validate();
    const auto t0 = std::chrono::steady_clock::now();
    fs::create_directories(work_dir);
    AblationResult res;
    res.seeds = cfg.get<std::vector<std::uint64_t>>("ablation.seeds");
    if (res.seeds.empty()) throw InvalidArgument("ablation.seeds is empty");
    res.config_hash = cfg.hash();
    const auto& rows = ablation_rows();
    res.reports.assign(rows.size(), {});
    const int single_t = cfg.get<int>("ablation.single_timestep");
    const char* tags[] = {"8bit", "hu", "nowarmup", "warmup"};

    for (const auto seed : res.seeds) {
        std::vector<Model> models;
        for (int v = kEightBit; v <= kWarmup; ++v) {
            const auto c = variant_config(cfg, static_cast<Variant>(v), seed);
            const fs::path ck = fs::path(work_dir) / ("seed" + std::to_string(seed) + "_" + tags[v] + ".ckpt");
            models.push_back(trained_model(c, ck, log));
        }
        const auto ph = generate_phantom(cfg.phantom_spec(seed), cfg.thresholds());
        const Vec3 spacing = ph.volume.spacing;
        const int side = models[0].unet.patch_side;

        SegmentOptions base = cfg.segment_options();
        base.fusion = false;
        base.hu_filter = false;
        const int stride = base.stride > 0 ? base.stride : std::max(1, side / 2);

        auto record = [&](std::size_t row, const SegmentationResult& s) {
            res.reports[row].push_back(evaluate_segmentation(s.labels, ph.labels, spacing));
            res.reports[row].back().config_hash = res.config_hash;
            if (log) {
                std::ostringstream os;
                os << "seed " << seed << " | " << rows[row].name << " | mean DSC " << std::fixed << std::setprecision(4)
                   << res.reports[row].back().mean_dsc;
                log(os.str());
            }
        };

        SegmentOptions single = base;
        single.features.timesteps = {single_t};
        for (std::size_t row = 0; row < 4; ++row) record(row, segment_volume(ph.volume, models[row], single));

        // rows 5 and 6 share descriptors and differ only in post-processing
        const Model& full = models[kWarmup];
        std::vector<PatchDescriptor> d;
        try {
            d = extract_corpus(ph.volume, full, stride, base.features);
        } catch (const Error& e) {
            throw StageError("extract_corpus", e.what());
        }
        record(4, segment_descriptors(ph.volume, d, side, full.window, base));
        SegmentOptions fused = cfg.segment_options();
        fused.fusion = true;
        fused.hu_filter = true;
        record(5, segment_descriptors(ph.volume, std::move(d), side, full.window, fused));
    }
    res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return res;
}

std::string AblationResult::to_json() const {
    json j;
    j["config_hash"] = config_hash;
    j["seeds"] = seeds;
    j["rows"] = json::array();
    const auto& rows = ablation_rows();
    for (std::size_t i = 0; i < rows.size() && i < reports.size(); ++i) {
        json r;
        r["name"] = rows[i].name;
        r["components"] = {{"hu_preserved", rows[i].hu_preserved},
                           {"distillation", rows[i].distillation},
                           {"warmup", rows[i].warmup},
                           {"multi_timestep", rows[i].multi_timestep},
                           {"fusion", rows[i].fusion}};
        r["mean_dsc"] = finite_or_null(mean_dsc(i));
        r["mean_hd95"] = finite_or_null(mean_hd95(i));
        r["per_seed"] = json::array();
        for (const auto& m : reports[i]) r["per_seed"].push_back(json::parse(m.to_json()));
        j["rows"].push_back(r);
    }
    return j.dump(2);
}

void write_ablation_table(std::ostream& os, const AblationResult& r) {
    auto mark = [](bool b) { return b ? "✓" : "×"; };
    os << "| Row | HU | Distill | Warmup | Multi-t | Fusion | DSC | HD95 (mm) |\n";
    os << "|---|---|---|---|---|---|---|---|\n";
    const auto& rows = ablation_rows();
    for (std::size_t i = 0; i < rows.size() && i < r.reports.size(); ++i) {
        const auto& a = rows[i];
        os << "| " << a.name << " | " << mark(a.hu_preserved) << " | " << mark(a.distillation) << " | "
           << mark(a.warmup) << " | " << mark(a.multi_timestep) << " | " << mark(a.fusion) << " | " << std::fixed
           << std::setprecision(4) << r.mean_dsc(i) << " | " << std::setprecision(2) << r.mean_hd95(i) << " |\n";
    }
}

}  // namespace dsl
