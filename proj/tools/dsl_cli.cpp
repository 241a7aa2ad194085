// dsl: experiment driver. One subcommand per pipeline stage; stages talk
// only through files under the output directory.
//
// Exit codes: 0 ok, 1 user error (bad config, missing input, hash guard),
// 2 internal error.

#include <CLI11.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "json.hpp"

#include "dsl/config.hpp"
#include "dsl/eval.hpp"
#include "dsl/experiment.hpp"
#include "dsl/volume_io.hpp"
#include "plot.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;
using namespace dsl;

namespace {

struct HashMismatch : Error {
    using Error::Error;
};

struct TrainingAborted : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Common {
    std::string config;
    std::vector<std::string> sets;
    bool allow_mismatch = false;
};

ExperimentConfig load_config(const Common& c) {
    ExperimentConfig cfg = c.config.empty() ? ExperimentConfig() : ExperimentConfig::from_file(c.config);
    for (const auto& s : c.sets) cfg.set(s);
    if (c.allow_mismatch) cfg.set("segment.allow_hash_mismatch=true");
    cfg.validate();
    return cfg;
}

fs::path out_dir(const ExperimentConfig& cfg) {
    fs::path p = cfg.output_dir();
    fs::create_directories(p);
    return p;
}

std::string required(const ExperimentConfig& cfg, const std::string& key) {
    const auto v = cfg.get<std::string>(key);
    if (v.empty()) throw InvalidArgument(key + " is not set");
    if (!fs::exists(v)) throw InvalidArgument(key + " points to a missing file: " + v);
    return v;
}

void write_text(const fs::path& p, const std::string& text) {
    std::ofstream os(p, std::ios::binary);
    os << text;
    if (!os) throw IoError("cannot write " + p.string());
}

Model guarded_model(const ExperimentConfig& cfg) {
    Model m = load_checkpoint(required(cfg, "data.checkpoint"));
    if (m.train_hash != cfg.train_hash()) {
        if (!cfg.get<bool>("segment.allow_hash_mismatch"))
            throw HashMismatch("checkpoint was trained under config " + m.train_hash + " but the request hashes to " +
                               cfg.train_hash() + "; pass --allow-hash-mismatch to use it anyway");
        std::cerr << "warning: using checkpoint with training hash " << m.train_hash << " (request "
                  << cfg.train_hash() << ")\n";
    }
    return m;
}

int cmd_phantom(const ExperimentConfig& cfg) {
    const auto dir = out_dir(cfg);
    const auto ph = generate_phantom(cfg.phantom_spec(cfg.get<std::uint64_t>("phantom.seed")), cfg.thresholds());
    const auto h = cfg.hash();
    save_volume((dir / "phantom.nii.gz").string(), ph.volume, h);
    save_labels((dir / "phantom_labels.nii.gz").string(), ph.labels, ph.volume.spacing, ph.volume.origin, h);
    std::cout << "wrote " << (dir / "phantom.nii.gz").string() << " and phantom_labels.nii.gz\n";
    return 0;
}

int cmd_train(const ExperimentConfig& cfg) {
    const auto dir = out_dir(cfg);
    std::ofstream metrics(dir / "metrics.ndjson", std::ios::binary);
    metrics << ordered_json{{"config_hash", cfg.hash()}, {"train_hash", cfg.train_hash()}}.dump() << '\n';
    const int steps = cfg.get<int>("train.steps");
    auto r = train_from_config(cfg, [&](const TrainRecord& rec) {
        write_metrics_line(metrics, rec);
        if (rec.step % 50 == 0 || rec.step == steps)
            std::cerr << "step " << rec.step << " l_diff " << rec.l_diff << " l_nce " << rec.l_nce << " lambda "
                      << rec.lambda << '\n';
    });
    metrics.close();
    save_checkpoint((dir / "model.ckpt").string(), r.model);
    if (r.aborted) throw TrainingAborted("training aborted: " + r.message + " (last finite state saved)");
    std::cout << "wrote " << (dir / "model.ckpt").string() << '\n';
    return 0;
}

int cmd_segment(const ExperimentConfig& cfg) {
    const auto dir = out_dir(cfg);
    const CtVolume v = load_volume(required(cfg, "data.volume"));
    std::optional<Model> m;
    if (cfg.get<std::string>("segment.baseline") != "kmeans-radiomics") m = guarded_model(cfg);
    const auto res = segment_with_config(v, m ? &*m : nullptr, cfg);
    const auto h = cfg.hash();
    save_labels((dir / "segmentation.nii.gz").string(), res.labels, v.spacing, v.origin, h);
    for (auto l : kAllLabels)
        save_float_volume((dir / ("softmask_" + std::string(label_name(l)) + ".nii.gz")).string(),
                          res.soft_masks[label_index(l)], v.spacing, v.origin, h);
    ordered_json j;
    j["config_hash"] = h;
    j["checkpoint_train_hash"] = m ? m->train_hash : "";
    j["baseline"] = cfg.get<std::string>("segment.baseline");
    j["seeds"] = {{"gmm", cfg.get<std::uint64_t>("gmm.seed")}, {"noise", cfg.get<std::uint64_t>("features.noise_seed")}};
    j["cluster_to_label"] = ordered_json::array();
    for (auto l : res.cluster_to_label) j["cluster_to_label"].push_back(std::string(label_name(l)));
    j["cluster_mean_hu"] = ordered_json::array();
    for (double hu : res.cluster_mean_hu) j["cluster_mean_hu"].push_back(std::isfinite(hu) ? ordered_json(hu) : ordered_json());
    j["warnings"] = res.warnings;
    write_text(dir / "segmentation.json", j.dump(2) + "\n");
    for (const auto& w : res.warnings) std::cerr << "warning: " << w << '\n';
    std::cout << "wrote " << (dir / "segmentation.nii.gz").string() << '\n';
    return 0;
}

int cmd_generate(const ExperimentConfig& cfg) {
    const auto dir = out_dir(cfg);
    const Model m = guarded_model(cfg);
    const auto s = cfg.get<std::vector<int>>("generate.shape");
    if (s.size() != 3) throw InvalidArgument("generate.shape needs 3 entries");
    const auto sp = cfg.get<std::vector<double>>("phantom.spacing");
    CtVolume g = dpm_generate(m, Dims{s[0], s[1], s[2]}, cfg.get<int>("generate.steps"),
                              cfg.get<std::uint64_t>("generate.seed"), Vec3{sp[0], sp[1], sp[2]});
    save_volume((dir / "generated.nii.gz").string(), g, cfg.hash());
    std::cout << "wrote " << (dir / "generated.nii.gz").string() << '\n';
    return 0;
}

// Center crop of `v` to `d` (for comparing a reference against a smaller sample).
CtVolume center_crop(const CtVolume& v, Dims d) {
    const Dims s = v.dims();
    if (d.z > s.z || d.y > s.y || d.x > s.x) throw InvalidArgument("generated volume is larger than the reference");
    CtVolume out;
    out.spacing = v.spacing;
    out.hu = Grid<std::int16_t>(d);
    const int oz = (s.z - d.z) / 2, oy = (s.y - d.y) / 2, ox = (s.x - d.x) / 2;
    for (int z = 0; z < d.z; ++z)
        for (int y = 0; y < d.y; ++y)
            for (int x = 0; x < d.x; ++x) out.hu(z, y, x) = v.hu(z + oz, y + oy, x + ox);
    return out;
}

Eigen::MatrixXd feature_rows(const CtVolume& v, const Model& m, const ExperimentConfig& cfg) {
    const int side = m.unet.patch_side;
    const auto d = extract_corpus(v, m, std::max(1, side / 2), cfg.segment_options().features);
    return descriptor_matrix(d);
}

int cmd_evaluate(const ExperimentConfig& cfg) {
    const auto dir = out_dir(cfg);
    MetricReport rep;
    const bool have_seg = !cfg.get<std::string>("data.prediction").empty();
    const bool have_gen = !cfg.get<std::string>("data.generated").empty();
    if (!have_seg && !have_gen) throw InvalidArgument("set data.prediction (with data.labels) or data.generated");
    if (have_seg) {
        Vec3 spacing;
        const auto pred = load_labels(required(cfg, "data.prediction"), &spacing);
        const auto gt = load_labels(required(cfg, "data.labels"));
        const auto slices = cfg.get<std::vector<int>>("data.slices");
        rep = slices.empty() ? evaluate_segmentation(pred, gt, spacing) : evaluate_slices(pred, gt, spacing, slices);
    }
    if (have_gen) {
        const CtVolume gen = load_volume(required(cfg, "data.generated"));
        const CtVolume ref = load_volume(required(cfg, "data.volume"));
        const CtVolume crop = center_crop(ref, gen.dims());
        const auto w = cfg.window();
        rep.data_range = w.hi - w.lo;
        rep.ssim = ssim(crop, gen, rep.data_range);
        rep.psnr = psnr(crop, gen, rep.data_range);
        if (!cfg.get<std::string>("data.checkpoint").empty()) {
            const Model m = guarded_model(cfg);
            rep.frechet = frechet_proxy(feature_rows(ref, m, cfg), feature_rows(gen, m, cfg));
        }
    }
    rep.config_hash = cfg.hash();
    write_text(dir / "metrics.json", rep.to_json() + "\n");
    if (have_seg) {
        std::ofstream csv(dir / "metrics.csv", std::ios::binary);
        csv << "# config_hash=" << rep.config_hash << '\n';
        write_metric_csv(csv, {{"pipeline", rep}});
    }
    std::cout << rep.to_json() << '\n';
    return 0;
}

int cmd_ablate(const ExperimentConfig& cfg) {
    const auto dir = out_dir(cfg);
    const auto res = run_ablation(cfg, (dir / "ablation_work").string(),
                                  [](const std::string& s) { std::cerr << s << std::endl; });
    std::ostringstream md;
    md << "<!-- config_hash " << res.config_hash << " -->\n";
    write_ablation_table(md, res);
    write_text(dir / "ablation.md", md.str());
    write_text(dir / "ablation.json", res.to_json() + "\n");
    std::cout << md.str();
    std::cerr << "ablation took " << res.seconds << " s\n";
    return 0;
}

int cmd_plot(const ExperimentConfig& cfg) {
    const auto dir = out_dir(cfg);
    const auto h = cfg.hash();
    int written = 0;
    if (fs::exists(dir / "metrics.ndjson")) {
        plot::write_png((dir / "loss.png").string(), plot::loss_curves(plot::read_metrics((dir / "metrics.ndjson").string())), h);
        ++written;
    }
    if (!cfg.get<std::string>("data.volume").empty()) {
        const CtVolume v = load_volume(required(cfg, "data.volume"));
        std::vector<LabelVolume> labs;
        for (const char* k : {"data.prediction", "data.labels"})
            if (!cfg.get<std::string>(k).empty()) labs.push_back(load_labels(required(cfg, k)));
        std::vector<const LabelVolume*> ptrs;
        for (const auto& l : labs) {
            if (l.dims() != v.dims()) throw InvalidArgument("label volume shape differs from data.volume");
            ptrs.push_back(&l);
        }
        plot::write_png((dir / "slices.png").string(), plot::slice_grid(v, cfg.window(), ptrs), h);
        ++written;
    }
    if (written == 0) throw InvalidArgument("nothing to plot: no metrics.ndjson in the output dir and no data.volume");
    std::cout << "wrote " << written << " figure(s) to " << dir.string() << '\n';
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Distilled diffusion features for unsupervised lung CT segmentation"};
    app.require_subcommand(1);
    Common common;
    using Cmd = int (*)(const ExperimentConfig&);
    const std::vector<std::tuple<std::string, std::string, Cmd>> cmds{
        {"phantom", "Write the benchmark phantom and its labels", cmd_phantom},
        {"train", "Train the denoiser with radiomic distillation", cmd_train},
        {"segment", "Segment data.volume with data.checkpoint", cmd_segment},
        {"generate", "Sample a volume with DPM-Solver", cmd_generate},
        {"evaluate", "Score a segmentation and/or a generated volume", cmd_evaluate},
        {"ablate", "Run the six-row ablation on phantoms", cmd_ablate},
        {"plot", "Render loss curves and slice overlays to PNG", cmd_plot},
    };
    Cmd chosen = nullptr;
    for (const auto& [name, help, fn] : cmds) {
        auto* sub = app.add_subcommand(name, help);
        sub->add_option("--config", common.config, "JSON config layered over the defaults");
        sub->add_option("--set", common.sets, "Dotted-key override, e.g. train.steps=100")->take_all();
        sub->add_flag("--allow-hash-mismatch", common.allow_mismatch, "Use a checkpoint trained under another config");
        sub->callback([&chosen, f = fn] { chosen = f; });
    }
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    }
    try {
        return chosen(load_config(common));
    } catch (const TrainingAborted& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << '\n';
        return 2;
    }
}
