#include "dsl/config.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace dsl {

namespace fs = std::filesystem;
using nlohmann::json;

std::string fnv1a_hex(const std::string& text) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    std::ostringstream os;
    os << std::hex;
    os.width(16);
    os.fill('0');
    os << h;
    return os.str();
}

json ExperimentConfig::defaults() {
    json thr = json::object();
    const HuThresholds d;
    for (auto l : kAllLabels) thr[std::string(label_name(l))] = {d.interval(l).lo, d.interval(l).hi};
    return json{
        {"data",
         {{"volume", ""},
          {"labels", ""},
          {"prediction", ""},
          {"generated", ""},
          {"checkpoint", ""},
          {"train_volumes", json::array()},
          {"slices", json::array()}}},
        {"phantom", {{"seed", 1}, {"shape", {64, 64, 64}}, {"spacing", {0.6, 0.6, 0.6}}}},
        {"window", {-1024.0, 600.0}},
        {"eight_bit", false},
        {"model",
         {{"patch_side", 32},
          {"widths", {32, 64, 128}},
          {"bottleneck_channels", 256},
          {"max_groups", 8},
          {"time_embed_dim", 32},
          {"time_hidden", 64}}},
        {"schedule", {{"T", 1000}, {"beta_start", 1e-4}, {"beta_end", 0.02}}},
        {"distill", {{"tau", 0.5}, {"kappa", 0.07}, {"T_w", 5000}, {"T_ramp", 5000}, {"lambda_max", 0.5}}},
        {"train",
         {{"steps", 12000},
          {"batch", 16},
          {"lr", 1e-4},
          {"seed", 0},
          {"teacher_seed", 17},
          {"phantoms", 2},
          {"phantom_seed_offset", 1000},
          {"patches_per_volume", 256}}},
        {"features", {{"timesteps", {50, 100, 150, 200}}, {"mode", "forward"}, {"noise_seed", 0}, {"stride", 0}, {"batch", 32}}},
        {"gmm", {{"k", 5}, {"seed", 0}, {"max_iter", 200}, {"tol", 1e-6}, {"reg", 1e-6}, {"reg_mode", "floor"}}},
        {"thresholds", thr},
        {"fusion", {{"enabled", true}, {"alpha", 2.0}, {"sigma", 1.5}}},
        {"hu_filter", {{"enabled", true}, {"margin", 50.0}}},
        {"segment", {{"baseline", "none"}, {"allow_hash_mismatch", false}}},
        {"generate", {{"steps", 250}, {"seed", 0}, {"shape", {32, 32, 32}}}},
        {"ablation", {{"seeds", {1, 2, 3}}, {"warmup_fraction", 0.3}, {"ramp_fraction", 0.3}, {"single_timestep", 100}}},
        {"output_dir", "out"},
    };
}

ExperimentConfig::ExperimentConfig() : j_(defaults()) {}

namespace {

void merge_into(json& base, const json& patch, const std::string& prefix) {
    if (!patch.is_object()) throw InvalidArgument("config section '" + prefix + "' must be an object");
    for (auto it = patch.begin(); it != patch.end(); ++it) {
        const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
        if (!base.contains(it.key())) throw InvalidArgument("unknown config key '" + key + "'");
        json& dst = base[it.key()];
        if (dst.is_object() && it->is_object() && key != "thresholds")
            merge_into(dst, *it, key);
        else if (key == "thresholds" && it->is_object())
            merge_into(dst, *it, key);
        else
            dst = *it;
    }
}

}  // namespace

void ExperimentConfig::merge(const json& patch) { merge_into(j_, patch, ""); }

ExperimentConfig ExperimentConfig::from_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw InvalidArgument("cannot open config '" + path + "'");
    json patch;
    try {
        patch = json::parse(is, nullptr, true, true);
    } catch (const json::exception& e) {
        throw InvalidArgument("config '" + path + "' is not valid JSON: " + e.what());
    }
    ExperimentConfig c;
    c.merge(patch);
    return c;
}

void ExperimentConfig::set(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw InvalidArgument("override '" + assignment + "' is not key=value");
    const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
    json value;
    try {
        value = json::parse(text);
    } catch (const json::exception&) {
        value = text;
    }
    json patch = value;
    std::string rest = key;
    std::vector<std::string> parts;
    std::size_t pos;
    while ((pos = rest.find('.')) != std::string::npos) {
        parts.push_back(rest.substr(0, pos));
        rest = rest.substr(pos + 1);
    }
    parts.push_back(rest);
    for (auto it = parts.rbegin(); it != parts.rend(); ++it) patch = json{{*it, patch}};
    merge(patch);
}

const json& ExperimentConfig::at(const std::string& dotted) const {
    const json* cur = &j_;
    std::string rest = dotted;
    while (true) {
        const auto pos = rest.find('.');
        const std::string k = rest.substr(0, pos);
        if (!cur->is_object() || !cur->contains(k)) throw InvalidArgument("missing config key '" + dotted + "'");
        cur = &(*cur)[k];
        if (pos == std::string::npos) return *cur;
        rest = rest.substr(pos + 1);
    }
}

std::string ExperimentConfig::hash() const {
    json c = j_;
    c.erase("output_dir");
    return fnv1a_hex(c.dump());
}

std::string ExperimentConfig::train_hash() const {
    json c;
    for (const char* k : {"window", "eight_bit", "model", "schedule", "distill", "train", "phantom"}) c[k] = j_.at(k);
    c["train_volumes"] = j_.at("data").at("train_volumes");
    return fnv1a_hex(c.dump());
}

std::string ExperimentConfig::output_dir() const {
    fs::path p = get<std::string>("output_dir");
    if (p.is_relative()) {
        if (const char* root = std::getenv("DSL_OUTPUT_ROOT"); root != nullptr && *root != '\0') p = fs::path(root) / p;
    }
    return p.string();
}

HuWindow ExperimentConfig::window() const {
    const auto w = get<std::vector<double>>("window");
    if (w.size() != 2 || !(w[0] < w[1])) throw InvalidArgument("window must be [lo, hi] with lo < hi");
    return {w[0], w[1]};
}

HuThresholds ExperimentConfig::thresholds() const {
    HuThresholds t;
    const auto& j = at("thresholds");
    std::array<HuInterval, kNumLabels> iv{};
    for (auto l : kAllLabels) {
        const auto v = j.at(std::string(label_name(l))).get<std::vector<double>>();
        if (v.size() != 2) throw InvalidArgument("threshold for " + std::string(label_name(l)) + " must be [lo, hi]");
        iv[label_index(l)] = {v[0], v[1]};
    }
    HuThresholds out(iv);
    out.validate();
    return out;
}

TrainConfig ExperimentConfig::train_config() const {
    TrainConfig c;
    c.unet.patch_side = get<int>("model.patch_side");
    c.unet.widths = get<std::vector<int>>("model.widths");
    c.unet.bottleneck_channels = get<int>("model.bottleneck_channels");
    c.unet.max_groups = get<int>("model.max_groups");
    c.unet.time_embed_dim = get<int>("model.time_embed_dim");
    c.unet.time_hidden = get<int>("model.time_hidden");
    c.schedule_steps = get<int>("schedule.T");
    c.beta_start = get<double>("schedule.beta_start");
    c.beta_end = get<double>("schedule.beta_end");
    c.distill.tau = get<double>("distill.tau");
    c.distill.kappa = get<double>("distill.kappa");
    c.distill.warmup_steps = get<int>("distill.T_w");
    c.distill.ramp_steps = get<int>("distill.T_ramp");
    c.distill.lambda_max = get<double>("distill.lambda_max");
    c.window = window();
    c.eight_bit = get<bool>("eight_bit");
    c.batch = get<int>("train.batch");
    c.steps = get<int>("train.steps");
    c.lr = get<double>("train.lr");
    c.seed = get<std::uint64_t>("train.seed");
    c.teacher_seed = get<std::uint64_t>("train.teacher_seed");
    return c;
}

SegmentOptions ExperimentConfig::segment_options() const {
    SegmentOptions o;
    o.features.timesteps = get<std::vector<int>>("features.timesteps");
    o.features.mode = feature_mode_from_name(get<std::string>("features.mode"));
    o.features.noise_seed = get<std::uint64_t>("features.noise_seed");
    o.features.batch = get<int>("features.batch");
    o.stride = get<int>("features.stride");
    o.gmm.k = get<int>("gmm.k");
    o.gmm.seed = get<std::uint64_t>("gmm.seed");
    o.gmm.max_iter = get<int>("gmm.max_iter");
    o.gmm.tol = get<double>("gmm.tol");
    o.gmm.reg = get<double>("gmm.reg");
    const auto mode = get<std::string>("gmm.reg_mode");
    if (mode == "floor")
        o.gmm.reg_mode = CovarianceReg::Floor;
    else if (mode == "ridge")
        o.gmm.reg_mode = CovarianceReg::Ridge;
    else
        throw InvalidArgument("gmm.reg_mode must be 'floor' or 'ridge'");
    o.thresholds = thresholds();
    o.fusion = get<bool>("fusion.enabled");
    o.alpha = get<double>("fusion.alpha");
    o.sigma = get<double>("fusion.sigma");
    o.hu_filter = get<bool>("hu_filter.enabled");
    o.margin = get<double>("hu_filter.margin");
    return o;
}

PhantomSpec ExperimentConfig::phantom_spec(std::uint64_t seed) const {
    const auto s = get<std::vector<int>>("phantom.shape");
    const auto sp = get<std::vector<double>>("phantom.spacing");
    if (s.size() != 3 || sp.size() != 3) throw InvalidArgument("phantom.shape and phantom.spacing need 3 entries");
    PhantomSpec p = benchmark_phantom_spec(seed, Dims{s[0], s[1], s[2]});
    p.spacing = {sp[0], sp[1], sp[2]};
    return p;
}

void ExperimentConfig::validate() const {
    train_config().unet.validate();
    train_config().distill.validate();
    (void)segment_options();
    if (get<int>("train.batch") < 2) throw InvalidArgument("train.batch must be >= 2");
    if (get<int>("train.steps") < 0) throw InvalidArgument("train.steps must be >= 0");
    if (!(get<double>("hu_filter.margin") >= 0.0)) throw InvalidArgument("hu_filter.margin must be >= 0");
    if (get<int>("features.stride") < 0) throw InvalidArgument("features.stride must be >= 0");
}

}  // namespace dsl
