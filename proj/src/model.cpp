#include "dsl/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "json.hpp"

namespace dsl {

namespace {

constexpr char kMagic[8] = {'D', 'S', 'L', 'C', 'K', 'P', 'T', '1'};

using nlohmann::json;

void put_u64(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t get_u64(std::istream& is) {
    unsigned char b[8];
    if (!is.read(reinterpret_cast<char*>(b), 8)) throw IoError("truncated checkpoint header");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(b[i]) << (8 * i);
    return v;
}

void put_f32(std::ostream& os, const std::vector<float>& v) {
    std::vector<unsigned char> buf(v.size() * 4);
    for (std::size_t i = 0; i < v.size(); ++i) {
        std::uint32_t u;
        std::memcpy(&u, &v[i], 4);
        for (int k = 0; k < 4; ++k) buf[i * 4 + k] = static_cast<unsigned char>(u >> (8 * k));
    }
    os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

void get_f32(std::istream& is, std::vector<float>& v) {
    std::vector<unsigned char> buf(v.size() * 4);
    if (!is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size())))
        throw IoError("truncated checkpoint tensor data");
    for (std::size_t i = 0; i < v.size(); ++i) {
        std::uint32_t u = 0;
        for (int k = 0; k < 4; ++k) u |= std::uint32_t(buf[i * 4 + k]) << (8 * k);
        std::memcpy(&v[i], &u, 4);
    }
}

json tensor_index(const nn::ParamStore<float>& ps) {
    json a = json::array();
    for (const auto& p : ps.all()) a.push_back({{"name", p.name}, {"shape", p.shape}});
    return a;
}

void check_index(const json& idx, const nn::ParamStore<float>& ps, const std::string& what) {
    if (!idx.is_array() || idx.size() != ps.all().size())
        throw IoError("checkpoint " + what + " tensor count does not match the configured architecture");
    for (std::size_t i = 0; i < idx.size(); ++i) {
        const auto& p = ps.all()[i];
        if (idx[i].at("name").get<std::string>() != p.name || idx[i].at("shape").get<std::vector<int>>() != p.shape)
            throw IoError("checkpoint tensor '" + idx[i].at("name").get<std::string>() + "' does not match '" +
                          p.name + "'");
    }
}

}  // namespace

std::vector<float> Model::prepare(const Patch& p) const {
    std::vector<float> out(p.voxels.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double hu = eight_bit ? quantize_8bit_value(p.voxels[i], window) : double(p.voxels[i]);
        out[i] = static_cast<float>(normalize_hu_value(hu, window));
    }
    return out;
}

void save_checkpoint(const std::string& path, const Model& m) {
    json man;
    man["format"] = "dsl-checkpoint";
    man["version"] = 1;
    man["schedule"] = {{"T", m.schedule.steps}, {"beta_start", m.schedule.beta_start}, {"beta_end", m.schedule.beta_end}};
    man["unet"] = {{"patch_side", m.unet.patch_side},
                   {"widths", m.unet.widths},
                   {"bottleneck_channels", m.unet.bottleneck_channels},
                   {"max_groups", m.unet.max_groups},
                   {"time_embed_dim", m.unet.time_embed_dim},
                   {"time_hidden", m.unet.time_hidden}};
    man["window"] = {m.window.lo, m.window.hi};
    man["eight_bit"] = m.eight_bit;
    man["scaler"] = {{"mean", m.scaler.mean}, {"scale", m.scaler.scale}};
    man["teacher_seed"] = m.teacher_seed;
    man["config_hash"] = m.config_hash;
    man["train_hash"] = m.train_hash;
    man["denoiser"] = tensor_index(m.denoiser.params());
    man["student"] = tensor_index(m.head.params());
    const std::string text = man.dump();

    const std::string tmp = path + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw IoError("cannot write checkpoint '" + path + "'");
        os.write(kMagic, 8);
        put_u64(os, text.size());
        os.write(text.data(), static_cast<std::streamsize>(text.size()));
        for (const auto& p : m.denoiser.params().all()) put_f32(os, p.value);
        for (const auto& p : m.head.params().all()) put_f32(os, p.value);
        if (!os) throw IoError("failed writing checkpoint '" + path + "'");
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0) throw IoError("cannot move checkpoint into '" + path + "'");
}

Model load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("unreadable file '" + path + "'");
    char magic[8];
    if (!is.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0) throw IoError("'" + path + "' is not a checkpoint");
    const std::uint64_t n = get_u64(is);
    if (n > (1u << 26)) throw IoError("checkpoint manifest too large");
    std::string text(n, '\0');
    if (!is.read(text.data(), static_cast<std::streamsize>(n))) throw IoError("truncated checkpoint manifest");
    json man;
    try {
        man = json::parse(text);
        UNetConfig cfg;
        const auto& u = man.at("unet");
        cfg.patch_side = u.at("patch_side");
        cfg.widths = u.at("widths").get<std::vector<int>>();
        cfg.bottleneck_channels = u.at("bottleneck_channels");
        cfg.max_groups = u.at("max_groups");
        cfg.time_embed_dim = u.at("time_embed_dim");
        cfg.time_hidden = u.at("time_hidden");
        const auto& s = man.at("schedule");
        Model m(cfg, make_schedule(s.at("T"), s.at("beta_start"), s.at("beta_end")), 0);
        m.window.lo = man.at("window")[0];
        m.window.hi = man.at("window")[1];
        m.eight_bit = man.at("eight_bit");
        m.scaler.mean = man.at("scaler").at("mean").get<RadiomicVector>();
        m.scaler.scale = man.at("scaler").at("scale").get<RadiomicVector>();
        m.teacher_seed = man.at("teacher_seed");
        m.config_hash = man.at("config_hash");
        m.train_hash = man.at("train_hash");
        check_index(man.at("denoiser"), m.denoiser.params(), "denoiser");
        check_index(man.at("student"), m.head.params(), "student");
        for (auto& p : m.denoiser.params().all()) get_f32(is, p.value);
        for (auto& p : m.head.params().all()) get_f32(is, p.value);
        return m;
    } catch (const json::exception& e) {
        throw IoError("malformed checkpoint manifest in '" + path + "': " + e.what());
    }
}

}  // namespace dsl
