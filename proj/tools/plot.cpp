#include "plot.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "json.hpp"

namespace dsl::plot {

void Image::set(int x, int y, std::array<std::uint8_t, 3> c) {
    if (x < 0 || y < 0 || x >= width || y >= height) return;
    const std::size_t i = (std::size_t(y) * width + x) * 3;
    rgb[i] = c[0];
    rgb[i + 1] = c[1];
    rgb[i + 2] = c[2];
}

void Image::line(int x0, int y0, int x1, int y1, std::array<std::uint8_t, 3> c) {
    const int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
    const int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
    int err = dx + dy;
    while (true) {
        set(x0, y0, c);
        if (x0 == x1 && y0 == y1) break;
        const int e2 = 2 * err;
        if (e2 >= dy) err += dy, x0 += sx;
        if (e2 <= dx) err += dx, y0 += sy;
    }
}

void write_png(const std::string& path, const Image& img, const std::string& config_hash) {
    FILE* f = std::fopen(path.c_str(), "wb");
    if (f == nullptr) throw IoError("cannot write " + path);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png != nullptr ? png_create_info_struct(png) : nullptr;
    if (png == nullptr || info == nullptr || setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        std::fclose(f);
        throw IoError("libpng failed writing " + path);
    }
    png_init_io(png, f);
    png_set_IHDR(png, info, img.width, img.height, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    std::string key = "config_hash", text = config_hash;
    png_text t{};
    t.compression = PNG_TEXT_COMPRESSION_NONE;
    t.key = key.data();
    t.text = text.data();
    png_set_text(png, info, &t, 1);
    png_write_info(png, info);
    for (int y = 0; y < img.height; ++y)
        png_write_row(png, const_cast<png_bytep>(img.rgb.data() + std::size_t(y) * img.width * 3));
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    if (std::fclose(f) != 0) throw IoError("cannot close " + path);
}

Image loss_curves(const std::vector<TrainRecord>& log) {
    const int W = 640, H = 360, L = 50, R = 20, T = 20, B = 40;
    Image img(W, H);
    const std::array<std::uint8_t, 3> axis{40, 40, 40};
    img.line(L, H - B, W - R, H - B, axis);
    img.line(L, T, L, H - B, axis);
    if (log.size() < 2) return img;
    const double s0 = double(log.front().step), s1 = double(log.back().step);
    auto series = [&](auto get, std::array<std::uint8_t, 3> c) {
        double lo = INFINITY, hi = -INFINITY;
        for (const auto& r : log) lo = std::min(lo, get(r)), hi = std::max(hi, get(r));
        if (!std::isfinite(lo) || !std::isfinite(hi)) return;
        const double span = hi > lo ? hi - lo : 1.0;
        int px = -1, py = -1;
        for (const auto& r : log) {
            const int x = L + int(std::lround((r.step - s0) / std::max(1.0, s1 - s0) * (W - L - R)));
            const int y = H - B - int(std::lround((get(r) - lo) / span * (H - T - B)));
            if (px >= 0) img.line(px, py, x, y, c);
            px = x, py = y;
        }
    };
    series([](const TrainRecord& r) { return r.l_diff; }, {31, 119, 180});
    series([](const TrainRecord& r) { return r.l_nce; }, {214, 39, 40});
    series([](const TrainRecord& r) { return r.lambda; }, {44, 160, 44});
    return img;
}

namespace {

constexpr std::array<std::array<std::uint8_t, 3>, kNumLabels> kPalette{{
    {0, 0, 0},        // Background
    {60, 180, 75},    // Healthy
    {255, 225, 25},   // GGO
    {230, 25, 75},    // Fibrosis
    {0, 130, 200},    // Emphysema
}};

}  // namespace

Image slice_grid(const CtVolume& v, HuWindow window, const std::vector<const LabelVolume*>& overlays) {
    const Dims d = v.dims();
    const int cols = 3, rows = 1 + static_cast<int>(overlays.size()), gap = 4;
    Image img(cols * d.x + (cols + 1) * gap, rows * d.y + (rows + 1) * gap, 255);
    const int zs[cols] = {d.z / 4, d.z / 2, (3 * d.z) / 4};
    for (int c = 0; c < cols; ++c) {
        const int z = zs[c];
        for (int r = 0; r < rows; ++r) {
            const int ox = gap + c * (d.x + gap), oy = gap + r * (d.y + gap);
            for (int y = 0; y < d.y; ++y)
                for (int x = 0; x < d.x; ++x) {
                    const double n = std::clamp((v.hu(z, y, x) - window.lo) / (window.hi - window.lo), 0.0, 1.0);
                    const auto g = static_cast<std::uint8_t>(std::lround(n * 255.0));
                    std::array<std::uint8_t, 3> px{g, g, g};
                    if (r > 0) {
                        const auto lab = (*overlays[r - 1])(z, y, x);
                        if (lab > 0 && lab < kNumLabels)
                            for (int k = 0; k < 3; ++k)
                                px[k] = static_cast<std::uint8_t>((px[k] + 2 * kPalette[lab][k]) / 3);
                    }
                    img.set(ox + x, oy + y, px);
                }
        }
    }
    return img;
}

std::vector<TrainRecord> read_metrics(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open " + path);
    std::vector<TrainRecord> out;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded()) throw InvalidArgument("malformed metrics line in " + path);
        if (!j.contains("step")) continue;  // header
        TrainRecord r;
        r.step = j.at("step").get<long>();
        r.l_diff = j.value("l_diff", 0.0);
        r.l_nce = j.value("l_nce", 0.0);
        r.lambda = j.value("lambda", 0.0);
        r.pos_frac = j.value("pos_frac", 0.0);
        out.push_back(r);
    }
    return out;
}

}  // namespace dsl::plot
