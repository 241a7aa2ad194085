#pragma once

// Static PNG figures for the plot subcommand.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "dsl/ct_data.hpp"
#include "dsl/distill.hpp"

namespace dsl::plot {

struct Image {
    int width = 0, height = 0;
    std::vector<std::uint8_t> rgb;

    Image(int w, int h, std::uint8_t fill = 255) : width(w), height(h), rgb(std::size_t(w) * h * 3, fill) {}
    void set(int x, int y, std::array<std::uint8_t, 3> c);
    void line(int x0, int y0, int x1, int y1, std::array<std::uint8_t, 3> c);
};

// The config hash goes into a tEXt chunk. No time chunk, so output is reproducible.
void write_png(const std::string& path, const Image& img, const std::string& config_hash);

// Diffusion loss, InfoNCE and lambda against step, each scaled to its own range.
Image loss_curves(const std::vector<TrainRecord>& log);

// Axial slices at 1/4, 1/2 and 3/4 depth: CT in gray, then one row per
// label volume with a color overlay.
Image slice_grid(const CtVolume& v, HuWindow window, const std::vector<const LabelVolume*>& overlays);

std::vector<TrainRecord> read_metrics(const std::string& ndjson_path);

}  // namespace dsl::plot
