#include "dsl/labels.hpp"

#include <algorithm>
#include <cmath>

#include "dsl/grid.hpp"

namespace dsl {

std::string to_string(const Dims& d) {
    return std::to_string(d.z) + "x" + std::to_string(d.y) + "x" + std::to_string(d.x);
}

std::string_view label_name(PathologyLabel l) {
    switch (l) {
        case PathologyLabel::Background: return "Background";
        case PathologyLabel::Healthy: return "Healthy";
        case PathologyLabel::GGO: return "GGO";
        case PathologyLabel::Fibrosis: return "Fibrosis";
        case PathologyLabel::Emphysema: return "Emphysema";
    }
    return "Unknown";
}

std::optional<PathologyLabel> label_from_name(std::string_view name) {
    for (auto l : kAllLabels) {
        if (label_name(l) == name) return l;
    }
    return std::nullopt;
}

HuThresholds::HuThresholds()
    : HuThresholds(std::array<HuInterval, kNumLabels>{{
          {-1024.0, -990.0},  // Background
          {-860.0, -700.0},   // Healthy
          {-700.0, -300.0},   // GGO
          {-300.0, 600.0},    // Fibrosis
          {-990.0, -860.0},   // Emphysema
      }}) {}

HuThresholds::HuThresholds(const std::array<HuInterval, kNumLabels>& intervals) : intervals_(intervals) {
    validate();
}

void HuThresholds::set_interval(PathologyLabel l, HuInterval iv) {
    auto saved = intervals_;
    intervals_[label_index(l)] = iv;
    try {
        validate();
    } catch (...) {
        intervals_ = saved;
        throw;
    }
}

namespace {

std::array<int, kNumLabels> order_by_lo(const std::array<HuInterval, kNumLabels>& iv) {
    std::array<int, kNumLabels> order{};
    for (int i = 0; i < kNumLabels; ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](int a, int b) { return iv[a].lo < iv[b].lo; });
    return order;
}

}  // namespace

void HuThresholds::validate() const {
    for (const auto& iv : intervals_) {
        if (!(iv.lo < iv.hi) || !std::isfinite(iv.lo) || !std::isfinite(iv.hi))
            throw InvalidArgument("HU interval must satisfy lo < hi");
    }
    auto order = order_by_lo(intervals_);
    if (intervals_[order.front()].lo > -1024.0 || intervals_[order.back()].hi < 600.0)
        throw InvalidArgument("HU intervals must cover [-1024, +600]");
    for (int i = 1; i < kNumLabels; ++i) {
        if (intervals_[order[i]].lo != intervals_[order[i - 1]].hi)
            throw InvalidArgument("HU intervals must tile without gaps or overlap");
    }
}

PathologyLabel HuThresholds::classify(double hu) const {
    auto order = order_by_lo(intervals_);
    for (int i : order) {
        if (hu <= intervals_[i].hi) return static_cast<PathologyLabel>(i);
    }
    return static_cast<PathologyLabel>(order.back());
}

}  // namespace dsl
