#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

namespace dsl {

// Order is part of the on-disk label encoding (uint8 value = enum value).
enum class PathologyLabel : std::uint8_t {
    Background = 0,
    Healthy = 1,
    GGO = 2,
    Fibrosis = 3,
    Emphysema = 4,
};

inline constexpr int kNumLabels = 5;

inline constexpr std::array<PathologyLabel, kNumLabels> kAllLabels{
    PathologyLabel::Background, PathologyLabel::Healthy, PathologyLabel::GGO, PathologyLabel::Fibrosis,
    PathologyLabel::Emphysema};

// The four classes scored by the evaluation tables (background excluded).
inline constexpr std::array<PathologyLabel, 4> kTissueLabels{PathologyLabel::Healthy, PathologyLabel::GGO,
                                                             PathologyLabel::Fibrosis, PathologyLabel::Emphysema};

std::string_view label_name(PathologyLabel l);
std::optional<PathologyLabel> label_from_name(std::string_view name);

inline constexpr int label_index(PathologyLabel l) { return static_cast<int>(l); }

struct HuInterval {
    double lo = 0.0;  // exclusive
    double hi = 0.0;  // inclusive
};

// Per-class HU intervals, half-open (lo, hi]. A value sitting exactly on a
// boundary therefore belongs to the lower-HU class. The lowest interval also
// absorbs everything below it and the highest everything above it.
class HuThresholds {
public:
    HuThresholds();  // clinical-style defaults, see .cpp
    HuThresholds(const std::array<HuInterval, kNumLabels>& intervals);

    const HuInterval& interval(PathologyLabel l) const { return intervals_[label_index(l)]; }
    void set_interval(PathologyLabel l, HuInterval iv);

    // Class whose interval contains `hu`.
    PathologyLabel classify(double hu) const;

    // Intervals must tile [-1024, +600] without gaps or overlap.
    void validate() const;

private:
    std::array<HuInterval, kNumLabels> intervals_{};
};

}  // namespace dsl
