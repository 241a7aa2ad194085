#pragma once

#include <Eigen/Dense>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "dsl/ct_data.hpp"

namespace dsl {

inline constexpr double kDefaultDataRange = 1624.0;  // HU window width

// Nonzero voxels are foreground.
double dice(const MaskVolume& pred, const MaskVolume& gt);

MaskVolume label_mask(const LabelVolume& labels, PathologyLabel l);

// Foreground voxels with a face neighbour outside the mask or the volume.
// `planar` restricts the neighbourhood to the axial plane.
std::vector<Index3> surface_voxels(const MaskVolume& m, bool planar = false);

// Exact squared Euclidean distance (in mm^2) from every voxel to the nearest
// seed voxel, separable lower-envelope algorithm with per-axis spacing.
Grid<double> squared_distance_transform(const MaskVolume& seeds, const Vec3& spacing);

// 95th percentile (linear interpolation) of the pooled surface distances
// pred->gt and gt->pred, in mm.
double hd95(const MaskVolume& pred, const MaskVolume& gt, const Vec3& spacing, bool planar = false);

// Mean SSIM over axial slices: 11-wide Gaussian window (sigma 1.5), valid region.
double ssim(const Grid<float>& a, const Grid<float>& b, double data_range);
double ssim(const CtVolume& a, const CtVolume& b, double data_range = kDefaultDataRange);

// +infinity for identical inputs.
double psnr(const Grid<float>& a, const Grid<float>& b, double data_range);
double psnr(const CtVolume& a, const CtVolume& b, double data_range = kDefaultDataRange);

// Frechet distance between Gaussian fits of two feature sets (rows are samples).
// Covariances are shrunk toward (tr/d) I by `shrinkage` in [0, 1]; a negative
// value picks 0.1 when either set has no more rows than columns, else 0.
double frechet_proxy(const Eigen::MatrixXd& real, const Eigen::MatrixXd& gen, double shrinkage = -1.0);

struct ClassMetrics {
    double dsc = 0.0;
    double hd95 = 0.0;  // NaN when either mask is empty
};

struct MetricReport {
    std::map<PathologyLabel, ClassMetrics> per_class;
    double mean_dsc = 0.0;
    double mean_hd95 = 0.0;  // over classes where it is defined
    double ssim = NAN;
    double psnr = NAN;
    double frechet = NAN;
    double data_range = kDefaultDataRange;
    std::string mode = "volumetric";
    std::string config_hash;

    std::string to_json() const;
};

// Scores the four tissue classes. Slice mode evaluates each listed axial
// slice in 2D and averages per class over slices.
MetricReport evaluate_segmentation(const LabelVolume& pred, const LabelVolume& gt, const Vec3& spacing);
MetricReport evaluate_slices(const LabelVolume& pred, const LabelVolume& gt, const Vec3& spacing,
                             const std::vector<int>& slices);

// Header plus one row per report: name, per-class DSC, mean DSC, mean HD95.
void write_metric_csv(std::ostream& os, const std::vector<std::pair<std::string, MetricReport>>& rows);

}  // namespace dsl
