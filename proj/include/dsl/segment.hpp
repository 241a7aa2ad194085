#pragma once

#include <Eigen/Dense>
#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dsl/inference.hpp"
#include "dsl/labels.hpp"

namespace dsl {

// ---- clustering ----

enum class CovarianceReg {
    Floor,  // clip covariance eigenvalues from below (constrained ML step)
    Ridge,  // add reg * I after the ML step
};

struct GmmOptions {
    int k = 5;
    std::uint64_t seed = 0;
    int max_iter = 200;
    double tol = 1e-6;  // relative log-likelihood improvement
    double reg = 1e-6;
    CovarianceReg reg_mode = CovarianceReg::Floor;
    int kmeans_iter = 100;
};

struct GmmModel {
    int k = 0;
    int dim = 0;
    Eigen::VectorXd weights;
    std::vector<Eigen::VectorXd> means;
    std::vector<Eigen::MatrixXd> covariances;
    std::vector<double> loglik_trace;  // mean per-sample log-likelihood before each M-step
    bool converged = false;
    int reinitialized = 0;
};

// k-means++ seeding followed by Lloyd iterations. Returns centroids (k x d).
Eigen::MatrixXd kmeans(const Eigen::MatrixXd& D, int k, std::uint64_t seed, int max_iter = 100,
                       std::vector<int>* labels = nullptr);

// Rows of D are samples. Initialized from k-means; full covariances.
GmmModel fit_gmm(const Eigen::MatrixXd& D, const GmmOptions& opt);

// Starts EM from an explicit model instead of k-means.
GmmModel fit_gmm_from(const Eigen::MatrixXd& D, GmmModel init, const GmmOptions& opt);

struct Assignment {
    std::vector<int> labels;
    Eigen::MatrixXd resp;  // N x K, rows sum to 1
};

Assignment assign_clusters(const GmmModel& m, const Eigen::MatrixXd& D);

// Per-sample log-densities log(w_k N(x | mu_k, Sigma_k)), N x K.
Eigen::MatrixXd gmm_log_joint(const GmmModel& m, const Eigen::MatrixXd& D);

Eigen::MatrixXd descriptor_matrix(std::span<const PatchDescriptor> d);

// ---- labelling and masks ----

struct ClusterLabeling {
    std::vector<PathologyLabel> cluster_to_label;
    std::vector<double> cluster_mean_hu;  // NaN for empty clusters
    std::vector<std::string> warnings;
};

ClusterLabeling hu_label_assignment(int k, std::span<const double> patch_hu_means, std::span<const int> hard_labels,
                                    const HuThresholds& thresholds);

using SoftMasks = std::array<Grid<float>, kNumLabels>;  // indexed by PathologyLabel

// Each patch spreads its per-class weight (responsibilities summed through
// cluster_to_label) uniformly over its footprint; overlaps average. Voxels
// no patch covers get Background = 1.
SoftMasks build_soft_masks(const Eigen::MatrixXd& resp, std::span<const PathologyLabel> cluster_to_label,
                           std::span<const Index3> origins, Dims dims, int side);
SoftMasks build_soft_masks(std::span<const int> hard_labels, std::span<const PathologyLabel> cluster_to_label,
                           std::span<const Index3> origins, Dims dims, int side);

LabelVolume argmax_labels(const SoftMasks& m);

// 3D Sobel gradient magnitude (replicate border).
Grid<float> sobel_magnitude(const Grid<float>& v);
// Separable Gaussian smoothing (replicate border, truncated at 3 sigma).
Grid<float> gaussian_smooth(const Grid<float>& v, double sigma);

// M * (1 + alpha * G_sigma(S(x0) * S(M))), both Sobel terms min-max scaled to [0, 1].
Grid<float> sobel_fusion(const Grid<float>& mask, const Grid<float>& x0, double alpha = 2.0, double sigma = 1.5);

// Pipeline variant: the edge gain for class k only acts where the voxel HU
// lies in the class-k interval, so the refinement can move a boundary
// between complementary masks.
SoftMasks sobel_fusion_gated(const SoftMasks& masks, const CtVolume& x0, const HuThresholds& thresholds,
                             HuWindow window, double alpha = 2.0, double sigma = 1.5);

// Voxels outside their class interval widened by `margin` move to the class
// whose interval holds their HU.
LabelVolume hu_compatibility_filter(const LabelVolume& labels, const CtVolume& x0, const HuThresholds& thresholds,
                                    double margin = 50.0);

// ---- full pipeline ----

// k-means gives one-hot responsibilities; it backs the radiomics baseline.
enum class Clusterer { Gmm, KMeans };

struct SegmentOptions {
    FeatureOptions features;
    Clusterer clusterer = Clusterer::Gmm;
    int stride = 0;  // 0 means patch_side / 2
    GmmOptions gmm;
    HuThresholds thresholds;
    bool fusion = true;
    bool hu_filter = true;
    double alpha = 2.0;
    double sigma = 1.5;
    double margin = 50.0;
};

struct SegmentationResult {
    LabelVolume labels;
    SoftMasks soft_masks;
    std::vector<PathologyLabel> cluster_to_label;
    std::vector<double> cluster_mean_hu;
    std::vector<PatchDescriptor> descriptors;
    std::vector<int> hard_labels;
    std::vector<std::string> warnings;
};

SegmentationResult segment_volume(const CtVolume& v, const Model& m, const SegmentOptions& opt);

// Clustering, labelling and mask stages on precomputed descriptors.
SegmentationResult segment_descriptors(const CtVolume& v, std::vector<PatchDescriptor> descriptors, int side,
                                       HuWindow window, const SegmentOptions& opt);

}  // namespace dsl
