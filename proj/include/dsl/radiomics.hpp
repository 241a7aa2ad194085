#pragma once

#include <Eigen/Dense>
#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dsl/ct_data.hpp"

namespace dsl {

inline constexpr int kRadiomicDim = 34;
inline constexpr int kEmbeddingDim = 128;

// Fixed layout: [GLCM 0-13 | LBP 14-21 | Gabor 22-29 | first-order 30-33].
inline constexpr int kGlcmOffset = 0;
inline constexpr int kLbpOffset = 14;
inline constexpr int kGaborOffset = 22;
inline constexpr int kFirstOrderOffset = 30;

using RadiomicVector = std::array<double, kRadiomicDim>;
using Embedding = Eigen::VectorXd;

struct GlcmOptions {
    int levels = 32;
    std::vector<Index3> offsets{{0, 0, 1}, {0, 1, 0}, {1, 0, 0}};
};

// Gray level per voxel: floor((v - min) / (max - min) * levels), top value folded
// into the last bin. A constant patch maps entirely to level 0.
std::vector<int> quantize_gray_levels(const Patch& p, int levels);

// Symmetrized, normalized co-occurrence matrix (levels x levels, row-major).
std::vector<double> glcm_matrix(const Patch& p, int levels, Index3 offset);

// The 14 Haralick statistics of a normalized symmetric co-occurrence matrix, in order:
// ASM, contrast, correlation, sum of squares variance, inverse difference moment,
// sum average, sum variance, sum entropy, entropy, difference variance,
// difference entropy, IMC1, IMC2, maximal correlation coefficient.
// Correlation and the IMC terms are 0 when their denominators vanish.
std::array<double, 14> haralick_features(std::span<const double> glcm, int levels);

std::array<double, 14> glcm_features(const Patch& p, const GlcmOptions& opt = {});

// Slicewise 8-neighbour LBP. Bin b holds codes with b+1 neighbours >= centre,
// except bin 0 which also takes the zero-count code. Sums to 1.
std::array<double, 8> lbp_histogram(const Patch& p);

struct GaborFilter {
    double frequency;    // cycles / voxel
    double orientation;  // radians
};

// 2 frequencies x 4 orientations, in frequency-major order.
std::array<GaborFilter, 8> gabor_bank();

// Mean complex-magnitude response over the central axial slice.
std::array<double, 8> gabor_features(const Patch& p);
double gabor_response(const std::vector<double>& slice, int rows, int cols, const GaborFilter& f);

// Mean, standard deviation, skewness, excess kurtosis of raw HU.
std::array<double, 4> firstorder_features(const Patch& p);

RadiomicVector radiomic_vector(const Patch& p, const GlcmOptions& opt = {});

// Per-feature z-scoring fitted once on the training corpus, then read-only.
struct RadiomicScaler {
    RadiomicVector mean{};
    RadiomicVector scale{};

    static RadiomicScaler fit(std::span<const RadiomicVector> corpus);
    RadiomicVector apply(const RadiomicVector& r) const;
};

struct TeacherHeadParams {
    Eigen::MatrixXd w1;  // 128 x 34
    Eigen::VectorXd b1;  // 128
    Eigen::MatrixXd w2;  // 128 x 128
    Eigen::VectorXd b2;  // 128

    static TeacherHeadParams init(std::uint64_t seed);
    void validate() const;
};

// l2(W2 relu(W1 r + b1) + b2). Throws on a pre-normalization norm below 1e-12.
Embedding teacher_project(const RadiomicVector& r, const TeacherHeadParams& p);

void write_radiomics_csv(const std::string& path, std::span<const Patch> patches,
                         std::span<const RadiomicVector> vectors);

}  // namespace dsl
