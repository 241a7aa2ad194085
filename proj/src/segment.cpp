#include "dsl/segment.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

namespace dsl {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;

Eigen::MatrixXd regularize(Eigen::MatrixXd c, const GmmOptions& opt) {
    c = 0.5 * (c + c.transpose());
    if (opt.reg_mode == CovarianceReg::Ridge) {
        c.diagonal().array() += opt.reg;
        return c;
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(c);
    Eigen::VectorXd ev = es.eigenvalues().cwiseMax(opt.reg);
    Eigen::MatrixXd out = es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
    return 0.5 * (out + out.transpose());
}

Eigen::MatrixXd weighted_covariance(const Eigen::MatrixXd& D, const Eigen::VectorXd& w, const Eigen::VectorXd& mean) {
    const Eigen::MatrixXd X = D.rowwise() - mean.transpose();
    return (X.transpose() * w.asDiagonal() * X) / w.sum();
}

double logsumexp_row(const Eigen::MatrixXd& m, Eigen::Index i) {
    const double mx = m.row(i).maxCoeff();
    if (!std::isfinite(mx)) return mx;
    return mx + std::log((m.row(i).array() - mx).exp().sum());
}

}  // namespace

Eigen::MatrixXd descriptor_matrix(std::span<const PatchDescriptor> d) {
    if (d.empty()) return {};
    const auto cols = static_cast<Eigen::Index>(d.front().values.size());
    Eigen::MatrixXd D(static_cast<Eigen::Index>(d.size()), cols);
    for (std::size_t i = 0; i < d.size(); ++i) {
        if (static_cast<Eigen::Index>(d[i].values.size()) != cols) throw InvalidArgument("descriptor lengths differ");
        for (Eigen::Index c = 0; c < cols; ++c) D(static_cast<Eigen::Index>(i), c) = d[i].values[c];
    }
    return D;
}

Eigen::MatrixXd kmeans(const Eigen::MatrixXd& D, int k, std::uint64_t seed, int max_iter, std::vector<int>* labels_out) {
    const Eigen::Index N = D.rows();
    if (k < 1 || N < k) throw InvalidArgument("k-means needs 1 <= k <= N");
    std::mt19937_64 rng(seed);
    Eigen::MatrixXd C(k, D.cols());
    std::uniform_int_distribution<Eigen::Index> first(0, N - 1);
    C.row(0) = D.row(first(rng));
    Eigen::VectorXd d2 = (D.rowwise() - C.row(0)).rowwise().squaredNorm();
    for (int c = 1; c < k; ++c) {
        const double total = d2.sum();
        Eigen::Index pick = 0;
        if (total > 0.0) {
            std::uniform_real_distribution<double> u(0.0, total);
            double r = u(rng), acc = 0.0;
            pick = N - 1;
            for (Eigen::Index i = 0; i < N; ++i) {
                acc += d2(i);
                if (acc >= r && d2(i) > 0.0) {
                    pick = i;
                    break;
                }
            }
        } else {
            pick = first(rng);
        }
        C.row(c) = D.row(pick);
        d2 = d2.cwiseMin((D.rowwise() - C.row(c)).rowwise().squaredNorm());
    }

    std::vector<int> lab(static_cast<std::size_t>(N), -1);
    for (int it = 0; it < max_iter; ++it) {
        bool changed = false;
        for (Eigen::Index i = 0; i < N; ++i) {
            Eigen::Index best;
            (C.rowwise() - D.row(i)).rowwise().squaredNorm().minCoeff(&best);
            if (lab[i] != static_cast<int>(best)) {
                lab[i] = static_cast<int>(best);
                changed = true;
            }
        }
        if (!changed) break;
        Eigen::MatrixXd sum = Eigen::MatrixXd::Zero(k, D.cols());
        std::vector<int> count(k, 0);
        for (Eigen::Index i = 0; i < N; ++i) {
            sum.row(lab[i]) += D.row(i);
            ++count[lab[i]];
        }
        for (int c = 0; c < k; ++c) {
            if (count[c] > 0) {
                C.row(c) = sum.row(c) / count[c];
                continue;
            }
            // empty cluster: move it to the point worst served by its centroid
            Eigen::Index far = 0;
            double worst = -1.0;
            for (Eigen::Index i = 0; i < N; ++i) {
                const double e = (D.row(i) - C.row(lab[i])).squaredNorm();
                if (e > worst) {
                    worst = e;
                    far = i;
                }
            }
            C.row(c) = D.row(far);
            lab[far] = c;
        }
    }
    if (labels_out != nullptr) *labels_out = lab;
    return C;
}

Eigen::MatrixXd gmm_log_joint(const GmmModel& m, const Eigen::MatrixXd& D) {
    if (D.cols() != m.dim) throw InvalidArgument("descriptor dimension does not match the mixture");
    Eigen::MatrixXd out(D.rows(), m.k);
    for (int c = 0; c < m.k; ++c) {
        Eigen::LLT<Eigen::MatrixXd> llt(m.covariances[c]);
        if (llt.info() != Eigen::Success) throw Error("mixture covariance is not positive definite");
        const Eigen::MatrixXd L = llt.matrixL();
        const double logdet = 2.0 * L.diagonal().array().log().sum();
        const Eigen::MatrixXd X = (D.rowwise() - m.means[c].transpose()).transpose();
        const Eigen::MatrixXd Y = llt.matrixL().solve(X);
        const Eigen::VectorXd maha = Y.colwise().squaredNorm().transpose();
        const double lw = m.weights(c) > 0.0 ? std::log(m.weights(c)) : -std::numeric_limits<double>::infinity();
        out.col(c) = (lw - 0.5 * (m.dim * kLog2Pi + logdet) - 0.5 * maha.array()).matrix();
    }
    return out;
}

Assignment assign_clusters(const GmmModel& m, const Eigen::MatrixXd& D) {
    const Eigen::MatrixXd lj = gmm_log_joint(m, D);
    Assignment a;
    a.resp.resize(D.rows(), m.k);
    a.labels.resize(static_cast<std::size_t>(D.rows()));
    for (Eigen::Index i = 0; i < D.rows(); ++i) {
        const double lse = logsumexp_row(lj, i);
        a.resp.row(i) = (lj.row(i).array() - lse).exp();
        a.resp.row(i) /= a.resp.row(i).sum();
        Eigen::Index best;
        lj.row(i).maxCoeff(&best);
        a.labels[static_cast<std::size_t>(i)] = static_cast<int>(best);
    }
    return a;
}

GmmModel fit_gmm_from(const Eigen::MatrixXd& D, GmmModel m, const GmmOptions& opt) {
    const Eigen::Index N = D.rows();
    const int K = m.k;
    if (N <= K) throw InvalidArgument("GMM needs more samples than components");
    if (D.cols() != m.dim) throw InvalidArgument("descriptor dimension does not match the mixture");
    std::vector<int> reinit(K, 0);
    m.loglik_trace.clear();
    m.converged = false;
    Eigen::MatrixXd global_cov;

    for (int it = 0; it < opt.max_iter; ++it) {
        const Eigen::MatrixXd lj = gmm_log_joint(m, D);
        Eigen::VectorXd ll(N);
        for (Eigen::Index i = 0; i < N; ++i) ll(i) = logsumexp_row(lj, i);
        const double mean_ll = ll.mean();
        if (!std::isfinite(mean_ll)) throw Error("EM produced a non-finite log-likelihood");
        if (!m.loglik_trace.empty()) {
            const double prev = m.loglik_trace.back();
            if (mean_ll - prev <= opt.tol * std::max(1.0, std::abs(prev))) {
                m.loglik_trace.push_back(mean_ll);
                m.converged = true;
                break;
            }
        }
        m.loglik_trace.push_back(mean_ll);

        Eigen::MatrixXd resp(N, K);
        for (Eigen::Index i = 0; i < N; ++i) resp.row(i) = (lj.row(i).array() - ll(i)).exp();
        const Eigen::VectorXd nk = resp.colwise().sum().transpose();

        bool reset = false;
        for (int c = 0; c < K; ++c) {
            if (nk(c) / static_cast<double>(N) >= 1e-8) continue;
            if (reinit[c] > 0) throw Error("EM collapse: component " + std::to_string(c) + " lost all weight twice");
            ++reinit[c];
            ++m.reinitialized;
            if (global_cov.size() == 0) {
                const Eigen::VectorXd mu = D.colwise().mean().transpose();
                global_cov = regularize(weighted_covariance(D, Eigen::VectorXd::Ones(N), mu), opt);
            }
            Eigen::Index worst;
            ll.minCoeff(&worst);
            m.means[c] = D.row(worst).transpose();
            m.covariances[c] = global_cov;
            m.weights(c) = 1.0 / K;
            reset = true;
        }
        if (reset) {
            m.weights /= m.weights.sum();
            // the likelihood sequence restarts from the re-initialized model
            m.loglik_trace.clear();
            continue;
        }

        for (int c = 0; c < K; ++c) {
            const Eigen::VectorXd w = resp.col(c);
            m.weights(c) = nk(c) / static_cast<double>(N);
            m.means[c] = (D.transpose() * w) / nk(c);
            m.covariances[c] = regularize(weighted_covariance(D, w, m.means[c]), opt);
        }
        m.weights /= m.weights.sum();
    }
    return m;
}

GmmModel fit_gmm(const Eigen::MatrixXd& D, const GmmOptions& opt) {
    const Eigen::Index N = D.rows();
    if (opt.k < 1) throw InvalidArgument("GMM needs at least one component");
    if (N <= opt.k) throw InvalidArgument("GMM needs more samples (" + std::to_string(N) + ") than components (" +
                                          std::to_string(opt.k) + ")");
    std::vector<int> lab;
    const Eigen::MatrixXd C = kmeans(D, opt.k, opt.seed, opt.kmeans_iter, &lab);
    GmmModel m;
    m.k = opt.k;
    m.dim = static_cast<int>(D.cols());
    m.weights = Eigen::VectorXd::Zero(opt.k);
    for (int c = 0; c < opt.k; ++c) {
        Eigen::VectorXd w = Eigen::VectorXd::Zero(N);
        for (Eigen::Index i = 0; i < N; ++i)
            if (lab[i] == c) w(i) = 1.0;
        m.weights(c) = w.sum() / static_cast<double>(N);
        m.means.push_back(C.row(c).transpose());
        m.covariances.push_back(regularize(weighted_covariance(D, w, m.means.back()), opt));
    }
    return fit_gmm_from(D, std::move(m), opt);
}

ClusterLabeling hu_label_assignment(int k, std::span<const double> patch_hu_means, std::span<const int> hard_labels,
                                    const HuThresholds& thresholds) {
    if (patch_hu_means.size() != hard_labels.size()) throw InvalidArgument("HU means and labels differ in length");
    std::vector<double> sum(k, 0.0);
    std::vector<int> count(k, 0);
    for (std::size_t i = 0; i < hard_labels.size(); ++i) {
        const int c = hard_labels[i];
        if (c < 0 || c >= k) throw InvalidArgument("cluster label out of range");
        sum[c] += patch_hu_means[i];
        ++count[c];
    }
    ClusterLabeling out;
    for (int c = 0; c < k; ++c) {
        if (count[c] == 0) {
            out.cluster_to_label.push_back(PathologyLabel::Background);
            out.cluster_mean_hu.push_back(std::numeric_limits<double>::quiet_NaN());
            out.warnings.push_back("cluster " + std::to_string(c) + " is empty; assigned Background");
            continue;
        }
        const double h = sum[c] / count[c];
        out.cluster_mean_hu.push_back(h);
        out.cluster_to_label.push_back(thresholds.classify(h));
    }
    return out;
}

namespace {

SoftMasks splat(std::span<const Index3> origins, Dims dims, int side,
                const std::function<void(std::size_t, std::array<double, kNumLabels>&)>& weights) {
    std::array<Grid<double>, kNumLabels> acc;
    for (auto& g : acc) g = Grid<double>(dims, 0.0);
    Grid<int> count(dims, 0);
    for (std::size_t p = 0; p < origins.size(); ++p) {
        const Index3 o = origins[p];
        if (!dims.contains(o.z, o.y, o.x) || !dims.contains(o.z + side - 1, o.y + side - 1, o.x + side - 1))
            throw InvalidArgument("patch origin places the footprint outside the volume");
        std::array<double, kNumLabels> w{};
        weights(p, w);
        for (int z = o.z; z < o.z + side; ++z)
            for (int y = o.y; y < o.y + side; ++y)
                for (int x = o.x; x < o.x + side; ++x) {
                    const std::size_t i = dims.offset(z, y, x);
                    for (int l = 0; l < kNumLabels; ++l) acc[l][i] += w[l];
                    ++count[i];
                }
    }
    SoftMasks out;
    for (auto& g : out) g = Grid<float>(dims, 0.0f);
    for (std::size_t i = 0; i < dims.size(); ++i) {
        if (count[i] == 0) {
            out[label_index(PathologyLabel::Background)][i] = 1.0f;
            continue;
        }
        for (int l = 0; l < kNumLabels; ++l) out[l][i] = static_cast<float>(acc[l][i] / count[i]);
    }
    return out;
}

}  // namespace

SoftMasks build_soft_masks(const Eigen::MatrixXd& resp, std::span<const PathologyLabel> cluster_to_label,
                           std::span<const Index3> origins, Dims dims, int side) {
    if (resp.rows() != static_cast<Eigen::Index>(origins.size())) throw InvalidArgument("one origin per patch needed");
    if (resp.cols() != static_cast<Eigen::Index>(cluster_to_label.size()))
        throw InvalidArgument("responsibility columns do not match the cluster map");
    return splat(origins, dims, side, [&](std::size_t p, std::array<double, kNumLabels>& w) {
        for (Eigen::Index c = 0; c < resp.cols(); ++c)
            w[label_index(cluster_to_label[c])] += resp(static_cast<Eigen::Index>(p), c);
    });
}

SoftMasks build_soft_masks(std::span<const int> hard_labels, std::span<const PathologyLabel> cluster_to_label,
                           std::span<const Index3> origins, Dims dims, int side) {
    if (hard_labels.size() != origins.size()) throw InvalidArgument("one origin per patch needed");
    return splat(origins, dims, side, [&](std::size_t p, std::array<double, kNumLabels>& w) {
        const int c = hard_labels[p];
        if (c < 0 || c >= static_cast<int>(cluster_to_label.size())) throw InvalidArgument("cluster label out of range");
        w[label_index(cluster_to_label[c])] = 1.0;
    });
}

LabelVolume argmax_labels(const SoftMasks& m) {
    const Dims d = m[0].dims();
    LabelVolume out(d, 0);
    for (std::size_t i = 0; i < d.size(); ++i) {
        int best = 0;
        for (int l = 1; l < kNumLabels; ++l)
            if (m[l][i] > m[best][i]) best = l;
        out[i] = static_cast<std::uint8_t>(best);
    }
    return out;
}

namespace {

// 1D correlation along `axis` (0 = z, 1 = y, 2 = x) with replicate border.
Grid<float> filter_axis(const Grid<float>& v, int axis, const std::vector<double>& k) {
    const Dims d = v.dims();
    const int r = static_cast<int>(k.size() / 2);
    Grid<float> out(d);
    const int n = axis == 0 ? d.z : axis == 1 ? d.y : d.x;
    for (int z = 0; z < d.z; ++z)
        for (int y = 0; y < d.y; ++y)
            for (int x = 0; x < d.x; ++x) {
                double acc = 0.0;
                const int c = axis == 0 ? z : axis == 1 ? y : x;
                for (int j = -r; j <= r; ++j) {
                    const int q = std::clamp(c + j, 0, n - 1);
                    const float s = axis == 0 ? v(q, y, x) : axis == 1 ? v(z, q, x) : v(z, y, q);
                    acc += k[static_cast<std::size_t>(j + r)] * s;
                }
                out(z, y, x) = static_cast<float>(acc);
            }
    return out;
}

Grid<float> minmax01(Grid<float> v) {
    if (v.size() == 0) return v;
    const auto [lo, hi] = std::minmax_element(v.data().begin(), v.data().end());
    const float a = *lo, b = *hi;
    if (!(b > a)) {
        std::fill(v.data().begin(), v.data().end(), 0.0f);
        return v;
    }
    for (auto& x : v.data()) x = (x - a) / (b - a);
    return v;
}

}  // namespace

Grid<float> sobel_magnitude(const Grid<float>& v) {
    const std::vector<double> deriv{-1.0, 0.0, 1.0}, smooth{1.0, 2.0, 1.0};
    Grid<float> mag(v.dims(), 0.0f);
    for (int axis = 0; axis < 3; ++axis) {
        Grid<float> g = v;
        for (int a = 0; a < 3; ++a) g = filter_axis(g, a, a == axis ? deriv : smooth);
        for (std::size_t i = 0; i < g.size(); ++i) mag[i] += g[i] * g[i];
    }
    for (auto& x : mag.data()) x = std::sqrt(x);
    return mag;
}

Grid<float> gaussian_smooth(const Grid<float>& v, double sigma) {
    if (!(sigma > 0.0)) return v;
    const int r = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> k(static_cast<std::size_t>(2 * r + 1));
    double s = 0.0;
    for (int j = -r; j <= r; ++j) s += k[static_cast<std::size_t>(j + r)] = std::exp(-0.5 * j * j / (sigma * sigma));
    for (auto& x : k) x /= s;
    Grid<float> g = v;
    for (int a = 0; a < 3; ++a) g = filter_axis(g, a, k);
    return g;
}

Grid<float> sobel_fusion(const Grid<float>& mask, const Grid<float>& x0, double alpha, double sigma) {
    if (!(mask.dims() == x0.dims())) throw InvalidArgument("sobel_fusion: mask and image shapes differ");
    if (alpha == 0.0) return mask;
    const Grid<float> sx = minmax01(sobel_magnitude(x0));
    const Grid<float> sm = minmax01(sobel_magnitude(mask));
    Grid<float> prod(mask.dims());
    for (std::size_t i = 0; i < prod.size(); ++i) prod[i] = sx[i] * sm[i];
    const Grid<float> g = gaussian_smooth(prod, sigma);
    Grid<float> out = mask;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(mask[i] * (1.0 + alpha * g[i]));
    return out;
}

SoftMasks sobel_fusion_gated(const SoftMasks& masks, const CtVolume& x0, const HuThresholds& thresholds,
                             HuWindow window, double alpha, double sigma) {
    const Dims d = x0.dims();
    for (const auto& m : masks)
        if (!(m.dims() == d)) throw InvalidArgument("sobel_fusion: mask and image shapes differ");
    if (alpha == 0.0) return masks;
    Grid<float> img(d);
    for (std::size_t i = 0; i < d.size(); ++i) img[i] = static_cast<float>(normalize_hu_value(x0.hu[i], window));
    const Grid<float> sx = minmax01(sobel_magnitude(img));
    SoftMasks out = masks;
    for (int l = 0; l < kNumLabels; ++l) {
        const Grid<float> sm = minmax01(sobel_magnitude(masks[l]));
        Grid<float> prod(d);
        for (std::size_t i = 0; i < d.size(); ++i) prod[i] = sx[i] * sm[i];
        const Grid<float> g = gaussian_smooth(prod, sigma);
        for (std::size_t i = 0; i < d.size(); ++i) {
            const bool gate = label_index(thresholds.classify(x0.hu[i])) == l;
            if (gate) out[l][i] = static_cast<float>(masks[l][i] * (1.0 + alpha * g[i]));
        }
    }
    return out;
}

LabelVolume hu_compatibility_filter(const LabelVolume& labels, const CtVolume& x0, const HuThresholds& thresholds,
                                    double margin) {
    if (!(labels.dims() == x0.dims())) throw InvalidArgument("label volume and image shapes differ");
    // the outermost intervals are open-ended, as in classify()
    double lowest = INFINITY, highest = -INFINITY;
    for (auto l : kAllLabels) {
        lowest = std::min(lowest, thresholds.interval(l).lo);
        highest = std::max(highest, thresholds.interval(l).hi);
    }
    LabelVolume out = labels;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const int li = labels[i];
        if (li >= kNumLabels) throw InvalidArgument("label value out of range");
        const HuInterval iv = thresholds.interval(static_cast<PathologyLabel>(li));
        const double lo = iv.lo <= lowest ? -INFINITY : iv.lo - margin;
        const double hi = iv.hi >= highest ? INFINITY : iv.hi + margin;
        const double h = x0.hu[i];
        if (h > lo && h <= hi) continue;
        out[i] = static_cast<std::uint8_t>(thresholds.classify(h));
    }
    return out;
}

SegmentationResult segment_descriptors(const CtVolume& v, std::vector<PatchDescriptor> descriptors, int side,
                                       HuWindow window, const SegmentOptions& opt) {
    SegmentationResult res;
    std::vector<Index3> origins;
    std::vector<double> hu_means;
    for (const auto& d : descriptors) {
        origins.push_back(d.origin);
        hu_means.push_back(extract_patch(v, d.origin, side).mean_hu());
    }
    const Eigen::MatrixXd D = descriptor_matrix(descriptors);
    Assignment a;
    if (opt.clusterer == Clusterer::KMeans) {
        try {
            kmeans(D, opt.gmm.k, opt.gmm.seed, opt.gmm.kmeans_iter, &a.labels);
        } catch (const Error& e) {
            throw StageError("kmeans", e.what());
        }
        a.resp = Eigen::MatrixXd::Zero(D.rows(), opt.gmm.k);
        for (Eigen::Index i = 0; i < D.rows(); ++i) a.resp(i, a.labels[i]) = 1.0;
    } else {
        GmmModel gmm;
        try {
            gmm = fit_gmm(D, opt.gmm);
        } catch (const StageError&) {
            throw;
        } catch (const Error& e) {
            throw StageError("fit_gmm", e.what());
        }
        try {
            a = assign_clusters(gmm, D);
        } catch (const Error& e) {
            throw StageError("assign_clusters", e.what());
        }
    }
    auto lab = hu_label_assignment(opt.gmm.k, hu_means, a.labels, opt.thresholds);
    res.warnings = lab.warnings;
    try {
        res.soft_masks = build_soft_masks(a.resp, lab.cluster_to_label, origins, v.dims(), side);
        if (opt.fusion)
            res.soft_masks = sobel_fusion_gated(res.soft_masks, v, opt.thresholds, window, opt.alpha, opt.sigma);
    } catch (const Error& e) {
        throw StageError(opt.fusion ? "sobel_fusion" : "build_soft_masks", e.what());
    }
    res.labels = argmax_labels(res.soft_masks);
    if (opt.hu_filter) res.labels = hu_compatibility_filter(res.labels, v, opt.thresholds, opt.margin);
    res.cluster_to_label = lab.cluster_to_label;
    res.cluster_mean_hu = lab.cluster_mean_hu;
    res.hard_labels = a.labels;
    res.descriptors = std::move(descriptors);
    return res;
}

SegmentationResult segment_volume(const CtVolume& v, const Model& m, const SegmentOptions& opt) {
    const int side = m.unet.patch_side;
    const int stride = opt.stride > 0 ? opt.stride : std::max(1, side / 2);
    std::vector<PatchDescriptor> d;
    try {
        d = extract_corpus(v, m, stride, opt.features);
    } catch (const Error& e) {
        throw StageError("extract_corpus", e.what());
    }
    return segment_descriptors(v, std::move(d), side, m.window, opt);
}

}  // namespace dsl
