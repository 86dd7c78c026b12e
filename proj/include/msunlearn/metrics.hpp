#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "msunlearn/core.hpp"

namespace msu::metrics {

// ---- connected components ---------------------------------------------------

/// Face and edge neighbours (no corner-only neighbours).
const std::array<std::array<int, 3>, 18>& neighborhood18();

struct Component {
    int id = 0;                        // 1-based, in raster order of first voxel
    std::vector<std::size_t> voxels;   // linear indices, ascending
    std::int64_t volume() const { return static_cast<std::int64_t>(voxels.size()); }
};

struct LesionStats {
    Grid3<std::int32_t> labels;  // 0 = background, otherwise component id
    std::vector<Component> components;
    std::size_t count() const { return components.size(); }
};

LesionStats label_components(const Mask& mask);

// ---- voxel-wise --------------------------------------------------------------

struct VoxelCounts {
    std::int64_t tp = 0, fp = 0, fn = 0, tn = 0;
};

VoxelCounts count_voxels(const Mask& pred, const Mask& ref);

/// 2TP / (2TP + FP + FN); 1 when both masks are empty.
double dsc(const Mask& pred, const Mask& ref);
/// TP / (TP + FN); nullopt for an empty reference.
std::optional<double> tpr(const Mask& pred, const Mask& ref);

// ---- lesion-wise ---------------------------------------------------------------

struct MetricsConfig {
    double t_iou = 0.05;
    int bootstrap_resamples = 2000;
    double alpha = 0.05;
    int n_methods = 1;
    std::uint64_t seed = 0;
};

struct LesionMatch {
    std::int64_t ltp = 0;     // reference lesions detected by some predicted lesion
    std::int64_t lfp = 0;     // predicted lesions below t_iou against every reference lesion
    std::int64_t n_ref = 0;
    std::int64_t n_pred = 0;
    std::vector<std::vector<double>> iou;  // [pred][ref]
};

/// A reference lesion counts as detected when any predicted lesion reaches
/// IoU >= t_iou with it; one predicted lesion may detect several.
LesionMatch lesion_match(const LesionStats& pred, const LesionStats& ref, double t_iou);

std::optional<double> ltpr(const LesionMatch& m);  // nullopt when n_ref == 0
double lfdr(const LesionMatch& m);                 // 0 when n_pred == 0
/// |V(pred) - V(ref)| / V(ref); nullopt for an empty reference.
std::optional<double> rve(const Mask& pred, const Mask& ref);

std::optional<double> ltpr(const Mask& pred, const Mask& ref, const MetricsConfig& cfg);
double lfdr(const Mask& pred, const Mask& ref, const MetricsConfig& cfg);

// ---- per-case bundle -------------------------------------------------------------

enum class Metric { DSC = 0, TPR, LTPR, LFDR, RVE };
inline constexpr std::array<Metric, 5> kAllMetrics{Metric::DSC, Metric::TPR, Metric::LTPR, Metric::LFDR,
                                                   Metric::RVE};
std::string to_string(Metric m);
bool higher_is_better(Metric m);

struct CaseMetrics {
    std::string case_id;
    std::array<std::optional<double>, 5> values;  // indexed by Metric
    std::optional<double> get(Metric m) const { return values[static_cast<std::size_t>(m)]; }
};

CaseMetrics evaluate_case(const std::string& case_id, const Mask& pred, const Mask& ref, const MetricsConfig& cfg);

// ---- ranking ----------------------------------------------------------------------

struct RankTable {
    std::vector<std::string> methods;
    std::vector<std::array<double, 5>> means;
    std::vector<std::array<double, 5>> ranks;
    std::vector<double> rs;
};

/// Ranks methods per metric (DSC/TPR/LTPR descending, LFDR/RVE ascending;
/// ties share the mean rank) and averages the five ranks into RS.
/// Throws std::invalid_argument for fewer than two methods or a non-finite mean.
RankTable rank_score(const std::vector<std::string>& methods, const std::vector<std::array<double, 5>>& means);

/// Average ranks, 1 = best. `descending` ranks larger values first.
std::vector<double> average_ranks(std::span<const double> values, bool descending);

// ---- classifiers and statistics -------------------------------------------------------

/// Fraction of rows whose argmax matches the true domain. `posteriors` is
/// row-major [n, n_domains]. Throws on an empty batch.
double classifier_accuracy(std::span<const double> posteriors, std::size_t n_domains, std::span<const int> truth);

/// Two-sided Wilcoxon signed-rank p-value for paired samples. Zero
/// differences are dropped; exact null distribution (with midranks) for up to
/// 25 non-zero pairs, normal approximation with continuity and tie
/// correction beyond. Returns 1 when every difference is zero.
double wilcoxon_signed_rank(std::span<const double> a, std::span<const double> b);

struct Comparison {
    double p_raw = 1.0;
    double p_adjusted = 1.0;
    bool significant = false;
};

/// Wilcoxon with Bonferroni adjustment min(1, p * n_methods). Needs n >= 6 pairs.
Comparison compare_methods(std::span<const double> a, std::span<const double> b, int n_methods, double alpha);

struct BootstrapCI {
    double mean = 0.0;
    double low = 0.0;
    double high = 0.0;
};

/// Percentile bootstrap (2.5 / 97.5) of the mean. Deterministic for a seed.
BootstrapCI bootstrap_ci(std::span<const double> values, int resamples, std::uint64_t seed);

double mean(std::span<const double> v);
/// Sample standard deviation (n - 1); 0 for fewer than two values.
double stddev(std::span<const double> v);

}  // namespace msu::metrics
