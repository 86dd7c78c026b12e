#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "msunlearn/metrics.hpp"

namespace msu::report {

// ---- evaluation of prediction directories --------------------------------------

struct MethodResult {
    std::string name;
    std::vector<metrics::CaseMetrics> cases;
};

/// Scores every predicted volume against the reference of the same file
/// stem. Throws std::runtime_error when a reference is missing or the
/// shapes differ.
MethodResult evaluate_directory(const std::string& name, const std::filesystem::path& pred_dir,
                                const std::filesystem::path& ref_dir, const metrics::MetricsConfig& cfg);

struct MetricSummary {
    std::size_t n = 0;  // cases with a defined value
    double mean = 0.0;
    double sd = 0.0;
    std::optional<metrics::BootstrapCI> ci;  // needs n >= 2
};

struct EvaluationReport {
    std::vector<MethodResult> methods;
    std::vector<std::array<MetricSummary, 5>> summary;  // per method
    std::optional<metrics::RankTable> ranks;           // two or more methods
    /// Method k (k >= 1) against method 0 per metric; absent below 6 pairs.
    std::vector<std::array<std::optional<metrics::Comparison>, 5>> versus_first;
    std::vector<std::string> warnings;
};

EvaluationReport build_evaluation(std::vector<MethodResult> methods, const metrics::MetricsConfig& cfg);

/// Columns: method,case_id,kind,DSC,TPR,LTPR,LFDR,RVE,RS. `kind` is one of
/// case, mean, sd, ci_low, ci_high, n, rank, p_raw, p_adjusted. Undefined
/// cells are empty.
std::string evaluation_csv(const EvaluationReport& r);
nlohmann::json evaluation_json(const EvaluationReport& r);

// ---- event-log summaries ----------------------------------------------------------

struct StageAccuracyRow {
    int stage = 0;
    std::optional<double> post_warmup;       // windowed training accuracy at the last warm-up step
    std::optional<double> post_unlearning;   // windowed training accuracy at the last step; n/a without unlearning
    std::optional<double> heldout_post_warmup;
    std::optional<double> heldout_final;
    int unlearn_steps = 0;
};

std::vector<StageAccuracyRow> stage_accuracy_table(const std::vector<nlohmann::json>& events);
std::string stage_accuracy_csv(const std::vector<StageAccuracyRow>& rows);

/// Reads "method,DSC,TPR,LTPR,LFDR,RVE" rows (header required).
std::vector<std::pair<std::string, std::array<double, 5>>> read_method_means_csv(const std::filesystem::path& path);
std::string rank_table_csv(const metrics::RankTable& t);

struct Series {
    std::string name;
    std::vector<std::pair<double, double>> points;
};

/// Minimal line chart as standalone SVG text.
std::string svg_line_plot(const std::string& title, const std::string& x_label, const std::string& y_label,
                          const std::vector<Series>& series);

struct ReportInputs {
    std::filesystem::path event_log;
    std::vector<std::filesystem::path> evaluations;  // JSON written by evaluation_json
    std::optional<std::filesystem::path> method_means_csv;
    std::filesystem::path out_dir;
};

/// Writes stage_accuracy.csv, accuracy.svg, loss.svg and, when at least two
/// methods are available, methods.csv with rank scores. Returns the files written.
std::vector<std::filesystem::path> write_report(const ReportInputs& in);

/// Fixed-precision number formatting shared by every CSV writer.
std::string fmt(double v);

}  // namespace msu::report
