#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

namespace msu {

using Shape3 = std::array<std::int64_t, 3>;  // (depth, height, width), width fastest

inline std::int64_t voxel_count(const Shape3& s) { return s[0] * s[1] * s[2]; }

// Dense 3D field stored in C order.
template <typename T>
struct Grid3 {
    Shape3 shape{0, 0, 0};
    std::vector<T> data;

    Grid3() = default;
    explicit Grid3(Shape3 s, T fill = T{})
        : shape(s), data(static_cast<std::size_t>(voxel_count(s)), fill) {}

    std::size_t size() const { return data.size(); }
    bool empty() const { return data.empty(); }

    std::size_t index(std::int64_t z, std::int64_t y, std::int64_t x) const {
        return static_cast<std::size_t>((z * shape[1] + y) * shape[2] + x);
    }
    T& at(std::int64_t z, std::int64_t y, std::int64_t x) { return data[index(z, y, x)]; }
    const T& at(std::int64_t z, std::int64_t y, std::int64_t x) const { return data[index(z, y, x)]; }
    bool contains(std::int64_t z, std::int64_t y, std::int64_t x) const {
        return z >= 0 && y >= 0 && x >= 0 && z < shape[0] && y < shape[1] && x < shape[2];
    }

    bool operator==(const Grid3&) const = default;
};

using Image = Grid3<float>;
using Mask = Grid3<std::uint8_t>;

/// Ordered, unique domain labels. The position of a label is the class index
/// of every domain classifier for the lifetime of a run.
class DomainSet {
public:
    DomainSet() = default;
    explicit DomainSet(std::vector<std::string> names);

    std::size_t size() const { return names_.size(); }
    const std::string& name(std::size_t i) const { return names_.at(i); }
    const std::vector<std::string>& names() const { return names_; }
    /// Throws std::out_of_range for an unknown label.
    int index_of(const std::string& name) const;
    bool contains(const std::string& name) const;

    bool operator==(const DomainSet&) const = default;

private:
    std::vector<std::string> names_;
};

struct VolumeSample {
    Image image;
    Mask label;
    int domain = 0;
    std::string case_id;
};

enum class ScheduleMode { SelfSupervised, FixedLur };

std::string to_string(ScheduleMode m);
ScheduleMode schedule_mode_from_string(const std::string& s);

// Probabilities and parameter ranges for the eight augmentation steps, in
// application order. Ranges are [lo, hi] sampled uniformly.
struct AugmentationConfig {
    double p_rotate_scale = 0.3;
    double rotation_deg = 15.0;
    std::array<double, 2> scale{0.85, 1.25};

    double p_noise = 0.2;
    double noise_sigma_max = 0.1;

    double p_blur = 0.2;
    std::array<double, 2> blur_sigma{0.5, 1.0};

    double p_brightness = 0.2;
    std::array<double, 2> brightness{0.75, 1.25};

    double p_contrast = 0.2;
    std::array<double, 2> contrast{0.75, 1.25};

    double p_gamma = 0.2;
    std::array<double, 2> gamma{0.7, 1.5};

    double p_lowres = 0.2;
    std::array<double, 2> lowres_zoom{0.5, 1.0};

    double p_mirror = 0.5;  // per axis

    static AugmentationConfig disabled();
    bool operator==(const AugmentationConfig&) const = default;
};

struct OptimConfig {
    double seg_lr = 1e-2;
    double seg_momentum = 0.99;
    double seg_weight_decay = 3e-5;
    double poly_exponent = 0.9;
    double classifier_lr = 1e-3;
    double unlearn_lr = 1e-4;
    bool operator==(const OptimConfig&) const = default;
};

struct RunConfig {
    int encoder_depth = 6;
    Shape3 patch_size{128, 128, 128};
    int base_channels = 32;
    int max_channels = 320;

    int epochs = 100;         // e_t
    int warmup_epochs = 10;   // e_w
    int iterations_per_epoch = 50;

    double tolerance = 0.05;  // Tol
    int patience = 10;        // Pat, in iterations
    int accuracy_window = 10; // W: running-mean length for Acc^i

    ScheduleMode schedule_mode = ScheduleMode::SelfSupervised;
    std::pair<int, int> lur{1, 1};  // (learn_steps, unlearn_steps), fixed_lur only
    std::vector<int> unlearn_stages{4, 5, 6};

    int batch_size = 8;
    std::uint64_t seed = 0;

    OptimConfig optim;
    AugmentationConfig augmentation;

    double foreground_fraction = 0.5;  // share of patches centred on a label voxel
    int validation_every = 1;
    bool validation_mirroring = true;
    int threads = 1;

    bool operator==(const RunConfig&) const = default;
};

/// Defaults for a given encoder depth: warm-up = 10% of total epochs and the
/// bottom three stages unlearned.
RunConfig default_config(int encoder_depth = 6);

enum class ConfigErrorKind {
    TooFewDomains,
    DepthTooSmall,
    PatchNotDivisible,
    NonPositiveChannels,
    NonPositiveEpochs,
    WarmupExceedsTotal,
    NonPositiveIterations,
    ToleranceOutOfRange,
    NonPositivePatience,
    NonPositiveWindow,
    NonPositiveBatch,
    BatchNotDivisible,
    UnlearnStageOutOfRange,
    InvalidLur,
    InvalidProbability,
};

std::string to_string(ConfigErrorKind k);

class ConfigError : public std::invalid_argument {
public:
    ConfigError(ConfigErrorKind kind, const std::string& what)
        : std::invalid_argument(to_string(kind) + ": " + what), kind_(kind) {}
    ConfigErrorKind kind() const { return kind_; }

private:
    ConfigErrorKind kind_;
};

/// Returns `cfg` unchanged when every invariant holds against `domains`,
/// otherwise throws ConfigError naming the first violated invariant.
RunConfig validate_config(const RunConfig& cfg, const DomainSet& domains);

/// Upper-bound accuracy 1/N_d + tol. Throws ConfigError for tol outside
/// [0, 1 - 1/N_d].
double uba(std::size_t n_domains, double tol);
inline double uba(const DomainSet& domains, double tol) { return uba(domains.size(), tol); }

/// Spatial extent of encoder stage `stage` (1-based) for a patch.
Shape3 stage_extent(const Shape3& patch, int stage);

void to_json(nlohmann::json& j, const AugmentationConfig& a);
void from_json(const nlohmann::json& j, AugmentationConfig& a);
void to_json(nlohmann::json& j, const OptimConfig& o);
void from_json(const nlohmann::json& j, OptimConfig& o);
void to_json(nlohmann::json& j, const RunConfig& c);
void from_json(const nlohmann::json& j, RunConfig& c);

RunConfig load_config(const std::filesystem::path& path);
void save_config(const RunConfig& cfg, const std::filesystem::path& path);

/// Writes `contents` to a sibling temp file and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);

}  // namespace msu
