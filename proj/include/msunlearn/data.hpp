#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "msunlearn/core.hpp"

namespace msu {

// ---- manifest --------------------------------------------------------------

enum class Split { Train, Val, Test };
std::string to_string(Split s);
Split split_from_string(const std::string& s);

struct ManifestEntry {
    std::string case_id;
    std::filesystem::path image;
    std::filesystem::path label;
    std::string domain;
    Split split = Split::Train;
};

/// Domain labels come from the manifest, never from file names.
struct DatasetManifest {
    DomainSet domains;
    std::vector<ManifestEntry> entries;

    std::vector<ManifestEntry> select(Split s) const;
};

/// Throws std::invalid_argument if an entry names an unknown domain or if the
/// train split cannot fill balanced batches of `batch_size`.
void validate_manifest(const DatasetManifest& m, int batch_size);

/// Relative paths in the file are resolved against the manifest's directory.
DatasetManifest load_manifest(const std::filesystem::path& path);
/// Paths under `path`'s directory are stored relative to it.
void save_manifest(const DatasetManifest& m, const std::filesystem::path& path);

/// Reads one entry's image and label volumes (images rescaled to [0,1]).
VolumeSample load_sample(const ManifestEntry& e, const DomainSet& domains);

// ---- preprocessing -----------------------------------------------------------

/// Linear min-max rescale to [0,1]. Throws std::invalid_argument on constant input.
Image rescale_intensity(const Image& raw);

/// Centre crop and/or zero pad each axis independently to `target`.
template <typename T>
Grid3<T> center_crop_or_pad(const Grid3<T>& in, const Shape3& target) {
    Grid3<T> out(target);
    std::array<std::int64_t, 3> src0{}, dst0{}, len{};
    for (int a = 0; a < 3; ++a) {
        if (in.shape[a] >= target[a]) {
            src0[a] = (in.shape[a] - target[a]) / 2;
            dst0[a] = 0;
            len[a] = target[a];
        } else {
            src0[a] = 0;
            dst0[a] = (target[a] - in.shape[a]) / 2;
            len[a] = in.shape[a];
        }
    }
    for (std::int64_t z = 0; z < len[0]; ++z)
        for (std::int64_t y = 0; y < len[1]; ++y)
            for (std::int64_t x = 0; x < len[2]; ++x)
                out.at(dst0[0] + z, dst0[1] + y, dst0[2] + x) = in.at(src0[0] + z, src0[1] + y, src0[2] + x);
    return out;
}

/// Rescale to [0,1] then centre crop/pad. Tissue contrast is otherwise untouched.
Image preprocess_minimal(const Image& raw, const Shape3& target_shape);

// ---- synthetic multi-domain data ------------------------------------------------

struct SyntheticDomainSpec {
    std::string name;
    double bias_field_amplitude = 0.1;  // relative amplitude of the multiplicative field
    double noise_sigma = 0.02;          // additive Gaussian noise, before rescaling
    double gamma = 1.0;
    std::array<int, 2> lesion_count_range{2, 5};
    std::array<double, 2> lesion_radius_range{1.5, 3.5};  // voxels, per semi-axis

    bool same_appearance(const SyntheticDomainSpec& o) const;
};

/// Shipped defaults: identical lesion statistics, appearance interpolated
/// between a clean scanner and a noisy, strongly biased, high-gamma one.
std::vector<SyntheticDomainSpec> default_domain_specs(std::size_t n_domains);

/// Smooth background + hyperintense ellipsoid lesions (the label), then the
/// domain's bias field, gamma and noise, then rescale to [0,1]. Sample
/// ordering is domain-major; case ids are "<domain>_<index>".
std::vector<VolumeSample> generate_synthetic(std::span<const SyntheticDomainSpec> specs, int n_per_domain,
                                             const Shape3& shape, std::uint64_t seed);

// ---- balanced batching ---------------------------------------------------------

/// Emits batches holding exactly batch_size / N_d items of every domain.
/// Each domain walks its own seeded permutation and reshuffles when
/// exhausted, so small domains cycle while large ones are still unrolling.
class BalancedBatchSampler {
public:
    BalancedBatchSampler(std::span<const int> domain_of_item, std::size_t n_domains, int batch_size,
                         std::uint64_t seed);

    /// Item indices, grouped by domain in domain order.
    std::vector<std::size_t> next();

    int per_domain() const { return per_domain_; }
    /// Batches needed for the largest domain to be visited once.
    std::size_t batches_per_epoch() const;

    nlohmann::json state() const;
    void restore(const nlohmann::json& s);

private:
    void reshuffle(std::size_t d);

    std::vector<std::vector<std::size_t>> items_;  // per domain, fixed
    std::vector<std::vector<std::size_t>> order_;  // per domain, current permutation
    std::vector<std::size_t> cursor_;
    int per_domain_ = 0;
    std::mt19937_64 rng_;
};

BalancedBatchSampler balanced_batches(const DatasetManifest& manifest, int batch_size, std::uint64_t seed);

// ---- patches and augmentation ----------------------------------------------------

/// Random patch; with probability `foreground_fraction` it is centred on a
/// random label voxel (clamped to valid positions). Volumes smaller than the
/// patch are zero padded first.
VolumeSample extract_patch(const VolumeSample& s, const Shape3& patch, double foreground_fraction,
                           std::mt19937_64& rng);

namespace aug {

/// Joint rotation (radians, about axes 0,1,2 applied in that order) and
/// isotropic scaling about the volume centre. Trilinear for the image,
/// nearest neighbour for the label; outside samples are zero.
void rotate_scale(Image& img, Mask& label, const std::array<double, 3>& angles, double scale);
void add_gaussian_noise(Image& img, double sigma, std::mt19937_64& rng);
void gaussian_blur(Image& img, double sigma);
void brightness(Image& img, double factor);
/// Scales around the mean and clips back to the original range.
void contrast(Image& img, double factor);
/// Gamma on the range-normalized image; the range is preserved.
void gamma(Image& img, double g);
/// Nearest-neighbour downsample by `zoom` (< 1) and trilinear upsample back.
void simulate_low_resolution(Image& img, double zoom);
template <typename T>
void mirror(Grid3<T>& g, int axis) {
    Grid3<T> out(g.shape);
    for (std::int64_t z = 0; z < g.shape[0]; ++z)
        for (std::int64_t y = 0; y < g.shape[1]; ++y)
            for (std::int64_t x = 0; x < g.shape[2]; ++x) {
                std::int64_t zz = z, yy = y, xx = x;
                if (axis == 0) zz = g.shape[0] - 1 - z;
                if (axis == 1) yy = g.shape[1] - 1 - y;
                if (axis == 2) xx = g.shape[2] - 1 - x;
                out.at(z, y, x) = g.at(zz, yy, xx);
            }
    g = std::move(out);
}

}  // namespace aug

/// The eight-step pipeline: rotation+scaling, noise, blur, brightness,
/// contrast, gamma, low resolution, mirroring. Each step fires
/// independently with its probability. Out-of-range parameters are clamped.
VolumeSample augment(const VolumeSample& sample, const AugmentationConfig& cfg, std::mt19937_64& rng);

}  // namespace msu
