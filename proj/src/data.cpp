#include "msunlearn/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

#include "msunlearn/nifti.hpp"

namespace msu {

// ---- manifest --------------------------------------------------------------

std::string to_string(Split s) {
    switch (s) {
        case Split::Train: return "train";
        case Split::Val: return "val";
        case Split::Test: return "test";
    }
    return "train";
}

Split split_from_string(const std::string& s) {
    if (s == "train") return Split::Train;
    if (s == "val") return Split::Val;
    if (s == "test") return Split::Test;
    throw std::invalid_argument("unknown split '" + s + "'");
}

std::vector<ManifestEntry> DatasetManifest::select(Split s) const {
    std::vector<ManifestEntry> out;
    std::copy_if(entries.begin(), entries.end(), std::back_inserter(out),
                 [s](const ManifestEntry& e) { return e.split == s; });
    return out;
}

void validate_manifest(const DatasetManifest& m, int batch_size) {
    const auto n_d = m.domains.size();
    if (n_d == 0) throw std::invalid_argument("manifest lists no domains");
    std::vector<int> train_count(n_d, 0);
    std::set<std::string> ids;
    for (const auto& e : m.entries) {
        if (!m.domains.contains(e.domain))
            throw std::invalid_argument("case '" + e.case_id + "' has unknown domain '" + e.domain + "'");
        if (!ids.insert(e.case_id).second) throw std::invalid_argument("duplicate case_id '" + e.case_id + "'");
        if (e.split == Split::Train) ++train_count[static_cast<std::size_t>(m.domains.index_of(e.domain))];
    }
    if (batch_size % static_cast<int>(n_d) != 0)
        throw std::invalid_argument("batch_size not divisible by the number of domains");
    const int need = batch_size / static_cast<int>(n_d);
    for (std::size_t d = 0; d < n_d; ++d) {
        if (train_count[d] < need) {
            throw std::invalid_argument("domain '" + m.domains.name(d) + "' has " + std::to_string(train_count[d]) +
                                        " train cases, balanced batches need " + std::to_string(need));
        }
    }
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open manifest " + path.string());
    const auto j = nlohmann::json::parse(in);
    const auto base = path.parent_path();
    auto resolve = [&](const std::string& p) {
        std::filesystem::path fp(p);
        return fp.is_absolute() ? fp : base / fp;
    };
    DatasetManifest m;
    m.domains = DomainSet(j.at("domains").get<std::vector<std::string>>());
    for (const auto& c : j.at("cases")) {
        ManifestEntry e;
        e.case_id = c.at("case_id").get<std::string>();
        e.image = resolve(c.at("image").get<std::string>());
        e.label = resolve(c.at("label").get<std::string>());
        e.domain = c.at("domain").get<std::string>();
        e.split = split_from_string(c.value("split", "train"));
        m.entries.push_back(std::move(e));
    }
    return m;
}

void save_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
    const auto base = path.parent_path();
    auto rel = [&](const std::filesystem::path& p) {
        if (!base.empty() && p.is_absolute() == base.is_absolute()) {
            auto r = p.lexically_relative(base);
            if (!r.empty() && *r.begin() != "..") return r.generic_string();
        }
        return p.generic_string();
    };
    nlohmann::json cases = nlohmann::json::array();
    for (const auto& e : m.entries) {
        cases.push_back({{"case_id", e.case_id},
                         {"image", rel(e.image)},
                         {"label", rel(e.label)},
                         {"domain", e.domain},
                         {"split", to_string(e.split)}});
    }
    nlohmann::json j = {{"domains", m.domains.names()}, {"cases", cases}};
    write_file_atomic(path, j.dump(2) + "\n");
}

VolumeSample load_sample(const ManifestEntry& e, const DomainSet& domains) {
    VolumeSample s;
    s.case_id = e.case_id;
    s.domain = domains.index_of(e.domain);
    s.image = rescale_intensity(nifti::read_image(e.image));
    s.label = nifti::read_mask(e.label);
    if (s.image.shape != s.label.shape)
        throw std::invalid_argument("case '" + e.case_id + "': image and label shapes differ");
    return s;
}

// ---- preprocessing -----------------------------------------------------------

Image rescale_intensity(const Image& raw) {
    if (raw.empty()) throw std::invalid_argument("rescale_intensity: empty volume");
    const auto [mn_it, mx_it] = std::minmax_element(raw.data.begin(), raw.data.end());
    const double mn = *mn_it, mx = *mx_it;
    if (!(mx > mn)) throw std::invalid_argument("rescale_intensity: constant-intensity volume");
    Image out(raw.shape);
    const double inv = 1.0 / (mx - mn);
    for (std::size_t i = 0; i < raw.size(); ++i) out.data[i] = static_cast<float>((raw.data[i] - mn) * inv);
    return out;
}

Image preprocess_minimal(const Image& raw, const Shape3& target_shape) {
    return center_crop_or_pad(rescale_intensity(raw), target_shape);
}

// ---- synthetic -----------------------------------------------------------------

bool SyntheticDomainSpec::same_appearance(const SyntheticDomainSpec& o) const {
    return bias_field_amplitude == o.bias_field_amplitude && noise_sigma == o.noise_sigma && gamma == o.gamma &&
           lesion_count_range == o.lesion_count_range && lesion_radius_range == o.lesion_radius_range;
}

std::vector<SyntheticDomainSpec> default_domain_specs(std::size_t n_domains) {
    std::vector<SyntheticDomainSpec> specs;
    for (std::size_t k = 0; k < n_domains; ++k) {
        const double t = n_domains > 1 ? static_cast<double>(k) / static_cast<double>(n_domains - 1) : 0.0;
        SyntheticDomainSpec s;
        s.name = "scanner" + std::to_string(k);
        s.bias_field_amplitude = 0.05 + 0.45 * t;
        s.noise_sigma = 0.01 + 0.07 * t;
        s.gamma = 1.0 + 0.8 * t;
        specs.push_back(s);
    }
    return specs;
}

namespace {

struct Ellipsoid {
    std::array<double, 3> center;
    std::array<double, 3> radii;
};

VolumeSample synth_one(const SyntheticDomainSpec& spec, int domain, int index, const Shape3& shape,
                       std::uint64_t seed) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(domain), static_cast<std::uint32_t>(index)};
    std::mt19937_64 rng(seq);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * u01(rng); };

    const std::array<double, 3> c{(shape[0] - 1) / 2.0, (shape[1] - 1) / 2.0, (shape[2] - 1) / 2.0};
    const std::array<double, 3> half{shape[0] / 2.0, shape[1] / 2.0, shape[2] / 2.0};

    // Smooth tissue texture: a few random low-frequency cosines.
    struct Wave { std::array<double, 3> k; double phase; double amp; };
    std::vector<Wave> waves(3);
    for (auto& w : waves) {
        for (int a = 0; a < 3; ++a) w.k[a] = uniform(-1.0, 1.0) * std::numbers::pi / half[a];
        w.phase = uniform(0.0, 2.0 * std::numbers::pi);
        w.amp = uniform(0.02, 0.05);
    }

    // Lesions: label statistics depend only on the (shared) lesion ranges.
    const int n_lo = std::max(0, spec.lesion_count_range[0]);
    const int n_hi = std::max(n_lo, spec.lesion_count_range[1]);
    const int n_lesions = std::uniform_int_distribution<int>(n_lo, n_hi)(rng);
    std::vector<Ellipsoid> lesions(static_cast<std::size_t>(n_lesions));
    for (auto& e : lesions) {
        for (int a = 0; a < 3; ++a) {
            e.center[a] = c[a] + uniform(-0.45, 0.45) * half[a];
            e.radii[a] = uniform(spec.lesion_radius_range[0], spec.lesion_radius_range[1]);
        }
    }

    // Domain appearance: log-linear bias field along a random direction.
    std::array<double, 3> dir{};
    double norm = 0.0;
    for (auto& v : dir) {
        v = uniform(-1.0, 1.0);
        norm += v * v;
    }
    norm = std::sqrt(std::max(norm, 1e-12));
    for (auto& v : dir) v /= norm;

    VolumeSample s;
    s.domain = domain;
    s.case_id = spec.name + "_" + std::to_string(index);
    s.image = Image(shape);
    s.label = Mask(shape);
    std::normal_distribution<double> noise(0.0, spec.noise_sigma);

    for (std::int64_t z = 0; z < shape[0]; ++z) {
        for (std::int64_t y = 0; y < shape[1]; ++y) {
            for (std::int64_t x = 0; x < shape[2]; ++x) {
                const std::array<double, 3> p{static_cast<double>(z), static_cast<double>(y), static_cast<double>(x)};
                std::array<double, 3> r{};
                double head = 0.0;
                for (int a = 0; a < 3; ++a) {
                    r[a] = (p[a] - c[a]) / half[a];
                    head += (r[a] / 0.85) * (r[a] / 0.85);
                }
                double v = 0.0;
                if (head <= 1.0) {
                    v = 0.35;
                    for (const auto& w : waves) {
                        v += w.amp * std::cos(w.k[0] * p[0] + w.k[1] * p[1] + w.k[2] * p[2] + w.phase);
                    }
                }
                bool lesion = false;
                for (const auto& e : lesions) {
                    double q = 0.0;
                    for (int a = 0; a < 3; ++a) {
                        const double d = (p[a] - e.center[a]) / e.radii[a];
                        q += d * d;
                    }
                    if (q <= 1.0) {
                        lesion = true;
                        break;
                    }
                }
                if (lesion) v = 0.8;
                const double bias = std::exp(spec.bias_field_amplitude * (dir[0] * r[0] + dir[1] * r[1] + dir[2] * r[2]));
                v = std::pow(std::max(0.0, v * bias), spec.gamma);
                s.image.at(z, y, x) = static_cast<float>(v);
                s.label.at(z, y, x) = lesion ? 1 : 0;
            }
        }
    }
    // Noise is drawn in a second pass so its stream is independent of the geometry.
    for (auto& v : s.image.data) v = static_cast<float>(v + noise(rng));
    s.image = rescale_intensity(s.image);
    return s;
}

}  // namespace

std::vector<VolumeSample> generate_synthetic(std::span<const SyntheticDomainSpec> specs, int n_per_domain,
                                             const Shape3& shape, std::uint64_t seed) {
    if (specs.size() < 2) throw std::invalid_argument("generate_synthetic: at least 2 domains required");
    if (n_per_domain <= 0) throw std::invalid_argument("generate_synthetic: n_per_domain must be > 0");
    if (shape[0] <= 0 || shape[1] <= 0 || shape[2] <= 0) throw std::invalid_argument("generate_synthetic: bad shape");
    for (std::size_t i = 0; i < specs.size(); ++i) {
        const auto& s = specs[i];
        if (s.lesion_count_range[1] <= 0 && s.lesion_radius_range[1] <= 0.0) {
            throw std::invalid_argument("generate_synthetic: domain '" + s.name +
                                        "' requests zero lesions with zero radius (empty labels)");
        }
        if (s.lesion_count_range[1] > 0 && s.lesion_radius_range[1] <= 0.0)
            throw std::invalid_argument("generate_synthetic: domain '" + s.name + "' has a non-positive lesion radius");
        if (!(s.gamma > 0.0) || s.noise_sigma < 0.0)
            throw std::invalid_argument("generate_synthetic: domain '" + s.name + "' has invalid appearance parameters");
        for (std::size_t j = 0; j < i; ++j) {
            if (s.same_appearance(specs[j]))
                throw std::invalid_argument("generate_synthetic: domains '" + specs[j].name + "' and '" + s.name +
                                            "' are indistinguishable");
        }
    }
    std::vector<VolumeSample> out;
    out.reserve(specs.size() * static_cast<std::size_t>(n_per_domain));
    for (std::size_t d = 0; d < specs.size(); ++d)
        for (int i = 0; i < n_per_domain; ++i) out.push_back(synth_one(specs[d], static_cast<int>(d), i, shape, seed));
    return out;
}

// ---- balanced batching ---------------------------------------------------------

BalancedBatchSampler::BalancedBatchSampler(std::span<const int> domain_of_item, std::size_t n_domains,
                                           int batch_size, std::uint64_t seed)
    : items_(n_domains), order_(n_domains), cursor_(n_domains, 0), rng_(seed) {
    if (n_domains == 0) throw std::invalid_argument("BalancedBatchSampler: no domains");
    if (batch_size <= 0 || batch_size % static_cast<int>(n_domains) != 0)
        throw std::invalid_argument("BalancedBatchSampler: batch_size " + std::to_string(batch_size) +
                                    " not divisible by " + std::to_string(n_domains) + " domains");
    per_domain_ = batch_size / static_cast<int>(n_domains);
    for (std::size_t i = 0; i < domain_of_item.size(); ++i) {
        const int d = domain_of_item[i];
        if (d < 0 || static_cast<std::size_t>(d) >= n_domains)
            throw std::invalid_argument("BalancedBatchSampler: domain index out of range");
        items_[static_cast<std::size_t>(d)].push_back(i);
    }
    for (std::size_t d = 0; d < n_domains; ++d) {
        if (items_[d].empty()) throw std::invalid_argument("BalancedBatchSampler: domain " + std::to_string(d) + " is empty");
        reshuffle(d);
    }
}

void BalancedBatchSampler::reshuffle(std::size_t d) {
    order_[d] = items_[d];
    std::shuffle(order_[d].begin(), order_[d].end(), rng_);
    cursor_[d] = 0;
}

std::vector<std::size_t> BalancedBatchSampler::next() {
    std::vector<std::size_t> batch;
    batch.reserve(items_.size() * static_cast<std::size_t>(per_domain_));
    for (std::size_t d = 0; d < items_.size(); ++d) {
        for (int k = 0; k < per_domain_; ++k) {
            if (cursor_[d] == order_[d].size()) reshuffle(d);
            batch.push_back(order_[d][cursor_[d]++]);
        }
    }
    return batch;
}

std::size_t BalancedBatchSampler::batches_per_epoch() const {
    std::size_t largest = 0;
    for (const auto& v : items_) largest = std::max(largest, v.size());
    const auto per = static_cast<std::size_t>(per_domain_);
    return (largest + per - 1) / per;
}

nlohmann::json BalancedBatchSampler::state() const {
    std::ostringstream rng;
    rng << rng_;
    return {{"order", order_}, {"cursor", cursor_}, {"rng", rng.str()}};
}

void BalancedBatchSampler::restore(const nlohmann::json& s) {
    auto order = s.at("order").get<std::vector<std::vector<std::size_t>>>();
    auto cursor = s.at("cursor").get<std::vector<std::size_t>>();
    if (order.size() != items_.size() || cursor.size() != items_.size())
        throw std::invalid_argument("BalancedBatchSampler: state does not match the dataset");
    for (std::size_t d = 0; d < items_.size(); ++d) {
        if (order[d].size() != items_[d].size() || cursor[d] > order[d].size())
            throw std::invalid_argument("BalancedBatchSampler: state does not match the dataset");
    }
    order_ = std::move(order);
    cursor_ = std::move(cursor);
    std::istringstream rng(s.at("rng").get<std::string>());
    rng >> rng_;
}

BalancedBatchSampler balanced_batches(const DatasetManifest& manifest, int batch_size, std::uint64_t seed) {
    std::vector<int> domains;
    for (const auto& e : manifest.entries) {
        if (e.split == Split::Train) domains.push_back(manifest.domains.index_of(e.domain));
    }
    return BalancedBatchSampler(domains, manifest.domains.size(), batch_size, seed);
}

// ---- patches ---------------------------------------------------------------------

VolumeSample extract_patch(const VolumeSample& s, const Shape3& patch, double foreground_fraction,
                           std::mt19937_64& rng) {
    Shape3 padded = s.image.shape;
    for (int a = 0; a < 3; ++a) padded[a] = std::max(padded[a], patch[a]);
    const Image img = padded == s.image.shape ? s.image : center_crop_or_pad(s.image, padded);
    const Mask lab = padded == s.label.shape ? s.label : center_crop_or_pad(s.label, padded);

    std::uniform_real_distribution<double> u01(0.0, 1.0);
    std::array<std::int64_t, 3> origin{};
    bool placed = false;
    if (u01(rng) < foreground_fraction) {
        std::vector<std::size_t> fg;
        for (std::size_t i = 0; i < lab.size(); ++i)
            if (lab.data[i]) fg.push_back(i);
        if (!fg.empty()) {
            const auto idx = fg[std::uniform_int_distribution<std::size_t>(0, fg.size() - 1)(rng)];
            const std::int64_t x = static_cast<std::int64_t>(idx) % padded[2];
            const std::int64_t y = (static_cast<std::int64_t>(idx) / padded[2]) % padded[1];
            const std::int64_t z = static_cast<std::int64_t>(idx) / (padded[1] * padded[2]);
            const std::array<std::int64_t, 3> centre{z, y, x};
            for (int a = 0; a < 3; ++a)
                origin[a] = std::clamp<std::int64_t>(centre[a] - patch[a] / 2, 0, padded[a] - patch[a]);
            placed = true;
        }
    }
    if (!placed) {
        for (int a = 0; a < 3; ++a)
            origin[a] = std::uniform_int_distribution<std::int64_t>(0, padded[a] - patch[a])(rng);
    }

    VolumeSample out;
    out.domain = s.domain;
    out.case_id = s.case_id;
    out.image = Image(patch);
    out.label = Mask(patch);
    for (std::int64_t z = 0; z < patch[0]; ++z)
        for (std::int64_t y = 0; y < patch[1]; ++y)
            for (std::int64_t x = 0; x < patch[2]; ++x) {
                out.image.at(z, y, x) = img.at(origin[0] + z, origin[1] + y, origin[2] + x);
                out.label.at(z, y, x) = lab.at(origin[0] + z, origin[1] + y, origin[2] + x);
            }
    return out;
}

// ---- augmentation ----------------------------------------------------------------

namespace aug {
namespace {

double snap(double v) {
    const double r = std::round(v);
    return std::abs(v - r) < 1e-6 ? r : v;
}

float sample_trilinear(const Image& img, double z, double y, double x) {
    const std::int64_t z0 = static_cast<std::int64_t>(std::floor(z));
    const std::int64_t y0 = static_cast<std::int64_t>(std::floor(y));
    const std::int64_t x0 = static_cast<std::int64_t>(std::floor(x));
    const double fz = z - z0, fy = y - y0, fx = x - x0;
    double acc = 0.0;
    for (int dz = 0; dz <= 1; ++dz)
        for (int dy = 0; dy <= 1; ++dy)
            for (int dx = 0; dx <= 1; ++dx) {
                const double w = (dz ? fz : 1 - fz) * (dy ? fy : 1 - fy) * (dx ? fx : 1 - fx);
                if (w == 0.0) continue;
                const auto zz = z0 + dz, yy = y0 + dy, xx = x0 + dx;
                if (img.contains(zz, yy, xx)) acc += w * img.at(zz, yy, xx);
            }
    return static_cast<float>(acc);
}

float sample_clamped_trilinear(const Image& img, double z, double y, double x) {
    z = std::clamp(z, 0.0, static_cast<double>(img.shape[0] - 1));
    y = std::clamp(y, 0.0, static_cast<double>(img.shape[1] - 1));
    x = std::clamp(x, 0.0, static_cast<double>(img.shape[2] - 1));
    return sample_trilinear(img, z, y, x);
}

std::array<double, 2> ordered(std::array<double, 2> r, double floor_value) {
    if (r[0] > r[1]) std::swap(r[0], r[1]);
    r[0] = std::max(r[0], floor_value);
    r[1] = std::max(r[1], r[0]);
    return r;
}

}  // namespace

void rotate_scale(Image& img, Mask& label, const std::array<double, 3>& angles, double scale) {
    using Mat = std::array<std::array<double, 3>, 3>;
    auto mul = [](const Mat& a, const Mat& b) {
        Mat c{};
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j)
                for (int k = 0; k < 3; ++k) c[i][j] += a[i][k] * b[k][j];
        return c;
    };
    // Rotation about axis a acts on the plane of the other two axes.
    auto about = [](int axis, double t) {
        Mat m{};
        m[axis][axis] = 1.0;
        const int i = (axis + 1) % 3, j = (axis + 2) % 3;
        m[i][i] = std::cos(t);
        m[i][j] = -std::sin(t);
        m[j][i] = std::sin(t);
        m[j][j] = std::cos(t);
        return m;
    };
    const Mat rot = mul(about(2, angles[2]), mul(about(1, angles[1]), about(0, angles[0])));
    const Shape3 sh = img.shape;
    const std::array<double, 3> c{(sh[0] - 1) / 2.0, (sh[1] - 1) / 2.0, (sh[2] - 1) / 2.0};
    Image out_img(sh);
    Mask out_lab(sh);
    for (std::int64_t z = 0; z < sh[0]; ++z)
        for (std::int64_t y = 0; y < sh[1]; ++y)
            for (std::int64_t x = 0; x < sh[2]; ++x) {
                const std::array<double, 3> d{(z - c[0]) / scale, (y - c[1]) / scale, (x - c[2]) / scale};
                std::array<double, 3> src{};
                // Inverse rotation = transpose.
                for (int i = 0; i < 3; ++i)
                    src[i] = snap(c[i] + rot[0][i] * d[0] + rot[1][i] * d[1] + rot[2][i] * d[2]);
                out_img.at(z, y, x) = sample_trilinear(img, src[0], src[1], src[2]);
                const auto nz = static_cast<std::int64_t>(std::lround(src[0]));
                const auto ny = static_cast<std::int64_t>(std::lround(src[1]));
                const auto nx = static_cast<std::int64_t>(std::lround(src[2]));
                out_lab.at(z, y, x) = label.contains(nz, ny, nx) ? label.at(nz, ny, nx) : 0;
            }
    img = std::move(out_img);
    label = std::move(out_lab);
}

void add_gaussian_noise(Image& img, double sigma, std::mt19937_64& rng) {
    if (sigma <= 0.0) return;
    std::normal_distribution<double> n(0.0, sigma);
    for (auto& v : img.data) v = static_cast<float>(v + n(rng));
}

void gaussian_blur(Image& img, double sigma) {
    if (sigma <= 0.0) return;
    const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
    double sum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        k[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
        sum += k[static_cast<std::size_t>(i + radius)];
    }
    for (auto& v : k) v /= sum;
    const Shape3 sh = img.shape;
    for (int axis = 0; axis < 3; ++axis) {
        Image out(sh);
        for (std::int64_t z = 0; z < sh[0]; ++z)
            for (std::int64_t y = 0; y < sh[1]; ++y)
                for (std::int64_t x = 0; x < sh[2]; ++x) {
                    double acc = 0.0;
                    for (int i = -radius; i <= radius; ++i) {
                        std::array<std::int64_t, 3> p{z, y, x};
                        p[axis] = std::clamp<std::int64_t>(p[axis] + i, 0, sh[axis] - 1);
                        acc += k[static_cast<std::size_t>(i + radius)] * img.at(p[0], p[1], p[2]);
                    }
                    out.at(z, y, x) = static_cast<float>(acc);
                }
        img = std::move(out);
    }
}

void brightness(Image& img, double factor) {
    for (auto& v : img.data) v = static_cast<float>(v * factor);
}

void contrast(Image& img, double factor) {
    if (img.empty()) return;
    const double mean = std::accumulate(img.data.begin(), img.data.end(), 0.0) / static_cast<double>(img.size());
    const auto [mn, mx] = std::minmax_element(img.data.begin(), img.data.end());
    const float lo = *mn, hi = *mx;
    for (auto& v : img.data) v = std::clamp(static_cast<float>((v - mean) * factor + mean), lo, hi);
}

void gamma(Image& img, double g) {
    if (img.empty()) return;
    const auto [mn, mx] = std::minmax_element(img.data.begin(), img.data.end());
    const double lo = *mn, range = *mx - *mn;
    if (!(range > 0.0)) return;
    for (auto& v : img.data) v = static_cast<float>(std::pow((v - lo) / range, g) * range + lo);
}

void simulate_low_resolution(Image& img, double zoom) {
    if (zoom >= 1.0) return;
    const Shape3 sh = img.shape;
    Shape3 low{};
    std::array<double, 3> f{};
    for (int a = 0; a < 3; ++a) {
        low[a] = std::max<std::int64_t>(1, std::llround(sh[a] * zoom));
        f[a] = static_cast<double>(sh[a]) / static_cast<double>(low[a]);
    }
    Image small(low);
    for (std::int64_t z = 0; z < low[0]; ++z)
        for (std::int64_t y = 0; y < low[1]; ++y)
            for (std::int64_t x = 0; x < low[2]; ++x) {
                const auto sz = std::min<std::int64_t>(static_cast<std::int64_t>((z + 0.5) * f[0]), sh[0] - 1);
                const auto sy = std::min<std::int64_t>(static_cast<std::int64_t>((y + 0.5) * f[1]), sh[1] - 1);
                const auto sx = std::min<std::int64_t>(static_cast<std::int64_t>((x + 0.5) * f[2]), sh[2] - 1);
                small.at(z, y, x) = img.at(sz, sy, sx);
            }
    for (std::int64_t z = 0; z < sh[0]; ++z)
        for (std::int64_t y = 0; y < sh[1]; ++y)
            for (std::int64_t x = 0; x < sh[2]; ++x)
                img.at(z, y, x) = sample_clamped_trilinear(small, (z + 0.5) / f[0] - 0.5, (y + 0.5) / f[1] - 0.5,
                                                           (x + 0.5) / f[2] - 0.5);
}

}  // namespace aug

VolumeSample augment(const VolumeSample& sample, const AugmentationConfig& cfg, std::mt19937_64& rng) {
    if (sample.image.shape != sample.label.shape) throw std::invalid_argument("augment: image/label shape mismatch");
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    auto fires = [&](double p) { return u01(rng) < std::clamp(p, 0.0, 1.0); };
    auto draw = [&](std::array<double, 2> r, double floor_value) {
        r = aug::ordered(r, floor_value);
        return r[0] + (r[1] - r[0]) * u01(rng);
    };

    VolumeSample out = sample;
    if (fires(cfg.p_rotate_scale)) {
        const double max_rad = std::abs(cfg.rotation_deg) * std::numbers::pi / 180.0;
        std::array<double, 3> angles{};
        for (auto& a : angles) a = (2.0 * u01(rng) - 1.0) * max_rad;
        const double s = draw(cfg.scale, 0.1);
        aug::rotate_scale(out.image, out.label, angles, s);
    }
    if (fires(cfg.p_noise)) aug::add_gaussian_noise(out.image, u01(rng) * std::max(0.0, cfg.noise_sigma_max), rng);
    if (fires(cfg.p_blur)) aug::gaussian_blur(out.image, draw(cfg.blur_sigma, 0.0));
    if (fires(cfg.p_brightness)) aug::brightness(out.image, draw(cfg.brightness, 0.0));
    if (fires(cfg.p_contrast)) aug::contrast(out.image, draw(cfg.contrast, 0.0));
    if (fires(cfg.p_gamma)) aug::gamma(out.image, draw(cfg.gamma, 0.05));
    if (fires(cfg.p_lowres)) aug::simulate_low_resolution(out.image, std::min(1.0, draw(cfg.lowres_zoom, 0.1)));
    for (int axis = 0; axis < 3; ++axis) {
        if (fires(cfg.p_mirror)) {
            aug::mirror(out.image, axis);
            aug::mirror(out.label, axis);
        }
    }
    return out;
}

}  // namespace msu
