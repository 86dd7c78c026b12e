#include "msunlearn/core.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

namespace msu {

DomainSet::DomainSet(std::vector<std::string> names) : names_(std::move(names)) {
    if (names_.empty()) throw std::invalid_argument("DomainSet: no domains");
    std::set<std::string> seen;
    for (const auto& n : names_) {
        if (n.empty()) throw std::invalid_argument("DomainSet: empty domain label");
        if (!seen.insert(n).second) throw std::invalid_argument("DomainSet: duplicate domain '" + n + "'");
    }
}

int DomainSet::index_of(const std::string& name) const {
    auto it = std::find(names_.begin(), names_.end(), name);
    if (it == names_.end()) throw std::out_of_range("unknown domain '" + name + "'");
    return static_cast<int>(it - names_.begin());
}

bool DomainSet::contains(const std::string& name) const {
    return std::find(names_.begin(), names_.end(), name) != names_.end();
}

std::string to_string(ScheduleMode m) {
    return m == ScheduleMode::SelfSupervised ? "self_supervised" : "fixed_lur";
}

ScheduleMode schedule_mode_from_string(const std::string& s) {
    if (s == "self_supervised") return ScheduleMode::SelfSupervised;
    if (s == "fixed_lur") return ScheduleMode::FixedLur;
    throw std::invalid_argument("unknown schedule_mode '" + s + "'");
}

AugmentationConfig AugmentationConfig::disabled() {
    AugmentationConfig a;
    a.p_rotate_scale = a.p_noise = a.p_blur = a.p_brightness = 0.0;
    a.p_contrast = a.p_gamma = a.p_lowres = a.p_mirror = 0.0;
    return a;
}

RunConfig default_config(int encoder_depth) {
    RunConfig c;
    c.encoder_depth = encoder_depth;
    c.warmup_epochs = std::max(1, c.epochs / 10);
    c.unlearn_stages.clear();
    for (int s = std::max(1, encoder_depth - 2); s <= encoder_depth; ++s) c.unlearn_stages.push_back(s);
    return c;
}

std::string to_string(ConfigErrorKind k) {
    switch (k) {
        case ConfigErrorKind::TooFewDomains: return "too-few-domains";
        case ConfigErrorKind::DepthTooSmall: return "depth-too-small";
        case ConfigErrorKind::PatchNotDivisible: return "patch-not-divisible";
        case ConfigErrorKind::NonPositiveChannels: return "non-positive-channels";
        case ConfigErrorKind::NonPositiveEpochs: return "non-positive-epochs";
        case ConfigErrorKind::WarmupExceedsTotal: return "warm-up-exceeds-total";
        case ConfigErrorKind::NonPositiveIterations: return "non-positive-iterations";
        case ConfigErrorKind::ToleranceOutOfRange: return "tolerance-out-of-range";
        case ConfigErrorKind::NonPositivePatience: return "non-positive-patience";
        case ConfigErrorKind::NonPositiveWindow: return "non-positive-window";
        case ConfigErrorKind::NonPositiveBatch: return "non-positive-batch";
        case ConfigErrorKind::BatchNotDivisible: return "batch-not-divisible-by-domains";
        case ConfigErrorKind::UnlearnStageOutOfRange: return "unlearn-stage-out-of-range";
        case ConfigErrorKind::InvalidLur: return "invalid-lur";
        case ConfigErrorKind::InvalidProbability: return "invalid-probability";
    }
    return "unknown";
}

namespace {

void check_probability(double p, const char* name) {
    if (!(p >= 0.0 && p <= 1.0))
        throw ConfigError(ConfigErrorKind::InvalidProbability, std::string(name) + " must lie in [0,1]");
}

}  // namespace

RunConfig validate_config(const RunConfig& cfg, const DomainSet& domains) {
    using K = ConfigErrorKind;
    const auto n_d = domains.size();
    if (n_d < 2) throw ConfigError(K::TooFewDomains, "unlearning needs at least 2 domains");
    if (cfg.encoder_depth < 2) throw ConfigError(K::DepthTooSmall, "encoder_depth must be >= 2");

    const std::int64_t factor = std::int64_t{1} << (cfg.encoder_depth - 1);
    for (auto p : cfg.patch_size) {
        if (p <= 0 || p % factor != 0) {
            throw ConfigError(K::PatchNotDivisible, "patch extent " + std::to_string(p) +
                                                        " is not a positive multiple of " + std::to_string(factor));
        }
    }
    if (cfg.base_channels <= 0 || cfg.max_channels < cfg.base_channels)
        throw ConfigError(K::NonPositiveChannels, "base_channels must be > 0 and <= max_channels");
    if (cfg.epochs <= 0) throw ConfigError(K::NonPositiveEpochs, "epochs must be > 0");
    if (cfg.warmup_epochs < 0 || cfg.warmup_epochs > cfg.epochs)
        throw ConfigError(K::WarmupExceedsTotal, "warmup_epochs must lie in [0, epochs]");
    if (cfg.iterations_per_epoch <= 0)
        throw ConfigError(K::NonPositiveIterations, "iterations_per_epoch must be > 0");

    const double tol_max = 1.0 - 1.0 / static_cast<double>(n_d);
    if (!(cfg.tolerance >= 0.0 && cfg.tolerance <= tol_max)) {
        std::ostringstream os;
        os << "tolerance " << cfg.tolerance << " outside [0, " << tol_max << "]";
        throw ConfigError(K::ToleranceOutOfRange, os.str());
    }
    if (cfg.patience <= 0) throw ConfigError(K::NonPositivePatience, "patience must be > 0");
    if (cfg.accuracy_window <= 0) throw ConfigError(K::NonPositiveWindow, "accuracy_window must be > 0");

    if (cfg.batch_size <= 0) throw ConfigError(K::NonPositiveBatch, "batch_size must be > 0");
    if (cfg.batch_size % static_cast<int>(n_d) != 0) {
        throw ConfigError(K::BatchNotDivisible, "batch_size " + std::to_string(cfg.batch_size) +
                                                    " not divisible by " + std::to_string(n_d) + " domains");
    }

    std::set<int> stages;
    for (int s : cfg.unlearn_stages) {
        if (s < 1 || s > cfg.encoder_depth || !stages.insert(s).second)
            throw ConfigError(K::UnlearnStageOutOfRange, "unlearn stage " + std::to_string(s) + " invalid");
    }
    if (cfg.schedule_mode == ScheduleMode::FixedLur && (cfg.lur.first < 1 || cfg.lur.second < 1))
        throw ConfigError(K::InvalidLur, "fixed_lur needs learn_steps >= 1 and unlearn_steps >= 1");

    const auto& a = cfg.augmentation;
    check_probability(a.p_rotate_scale, "p_rotate_scale");
    check_probability(a.p_noise, "p_noise");
    check_probability(a.p_blur, "p_blur");
    check_probability(a.p_brightness, "p_brightness");
    check_probability(a.p_contrast, "p_contrast");
    check_probability(a.p_gamma, "p_gamma");
    check_probability(a.p_lowres, "p_lowres");
    check_probability(a.p_mirror, "p_mirror");
    check_probability(cfg.foreground_fraction, "foreground_fraction");
    return cfg;
}

double uba(std::size_t n_domains, double tol) {
    if (n_domains < 1) throw ConfigError(ConfigErrorKind::TooFewDomains, "no domains");
    const double chance = 1.0 / static_cast<double>(n_domains);
    if (!(tol >= 0.0 && tol <= 1.0 - chance))
        throw ConfigError(ConfigErrorKind::ToleranceOutOfRange, "tolerance outside [0, 1 - 1/N_d]");
    return chance + tol;
}

Shape3 stage_extent(const Shape3& patch, int stage) {
    const std::int64_t f = std::int64_t{1} << (stage - 1);
    return {patch[0] / f, patch[1] / f, patch[2] / f};
}

// ---- serialization ---------------------------------------------------------

void to_json(nlohmann::json& j, const AugmentationConfig& a) {
    j = {{"p_rotate_scale", a.p_rotate_scale}, {"rotation_deg", a.rotation_deg}, {"scale", a.scale},
         {"p_noise", a.p_noise}, {"noise_sigma_max", a.noise_sigma_max},
         {"p_blur", a.p_blur}, {"blur_sigma", a.blur_sigma},
         {"p_brightness", a.p_brightness}, {"brightness", a.brightness},
         {"p_contrast", a.p_contrast}, {"contrast", a.contrast},
         {"p_gamma", a.p_gamma}, {"gamma", a.gamma},
         {"p_lowres", a.p_lowres}, {"lowres_zoom", a.lowres_zoom},
         {"p_mirror", a.p_mirror}};
}

void from_json(const nlohmann::json& j, AugmentationConfig& a) {
    AugmentationConfig d;
    a.p_rotate_scale = j.value("p_rotate_scale", d.p_rotate_scale);
    a.rotation_deg = j.value("rotation_deg", d.rotation_deg);
    a.scale = j.value("scale", d.scale);
    a.p_noise = j.value("p_noise", d.p_noise);
    a.noise_sigma_max = j.value("noise_sigma_max", d.noise_sigma_max);
    a.p_blur = j.value("p_blur", d.p_blur);
    a.blur_sigma = j.value("blur_sigma", d.blur_sigma);
    a.p_brightness = j.value("p_brightness", d.p_brightness);
    a.brightness = j.value("brightness", d.brightness);
    a.p_contrast = j.value("p_contrast", d.p_contrast);
    a.contrast = j.value("contrast", d.contrast);
    a.p_gamma = j.value("p_gamma", d.p_gamma);
    a.gamma = j.value("gamma", d.gamma);
    a.p_lowres = j.value("p_lowres", d.p_lowres);
    a.lowres_zoom = j.value("lowres_zoom", d.lowres_zoom);
    a.p_mirror = j.value("p_mirror", d.p_mirror);
}

void to_json(nlohmann::json& j, const OptimConfig& o) {
    j = {{"seg_lr", o.seg_lr}, {"seg_momentum", o.seg_momentum}, {"seg_weight_decay", o.seg_weight_decay},
         {"poly_exponent", o.poly_exponent}, {"classifier_lr", o.classifier_lr}, {"unlearn_lr", o.unlearn_lr}};
}

void from_json(const nlohmann::json& j, OptimConfig& o) {
    OptimConfig d;
    o.seg_lr = j.value("seg_lr", d.seg_lr);
    o.seg_momentum = j.value("seg_momentum", d.seg_momentum);
    o.seg_weight_decay = j.value("seg_weight_decay", d.seg_weight_decay);
    o.poly_exponent = j.value("poly_exponent", d.poly_exponent);
    o.classifier_lr = j.value("classifier_lr", d.classifier_lr);
    o.unlearn_lr = j.value("unlearn_lr", d.unlearn_lr);
}

void to_json(nlohmann::json& j, const RunConfig& c) {
    j = {{"encoder_depth", c.encoder_depth},
         {"patch_size", c.patch_size},
         {"base_channels", c.base_channels},
         {"max_channels", c.max_channels},
         {"epochs", c.epochs},
         {"warmup_epochs", c.warmup_epochs},
         {"iterations_per_epoch", c.iterations_per_epoch},
         {"tolerance", c.tolerance},
         {"patience", c.patience},
         {"accuracy_window", c.accuracy_window},
         {"schedule_mode", to_string(c.schedule_mode)},
         {"lur", {c.lur.first, c.lur.second}},
         {"unlearn_stages", c.unlearn_stages},
         {"batch_size", c.batch_size},
         {"seed", c.seed},
         {"optim", c.optim},
         {"augmentation", c.augmentation},
         {"foreground_fraction", c.foreground_fraction},
         {"validation_every", c.validation_every},
         {"validation_mirroring", c.validation_mirroring},
         {"threads", c.threads}};
}

void from_json(const nlohmann::json& j, RunConfig& c) {
    const int depth = j.value("encoder_depth", 6);
    RunConfig d = default_config(depth);
    c.encoder_depth = depth;
    if (j.contains("patch_size")) {
        const auto& p = j.at("patch_size");
        if (p.is_number_integer()) {
            const auto v = p.get<std::int64_t>();
            c.patch_size = {v, v, v};
        } else {
            c.patch_size = p.get<Shape3>();
        }
    } else {
        c.patch_size = d.patch_size;
    }
    c.base_channels = j.value("base_channels", d.base_channels);
    c.max_channels = j.value("max_channels", d.max_channels);
    c.epochs = j.value("epochs", d.epochs);
    c.warmup_epochs = j.contains("warmup_epochs") ? j.at("warmup_epochs").get<int>() : std::max(1, c.epochs / 10);
    c.iterations_per_epoch = j.value("iterations_per_epoch", d.iterations_per_epoch);
    c.tolerance = j.value("tolerance", d.tolerance);
    c.patience = j.value("patience", d.patience);
    c.accuracy_window = j.value("accuracy_window", d.accuracy_window);
    c.schedule_mode = schedule_mode_from_string(j.value("schedule_mode", to_string(d.schedule_mode)));
    if (j.contains("lur")) {
        const auto& l = j.at("lur");
        if (!l.is_array() || l.size() != 2) throw std::invalid_argument("lur must be [learn_steps, unlearn_steps]");
        c.lur = {l[0].get<int>(), l[1].get<int>()};
    } else {
        c.lur = d.lur;
    }
    c.unlearn_stages = j.value("unlearn_stages", d.unlearn_stages);
    c.batch_size = j.value("batch_size", d.batch_size);
    c.seed = j.value("seed", d.seed);
    c.optim = j.value("optim", d.optim);
    c.augmentation = j.value("augmentation", d.augmentation);
    c.foreground_fraction = j.value("foreground_fraction", d.foreground_fraction);
    c.validation_every = j.value("validation_every", d.validation_every);
    c.validation_mirroring = j.value("validation_mirroring", d.validation_mirroring);
    c.threads = j.value("threads", d.threads);
}

RunConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config " + path.string());
    return nlohmann::json::parse(in).get<RunConfig>();
}

void save_config(const RunConfig& cfg, const std::filesystem::path& path) {
    write_file_atomic(path, nlohmann::json(cfg).dump(2) + "\n");
}

void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write " + tmp.string());
        out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
        out.flush();
        if (!out) throw std::runtime_error("write failed for " + tmp.string() + " (disk full?)");
    }
    std::filesystem::rename(tmp, path);
}

}  // namespace msu
