#include "msunlearn/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <stdexcept>

namespace msu::metrics {

const std::array<std::array<int, 3>, 18>& neighborhood18() {
    static const auto offsets = [] {
        std::array<std::array<int, 3>, 18> o{};
        std::size_t n = 0;
        for (int dz = -1; dz <= 1; ++dz)
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    const int nonzero = (dz != 0) + (dy != 0) + (dx != 0);
                    if (nonzero == 1 || nonzero == 2) o[n++] = {dz, dy, dx};
                }
        return o;
    }();
    return offsets;
}

LesionStats label_components(const Mask& mask) {
    LesionStats out;
    out.labels = Grid3<std::int32_t>(mask.shape, 0);
    const auto& sh = mask.shape;
    const auto& nb = neighborhood18();
    std::deque<std::array<std::int64_t, 3>> queue;
    std::int32_t next_id = 0;
    for (std::int64_t z = 0; z < sh[0]; ++z)
        for (std::int64_t y = 0; y < sh[1]; ++y)
            for (std::int64_t x = 0; x < sh[2]; ++x) {
                if (!mask.at(z, y, x) || out.labels.at(z, y, x) != 0) continue;
                Component c;
                c.id = ++next_id;
                out.labels.at(z, y, x) = c.id;
                queue.push_back({z, y, x});
                while (!queue.empty()) {
                    const auto p = queue.front();
                    queue.pop_front();
                    c.voxels.push_back(mask.index(p[0], p[1], p[2]));
                    for (const auto& o : nb) {
                        const std::int64_t qz = p[0] + o[0], qy = p[1] + o[1], qx = p[2] + o[2];
                        if (!mask.contains(qz, qy, qx) || !mask.at(qz, qy, qx)) continue;
                        auto& l = out.labels.at(qz, qy, qx);
                        if (l == 0) {
                            l = c.id;
                            queue.push_back({qz, qy, qx});
                        }
                    }
                }
                std::sort(c.voxels.begin(), c.voxels.end());
                out.components.push_back(std::move(c));
            }
    return out;
}

VoxelCounts count_voxels(const Mask& pred, const Mask& ref) {
    if (pred.shape != ref.shape) throw std::invalid_argument("mask shapes differ");
    VoxelCounts c;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool p = pred.data[i] != 0, r = ref.data[i] != 0;
        if (p && r) ++c.tp;
        else if (p) ++c.fp;
        else if (r) ++c.fn;
        else ++c.tn;
    }
    return c;
}

double dsc(const Mask& pred, const Mask& ref) {
    const auto c = count_voxels(pred, ref);
    const auto denom = 2 * c.tp + c.fp + c.fn;
    if (denom == 0) return 1.0;
    return 2.0 * static_cast<double>(c.tp) / static_cast<double>(denom);
}

std::optional<double> tpr(const Mask& pred, const Mask& ref) {
    const auto c = count_voxels(pred, ref);
    if (c.tp + c.fn == 0) return std::nullopt;
    return static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
}

LesionMatch lesion_match(const LesionStats& pred, const LesionStats& ref, double t_iou) {
    if (pred.labels.shape != ref.labels.shape) throw std::invalid_argument("lesion_match: shapes differ");
    LesionMatch m;
    m.n_pred = static_cast<std::int64_t>(pred.count());
    m.n_ref = static_cast<std::int64_t>(ref.count());
    std::map<std::pair<int, int>, std::int64_t> inter;
    for (std::size_t i = 0; i < pred.labels.size(); ++i) {
        const int p = pred.labels.data[i], r = ref.labels.data[i];
        if (p > 0 && r > 0) ++inter[{p, r}];
    }
    m.iou.assign(pred.count(), std::vector<double>(ref.count(), 0.0));
    for (const auto& [key, n] : inter) {
        const auto pi = static_cast<std::size_t>(key.first - 1), ri = static_cast<std::size_t>(key.second - 1);
        const double uni = static_cast<double>(pred.components[pi].volume() + ref.components[ri].volume() - n);
        m.iou[pi][ri] = static_cast<double>(n) / uni;
    }
    for (std::size_t r = 0; r < ref.count(); ++r) {
        bool detected = false;
        for (std::size_t p = 0; p < pred.count() && !detected; ++p) detected = m.iou[p][r] >= t_iou;
        if (detected) ++m.ltp;
    }
    for (std::size_t p = 0; p < pred.count(); ++p) {
        const bool matched = std::any_of(m.iou[p].begin(), m.iou[p].end(), [&](double v) { return v >= t_iou; });
        if (!matched) ++m.lfp;
    }
    return m;
}

std::optional<double> ltpr(const LesionMatch& m) {
    if (m.n_ref == 0) return std::nullopt;
    return static_cast<double>(m.ltp) / static_cast<double>(m.n_ref);
}

double lfdr(const LesionMatch& m) {
    if (m.n_pred == 0) return 0.0;
    return static_cast<double>(m.lfp) / static_cast<double>(m.n_pred);
}

std::optional<double> rve(const Mask& pred, const Mask& ref) {
    if (pred.shape != ref.shape) throw std::invalid_argument("mask shapes differ");
    const auto vp = std::count_if(pred.data.begin(), pred.data.end(), [](auto v) { return v != 0; });
    const auto vr = std::count_if(ref.data.begin(), ref.data.end(), [](auto v) { return v != 0; });
    if (vr == 0) return std::nullopt;
    return std::abs(static_cast<double>(vp - vr)) / static_cast<double>(vr);
}

std::optional<double> ltpr(const Mask& pred, const Mask& ref, const MetricsConfig& cfg) {
    return ltpr(lesion_match(label_components(pred), label_components(ref), cfg.t_iou));
}

double lfdr(const Mask& pred, const Mask& ref, const MetricsConfig& cfg) {
    return lfdr(lesion_match(label_components(pred), label_components(ref), cfg.t_iou));
}

std::string to_string(Metric m) {
    switch (m) {
        case Metric::DSC: return "DSC";
        case Metric::TPR: return "TPR";
        case Metric::LTPR: return "LTPR";
        case Metric::LFDR: return "LFDR";
        case Metric::RVE: return "RVE";
    }
    return "?";
}

bool higher_is_better(Metric m) { return m == Metric::DSC || m == Metric::TPR || m == Metric::LTPR; }

CaseMetrics evaluate_case(const std::string& case_id, const Mask& pred, const Mask& ref, const MetricsConfig& cfg) {
    if (!(cfg.t_iou > 0.0 && cfg.t_iou <= 1.0)) throw std::invalid_argument("t_iou must lie in (0, 1]");
    CaseMetrics c;
    c.case_id = case_id;
    const auto match = lesion_match(label_components(pred), label_components(ref), cfg.t_iou);
    c.values[static_cast<std::size_t>(Metric::DSC)] = dsc(pred, ref);
    c.values[static_cast<std::size_t>(Metric::TPR)] = tpr(pred, ref);
    c.values[static_cast<std::size_t>(Metric::LTPR)] = ltpr(match);
    c.values[static_cast<std::size_t>(Metric::LFDR)] = lfdr(match);
    c.values[static_cast<std::size_t>(Metric::RVE)] = rve(pred, ref);
    return c;
}

std::vector<double> average_ranks(std::span<const double> values, bool descending) {
    const std::size_t n = values.size();
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        return descending ? values[a] > values[b] : values[a] < values[b];
    });
    std::vector<double> ranks(n);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && values[idx[j + 1]] == values[idx[i]]) ++j;
        const double r = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
        for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = r;
        i = j + 1;
    }
    return ranks;
}

RankTable rank_score(const std::vector<std::string>& methods, const std::vector<std::array<double, 5>>& means) {
    if (methods.size() < 2) throw std::invalid_argument("rank_score: need at least two methods");
    if (means.size() != methods.size()) throw std::invalid_argument("rank_score: one mean row per method required");
    for (std::size_t i = 0; i < means.size(); ++i) {
        for (auto m : kAllMetrics) {
            if (!std::isfinite(means[i][static_cast<std::size_t>(m)]))
                throw std::invalid_argument("rank_score: missing " + to_string(m) + " for method '" + methods[i] + "'");
        }
    }
    RankTable t;
    t.methods = methods;
    t.means = means;
    t.ranks.assign(methods.size(), {});
    t.rs.assign(methods.size(), 0.0);
    for (auto m : kAllMetrics) {
        const auto k = static_cast<std::size_t>(m);
        std::vector<double> col(methods.size());
        for (std::size_t i = 0; i < methods.size(); ++i) col[i] = means[i][k];
        const auto r = average_ranks(col, higher_is_better(m));
        for (std::size_t i = 0; i < methods.size(); ++i) t.ranks[i][k] = r[i];
    }
    for (std::size_t i = 0; i < methods.size(); ++i)
        t.rs[i] = std::accumulate(t.ranks[i].begin(), t.ranks[i].end(), 0.0) / 5.0;
    return t;
}

double classifier_accuracy(std::span<const double> posteriors, std::size_t n_domains, std::span<const int> truth) {
    if (truth.empty()) throw std::invalid_argument("classifier_accuracy: empty batch");
    if (n_domains == 0 || posteriors.size() != truth.size() * n_domains)
        throw std::invalid_argument("classifier_accuracy: posterior size mismatch");
    std::size_t correct = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        const auto row = posteriors.subspan(i * n_domains, n_domains);
        const auto arg = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
        if (arg == truth[i]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(truth.size());
}

double wilcoxon_signed_rank(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw std::invalid_argument("wilcoxon: unpaired samples");
    std::vector<double> d;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double v = a[i] - b[i];
        if (v != 0.0) d.push_back(v);
    }
    const std::size_t n = d.size();
    if (n == 0) return 1.0;
    std::vector<double> absd(n);
    for (std::size_t i = 0; i < n; ++i) absd[i] = std::abs(d[i]);
    const auto ranks = average_ranks(absd, false);

    if (n <= 25) {
        // Doubled midranks are integers, so the null distribution of 2W+ is a
        // subset-sum count over them.
        std::vector<long> r2(n);
        long total = 0;
        for (std::size_t i = 0; i < n; ++i) {
            r2[i] = std::lround(2.0 * ranks[i]);
            total += r2[i];
        }
        std::vector<double> count(static_cast<std::size_t>(total) + 1, 0.0);
        count[0] = 1.0;
        long reach = 0;
        for (long r : r2) {
            for (long s = reach; s >= 0; --s) count[static_cast<std::size_t>(s + r)] += count[static_cast<std::size_t>(s)];
            reach += r;
        }
        long w2 = 0;
        for (std::size_t i = 0; i < n; ++i)
            if (d[i] > 0) w2 += r2[i];
        const double all = std::ldexp(1.0, static_cast<int>(n));
        double lower = 0.0, upper = 0.0;
        for (long s = 0; s <= total; ++s) {
            if (s <= w2) lower += count[static_cast<std::size_t>(s)];
            if (s >= w2) upper += count[static_cast<std::size_t>(s)];
        }
        return std::min(1.0, 2.0 * std::min(lower, upper) / all);
    }

    double w = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        if (d[i] > 0) w += ranks[i];
    const double nn = static_cast<double>(n);
    const double mu = nn * (nn + 1.0) / 4.0;
    double var = nn * (nn + 1.0) * (2.0 * nn + 1.0) / 24.0;
    std::map<double, int> ties;
    for (double r : ranks) ++ties[r];
    for (const auto& [r, t] : ties) {
        if (t > 1) var -= (static_cast<double>(t) * t * t - t) / 48.0;
    }
    if (var <= 0.0) return 1.0;
    const double z = std::max(0.0, std::abs(w - mu) - 0.5) / std::sqrt(var);
    return std::min(1.0, std::erfc(z / std::sqrt(2.0)));
}

Comparison compare_methods(std::span<const double> a, std::span<const double> b, int n_methods, double alpha) {
    if (a.size() != b.size()) throw std::invalid_argument("compare_methods: unpaired samples");
    if (a.size() < 6) throw std::invalid_argument("compare_methods: need at least 6 paired cases");
    if (n_methods < 1) throw std::invalid_argument("compare_methods: n_methods must be >= 1");
    Comparison c;
    c.p_raw = wilcoxon_signed_rank(a, b);
    c.p_adjusted = std::min(1.0, c.p_raw * n_methods);
    c.significant = c.p_adjusted < alpha;
    return c;
}

double mean(std::span<const double> v) {
    if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double stddev(std::span<const double> v) {
    if (v.size() < 2) return 0.0;
    const double m = mean(v);
    double acc = 0.0;
    for (double x : v) acc += (x - m) * (x - m);
    return std::sqrt(acc / static_cast<double>(v.size() - 1));
}

BootstrapCI bootstrap_ci(std::span<const double> values, int resamples, std::uint64_t seed) {
    if (values.size() < 2) throw std::invalid_argument("bootstrap_ci: need at least 2 values");
    if (resamples < 1) throw std::invalid_argument("bootstrap_ci: resamples must be >= 1");
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> pick(0, values.size() - 1);
    std::vector<double> stats(static_cast<std::size_t>(resamples));
    for (auto& s : stats) {
        double acc = 0.0;
        for (std::size_t i = 0; i < values.size(); ++i) acc += values[pick(rng)];
        s = acc / static_cast<double>(values.size());
    }
    std::sort(stats.begin(), stats.end());
    auto quantile = [&](double q) {
        const double pos = q * static_cast<double>(stats.size() - 1);
        const auto lo = static_cast<std::size_t>(std::floor(pos));
        const auto hi = std::min(lo + 1, stats.size() - 1);
        const double f = pos - static_cast<double>(lo);
        return stats[lo] + f * (stats[hi] - stats[lo]);
    };
    BootstrapCI ci;
    ci.mean = mean(values);
    ci.low = quantile(0.025);
    ci.high = quantile(0.975);
    return ci;
}

}  // namespace msu::metrics
