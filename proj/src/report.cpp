#include "msunlearn/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>
#include <set>
#include <sstream>

#include "msunlearn/nifti.hpp"

namespace msu::report {

namespace fs = std::filesystem;
using nlohmann::json;

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

namespace {

std::string cell(const std::optional<double>& v) { return v ? fmt(*v) : std::string(); }

json opt_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

std::map<std::string, fs::path> nifti_by_stem(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw std::runtime_error("not a directory: " + dir.string());
    std::map<std::string, fs::path> out;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (e.is_regular_file() && nifti::has_nifti_extension(e.path())) out[nifti::stem(e.path())] = e.path();
    }
    return out;
}

}  // namespace

MethodResult evaluate_directory(const std::string& name, const fs::path& pred_dir, const fs::path& ref_dir,
                                const metrics::MetricsConfig& cfg) {
    const auto refs = nifti_by_stem(ref_dir);
    const auto preds = nifti_by_stem(pred_dir);
    if (preds.empty()) throw std::runtime_error("no predicted volumes in " + pred_dir.string());
    MethodResult r{name, {}};
    for (const auto& [id, pred_path] : preds) {
        auto it = refs.find(id);
        if (it == refs.end()) throw std::runtime_error("no reference for case " + id + " in " + ref_dir.string());
        const Mask pred = nifti::read_mask(pred_path);
        const Mask ref = nifti::read_mask(it->second);
        if (ref.shape != pred.shape) throw std::runtime_error("shape mismatch for case " + id);
        r.cases.push_back(metrics::evaluate_case(id, pred, ref, cfg));
    }
    return r;
}

EvaluationReport build_evaluation(std::vector<MethodResult> methods, const metrics::MetricsConfig& cfg) {
    if (methods.empty()) throw std::invalid_argument("build_evaluation: no methods");
    EvaluationReport rep;
    rep.methods = std::move(methods);
    for (const auto& m : rep.methods) {
        std::array<MetricSummary, 5> sum{};
        for (auto metric : metrics::kAllMetrics) {
            std::vector<double> vals;
            std::size_t undefined = 0;
            for (const auto& c : m.cases) {
                if (auto v = c.get(metric)) vals.push_back(*v);
                else ++undefined;
            }
            if (undefined > 0) {
                rep.warnings.push_back(m.name + ": " + metrics::to_string(metric) + " undefined for " +
                                       std::to_string(undefined) + " case(s), excluded");
            }
            auto& s = sum[static_cast<std::size_t>(metric)];
            s.n = vals.size();
            if (!vals.empty()) {
                s.mean = metrics::mean(vals);
                s.sd = metrics::stddev(vals);
            }
            if (vals.size() >= 2) s.ci = metrics::bootstrap_ci(vals, cfg.bootstrap_resamples, cfg.seed);
        }
        rep.summary.push_back(sum);
    }
    if (rep.methods.size() >= 2) {
        std::vector<std::string> names;
        std::vector<std::array<double, 5>> means;
        bool complete = true;
        for (std::size_t k = 0; k < rep.methods.size(); ++k) {
            names.push_back(rep.methods[k].name);
            std::array<double, 5> mu{};
            for (std::size_t i = 0; i < 5; ++i) {
                if (rep.summary[k][i].n == 0) complete = false;
                mu[i] = rep.summary[k][i].mean;
            }
            means.push_back(mu);
        }
        if (complete) rep.ranks = metrics::rank_score(names, means);
        else rep.warnings.push_back("rank score skipped: a method has no defined value for some metric");

        const auto& base = rep.methods[0];
        for (std::size_t k = 1; k < rep.methods.size(); ++k) {
            std::array<std::optional<metrics::Comparison>, 5> cmp{};
            std::map<std::string, const metrics::CaseMetrics*> other;
            for (const auto& c : rep.methods[k].cases) other[c.case_id] = &c;
            for (auto metric : metrics::kAllMetrics) {
                std::vector<double> a, b;
                for (const auto& c : base.cases) {
                    auto it = other.find(c.case_id);
                    if (it == other.end()) continue;
                    auto va = c.get(metric);
                    auto vb = it->second->get(metric);
                    if (va && vb) {
                        a.push_back(*va);
                        b.push_back(*vb);
                    }
                }
                if (a.size() >= 6)
                    cmp[static_cast<std::size_t>(metric)] = metrics::compare_methods(a, b, cfg.n_methods, cfg.alpha);
            }
            rep.versus_first.push_back(cmp);
        }
    }
    return rep;
}

std::string evaluation_csv(const EvaluationReport& r) {
    std::ostringstream os;
    os << "method,case_id,kind,DSC,TPR,LTPR,LFDR,RVE,RS\n";
    for (std::size_t k = 0; k < r.methods.size(); ++k) {
        const auto& m = r.methods[k];
        for (const auto& c : m.cases) {
            os << m.name << ',' << c.case_id << ",case";
            for (const auto& v : c.values) os << ',' << cell(v);
            os << ",\n";
        }
        const auto& s = r.summary[k];
        auto row = [&](const char* kind, auto get) {
            os << m.name << ",," << kind;
            for (const auto& x : s) os << ',' << cell(get(x));
            os << ",\n";
        };
        row("mean", [](const MetricSummary& x) { return x.n ? std::optional<double>(x.mean) : std::nullopt; });
        row("sd", [](const MetricSummary& x) { return x.n ? std::optional<double>(x.sd) : std::nullopt; });
        row("ci_low", [](const MetricSummary& x) { return x.ci ? std::optional<double>(x.ci->low) : std::nullopt; });
        row("ci_high", [](const MetricSummary& x) { return x.ci ? std::optional<double>(x.ci->high) : std::nullopt; });
        row("n", [](const MetricSummary& x) { return std::optional<double>(static_cast<double>(x.n)); });
        if (r.ranks) {
            os << m.name << ",,rank";
            for (double v : r.ranks->ranks[k]) os << ',' << fmt(v);
            os << ',' << fmt(r.ranks->rs[k]) << '\n';
        }
        if (k >= 1 && k - 1 < r.versus_first.size()) {
            const auto& cmp = r.versus_first[k - 1];
            os << m.name << ",," << "p_raw";
            for (const auto& c : cmp) os << ',' << (c ? fmt(c->p_raw) : "");
            os << ",\n" << m.name << ",," << "p_adjusted";
            for (const auto& c : cmp) os << ',' << (c ? fmt(c->p_adjusted) : "");
            os << ",\n";
        }
    }
    return os.str();
}

json evaluation_json(const EvaluationReport& r) {
    json methods = json::array();
    for (std::size_t k = 0; k < r.methods.size(); ++k) {
        const auto& m = r.methods[k];
        json cases = json::array();
        for (const auto& c : m.cases) {
            json row = {{"case_id", c.case_id}};
            for (auto metric : metrics::kAllMetrics) row[metrics::to_string(metric)] = opt_json(c.get(metric));
            cases.push_back(row);
        }
        json agg = json::object();
        for (auto metric : metrics::kAllMetrics) {
            const auto& s = r.summary[k][static_cast<std::size_t>(metric)];
            agg[metrics::to_string(metric)] = {
                {"n", s.n},
                {"mean", s.n ? json(s.mean) : json(nullptr)},
                {"sd", s.n ? json(s.sd) : json(nullptr)},
                {"ci_low", s.ci ? json(s.ci->low) : json(nullptr)},
                {"ci_high", s.ci ? json(s.ci->high) : json(nullptr)}};
        }
        json entry = {{"name", m.name}, {"cases", cases}, {"aggregate", agg}};
        if (r.ranks) {
            json ranks = json::object();
            for (auto metric : metrics::kAllMetrics)
                ranks[metrics::to_string(metric)] = r.ranks->ranks[k][static_cast<std::size_t>(metric)];
            entry["ranks"] = ranks;
            entry["rs"] = r.ranks->rs[k];
        }
        if (k >= 1 && k - 1 < r.versus_first.size()) {
            json cmp = json::object();
            for (auto metric : metrics::kAllMetrics) {
                const auto& c = r.versus_first[k - 1][static_cast<std::size_t>(metric)];
                cmp[metrics::to_string(metric)] =
                    c ? json{{"p_raw", c->p_raw}, {"p_adjusted", c->p_adjusted}, {"significant", c->significant}}
                      : json(nullptr);
            }
            entry["versus_" + r.methods[0].name] = cmp;
        }
        methods.push_back(entry);
    }
    return {{"methods", methods}, {"warnings", r.warnings}};
}

std::vector<StageAccuracyRow> stage_accuracy_table(const std::vector<json>& events) {
    int warmup = -1;
    for (const auto& e : events) {
        if (e.value("type", "") == "run") warmup = e.at("config").at("warmup_epochs").get<int>();
    }
    if (warmup < 0) throw std::runtime_error("event log has no run header");

    std::map<int, StageAccuracyRow> rows;
    const json* last_warm = nullptr;
    const json* last = nullptr;
    bool any_unlearn = false;
    for (const auto& e : events) {
        const auto type = e.value("type", "");
        if (type == "step") {
            if (e.at("epoch").get<int>() <= warmup) last_warm = &e;
            last = &e;
            for (const auto& [k, v] : e.at("acc_window").items()) rows[std::stoi(k)].stage = std::stoi(k);
            for (const auto& s : e.at("unlearn")) {
                rows[s.get<int>()].unlearn_steps += 1;
                any_unlearn = true;
            }
        } else if (type == "epoch") {
            const int ep = e.at("epoch").get<int>();
            for (const auto& [k, v] : e.at("val_acc").items()) {
                auto& row = rows[std::stoi(k)];
                row.stage = std::stoi(k);
                if (ep == warmup) row.heldout_post_warmup = v.get<double>();
                row.heldout_final = v.get<double>();
            }
        }
    }
    for (auto& [s, row] : rows) {
        const auto key = std::to_string(s);
        if (last_warm && last_warm->at("acc_window").contains(key))
            row.post_warmup = last_warm->at("acc_window").at(key).get<double>();
        if (any_unlearn && last && last->at("acc_window").contains(key))
            row.post_unlearning = last->at("acc_window").at(key).get<double>();
    }
    std::vector<StageAccuracyRow> out;
    for (const auto& [s, row] : rows) out.push_back(row);
    return out;
}

std::string stage_accuracy_csv(const std::vector<StageAccuracyRow>& rows) {
    auto na = [](const std::optional<double>& v) { return v ? fmt(*v) : std::string("n/a"); };
    std::ostringstream os;
    os << "stage,post_warmup,post_unlearning,heldout_post_warmup,heldout_final,unlearn_steps\n";
    for (const auto& r : rows) {
        os << r.stage << ',' << na(r.post_warmup) << ',' << na(r.post_unlearning) << ',' << na(r.heldout_post_warmup)
           << ',' << na(r.heldout_final) << ',' << r.unlearn_steps << '\n';
    }
    return os.str();
}

std::vector<std::pair<std::string, std::array<double, 5>>> read_method_means_csv(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error(path.string() + " is empty");
    std::vector<std::string> header;
    {
        std::stringstream ss(line);
        std::string f;
        while (std::getline(ss, f, ',')) header.push_back(f);
    }
    const std::vector<std::string> expected{"method", "DSC", "TPR", "LTPR", "LFDR", "RVE"};
    if (header != expected) throw std::runtime_error(path.string() + ": header must be method,DSC,TPR,LTPR,LFDR,RVE");
    std::vector<std::pair<std::string, std::array<double, 5>>> out;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string name, f;
        std::getline(ss, name, ',');
        std::array<double, 5> v{};
        for (auto& x : v) {
            if (!std::getline(ss, f, ',')) throw std::runtime_error(path.string() + ": short row for " + name);
            x = std::stod(f);
        }
        out.emplace_back(name, v);
    }
    return out;
}

std::string rank_table_csv(const metrics::RankTable& t) {
    std::ostringstream os;
    os << "method,DSC,TPR,LTPR,LFDR,RVE,R_DSC,R_TPR,R_LTPR,R_LFDR,R_RVE,RS\n";
    for (std::size_t k = 0; k < t.methods.size(); ++k) {
        os << t.methods[k];
        for (double v : t.means[k]) os << ',' << fmt(v);
        for (double v : t.ranks[k]) os << ',' << fmt(v);
        os << ',' << fmt(t.rs[k]) << '\n';
    }
    return os.str();
}

std::string svg_line_plot(const std::string& title, const std::string& x_label, const std::string& y_label,
                          const std::vector<Series>& series) {
    constexpr double W = 720, H = 420, L = 60, R = 150, T = 36, B = 48;
    static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};
    double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
    for (const auto& s : series)
        for (const auto& [x, y] : s.points) {
            x0 = std::min(x0, x), x1 = std::max(x1, x);
            y0 = std::min(y0, y), y1 = std::max(y1, y);
        }
    if (!(x0 <= x1)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
    if (x1 == x0) x1 = x0 + 1;
    if (y1 == y0) y1 = y0 + 1;
    auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
    auto py = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - T - B); };

    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    os << "<text x=\"" << W / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" << title << "</text>\n";
    os << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
    os << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
    for (int i = 0; i <= 4; ++i) {
        const double yv = y0 + (y1 - y0) * i / 4.0, xv = x0 + (x1 - x0) * i / 4.0;
        os << "<text x=\"" << L - 6 << "\" y=\"" << py(yv) + 4 << "\" text-anchor=\"end\">" << fmt(std::round(yv * 1000) / 1000) << "</text>\n";
        os << "<text x=\"" << px(xv) << "\" y=\"" << H - B + 16 << "\" text-anchor=\"middle\">" << fmt(std::round(xv)) << "</text>\n";
    }
    os << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 10 << "\" text-anchor=\"middle\">" << x_label << "</text>\n";
    os << "<text x=\"16\" y=\"" << (T + H - B) / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 " << (T + H - B) / 2 << ")\">" << y_label << "</text>\n";
    for (std::size_t i = 0; i < series.size(); ++i) {
        const char* c = colors[i % 8];
        os << "<polyline fill=\"none\" stroke=\"" << c << "\" stroke-width=\"1\" points=\"";
        for (const auto& [x, y] : series[i].points) os << fmt(std::round(px(x) * 10) / 10) << ',' << fmt(std::round(py(y) * 10) / 10) << ' ';
        os << "\"/>\n";
        const double ly = T + 16 * static_cast<double>(i);
        os << "<line x1=\"" << W - R + 10 << "\" y1=\"" << ly << "\" x2=\"" << W - R + 30 << "\" y2=\"" << ly << "\" stroke=\"" << c << "\" stroke-width=\"2\"/>\n";
        os << "<text x=\"" << W - R + 36 << "\" y=\"" << ly + 4 << "\">" << series[i].name << "</text>\n";
    }
    os << "</svg>\n";
    return os.str();
}

std::vector<fs::path> write_report(const ReportInputs& in) {
    if (!fs::exists(in.event_log)) throw std::runtime_error("event log not found: " + in.event_log.string());
    std::vector<json> events;
    {
        std::ifstream f(in.event_log);
        std::string line;
        while (std::getline(f, line))
            if (!line.empty()) events.push_back(json::parse(line));
    }
    fs::create_directories(in.out_dir);
    std::vector<fs::path> written;

    const auto rows = stage_accuracy_table(events);
    write_file_atomic(in.out_dir / "stage_accuracy.csv", stage_accuracy_csv(rows));
    written.push_back(in.out_dir / "stage_accuracy.csv");

    std::map<int, Series> acc;
    Series seg{"segmentation", {}};
    std::map<int, Series> conf;
    for (const auto& e : events) {
        if (e.value("type", "") != "step") continue;
        const double step = e.at("step").get<double>();
        for (const auto& [k, v] : e.at("acc_window").items()) {
            auto& s = acc[std::stoi(k)];
            s.name = "stage " + k;
            s.points.emplace_back(step, v.get<double>());
        }
        seg.points.emplace_back(step, e.at("seg_loss").get<double>());
        for (const auto& [k, v] : e.at("conf").items()) {
            auto& s = conf[std::stoi(k)];
            s.name = "confusion " + k;
            s.points.emplace_back(step, v.get<double>());
        }
    }
    std::vector<Series> acc_series, loss_series{seg};
    for (auto& [k, s] : acc) acc_series.push_back(s);
    for (auto& [k, s] : conf) loss_series.push_back(s);
    write_file_atomic(in.out_dir / "accuracy.svg",
                      svg_line_plot("Domain classifier accuracy (windowed)", "step", "accuracy", acc_series));
    write_file_atomic(in.out_dir / "loss.svg", svg_line_plot("Training losses", "step", "loss", loss_series));
    written.push_back(in.out_dir / "accuracy.svg");
    written.push_back(in.out_dir / "loss.svg");

    std::vector<std::string> names;
    std::vector<std::array<double, 5>> means;
    for (const auto& p : in.evaluations) {
        std::ifstream f(p);
        if (!f) throw std::runtime_error("cannot read evaluation " + p.string());
        const json j = json::parse(f);
        for (const auto& m : j.at("methods")) {
            std::array<double, 5> mu{};
            for (auto metric : metrics::kAllMetrics) {
                const auto& v = m.at("aggregate").at(metrics::to_string(metric)).at("mean");
                if (v.is_null()) throw std::runtime_error(p.string() + ": method " + m.at("name").get<std::string>() +
                                                          " has no " + metrics::to_string(metric) + " mean");
                mu[static_cast<std::size_t>(metric)] = v.get<double>();
            }
            names.push_back(m.at("name").get<std::string>());
            means.push_back(mu);
        }
    }
    if (in.method_means_csv) {
        for (auto& [n, v] : read_method_means_csv(*in.method_means_csv)) {
            names.push_back(n);
            means.push_back(v);
        }
    }
    if (names.size() >= 2) {
        write_file_atomic(in.out_dir / "methods.csv", rank_table_csv(metrics::rank_score(names, means)));
        written.push_back(in.out_dir / "methods.csv");
    } else if (names.size() == 1) {
        std::ostringstream os;
        os << "method,DSC,TPR,LTPR,LFDR,RVE\n" << names[0];
        for (double v : means[0]) os << ',' << fmt(v);
        os << '\n';
        write_file_atomic(in.out_dir / "methods.csv", os.str());
        written.push_back(in.out_dir / "methods.csv");
    }
    return written;
}

}  // namespace msu::report
