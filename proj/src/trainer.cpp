#include "msunlearn/trainer.hpp"

#include <cmath>
#include <cstring>
#include <deque>
#include <fstream>
#include <numeric>
#include <sstream>

#include "msunlearn/metrics.hpp"

namespace msu {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json stage_map(const std::map<int, double>& m) {
    json j = json::object();
    for (const auto& [k, v] : m) j[std::to_string(k)] = v;
    return j;
}

std::map<int, double> stage_map_from(const json& j) {
    std::map<int, double> m;
    for (const auto& [k, v] : j.items()) m[std::stoi(k)] = v.get<double>();
    return m;
}

}  // namespace

void to_json(json& j, const EpochRecord& r) {
    j = {{"epoch", r.epoch},
         {"val_dsc", r.val_dsc ? json(*r.val_dsc) : json(nullptr)},
         {"val_acc", stage_map(r.val_accuracy)},
         {"seg_loss_mean", r.seg_loss_mean},
         {"lr", r.lr},
         {"unlearn_steps", r.unlearn_steps}};
}

void from_json(const json& j, EpochRecord& r) {
    r.epoch = j.at("epoch").get<int>();
    r.val_dsc = j.at("val_dsc").is_null() ? std::nullopt : std::optional<double>(j.at("val_dsc").get<double>());
    r.val_accuracy = stage_map_from(j.at("val_acc"));
    r.seg_loss_mean = j.at("seg_loss_mean").get<double>();
    r.lr = j.at("lr").get<double>();
    r.unlearn_steps = j.at("unlearn_steps").get<int>();
}

namespace {

// Everything a run needs to continue exactly where it stopped.
struct RunState {
    RunConfig cfg;
    DomainSet domains;
    model::SegNet net{nullptr};
    std::vector<model::DomainClassifier> classifiers;
    Optimizers opt;
    SchedulerState sched;
    std::map<int, std::deque<double>> windows;
    std::int64_t post_warmup_steps = 0;
    std::int64_t global_step = 0;
    std::mt19937_64 rng;
    std::optional<BalancedBatchSampler> sampler;
    int epoch = 0;  // last completed epoch
    std::vector<EpochRecord> history;
    std::optional<double> best_val_dsc;
    int best_epoch = 0;
};

void build_model(RunState& rs) {
    torch::manual_seed(rs.cfg.seed);
    const auto ncfg = model::net_config(rs.cfg);
    rs.net = model::SegNet(ncfg);
    rs.classifiers = model::make_classifiers(ncfg, static_cast<int>(rs.domains.size()));
    rs.opt = make_optimizers(rs.net, rs.classifiers, rs.cfg.optim);
}

json windows_json(const std::map<int, std::deque<double>>& w) {
    json j = json::object();
    for (const auto& [k, v] : w) j[std::to_string(k)] = std::vector<double>(v.begin(), v.end());
    return j;
}

std::string rng_text(const std::mt19937_64& rng) {
    std::ostringstream os;
    os << rng;
    return os.str();
}

json meta_json(const RunState& rs) {
    json hist = json::array();
    for (const auto& r : rs.history) hist.push_back(r);
    return {{"format", 1},
            {"config", rs.cfg},
            {"domains", rs.domains.names()},
            {"seed", rs.cfg.seed},
            {"epoch", rs.epoch},
            {"scheduler", rs.sched},
            {"windows", windows_json(rs.windows)},
            {"post_warmup_steps", rs.post_warmup_steps},
            {"global_step", rs.global_step},
            {"rng", rng_text(rs.rng)},
            {"sampler", rs.sampler ? rs.sampler->state() : json(nullptr)},
            {"history", hist},
            {"best_val_dsc", rs.best_val_dsc ? json(*rs.best_val_dsc) : json(nullptr)},
            {"best_epoch", rs.best_epoch}};
}

void save_checkpoint(RunState& rs, const fs::path& path) {
    torch::serialize::OutputArchive ar;
    ar.write("meta", c10::IValue(meta_json(rs).dump()));
    {
        torch::serialize::OutputArchive sub;
        rs.net->save(sub);
        ar.write("net", sub);
    }
    for (std::size_t i = 0; i < rs.classifiers.size(); ++i) {
        torch::serialize::OutputArchive sub;
        rs.classifiers[i]->save(sub);
        ar.write("clf" + std::to_string(i + 1), sub);
        torch::serialize::OutputArchive osub;
        rs.opt.classifiers[i]->save(osub);
        ar.write("opt_clf" + std::to_string(i + 1), osub);
    }
    {
        torch::serialize::OutputArchive sub;
        rs.opt.segmentation->save(sub);
        ar.write("opt_seg", sub);
    }
    {
        torch::serialize::OutputArchive sub;
        rs.opt.unlearning->save(sub);
        ar.write("opt_unlearn", sub);
    }
    auto tmp = path;
    tmp += ".tmp";
    try {
        ar.save_to(tmp.string());
        fs::rename(tmp, path);
    } catch (const std::exception& e) {
        std::error_code ec;
        fs::remove(tmp, ec);
        throw std::runtime_error("cannot write checkpoint " + path.string() + " (disk full?): " + e.what() +
                                 "; the previous checkpoint is untouched");
    }
}

json read_meta(torch::serialize::InputArchive& ar) {
    c10::IValue v;
    ar.read("meta", v);
    return json::parse(v.toStringRef());
}

void load_weights(torch::serialize::InputArchive& ar, model::SegNet& net,
                  std::vector<model::DomainClassifier>& classifiers) {
    torch::serialize::InputArchive sub;
    ar.read("net", sub);
    net->load(sub);
    for (std::size_t i = 0; i < classifiers.size(); ++i) {
        torch::serialize::InputArchive c;
        ar.read("clf" + std::to_string(i + 1), c);
        classifiers[i]->load(c);
    }
}

void restore_run(RunState& rs, const fs::path& path, std::span<const int> domain_of_item) {
    torch::serialize::InputArchive ar;
    ar.load_from(path.string());
    const json meta = read_meta(ar);
    if (meta.at("config").get<RunConfig>() != rs.cfg)
        throw std::invalid_argument("resume: checkpoint config differs from the requested config");
    if (DomainSet(meta.at("domains").get<std::vector<std::string>>()) != rs.domains)
        throw std::invalid_argument("resume: checkpoint domains differ from the manifest");
    load_weights(ar, rs.net, rs.classifiers);
    for (std::size_t i = 0; i < rs.classifiers.size(); ++i) {
        torch::serialize::InputArchive sub;
        ar.read("opt_clf" + std::to_string(i + 1), sub);
        rs.opt.classifiers[i]->load(sub);
    }
    {
        torch::serialize::InputArchive sub;
        ar.read("opt_seg", sub);
        rs.opt.segmentation->load(sub);
    }
    {
        torch::serialize::InputArchive sub;
        ar.read("opt_unlearn", sub);
        rs.opt.unlearning->load(sub);
    }
    rs.epoch = meta.at("epoch").get<int>();
    rs.sched = meta.at("scheduler").get<SchedulerState>();
    rs.windows.clear();
    for (const auto& [k, v] : meta.at("windows").items()) {
        auto vals = v.get<std::vector<double>>();
        rs.windows[std::stoi(k)] = std::deque<double>(vals.begin(), vals.end());
    }
    rs.post_warmup_steps = meta.at("post_warmup_steps").get<std::int64_t>();
    rs.global_step = meta.at("global_step").get<std::int64_t>();
    std::istringstream is(meta.at("rng").get<std::string>());
    is >> rs.rng;
    rs.sampler.emplace(domain_of_item, rs.domains.size(), rs.cfg.batch_size, rs.cfg.seed);
    rs.sampler->restore(meta.at("sampler"));
    rs.history = meta.at("history").get<std::vector<EpochRecord>>();
    rs.best_val_dsc =
        meta.at("best_val_dsc").is_null() ? std::nullopt : std::optional<double>(meta.at("best_val_dsc").get<double>());
    rs.best_epoch = meta.at("best_epoch").get<int>();
}

// Keeps the log lines a checkpoint at `epoch` has already accounted for.
void truncate_event_log(const fs::path& path, int epoch) {
    if (!fs::exists(path)) return;
    std::ifstream in(path);
    std::string kept, line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (json::parse(line).value("epoch", 0) <= epoch) kept += line + "\n";
    }
    in.close();
    write_file_atomic(path, kept);
}

TrainingBatch make_batch(RunState& rs, const std::vector<VolumeSample>& cases) {
    const auto idx = rs.sampler->next();
    const auto& p = rs.cfg.patch_size;
    const auto B = static_cast<std::int64_t>(idx.size());
    TrainingBatch b;
    b.images = torch::empty({B, 1, p[0], p[1], p[2]});
    b.labels = torch::empty({B, p[0], p[1], p[2]});
    b.domains = torch::empty({B}, torch::kLong);
    for (std::int64_t i = 0; i < B; ++i) {
        const auto& src = cases[idx[static_cast<std::size_t>(i)]];
        auto s = augment(extract_patch(src, p, rs.cfg.foreground_fraction, rs.rng), rs.cfg.augmentation, rs.rng);
        std::memcpy(b.images[i].data_ptr<float>(), s.image.data.data(), s.image.size() * sizeof(float));
        auto lab = b.labels[i];
        float* dst = lab.data_ptr<float>();
        for (std::size_t v = 0; v < s.label.size(); ++v) dst[v] = static_cast<float>(s.label.data[v]);
        b.domains[i] = static_cast<std::int64_t>(src.domain);
    }
    return b;
}

class EventLog {
public:
    explicit EventLog(const fs::path& path) : path_(path), out_(path, std::ios::app) {
        if (!out_) throw std::runtime_error("cannot open event log " + path.string());
    }
    void write(const json& j) { out_ << j.dump() << '\n'; }
    void flush() {
        out_.flush();
        if (!out_) throw std::runtime_error("write to " + path_.string() + " failed (disk full?)");
    }

private:
    fs::path path_;
    std::ofstream out_;
};

}  // namespace

std::map<int, double> heldout_classifier_accuracy(model::SegNet& net, std::vector<model::DomainClassifier>& classifiers,
                                                  const std::vector<VolumeSample>& cases) {
    std::map<int, double> acc;
    if (cases.empty()) return acc;
    torch::NoGradGuard ng;
    const auto& patch = net->config().patch;
    std::map<int, std::int64_t> correct;
    constexpr std::size_t kChunk = 8;
    for (std::size_t start = 0; start < cases.size(); start += kChunk) {
        const std::size_t n = std::min(kChunk, cases.size() - start);
        auto images = torch::empty({static_cast<std::int64_t>(n), 1, patch[0], patch[1], patch[2]});
        auto truth = torch::empty({static_cast<std::int64_t>(n)}, torch::kLong);
        for (std::size_t i = 0; i < n; ++i) {
            const auto img = center_crop_or_pad(cases[start + i].image, patch);
            std::memcpy(images[static_cast<std::int64_t>(i)].data_ptr<float>(), img.data.data(), img.size() * sizeof(float));
            truth[static_cast<std::int64_t>(i)] = static_cast<std::int64_t>(cases[start + i].domain);
        }
        const auto taps = net->encode(images);
        for (auto& clf : classifiers) {
            const int s = clf->stage();
            const auto pred = clf->forward(taps[static_cast<std::size_t>(s - 1)]).argmax(1);
            correct[s] += pred.eq(truth).sum().item<std::int64_t>();
        }
    }
    for (const auto& [s, c] : correct) acc[s] = static_cast<double>(c) / static_cast<double>(cases.size());
    return acc;
}

Mask segment_volume(model::SegNet& net, const Image& volume, bool mirror) {
    return model::probabilities_to_mask(model::predict_with_mirroring(net, volume, mirror));
}

double validation_dsc(model::SegNet& net, const std::vector<VolumeSample>& cases, bool mirror) {
    if (cases.empty()) throw std::invalid_argument("validation_dsc: no cases");
    double sum = 0.0;
    for (const auto& c : cases) sum += metrics::dsc(segment_volume(net, c.image, mirror), c.label);
    return sum / static_cast<double>(cases.size());
}

TrainResult train(const RunConfig& cfg_in, const DomainSet& domains, const std::vector<VolumeSample>& train_cases,
                  const std::vector<VolumeSample>& val_cases, const TrainOptions& opts) {
    const RunConfig cfg = validate_config(cfg_in, domains);
    torch::set_num_threads(cfg.threads);
    fs::create_directories(opts.out_dir);

    std::vector<int> domain_of_item;
    for (const auto& c : train_cases) {
        if (c.domain < 0 || static_cast<std::size_t>(c.domain) >= domains.size())
            throw std::invalid_argument("train: case " + c.case_id + " has an unknown domain index");
        domain_of_item.push_back(c.domain);
    }

    RunState rs;
    rs.cfg = cfg;
    rs.domains = domains;
    build_model(rs);
    rs.sched = initial_scheduler_state(cfg);
    rs.rng.seed(cfg.seed);

    const fs::path log_path = opts.out_dir / kEventLogName;
    const fs::path latest = opts.out_dir / kLatestCheckpointName;
    const fs::path best = opts.out_dir / kBestCheckpointName;

    if (opts.resume) {
        restore_run(rs, *opts.resume, domain_of_item);
        truncate_event_log(log_path, rs.epoch);
    } else {
        rs.sampler.emplace(domain_of_item, domains.size(), cfg.batch_size, cfg.seed);
        write_file_atomic(log_path, "");
    }

    EventLog log(log_path);
    if (!opts.resume) {
        log.write({{"type", "run"}, {"epoch", 0}, {"seed", cfg.seed}, {"domains", domains.names()}, {"config", cfg}});
    }

    const int last_epoch = opts.stop_after_epoch > 0 ? std::min(opts.stop_after_epoch, cfg.epochs) : cfg.epochs;
    const auto W = static_cast<std::size_t>(cfg.accuracy_window);

    for (int epoch = rs.epoch + 1; epoch <= last_epoch; ++epoch) {
        rs.sched.epoch = epoch;
        const double lr = poly_lr(cfg.optim, epoch, cfg.epochs);
        set_learning_rate(*rs.opt.segmentation, lr);
        const bool warmup = epoch <= cfg.warmup_epochs;

        EpochRecord rec;
        rec.epoch = epoch;
        rec.lr = lr;
        double loss_sum = 0.0;

        for (int it = 1; it <= cfg.iterations_per_epoch; ++it) {
            const TrainingBatch batch = make_batch(rs, train_cases);

            std::map<int, double> acc;
            if (!warmup && rs.post_warmup_steps >= static_cast<std::int64_t>(W)) {
                for (const auto& [s, w] : rs.windows)
                    acc[s] = std::accumulate(w.begin(), w.end(), 0.0) / static_cast<double>(w.size());
            }
            auto [plan, next] = plan_step(rs.sched, cfg, domains.size(), acc);
            rs.sched = next;

            StepResult r;
            try {
                r = execute_step(plan, rs.net, rs.classifiers, batch, rs.opt);
            } catch (const NumericalInstability& e) {
                const fs::path dump = opts.out_dir / "instability.pt";
                save_checkpoint(rs, dump);
                log.write({{"type", "abort"}, {"epoch", epoch}, {"iter", it}, {"reason", e.what()}});
                log.flush();
                throw NumericalInstability(std::string(e.what()) + " at epoch " + std::to_string(epoch) +
                                           ", iteration " + std::to_string(it) + "; state dumped to " + dump.string());
            }

            for (const auto& [s, a] : r.accuracy) {
                auto& w = rs.windows[s];
                w.push_back(a);
                while (w.size() > W) w.pop_front();
            }
            if (!warmup) ++rs.post_warmup_steps;
            ++rs.global_step;
            loss_sum += r.seg_loss;
            rec.unlearn_steps += r.unlearned.empty() ? 0 : 1;

            std::map<int, double> window_mean;
            for (const auto& [s, w] : rs.windows)
                window_mean[s] = std::accumulate(w.begin(), w.end(), 0.0) / static_cast<double>(w.size());
            json counters = json::object();
            for (const auto& [s, c] : rs.sched.iter_uba) counters[std::to_string(s)] = c;
            log.write({{"type", "step"},
                       {"epoch", epoch},
                       {"iter", it},
                       {"step", rs.global_step},
                       {"seg_loss", r.seg_loss},
                       {"acc", stage_map(r.accuracy)},
                       {"acc_window", stage_map(window_mean)},
                       {"ce", stage_map(r.classifier_loss)},
                       {"iter_uba", counters},
                       {"unlearn", r.unlearned},
                       {"conf", stage_map(r.confusion_loss)}});
        }
        rec.seg_loss_mean = loss_sum / static_cast<double>(cfg.iterations_per_epoch);

        if (!val_cases.empty()) {
            rec.val_accuracy = heldout_classifier_accuracy(rs.net, rs.classifiers, val_cases);
            if (epoch % cfg.validation_every == 0 || epoch == cfg.epochs)
                rec.val_dsc = validation_dsc(rs.net, val_cases, cfg.validation_mirroring);
        }
        rs.history.push_back(rec);
        rs.epoch = epoch;

        bool improved = false;
        if (rec.val_dsc && (!rs.best_val_dsc || *rec.val_dsc > *rs.best_val_dsc)) {
            rs.best_val_dsc = rec.val_dsc;
            rs.best_epoch = epoch;
            improved = true;
        }
        json ev = rec;
        ev["type"] = "epoch";
        ev["best"] = improved;
        log.write(ev);
        log.flush();

        save_checkpoint(rs, latest);
        if (improved || (val_cases.empty() && epoch == last_epoch)) save_checkpoint(rs, best);
        if (opts.on_epoch) opts.on_epoch(rec);
    }

    TrainResult res;
    res.latest_checkpoint = latest;
    res.best_checkpoint = best;
    res.event_log = log_path;
    res.history = rs.history;
    res.best_val_dsc = rs.best_val_dsc;
    res.best_epoch = rs.best_epoch;
    return res;
}

TrainResult train(const RunConfig& cfg, const DatasetManifest& manifest, const TrainOptions& opts) {
    validate_manifest(manifest, cfg.batch_size);
    std::vector<VolumeSample> tr, va;
    for (const auto& e : manifest.select(Split::Train)) tr.push_back(load_sample(e, manifest.domains));
    for (const auto& e : manifest.select(Split::Val)) va.push_back(load_sample(e, manifest.domains));
    return train(cfg, manifest.domains, tr, va, opts);
}

LoadedModel load_model(const fs::path& checkpoint) {
    if (!fs::exists(checkpoint)) throw std::runtime_error("checkpoint not found: " + checkpoint.string());
    torch::serialize::InputArchive ar;
    ar.load_from(checkpoint.string());
    const json meta = read_meta(ar);
    LoadedModel m;
    m.cfg = meta.at("config").get<RunConfig>();
    m.domains = DomainSet(meta.at("domains").get<std::vector<std::string>>());
    m.epoch = meta.at("epoch").get<int>();
    const auto ncfg = model::net_config(m.cfg);
    m.net = model::SegNet(ncfg);
    m.classifiers = model::make_classifiers(ncfg, static_cast<int>(m.domains.size()));
    load_weights(ar, m.net, m.classifiers);
    m.net->eval();
    return m;
}

std::vector<Mask> infer(const fs::path& checkpoint, const std::vector<Image>& volumes, bool mirror) {
    auto m = load_model(checkpoint);
    std::vector<Mask> out;
    out.reserve(volumes.size());
    for (const auto& v : volumes) out.push_back(segment_volume(m.net, v, mirror));
    return out;
}

std::vector<json> read_event_log(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read event log " + path.string());
    std::vector<json> out;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty()) out.push_back(json::parse(line));
    }
    return out;
}

}  // namespace msu
