#include "msunlearn/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "msunlearn/data.hpp"
#include "msunlearn/metrics.hpp"
#include "msunlearn/nifti.hpp"
#include "msunlearn/report.hpp"
#include "msunlearn/trainer.hpp"

namespace msu::cli {

namespace fs = std::filesystem;

RunConfig recipe_config(std::uint64_t seed) {
    RunConfig c = default_config(4);
    c.patch_size = {32, 32, 32};
    c.base_channels = 4;
    c.max_channels = 64;
    c.epochs = 6;
    c.warmup_epochs = 2;
    c.iterations_per_epoch = 10;
    c.batch_size = 4;
    c.unlearn_stages = {3, 4};
    c.patience = 3;
    c.accuracy_window = 5;
    c.validation_every = 3;
    c.validation_mirroring = false;
    c.seed = seed;
    return c;
}

namespace {

struct SynthArgs {
    int domains = 2;
    int n = 20;
    std::vector<std::int64_t> shape{32};
    std::uint64_t seed = 0;
    int val = -1;  // per domain; default n / 5
    int test = 0;
    fs::path out;
    bool force = false;
};

struct TrainArgs {
    fs::path config, manifest, out;
    std::optional<fs::path> resume;
};

struct InferArgs {
    fs::path ckpt, in, out;
    std::optional<fs::path> manifest;
    std::string split = "test";
    bool no_mirror = false;
};

struct EvalArgs {
    std::vector<fs::path> pred;
    std::vector<std::string> names;
    fs::path ref, out;
    metrics::MetricsConfig cfg;
    int n_methods = 0;
};

struct ReportArgs {
    fs::path log, out;
    std::vector<fs::path> eval;
    std::optional<fs::path> methods;
};

struct RecipeArgs {
    fs::path out;
    std::optional<fs::path> config;
    std::uint64_t seed = 0;
    int domains = 2;
    int n = 20;
    std::int64_t shape = 32;
    bool force = false;
};

bool dir_nonempty(const fs::path& p) { return fs::exists(p) && fs::is_directory(p) && !fs::is_empty(p); }

fs::path synth(const SynthArgs& a, std::ostream& out) {
    if (a.domains < 2) throw std::invalid_argument("--domains must be >= 2 (at least two acquisition domains)");
    if (a.n <= 0) throw std::invalid_argument("--n must be positive");
    if (a.out.empty()) throw std::invalid_argument("--out is required");
    if (dir_nonempty(a.out) && !a.force)
        throw std::runtime_error(a.out.string() + " exists and is not empty (use --force to overwrite)");
    Shape3 shape{};
    if (a.shape.size() == 1) shape = {a.shape[0], a.shape[0], a.shape[0]};
    else if (a.shape.size() == 3) shape = {a.shape[0], a.shape[1], a.shape[2]};
    else throw std::invalid_argument("--shape takes one or three extents");
    const int val = a.val < 0 ? a.n / 5 : a.val;
    if (val + a.test >= a.n) throw std::invalid_argument("--val + --test must leave training cases in every domain");

    const auto specs = default_domain_specs(static_cast<std::size_t>(a.domains));
    const auto samples = generate_synthetic(specs, a.n, shape, a.seed);
    fs::create_directories(a.out / "images");
    fs::create_directories(a.out / "labels");
    DatasetManifest m;
    std::vector<std::string> names;
    for (const auto& s : specs) names.push_back(s.name);
    m.domains = DomainSet(names);
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const auto& s = samples[i];
        const int k = static_cast<int>(i % static_cast<std::size_t>(a.n));
        ManifestEntry e;
        e.case_id = s.case_id;
        e.image = a.out / "images" / (s.case_id + ".nii.gz");
        e.label = a.out / "labels" / (s.case_id + ".nii.gz");
        e.domain = m.domains.name(static_cast<std::size_t>(s.domain));
        e.split = k >= a.n - a.test ? Split::Test : (k >= a.n - a.test - val ? Split::Val : Split::Train);
        nifti::write_image(e.image, s.image);
        nifti::write_mask(e.label, s.label);
        m.entries.push_back(e);
    }
    const fs::path manifest = a.out / "manifest.json";
    save_manifest(m, manifest);
    out << "wrote " << samples.size() << " cases over " << a.domains << " domains to " << a.out.string() << "\n";
    return manifest;
}

TrainResult train_cmd(const RunConfig& cfg, const fs::path& manifest_path, const fs::path& out_dir,
                      const std::optional<fs::path>& resume, std::ostream& out) {
    const auto manifest = load_manifest(manifest_path);
    TrainOptions opts;
    opts.out_dir = out_dir;
    opts.resume = resume;
    opts.on_epoch = [&out](const EpochRecord& r) {
        out << "epoch " << r.epoch << " loss " << report::fmt(r.seg_loss_mean);
        if (r.val_dsc) out << " val_dsc " << report::fmt(*r.val_dsc);
        for (const auto& [s, a] : r.val_accuracy) out << " acc" << s << ' ' << report::fmt(a);
        out << " unlearn_steps " << r.unlearn_steps << "\n";
        out.flush();
    };
    fs::create_directories(out_dir);
    save_config(cfg, out_dir / "config.json");
    auto res = train(cfg, manifest, opts);
    out << "latest checkpoint " << res.latest_checkpoint.string() << "\n";
    return res;
}

std::size_t infer_cmd(const InferArgs& a, std::ostream& out) {
    std::vector<std::pair<std::string, fs::path>> inputs;
    if (a.manifest) {
        const auto m = load_manifest(*a.manifest);
        for (const auto& e : m.select(split_from_string(a.split))) inputs.emplace_back(e.case_id, e.image);
    } else {
        if (!fs::is_directory(a.in)) throw std::runtime_error("not a directory: " + a.in.string());
        std::vector<fs::path> files;
        for (const auto& e : fs::directory_iterator(a.in))
            if (e.is_regular_file() && nifti::has_nifti_extension(e.path())) files.push_back(e.path());
        std::sort(files.begin(), files.end());
        for (const auto& f : files) inputs.emplace_back(nifti::stem(f), f);
    }
    if (inputs.empty()) throw std::runtime_error("no input volumes");
    auto model = load_model(a.ckpt);
    fs::create_directories(a.out);
    for (const auto& [id, path] : inputs) {
        std::array<float, 3> spacing{};
        const Image img = rescale_intensity(nifti::read_image(path, &spacing));
        nifti::write_mask(a.out / (id + ".nii.gz"), segment_volume(model.net, img, !a.no_mirror), spacing);
    }
    out << "segmented " << inputs.size() << " volumes into " << a.out.string() << "\n";
    return inputs.size();
}

fs::path with_ext(const fs::path& p, const std::string& ext) {
    auto q = p;
    if (q.extension() == ".csv" || q.extension() == ".json") q.replace_extension();
    q += ext;
    return q;
}

void evaluate_cmd(const EvalArgs& a, std::ostream& out, std::ostream& err) {
    if (!a.names.empty() && a.names.size() != a.pred.size())
        throw std::invalid_argument("--name must be given once per --pred");
    auto cfg = a.cfg;
    cfg.n_methods = a.n_methods > 0 ? a.n_methods : static_cast<int>(a.pred.size());
    std::vector<report::MethodResult> methods;
    for (std::size_t i = 0; i < a.pred.size(); ++i) {
        const auto name = a.names.empty() ? a.pred[i].filename().string() : a.names[i];
        methods.push_back(report::evaluate_directory(name, a.pred[i], a.ref, cfg));
    }
    const auto rep = report::build_evaluation(std::move(methods), cfg);
    for (const auto& w : rep.warnings) err << "warning: " << w << "\n";
    if (!a.out.parent_path().empty()) fs::create_directories(a.out.parent_path());
    write_file_atomic(with_ext(a.out, ".csv"), report::evaluation_csv(rep));
    write_file_atomic(with_ext(a.out, ".json"), report::evaluation_json(rep).dump(2) + "\n");
    out << "wrote " << with_ext(a.out, ".csv").string() << " and " << with_ext(a.out, ".json").string() << "\n";
}

void report_cmd(const ReportArgs& a, std::ostream& out) {
    report::ReportInputs in{a.log, a.eval, a.methods, a.out};
    for (const auto& f : report::write_report(in)) out << "wrote " << f.string() << "\n";
}

void recipe_cmd(const RecipeArgs& a, std::ostream& out, std::ostream& err) {
    if (a.out.empty()) throw std::invalid_argument("--out is required");
    if (dir_nonempty(a.out) && !a.force)
        throw std::runtime_error(a.out.string() + " exists and is not empty (use --force to overwrite)");
    if (a.force && fs::exists(a.out)) fs::remove_all(a.out);
    RunConfig cfg = a.config ? load_config(*a.config) : recipe_config(a.seed);
    cfg.seed = a.seed;

    SynthArgs s;
    s.domains = a.domains;
    s.n = a.n;
    s.shape = {a.shape};
    s.seed = a.seed;
    s.val = std::max(1, a.n / 5);
    s.test = std::max(1, a.n / 5);
    s.out = a.out / "data";
    const auto manifest = synth(s, out);

    train_cmd(cfg, manifest, a.out / "run", std::nullopt, out);

    InferArgs inf;
    inf.ckpt = a.out / "run" / kBestCheckpointName;
    inf.manifest = manifest;
    inf.split = "test";
    inf.out = a.out / "pred";
    infer_cmd(inf, out);

    EvalArgs ev;
    ev.pred = {a.out / "pred"};
    ev.names = {"ssmsu"};
    ev.ref = a.out / "data" / "labels";
    ev.out = a.out / "eval";
    ev.cfg.seed = a.seed;
    evaluate_cmd(ev, out, err);

    ReportArgs rp;
    rp.log = a.out / "run" / kEventLogName;
    rp.eval = {a.out / "eval.json"};
    rp.out = a.out / "report";
    report_cmd(rp, out);
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Multi-stage domain unlearning for lesion segmentation"};
    app.require_subcommand(1);

    SynthArgs sa;
    auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic multi-domain dataset and manifest");
    synth_cmd->add_option("--domains", sa.domains, "Number of acquisition domains (>= 2)")->capture_default_str();
    synth_cmd->add_option("--n", sa.n, "Cases per domain")->capture_default_str();
    synth_cmd->add_option("--shape", sa.shape, "Volume extent: one value or three")->expected(1, 3);
    synth_cmd->add_option("--seed", sa.seed, "Random seed")->capture_default_str();
    synth_cmd->add_option("--val", sa.val, "Validation cases per domain (default n/5)");
    synth_cmd->add_option("--test", sa.test, "Test cases per domain")->capture_default_str();
    synth_cmd->add_option("--out", sa.out, "Output directory")->required();
    synth_cmd->add_flag("--force", sa.force, "Overwrite a non-empty output directory");

    TrainArgs ta;
    auto* train_sub = app.add_subcommand("train", "Train the segmentation network with scheduled unlearning");
    train_sub->add_option("--config", ta.config, "Run configuration (JSON)")->required()->check(CLI::ExistingFile);
    train_sub->add_option("--manifest", ta.manifest, "Dataset manifest (JSON)")->required()->check(CLI::ExistingFile);
    train_sub->add_option("--out", ta.out, "Run directory for checkpoints and the event log")->required();
    train_sub->add_option("--resume", ta.resume, "Checkpoint to resume from")->check(CLI::ExistingFile);

    InferArgs ia;
    auto* infer_sub = app.add_subcommand("infer", "Segment volumes with a trained checkpoint");
    infer_sub->add_option("--ckpt", ia.ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
    auto* in_opt = infer_sub->add_option("--in", ia.in, "Directory of NIfTI images");
    auto* man_opt = infer_sub->add_option("--manifest", ia.manifest, "Manifest to read images from instead of --in");
    infer_sub->add_option("--split", ia.split, "Manifest split to segment")->capture_default_str();
    infer_sub->add_option("--out", ia.out, "Output directory for masks")->required();
    infer_sub->add_flag("--no-mirror", ia.no_mirror, "Single pass instead of the 8-way mirror ensemble");
    in_opt->excludes(man_opt);

    EvalArgs ea;
    auto* eval_sub = app.add_subcommand("evaluate", "Voxel- and lesion-wise metrics against reference masks");
    eval_sub->add_option("--pred", ea.pred, "Prediction directory (repeat for several methods)")->required();
    eval_sub->add_option("--name", ea.names, "Method name per --pred");
    eval_sub->add_option("--ref", ea.ref, "Reference mask directory")->required();
    eval_sub->add_option("--out", ea.out, "Report path; .csv and .json are written")->required();
    eval_sub->add_option("--t-iou", ea.cfg.t_iou, "Lesion IoU threshold")->capture_default_str();
    eval_sub->add_option("--resamples", ea.cfg.bootstrap_resamples, "Bootstrap resamples")->capture_default_str();
    eval_sub->add_option("--alpha", ea.cfg.alpha, "Significance level")->capture_default_str();
    eval_sub->add_option("--n-methods", ea.n_methods, "Bonferroni factor (default: number of --pred)");
    eval_sub->add_option("--seed", ea.cfg.seed, "Bootstrap seed")->capture_default_str();

    ReportArgs ra;
    auto* report_sub = app.add_subcommand("report", "Stage-accuracy table, method ranking and training plots");
    report_sub->add_option("--log", ra.log, "Event log of a training run")->required();
    report_sub->add_option("--eval", ra.eval, "Evaluation JSON (repeatable)");
    report_sub->add_option("--methods", ra.methods, "CSV of per-method metric means");
    report_sub->add_option("--out", ra.out, "Output directory")->required();

    RecipeArgs ca;
    auto* recipe_sub = app.add_subcommand("recipe", "synth, train, infer, evaluate and report in one go");
    recipe_sub->add_option("--out", ca.out, "Output directory")->required();
    recipe_sub->add_option("--config", ca.config, "Run configuration (default: small toy network)");
    recipe_sub->add_option("--seed", ca.seed, "Seed shared by every stage")->capture_default_str();
    recipe_sub->add_option("--domains", ca.domains, "Number of domains")->capture_default_str();
    recipe_sub->add_option("--n", ca.n, "Cases per domain")->capture_default_str();
    recipe_sub->add_option("--shape", ca.shape, "Cubic volume extent")->capture_default_str();
    recipe_sub->add_flag("--force", ca.force, "Replace a non-empty output directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kOk;
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) {
            out << app.help();
            return kOk;
        }
        err << "usage error: " << e.what() << "\n" << app.help();
        return kUsageError;
    }

    try {
        if (*synth_cmd) synth(sa, out);
        else if (*train_sub) train_cmd(load_config(ta.config), ta.manifest, ta.out, ta.resume, out);
        else if (*infer_sub) {
            if (!ia.manifest && ia.in.empty()) {
                err << "usage error: infer needs --in or --manifest\n";
                return kUsageError;
            }
            infer_cmd(ia, out);
        } else if (*eval_sub) evaluate_cmd(ea, out, err);
        else if (*report_sub) report_cmd(ra, out);
        else if (*recipe_sub) recipe_cmd(ca, out, err);
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kRuntimeError;
    }
    return kOk;
}

}  // namespace msu::cli
