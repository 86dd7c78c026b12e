#include "torch_doctest.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "msunlearn/trainer.hpp"

using namespace msu;
namespace fs = std::filesystem;

namespace {

RunConfig tiny_config() {
    auto cfg = default_config(3);
    cfg.patch_size = {16, 16, 16};
    cfg.base_channels = 4;
    cfg.max_channels = 16;
    cfg.epochs = 4;
    cfg.warmup_epochs = 1;
    cfg.iterations_per_epoch = 3;
    cfg.batch_size = 2;
    cfg.patience = 1;
    cfg.accuracy_window = 1;
    cfg.unlearn_stages = {2, 3};
    cfg.validation_every = 2;
    cfg.validation_mirroring = false;
    cfg.seed = 5;
    return cfg;
}

struct TinyData {
    DomainSet domains{std::vector<std::string>{"scanner0", "scanner1"}};
    std::vector<VolumeSample> train, val;
    TinyData() {
        const auto all = generate_synthetic(default_domain_specs(2), 4, {16, 16, 16}, 1);
        for (const auto& s : all) (s.case_id.back() == '3' ? val : train).push_back(s);
    }
};

const TinyData& data() {
    static const TinyData d;
    return d;
}

fs::path scratch(const std::string& name) {
    auto p = fs::temp_directory_path() / ("msunlearn_test_trainer_" + name);
    fs::remove_all(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

int count_unlearn_events(const std::vector<nlohmann::json>& ev) {
    int n = 0;
    for (const auto& e : ev)
        if (e.at("type") == "step") n += static_cast<int>(e.at("unlearn").size());
    return n;
}

}  // namespace

TEST_CASE("a run that is all warm-up never unlearns") {
    auto cfg = tiny_config();
    cfg.epochs = 1;
    cfg.warmup_epochs = 1;
    const auto dir = scratch("warm");
    TrainOptions opt;
    opt.out_dir = dir;
    const auto r = train(cfg, data().domains, data().train, data().val, opt);
    const auto ev = read_event_log(r.event_log);
    CHECK(count_unlearn_events(ev) == 0);
    CHECK(ev.front().at("type") == "run");
    CHECK(r.history.size() == 1);
    CHECK(r.history[0].unlearn_steps == 0);
    CHECK(fs::exists(r.latest_checkpoint));
    CHECK(fs::exists(r.best_checkpoint));
    fs::remove_all(dir);
}

TEST_CASE("identical seeds give identical logs, and resuming continues the same run") {
    const auto cfg = tiny_config();
    const auto a = scratch("a"), b = scratch("b"), c = scratch("c");
    TrainOptions oa;
    oa.out_dir = a;
    const auto ra = train(cfg, data().domains, data().train, data().val, oa);
    TrainOptions ob;
    ob.out_dir = b;
    train(cfg, data().domains, data().train, data().val, ob);
    CHECK(slurp(a / kEventLogName) == slurp(b / kEventLogName));

    // unlearning happens after warm-up with patience 1
    CHECK(count_unlearn_events(read_event_log(ra.event_log)) > 0);

    TrainOptions oc;
    oc.out_dir = c;
    oc.stop_after_epoch = 2;
    const auto part = train(cfg, data().domains, data().train, data().val, oc);
    CHECK(part.history.size() == 2);
    TrainOptions resume;
    resume.out_dir = c;
    resume.resume = c / kLatestCheckpointName;
    const auto rest = train(cfg, data().domains, data().train, data().val, resume);
    CHECK(rest.history.size() == 4);
    CHECK(slurp(c / kEventLogName) == slurp(a / kEventLogName));
    const bool same_history = rest.history == ra.history;
    CHECK(same_history);

    // a different config cannot resume this checkpoint
    auto other = cfg;
    other.seed = 6;
    TrainOptions bad;
    bad.out_dir = scratch("bad");
    bad.resume = c / kLatestCheckpointName;
    CHECK_THROWS(train(other, data().domains, data().train, data().val, bad));
    for (const auto& d : {a, b, c, bad.out_dir}) fs::remove_all(d);
}

TEST_CASE("best checkpoint tracks the highest validation DSC") {
    auto cfg = tiny_config();
    cfg.validation_every = 1;
    const auto dir = scratch("best");
    TrainOptions opt;
    opt.out_dir = dir;
    std::vector<int> seen;
    opt.on_epoch = [&](const EpochRecord& r) { seen.push_back(r.epoch); };
    const auto r = train(cfg, data().domains, data().train, data().val, opt);
    CHECK(seen == std::vector<int>{1, 2, 3, 4});
    REQUIRE(r.best_val_dsc.has_value());
    for (const auto& h : r.history) {
        REQUIRE(h.val_dsc.has_value());
        CHECK(*r.best_val_dsc >= *h.val_dsc);
        CHECK(h.val_accuracy.size() == 3);
    }
    CHECK(*r.best_val_dsc >= *r.history.back().val_dsc);
    CHECK(load_model(r.best_checkpoint).epoch == r.best_epoch);
    CHECK(load_model(r.latest_checkpoint).epoch == 4);

    // epoch records agree with the log
    int k = 0;
    for (const auto& e : read_event_log(r.event_log)) {
        if (e.at("type") != "epoch") continue;
        CHECK(e.get<EpochRecord>() == r.history[k++]);
    }
    CHECK(k == 4);
    fs::remove_all(dir);
}

TEST_CASE("inference produces deterministic binary masks") {
    auto cfg = tiny_config();
    cfg.epochs = 2;
    const auto dir = scratch("infer");
    TrainOptions opt;
    opt.out_dir = dir;
    const auto r = train(cfg, data().domains, data().train, data().val, opt);
    std::vector<Image> vols{data().val[0].image, center_crop_or_pad(data().val[1].image, Shape3{20, 12, 16})};
    const auto m1 = infer(r.latest_checkpoint, vols);
    const auto m2 = infer(r.latest_checkpoint, vols);
    REQUIRE(m1.size() == 2);
    const bool same_masks = m1 == m2;
    CHECK(same_masks);
    CHECK(m1[1].shape == Shape3{20, 12, 16});
    for (const auto& m : m1)
        for (auto v : m.data) CHECK(v <= 1);

    const auto lm = load_model(r.latest_checkpoint);
    CHECK(lm.cfg == cfg);
    CHECK(lm.domains == data().domains);
    CHECK(lm.classifiers.size() == 3);
    fs::remove_all(dir);
}

TEST_CASE("a confident background model returns an empty mask") {
    model::NetConfig nc;
    nc.depth = 2;
    nc.patch = {8, 8, 8};
    nc.base_channels = 2;
    model::SegNet net(nc);
    // zero every weight, then bias the head towards background
    torch::NoGradGuard ng;
    for (auto& p : net->parameters()) p.zero_();
    for (auto& p : net->named_parameters())
        if (p.key().find("head") != std::string::npos && p.key().find("bias") != std::string::npos)
            p.value().copy_(torch::tensor({5.0f, -5.0f}));
    const auto m = segment_volume(net, Image({8, 8, 8}, 0.0f));
    CHECK(std::count(m.data.begin(), m.data.end(), 1) == 0);
}
