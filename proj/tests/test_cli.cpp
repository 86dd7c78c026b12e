#include "torch_doctest.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "msunlearn/cli.hpp"
#include "msunlearn/data.hpp"
#include "msunlearn/nifti.hpp"
#include "msunlearn/report.hpp"

using namespace msu;
namespace fs = std::filesystem;

namespace {

struct Result {
    int code;
    std::string out, err;
};

Result run_cli(std::vector<std::string> args) {
    args.insert(args.begin(), "msunlearn");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
    return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
    auto p = fs::temp_directory_path() / ("msunlearn_test_cli_" + name);
    fs::remove_all(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::vector<std::string> csv_rows(const std::string& text) {
    std::vector<std::string> rows;
    std::istringstream in(text);
    for (std::string line; std::getline(in, line);) rows.push_back(line);
    return rows;
}

std::vector<std::string> split(const std::string& s) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream in(s);
    while (std::getline(in, cell, ',')) out.push_back(cell);
    if (!s.empty() && s.back() == ',') out.push_back("");
    return out;
}

}  // namespace

TEST_CASE("synth writes the requested cases deterministically") {
    const auto a = scratch("synth_a"), b = scratch("synth_b");
    auto r = run_cli({"synth", "--domains", "2", "--n", "20", "--shape", "32", "--seed", "7", "--out", a.string()});
    REQUIRE(r.code == cli::kOk);
    const auto m = load_manifest(a / "manifest.json");
    CHECK(m.entries.size() == 40);
    CHECK(m.domains.size() == 2);
    CHECK(std::distance(fs::directory_iterator(a / "images"), fs::directory_iterator()) == 40);
    CHECK(m.select(Split::Val).size() == 8);

    REQUIRE(run_cli({"synth", "--domains", "2", "--n", "20", "--shape", "32", "--seed", "7", "--out", b.string()}).code ==
            cli::kOk);
    for (const auto& e : fs::directory_iterator(a / "images"))
        CHECK(slurp(e.path()) == slurp(b / "images" / e.path().filename()));

    // refuses to overwrite without --force
    CHECK(run_cli({"synth", "--n", "4", "--out", a.string()}).code == cli::kRuntimeError);
    CHECK(run_cli({"synth", "--n", "5", "--shape", "16", "--out", a.string(), "--force"}).code == cli::kOk);
    fs::remove_all(a);
    fs::remove_all(b);
}

TEST_CASE("usage errors") {
    const auto d = scratch("usage");
    const auto one = run_cli({"synth", "--domains", "1", "--n", "4", "--out", d.string()});
    CHECK(one.code != cli::kOk);
    CHECK(one.err.find("domains") != std::string::npos);

    const auto no_cfg = run_cli({"train", "--manifest", "m.json", "--out", d.string()});
    CHECK(no_cfg.code == cli::kUsageError);
    CHECK(no_cfg.err.find("--config") != std::string::npos);

    CHECK(run_cli({"frobnicate"}).code == cli::kUsageError);
    CHECK(run_cli({}).code == cli::kUsageError);
    CHECK(run_cli({"synth", "--n", "x", "--out", d.string()}).code == cli::kUsageError);
    fs::remove_all(d);
}

TEST_CASE("every subcommand has help") {
    for (const char* sub : {"synth", "train", "infer", "evaluate", "report", "recipe"}) {
        const auto r = run_cli({sub, "--help"});
        CHECK(r.code == cli::kOk);
        CHECK(r.out.find("--out") != std::string::npos);
    }
    CHECK(run_cli({"--help"}).code == cli::kOk);
}

TEST_CASE("evaluate, train and report through the command line") {
    const auto d = scratch("flow");
    REQUIRE(run_cli({"synth", "--n", "6", "--shape", "16", "--seed", "3", "--val", "1", "--test", "1", "--out",
                 (d / "data").string()})
                .code == cli::kOk);
    const auto labels = d / "data" / "labels";

    SUBCASE("prediction equal to the reference scores DSC 1") {
        REQUIRE(run_cli({"evaluate", "--pred", labels.string(), "--ref", labels.string(), "--out", (d / "ev").string()})
                    .code == cli::kOk);
        const auto rows = csv_rows(slurp(d / "ev.csv"));
        REQUIRE(rows.size() > 1);
        const auto header = split(rows[0]);
        const auto col = std::find(header.begin(), header.end(), "DSC") - header.begin();
        const auto kind = std::find(header.begin(), header.end(), "kind") - header.begin();
        int cases = 0;
        for (std::size_t i = 1; i < rows.size(); ++i) {
            const auto c = split(rows[i]);
            if (c[kind] != "case") continue;
            CHECK(std::stod(c[col]) == 1.0);
            ++cases;
        }
        CHECK(cases == 12);
        CHECK(fs::exists(d / "ev.json"));
    }

    SUBCASE("two methods yield rank scores between 1 and 2") {
        const auto empty = d / "empty";
        fs::create_directories(empty);
        for (const auto& e : fs::directory_iterator(labels)) {
            const auto m = nifti::read_mask(e.path());
            Mask blank(m.shape);
            blank.data[0] = 1;
            nifti::write_mask(empty / e.path().filename(), blank);
        }
        REQUIRE(run_cli({"evaluate", "--pred", labels.string(), "--name", "exact", "--pred", empty.string(), "--name",
                     "blank", "--ref", labels.string(), "--out", (d / "two").string()})
                    .code == cli::kOk);
        const auto rows = csv_rows(slurp(d / "two.csv"));
        const auto header = split(rows[0]);
        const auto rs = std::find(header.begin(), header.end(), "RS") - header.begin();
        const auto kind = std::find(header.begin(), header.end(), "kind") - header.begin();
        int found = 0;
        for (std::size_t i = 1; i < rows.size(); ++i) {
            const auto c = split(rows[i]);
            if (c[kind] != "rank") continue;
            const double v = std::stod(c[rs]);
            CHECK(v >= 1.0);
            CHECK(v <= 2.0);
            ++found;
        }
        CHECK(found == 2);
        CHECK(slurp(d / "two.csv").find("p_adjusted") != std::string::npos);
    }

    SUBCASE("a warm-up only run reports n/a after unlearning") {
        auto cfg = cli::recipe_config(1);
        cfg.encoder_depth = 3;
        cfg.patch_size = {16, 16, 16};
        cfg.epochs = 1;
        cfg.warmup_epochs = 1;
        cfg.iterations_per_epoch = 2;
        cfg.batch_size = 2;
        cfg.unlearn_stages = {3};
        save_config(cfg, d / "cfg.json");
        const auto tr = run_cli({"train", "--config", (d / "cfg.json").string(), "--manifest",
                             (d / "data" / "manifest.json").string(), "--out", (d / "run").string()});
        REQUIRE(tr.code == cli::kOk);
        CHECK(fs::exists(d / "run" / "best.pt"));

        REQUIRE(run_cli({"infer", "--ckpt", (d / "run" / "best.pt").string(), "--manifest",
                     (d / "data" / "manifest.json").string(), "--out", (d / "pred").string(), "--no-mirror"})
                    .code == cli::kOk);
        CHECK(std::distance(fs::directory_iterator(d / "pred"), fs::directory_iterator()) == 2);

        REQUIRE(run_cli({"report", "--log", (d / "run" / "events.jsonl").string(), "--out", (d / "rep").string()}).code ==
                cli::kOk);
        const auto rows = csv_rows(slurp(d / "rep" / "stage_accuracy.csv"));
        REQUIRE(rows.size() == 4);
        const auto header = split(rows[0]);
        const auto col = std::find(header.begin(), header.end(), "post_unlearning") - header.begin();
        REQUIRE(col < static_cast<long>(header.size()));
        for (std::size_t i = 1; i < rows.size(); ++i) CHECK(split(rows[i])[col] == "n/a");
        CHECK(fs::exists(d / "rep" / "accuracy.svg"));
    }
    fs::remove_all(d);
}
