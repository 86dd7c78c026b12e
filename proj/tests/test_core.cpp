#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "msunlearn/core.hpp"
#include "msunlearn/nifti.hpp"

using namespace msu;
namespace fs = std::filesystem;

namespace {

ConfigErrorKind kind_of(const RunConfig& cfg, const DomainSet& d) {
    try {
        validate_config(cfg, d);
    } catch (const ConfigError& e) {
        return e.kind();
    }
    FAIL("expected a ConfigError");
    return ConfigErrorKind::TooFewDomains;
}

fs::path scratch(const std::string& name) {
    auto p = fs::temp_directory_path() / ("msunlearn_test_core_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

}  // namespace

TEST_CASE("upper-bound accuracy") {
    CHECK(uba(2, 0.0) == 0.5);
    CHECK(uba(2, 0.1) == doctest::Approx(0.6));
    CHECK(uba(4, 0.05) == doctest::Approx(0.30));
    CHECK(uba(3, 0.0) == 1.0 / 3.0);
    CHECK(uba(2, 0.5) == 1.0);
    CHECK_THROWS_AS(uba(2, 0.6), ConfigError);
    CHECK_THROWS_AS(uba(2, -0.01), ConfigError);
    // monotone in both arguments
    for (double t = 0.0; t < 0.3; t += 0.05) {
        CHECK(uba(2, t + 0.05) > uba(2, t));
        CHECK(uba(3, t) < uba(2, t));
    }
}

TEST_CASE("config validation names the violated invariant") {
    const DomainSet two({"a", "b"});
    auto ok = default_config(6);
    ok.batch_size = 8;
    ok.epochs = 100;
    ok.warmup_epochs = 10;
    CHECK(validate_config(ok, two) == ok);
    CHECK(validate_config(validate_config(ok, two), two) == ok);

    auto c = ok;
    c.batch_size = 9;
    CHECK(kind_of(c, two) == ConfigErrorKind::BatchNotDivisible);
    c = ok;
    c.tolerance = 0.6;
    CHECK(kind_of(c, two) == ConfigErrorKind::ToleranceOutOfRange);
    c = ok;
    c.warmup_epochs = 101;
    CHECK(kind_of(c, two) == ConfigErrorKind::WarmupExceedsTotal);
    c = ok;
    c.encoder_depth = 1;
    CHECK(kind_of(c, two) == ConfigErrorKind::DepthTooSmall);
    c = ok;
    c.patch_size = {128, 100, 128};
    CHECK(kind_of(c, two) == ConfigErrorKind::PatchNotDivisible);
    c = ok;
    c.unlearn_stages = {7};
    CHECK(kind_of(c, two) == ConfigErrorKind::UnlearnStageOutOfRange);
    c = ok;
    c.schedule_mode = ScheduleMode::FixedLur;
    c.lur = {0, 1};
    CHECK(kind_of(c, two) == ConfigErrorKind::InvalidLur);
    c = ok;
    c.patience = 0;
    CHECK(kind_of(c, two) == ConfigErrorKind::NonPositivePatience);
    c = ok;
    c.augmentation.p_noise = 1.5;
    CHECK(kind_of(c, two) == ConfigErrorKind::InvalidProbability);
    CHECK(kind_of(ok, DomainSet({"a"})) == ConfigErrorKind::TooFewDomains);
}

TEST_CASE("default configuration") {
    const auto c = default_config(6);
    CHECK(c.warmup_epochs * 10 == c.epochs);
    CHECK(c.unlearn_stages == std::vector<int>{4, 5, 6});
    CHECK(c.tolerance == 0.05);
    CHECK(default_config(4).unlearn_stages == std::vector<int>{2, 3, 4});
    CHECK(stage_extent({128, 128, 64}, 3) == Shape3{32, 32, 16});
}

TEST_CASE("config JSON round trip") {
    auto c = default_config(4);
    c.seed = 99;
    c.schedule_mode = ScheduleMode::FixedLur;
    c.lur = {3, 1};
    c.optim.unlearn_lr = 0.123;
    c.augmentation.p_mirror = 0.1;
    const auto dir = scratch("cfg");
    save_config(c, dir / "c.json");
    CHECK(load_config(dir / "c.json") == c);
    nlohmann::json j = c;
    CHECK(j.get<RunConfig>() == c);
    CHECK(schedule_mode_from_string(to_string(ScheduleMode::SelfSupervised)) == ScheduleMode::SelfSupervised);
    fs::remove_all(dir);
}

TEST_CASE("domain set lookups") {
    const DomainSet d({"x", "y", "z"});
    CHECK(d.index_of("y") == 1);
    CHECK(d.contains("z"));
    CHECK_FALSE(d.contains("w"));
    CHECK_THROWS_AS(d.index_of("w"), std::out_of_range);
}

TEST_CASE("NIfTI round trip") {
    const auto dir = scratch("nii");
    Image img({3, 4, 5});
    for (std::size_t i = 0; i < img.size(); ++i) img.data[i] = static_cast<float>(i) * 0.25f - 2.0f;
    Mask m({3, 4, 5});
    for (std::size_t i = 0; i < m.size(); i += 3) m.data[i] = 1;
    for (const char* ext : {".nii", ".nii.gz"}) {
        const auto ip = dir / (std::string("img") + ext);
        const auto mp = dir / (std::string("mask") + ext);
        nifti::write_image(ip, img, {1.0f, 2.0f, 0.5f});
        nifti::write_mask(mp, m);
        std::array<float, 3> sp{};
        CHECK(nifti::read_image(ip, &sp) == img);
        CHECK(sp == std::array<float, 3>{1.0f, 2.0f, 0.5f});
        CHECK(nifti::read_mask(mp) == m);
        CHECK(nifti::has_nifti_extension(ip));
        CHECK(nifti::stem(ip) == "img");
    }
    CHECK_FALSE(nifti::has_nifti_extension(dir / "a.json"));
    std::ofstream(dir / "bad.nii") << "not a nifti file";
    CHECK_THROWS_AS(nifti::read_image(dir / "bad.nii"), nifti::NiftiError);
    fs::remove_all(dir);
}

TEST_CASE("atomic file writes replace the target") {
    const auto dir = scratch("atomic");
    write_file_atomic(dir / "f.txt", "one");
    write_file_atomic(dir / "f.txt", "two");
    std::ifstream in(dir / "f.txt");
    std::string s;
    in >> s;
    CHECK(s == "two");
    CHECK(std::distance(fs::directory_iterator(dir), fs::directory_iterator()) == 1);
    fs::remove_all(dir);
}
