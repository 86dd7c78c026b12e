#include "torch_doctest.hpp"

#include <cmath>
#include <vector>

#include "gradcheck.hpp"
#include "msunlearn/losses.hpp"

using namespace msu::losses;

namespace {

torch::Tensor dbl(std::vector<double> v) { return torch::tensor(v, torch::kFloat64); }

torch::Tensor random_probs(std::vector<int64_t> shape, uint64_t seed) {
    torch::manual_seed(seed);
    return torch::rand(shape, torch::kFloat64) * 0.9 + 0.05;
}

// Scalar oracles written with plain loops.
double dice_oracle(const std::vector<double>& p, const std::vector<double>& g, double eps) {
    double tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        tp += p[i] * g[i];
        fp += p[i] * (1 - g[i]);
        fn += (1 - p[i]) * g[i];
    }
    return 1.0 - (2 * tp + eps) / (2 * tp + fp + fn + eps);
}

double kl_uniform_oracle(const std::vector<double>& p) {
    double s = 0;
    for (double v : p)
        if (v > 0) s += v * std::log(v * static_cast<double>(p.size()));
    return s;
}

std::vector<double> to_vec(const torch::Tensor& t) {
    auto c = t.contiguous().to(torch::kFloat64);
    return {c.data_ptr<double>(), c.data_ptr<double>() + c.numel()};
}

}  // namespace

TEST_CASE("dice loss on hand values") {
    const auto p = dbl({0.9, 0.2, 0.6, 0.0});
    const auto g = dbl({1, 0, 1, 1});
    const double expect = dice_oracle(to_vec(p), to_vec(g), 1e-5);
    CHECK(dice_loss(p, g).item<double>() == doctest::Approx(expect).epsilon(1e-12));
    // perfect prediction and empty/empty both give ~0
    CHECK(dice_loss(g, g).item<double>() == doctest::Approx(0.0));
    CHECK(dice_loss(dbl({0, 0}), dbl({0, 0})).item<double>() == doctest::Approx(0.0));
    // completely wrong gives ~1
    CHECK(dice_loss(dbl({1, 0}), dbl({0, 1})).item<double>() == doctest::Approx(1.0).epsilon(1e-4));

    const auto c = soft_counts(p, g);
    CHECK(c.tp == doctest::Approx(1.5));
    CHECK(c.fp == doctest::Approx(0.2));
    CHECK(c.fn == doctest::Approx(1.5));
    CHECK(c.tn == doctest::Approx(0.8));
}

TEST_CASE("dice loss averages per-sample values over the batch") {
    const auto p = random_probs({3, 4, 4, 4}, 1);
    const auto g = (torch::rand({3, 4, 4, 4}, torch::kFloat64) > 0.6).to(torch::kFloat64);
    double mean = 0;
    for (int b = 0; b < 3; ++b) mean += dice_oracle(to_vec(p[b]), to_vec(g[b]), 1e-5) / 3.0;
    CHECK(dice_loss(p, g).item<double>() == doctest::Approx(mean).epsilon(1e-12));
}

TEST_CASE("dice loss is invariant to a shared voxel permutation") {
    const auto p = random_probs({1, 64}, 2);
    const auto g = (torch::rand({1, 64}, torch::kFloat64) > 0.5).to(torch::kFloat64);
    const auto perm = torch::randperm(64);
    CHECK(dice_loss(p.index_select(1, perm), g.index_select(1, perm)).item<double>() ==
          doctest::Approx(dice_loss(p, g).item<double>()).epsilon(1e-12));
}

TEST_CASE("cross entropy on hand values and under class permutation") {
    // one position, three classes
    const auto y = dbl({0.2, 0.5, 0.3});
    const auto t = dbl({0, 1, 0});
    CHECK(cross_entropy(y, t).item<double>() == doctest::Approx(-std::log(0.5)));

    const auto probs = torch::softmax(torch::randn({2, 3, 4, 4, 4}, torch::kFloat64), 1);
    const auto cls = torch::randint(0, 3, {2, 4, 4, 4}, torch::kLong);
    const auto onehot = torch::one_hot(cls, 3).permute({0, 4, 1, 2, 3}).to(torch::kFloat64);
    const double base = cross_entropy(probs, onehot).item<double>();
    const auto perm = torch::tensor(std::vector<int64_t>{2, 0, 1});
    CHECK(cross_entropy(probs.index_select(1, perm), onehot.index_select(1, perm)).item<double>() ==
          doctest::Approx(base).epsilon(1e-12));

    // the logits form agrees with the probability form
    const auto logits = torch::randn({2, 3, 4, 4, 4}, torch::kFloat64);
    CHECK(cross_entropy_with_logits(logits, cls).item<double>() ==
          doctest::Approx(cross_entropy(torch::softmax(logits, 1), onehot).item<double>()).epsilon(1e-10));

    // floor keeps the log finite
    CHECK(std::isfinite(cross_entropy(dbl({0.0, 1.0}), dbl({1, 0})).item<double>()));
}

TEST_CASE("segmentation loss is dice on the foreground plus cross entropy") {
    const auto logits = torch::randn({2, 2, 4, 4, 4}, torch::kFloat64);
    const auto label = (torch::rand({2, 4, 4, 4}, torch::kFloat64) > 0.7).to(torch::kFloat64);
    const auto probs = torch::softmax(logits, 1);
    const double expect = dice_loss(probs.select(1, 1), label).item<double>() +
                          cross_entropy_with_logits(logits, label.to(torch::kLong)).item<double>();
    CHECK(segmentation_loss(logits, label).item<double>() == doctest::Approx(expect).epsilon(1e-10));
}

TEST_CASE("confusion loss is KL divergence from the uniform posterior") {
    for (int n : {2, 3, 5}) {
        const auto uniform = torch::full({4, n}, 1.0 / n, torch::kFloat64);
        CHECK(confusion_loss(uniform).item<double>() == 0.0);
        auto onehot = torch::zeros({4, n}, torch::kFloat64);
        onehot.select(1, 0).fill_(1.0);
        CHECK(std::abs(confusion_loss(onehot).item<double>() - std::log(double(n))) < 1e-9);
    }
    for (int trial = 0; trial < 50; ++trial) {
        const auto p = torch::softmax(torch::randn({3, 4}, torch::kFloat64) * 3, 1);
        double expect = 0;
        for (int r = 0; r < 3; ++r) expect += kl_uniform_oracle(to_vec(p[r])) / 3.0;
        const double got = confusion_loss(p).item<double>();
        CHECK(got == doctest::Approx(expect).epsilon(1e-12));
        CHECK(got >= 0.0);
        CHECK(got <= std::log(4.0) + 1e-12);
    }
    CHECK_THROWS_AS(confusion_loss(torch::ones({3, 1}, torch::kFloat64)), std::invalid_argument);
}

TEST_CASE("confusion loss grows as the posterior sharpens") {
    double prev = -1;
    for (double a = 0.5; a <= 1.0 + 1e-12; a += 0.05) {
        const double v = confusion_loss(dbl({a, 1 - a}).unsqueeze(0)).item<double>();
        CHECK(v > prev);
        prev = v;
    }
}

TEST_CASE("descending the confusion loss moves the posterior towards uniform") {
    auto logits = torch::tensor(std::vector<double>{3.0, -1.0, 0.5}, torch::kFloat64).unsqueeze(0).requires_grad_(true);
    const auto post = ClassifierPosterior::from_logits(logits);
    CHECK(post.n_domains() == 3);
    CHECK(torch::allclose(post.target(), torch::full({1, 3}, 1.0 / 3, torch::kFloat64)));
    const double before = confusion_loss(post).item<double>();
    confusion_loss(post).backward();
    const auto stepped = (logits - 0.5 * logits.grad()).detach();
    CHECK(confusion_loss(torch::softmax(stepped, 1)).item<double>() < before);
}

TEST_CASE("gradients match central finite differences") {
    const auto g = (torch::rand({2, 4, 4, 4}, torch::kFloat64) > 0.5).to(torch::kFloat64);
    CHECK(gradcheck::relative_error([&](const torch::Tensor& p) { return dice_loss(p, g); },
                                    random_probs({2, 4, 4, 4}, 3)) < 1e-4);

    const auto t = torch::one_hot(torch::randint(0, 2, {1, 4, 4, 4}, torch::kLong), 2)
                       .permute({0, 4, 1, 2, 3})
                       .to(torch::kFloat64);
    CHECK(gradcheck::relative_error([&](const torch::Tensor& p) { return cross_entropy(p, t); },
                                    random_probs({1, 2, 4, 4, 4}, 4)) < 1e-4);

    CHECK(gradcheck::relative_error([](const torch::Tensor& p) { return confusion_loss(p); },
                                    random_probs({4, 3}, 5)) < 1e-4);
    CHECK(gradcheck::relative_error(
              [](const torch::Tensor& z) { return confusion_loss(torch::softmax(z, 1)); },
              torch::randn({4, 2}, torch::kFloat64)) < 1e-4);

    const auto label = (torch::rand({1, 4, 4, 4}, torch::kFloat64) > 0.6).to(torch::kFloat64);
    CHECK(gradcheck::relative_error([&](const torch::Tensor& z) { return segmentation_loss(z, label); },
                                    torch::randn({1, 2, 4, 4, 4}, torch::kFloat64)) < 1e-4);
}
