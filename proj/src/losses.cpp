#include "msunlearn/losses.hpp"

#include <cmath>
#include <stdexcept>

namespace msu::losses {
namespace {

torch::Tensor as_rows(const torch::Tensor& t) {
    if (t.dim() == 0) throw std::invalid_argument("expected at least one dimension");
    return t.dim() == 1 ? t.reshape({1, -1}) : t.reshape({t.size(0), -1});
}

}  // namespace

ConfusionCounts soft_counts(const torch::Tensor& fg_prob, const torch::Tensor& label) {
    const auto p = fg_prob.to(torch::kDouble).flatten();
    const auto l = label.to(torch::kDouble).flatten();
    if (p.numel() != l.numel()) throw std::invalid_argument("soft_counts: shape mismatch");
    return {(p * l).sum().item<double>(), (p * (1 - l)).sum().item<double>(), ((1 - p) * l).sum().item<double>(),
            ((1 - p) * (1 - l)).sum().item<double>()};
}

torch::Tensor dice_loss(const torch::Tensor& fg_prob, const torch::Tensor& label, double eps) {
    if (fg_prob.sizes() != label.sizes()) throw std::invalid_argument("dice_loss: shape mismatch");
    const auto p = as_rows(fg_prob);
    const auto l = as_rows(label).to(p.dtype());
    const auto tp = (p * l).sum(1);
    const auto fp = (p * (1 - l)).sum(1);
    const auto fn = ((1 - p) * l).sum(1);
    return (1 - (2 * tp + eps) / (2 * tp + fp + fn + eps)).mean();
}

torch::Tensor cross_entropy(const torch::Tensor& probs, const torch::Tensor& target, double floor) {
    if (probs.sizes() != target.sizes()) throw std::invalid_argument("cross_entropy: shape mismatch");
    auto y = probs.dim() == 1 ? probs.unsqueeze(0) : probs;
    auto t = (target.dim() == 1 ? target.unsqueeze(0) : target).to(y.dtype());
    const auto per_position = -(t * torch::log(torch::clamp_min(y, floor))).sum(1);
    return per_position.mean();
}

torch::Tensor cross_entropy_with_logits(const torch::Tensor& logits, const torch::Tensor& classes) {
    return torch::nll_loss_nd(torch::log_softmax(logits, 1), classes.to(torch::kLong));
}

torch::Tensor segmentation_loss(const torch::Tensor& logits, const torch::Tensor& label) {
    if (logits.dim() < 2 || logits.size(1) != 2) throw std::invalid_argument("segmentation_loss: expected [B, 2, ...] logits");
    const auto probs = torch::softmax(logits, 1);
    const auto classes = label.to(torch::kLong);
    return dice_loss(probs.select(1, 1), label.to(probs.dtype())) + cross_entropy_with_logits(logits, classes);
}

torch::Tensor confusion_loss(const torch::Tensor& posterior) {
    auto p = posterior.dim() == 1 ? posterior.unsqueeze(0) : posterior;
    if (p.dim() != 2 || p.size(1) < 2) throw std::invalid_argument("confusion_loss: expected [B, N] with N >= 2");
    const double log_q = -std::log(static_cast<double>(p.size(1)));
    // 0 * log 0 = 0: the clamp only guards the log, the factor p keeps the term at zero.
    const auto terms = p * (torch::log(torch::clamp_min(p, 1e-30)) - log_q);
    return terms.sum(1).mean();
}

}  // namespace msu::losses
