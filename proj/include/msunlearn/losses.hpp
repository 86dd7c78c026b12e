#pragma once

#include <torch/torch.h>

namespace msu::losses {

/// Soft voxel counts of a foreground probability map against a binary label.
struct ConfusionCounts {
    double tp = 0.0, fp = 0.0, fn = 0.0, tn = 0.0;
};

ConfusionCounts soft_counts(const torch::Tensor& fg_prob, const torch::Tensor& label);

/// 1 - (2TP + eps) / (2TP + FP + FN + eps) with soft counts. Tensors of rank
/// >= 2 are treated as [B, ...] and the per-sample losses averaged; a rank-1
/// tensor is a single sample.
torch::Tensor dice_loss(const torch::Tensor& fg_prob, const torch::Tensor& label, double eps = 1e-5);

/// -sum_c t_c log y_c averaged over every position. `probs` and `target` are
/// [B, C, ...] (or [C] for one position); target is one-hot or soft.
/// Probabilities are floored at `floor` before the log.
torch::Tensor cross_entropy(const torch::Tensor& probs, const torch::Tensor& target, double floor = 1e-12);

/// Same quantity from logits via log-softmax; `classes` holds class indices.
torch::Tensor cross_entropy_with_logits(const torch::Tensor& logits, const torch::Tensor& classes);

/// Dice on the foreground channel plus cross-entropy, from [B, 2, ...] logits
/// and a [B, ...] binary label.
torch::Tensor segmentation_loss(const torch::Tensor& logits, const torch::Tensor& label);

/// KL(p || uniform) = sum_i p_i (log p_i - log(1/N)) averaged over rows of a
/// [B, N] (or [N]) posterior. Zero exactly at the uniform posterior and
/// positive elsewhere, so minimizing it pushes the classifier towards chance.
torch::Tensor confusion_loss(const torch::Tensor& posterior);

/// Domain posterior [B, N] together with its fixed uniform target.
struct ClassifierPosterior {
    torch::Tensor p;

    static ClassifierPosterior from_logits(const torch::Tensor& logits) { return {torch::softmax(logits, 1)}; }
    std::int64_t n_domains() const { return p.size(-1); }
    torch::Tensor target() const { return torch::full_like(p, 1.0 / static_cast<double>(n_domains())); }
};

inline torch::Tensor confusion_loss(const ClassifierPosterior& post) { return confusion_loss(post.p); }

}  // namespace msu::losses
