#pragma once

#include <map>
#include <memory>
#include <stdexcept>
#include <utility>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "msunlearn/core.hpp"
#include "msunlearn/model.hpp"

namespace msu {

struct SchedulerState {
    int epoch = 1;
    ScheduleMode mode = ScheduleMode::SelfSupervised;
    std::map<int, int> iter_uba;      // stage -> consecutive above-UBA observations
    std::map<int, double> last_acc;   // stage -> most recent accuracy seen by plan_step
    std::int64_t lur_step = 0;        // post-warm-up planning calls in fixed_lur mode

    bool operator==(const SchedulerState&) const = default;
};

void to_json(nlohmann::json& j, const SchedulerState& s);
void from_json(const nlohmann::json& j, SchedulerState& s);

/// Counters for every configured unlearn stage, all zero.
SchedulerState initial_scheduler_state(const RunConfig& cfg);

struct StepPlan {
    bool do_segmentation_step = true;
    std::vector<int> train_classifier_stages;
    std::vector<int> unlearn_stages_now;

    bool operator==(const StepPlan&) const = default;
};

/// One planning call. `acc` holds the latest accuracy per stage; stages with
/// no entry are not observed this call and keep their counters. Throws
/// std::invalid_argument for an accuracy outside [0, 1].
std::pair<StepPlan, SchedulerState> plan_step(const SchedulerState& state, const RunConfig& cfg, std::size_t n_domains,
                                              const std::map<int, double>& acc);

/// Raised when a loss turns non-finite; the step leaves parameters as they
/// were before the offending backward pass.
class NumericalInstability : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct Optimizers {
    std::unique_ptr<torch::optim::SGD> segmentation;
    std::vector<std::unique_ptr<torch::optim::Adam>> classifiers;  // element s-1 for stage s
    std::unique_ptr<torch::optim::Adam> unlearning;                 // over all encoder parameters
};

Optimizers make_optimizers(model::SegNet& net, std::vector<model::DomainClassifier>& classifiers,
                           const OptimConfig& cfg);

/// Sets the segmentation learning rate for a (1-based) epoch with polynomial decay.
double poly_lr(const OptimConfig& cfg, int epoch, int total_epochs);
void set_learning_rate(torch::optim::SGD& opt, double lr);

struct TrainingBatch {
    torch::Tensor images;   // [B, 1, D, H, W] float
    torch::Tensor labels;   // [B, D, H, W] float in {0, 1}
    torch::Tensor domains;  // [B] long
};

struct StepResult {
    double seg_loss = 0.0;
    std::map<int, double> classifier_loss;
    std::map<int, double> accuracy;
    std::map<int, double> confusion_loss;
    std::vector<int> unlearned;
};

/// Segmentation step, classifier steps on detached taps, then one fresh
/// encoder pass and confusion step per stage in the plan's unlearn set.
StepResult execute_step(const StepPlan& plan, model::SegNet& net, std::vector<model::DomainClassifier>& classifiers,
                        const TrainingBatch& batch, Optimizers& opt);

}  // namespace msu
