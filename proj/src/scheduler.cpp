#include "msunlearn/scheduler.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "msunlearn/losses.hpp"

namespace msu {

void to_json(nlohmann::json& j, const SchedulerState& s) {
    nlohmann::json counters = nlohmann::json::object(), accs = nlohmann::json::object();
    for (const auto& [k, v] : s.iter_uba) counters[std::to_string(k)] = v;
    for (const auto& [k, v] : s.last_acc) accs[std::to_string(k)] = v;
    j = {{"epoch", s.epoch}, {"mode", to_string(s.mode)}, {"iter_uba", counters}, {"last_acc", accs},
         {"lur_step", s.lur_step}};
}

void from_json(const nlohmann::json& j, SchedulerState& s) {
    s.epoch = j.at("epoch").get<int>();
    s.mode = schedule_mode_from_string(j.at("mode").get<std::string>());
    s.iter_uba.clear();
    s.last_acc.clear();
    for (const auto& [k, v] : j.at("iter_uba").items()) s.iter_uba[std::stoi(k)] = v.get<int>();
    for (const auto& [k, v] : j.at("last_acc").items()) s.last_acc[std::stoi(k)] = v.get<double>();
    s.lur_step = j.at("lur_step").get<std::int64_t>();
}

SchedulerState initial_scheduler_state(const RunConfig& cfg) {
    SchedulerState s;
    s.mode = cfg.schedule_mode;
    for (int st : cfg.unlearn_stages) s.iter_uba[st] = 0;
    return s;
}

std::pair<StepPlan, SchedulerState> plan_step(const SchedulerState& state, const RunConfig& cfg, std::size_t n_domains,
                                              const std::map<int, double>& acc) {
    for (const auto& [stage, a] : acc) {
        if (!(a >= 0.0 && a <= 1.0))
            throw std::invalid_argument("plan_step: accuracy of stage " + std::to_string(stage) + " outside [0, 1]");
    }
    StepPlan plan;
    SchedulerState next = state;
    for (int s = 1; s <= cfg.encoder_depth; ++s) plan.train_classifier_stages.push_back(s);
    if (state.epoch <= cfg.warmup_epochs) return {plan, next};

    std::vector<int> stages = cfg.unlearn_stages;
    std::sort(stages.begin(), stages.end());

    if (state.mode == ScheduleMode::FixedLur) {
        const auto [learn, unlearn] = cfg.lur;
        if (next.lur_step % (learn + unlearn) >= learn) plan.unlearn_stages_now = stages;
        ++next.lur_step;
        return {plan, next};
    }

    const double threshold = uba(n_domains, cfg.tolerance);
    for (int s : stages) {
        auto it = acc.find(s);
        if (it == acc.end()) continue;
        next.last_acc[s] = it->second;
        int& counter = next.iter_uba[s];
        counter = it->second > threshold ? counter + 1 : 0;
        if (counter > cfg.patience) plan.unlearn_stages_now.push_back(s);
    }
    return {plan, next};
}

Optimizers make_optimizers(model::SegNet& net, std::vector<model::DomainClassifier>& classifiers,
                           const OptimConfig& cfg) {
    Optimizers o;
    o.segmentation = std::make_unique<torch::optim::SGD>(
        net->parameters(), torch::optim::SGDOptions(cfg.seg_lr)
                               .momentum(cfg.seg_momentum)
                               .nesterov(cfg.seg_momentum > 0.0)
                               .weight_decay(cfg.seg_weight_decay));
    for (auto& c : classifiers) {
        o.classifiers.push_back(
            std::make_unique<torch::optim::Adam>(c->parameters(), torch::optim::AdamOptions(cfg.classifier_lr)));
    }
    o.unlearning = std::make_unique<torch::optim::Adam>(net->encoder_parameters(),
                                                        torch::optim::AdamOptions(cfg.unlearn_lr));
    return o;
}

double poly_lr(const OptimConfig& cfg, int epoch, int total_epochs) {
    const double progress = static_cast<double>(epoch - 1) / static_cast<double>(total_epochs);
    return cfg.seg_lr * std::pow(std::max(0.0, 1.0 - progress), cfg.poly_exponent);
}

void set_learning_rate(torch::optim::SGD& opt, double lr) {
    for (auto& g : opt.param_groups()) static_cast<torch::optim::SGDOptions&>(g.options()).lr(lr);
}

namespace {

double checked(const torch::Tensor& loss, const std::string& what) {
    const double v = loss.item<double>();
    if (!std::isfinite(v)) throw NumericalInstability("non-finite " + what);
    return v;
}

}  // namespace

StepResult execute_step(const StepPlan& plan, model::SegNet& net, std::vector<model::DomainClassifier>& classifiers,
                        const TrainingBatch& batch, Optimizers& opt) {
    StepResult r;
    net->train();

    // (1) segmentation
    opt.segmentation->zero_grad(true);
    auto out = model::forward_segmentation(net, batch.images, /*detach_taps=*/true);
    auto seg = losses::segmentation_loss(out.logits, batch.labels);
    r.seg_loss = checked(seg, "segmentation loss");
    seg.backward();
    torch::nn::utils::clip_grad_norm_(net->parameters(), 12.0);
    opt.segmentation->step();

    // (2) classifiers on the detached taps of the same forward pass
    for (int s : plan.train_classifier_stages) {
        auto& clf = classifiers.at(static_cast<std::size_t>(s - 1));
        auto& copt = *opt.classifiers.at(static_cast<std::size_t>(s - 1));
        const auto& tap = out.taps.at(static_cast<std::size_t>(s - 1));
        copt.zero_grad(true);
        auto logits = clf->forward(tap.features);
        auto ce = losses::cross_entropy_with_logits(logits, batch.domains);
        r.classifier_loss[s] = checked(ce, "classifier loss at stage " + std::to_string(s));
        ce.backward();
        copt.step();
        r.accuracy[s] = logits.detach().argmax(1).eq(batch.domains).to(torch::kDouble).mean().item<double>();
    }

    // (3) unlearning: fresh encoder pass, classifier frozen
    for (int s : plan.unlearn_stages_now) {
        auto& clf = classifiers.at(static_cast<std::size_t>(s - 1));
        for (auto& p : clf->parameters()) p.set_requires_grad(false);
        opt.unlearning->zero_grad(true);
        auto feats = net->encode(batch.images, s).back();
        auto conf = losses::confusion_loss(torch::softmax(clf->forward(feats), 1));
        const double v = conf.item<double>();
        if (!std::isfinite(v)) {
            for (auto& p : clf->parameters()) p.set_requires_grad(true);
            throw NumericalInstability("non-finite confusion loss at stage " + std::to_string(s));
        }
        conf.backward();
        opt.unlearning->step();
        for (auto& p : clf->parameters()) p.set_requires_grad(true);
        r.confusion_loss[s] = v;
        r.unlearned.push_back(s);
    }
    return r;
}

}  // namespace msu
