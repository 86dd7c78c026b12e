#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <vector>

#include <json.hpp>

#include "msunlearn/core.hpp"
#include "msunlearn/data.hpp"
#include "msunlearn/model.hpp"
#include "msunlearn/scheduler.hpp"

namespace msu {

// File names inside a run directory.
inline constexpr const char* kEventLogName = "events.jsonl";
inline constexpr const char* kLatestCheckpointName = "latest.pt";
inline constexpr const char* kBestCheckpointName = "best.pt";

struct EpochRecord {
    int epoch = 0;
    std::optional<double> val_dsc;          // absent on epochs without validation
    std::map<int, double> val_accuracy;     // held-out classifier accuracy per stage
    double seg_loss_mean = 0.0;
    double lr = 0.0;
    int unlearn_steps = 0;

    bool operator==(const EpochRecord&) const = default;
};

void to_json(nlohmann::json& j, const EpochRecord& r);
void from_json(const nlohmann::json& j, EpochRecord& r);

struct TrainOptions {
    std::filesystem::path out_dir;
    std::optional<std::filesystem::path> resume;
    /// Stop cleanly after this epoch (a simulated interruption); 0 runs to the end.
    int stop_after_epoch = 0;
    std::function<void(const EpochRecord&)> on_epoch;
};

struct TrainResult {
    std::filesystem::path latest_checkpoint;
    std::filesystem::path best_checkpoint;
    std::filesystem::path event_log;
    std::vector<EpochRecord> history;
    std::optional<double> best_val_dsc;
    int best_epoch = 0;
};

TrainResult train(const RunConfig& cfg, const DatasetManifest& manifest, const TrainOptions& opts);
TrainResult train(const RunConfig& cfg, const DomainSet& domains, const std::vector<VolumeSample>& train_cases,
                  const std::vector<VolumeSample>& val_cases, const TrainOptions& opts);

struct LoadedModel {
    RunConfig cfg;
    DomainSet domains;
    int epoch = 0;
    model::SegNet net{nullptr};
    std::vector<model::DomainClassifier> classifiers;
};

LoadedModel load_model(const std::filesystem::path& checkpoint);

/// Binary segmentation of one preprocessed volume.
Mask segment_volume(model::SegNet& net, const Image& volume, bool mirror = true);
std::vector<Mask> infer(const std::filesystem::path& checkpoint, const std::vector<Image>& volumes, bool mirror = true);

/// Classifier accuracy per stage on centre patches of `cases`.
std::map<int, double> heldout_classifier_accuracy(model::SegNet& net, std::vector<model::DomainClassifier>& classifiers,
                                                  const std::vector<VolumeSample>& cases);

/// Mean DSC of the binary segmentation of each case against its label.
double validation_dsc(model::SegNet& net, const std::vector<VolumeSample>& cases, bool mirror);

/// Parsed lines of an event log.
std::vector<nlohmann::json> read_event_log(const std::filesystem::path& path);

}  // namespace msu
