#pragma once

#include <vector>

#include <torch/torch.h>

#include "msunlearn/core.hpp"

namespace msu::model {

struct NetConfig {
    int in_channels = 1;
    int n_classes = 2;
    int depth = 6;
    Shape3 patch{128, 128, 128};
    int base_channels = 32;
    int max_channels = 320;
    double leaky_slope = 0.01;
};

NetConfig net_config(const RunConfig& cfg);

/// Width of each encoder stage: base * 2^(s-1), capped.
std::vector<int> stage_channels(const NetConfig& cfg);

/// 3x3x3 convolution, instance normalization, leaky ReLU.
class ConvBlockImpl : public torch::nn::Module {
public:
    ConvBlockImpl(int in_ch, int out_ch, std::array<std::int64_t, 3> stride, double slope);
    torch::Tensor forward(const torch::Tensor& x);

private:
    torch::nn::Conv3d conv_{nullptr};
    torch::nn::InstanceNorm3d norm_{nullptr};
    torch::nn::LeakyReLU act_{nullptr};
};
TORCH_MODULE(ConvBlock);

/// Encoder-decoder with skip connections. Stage 1 keeps full resolution,
/// stages 2..D halve it with a stride-2 first block.
class SegNetImpl : public torch::nn::Module {
public:
    explicit SegNetImpl(NetConfig cfg);

    /// Stage outputs 1..up_to_stage (all stages by default).
    std::vector<torch::Tensor> encode(const torch::Tensor& x, int up_to_stage = -1);
    torch::Tensor decode(const std::vector<torch::Tensor>& stages);
    /// Logits [B, n_classes, ...].
    torch::Tensor forward(const torch::Tensor& x);

    std::vector<torch::Tensor> encoder_stage_parameters(int stage);
    std::vector<torch::Tensor> encoder_parameters();
    std::vector<torch::Tensor> decoder_parameters();

    const NetConfig& config() const { return cfg_; }

private:
    NetConfig cfg_;
    std::vector<torch::nn::Sequential> encoder_;
    std::vector<torch::nn::Sequential> up_;
    std::vector<ConvBlock> merge_;
    torch::nn::Conv3d head_{nullptr};
};
TORCH_MODULE(SegNet);

/// Feature map of one encoder stage on its way to that stage's classifier.
/// `detached` taps carry no gradient back into the encoder.
struct StageFeatureTap {
    int stage = 0;
    torch::Tensor features;
    bool detached = true;
};

struct SegOutput {
    torch::Tensor logits;
    torch::Tensor probabilities;
    std::vector<StageFeatureTap> taps;
};

/// Validates the batch shape against the network's patch size.
SegOutput forward_segmentation(SegNet& net, const torch::Tensor& batch, bool detach_taps = true);

/// Per-stage domain classifier: stride-2 blocks down to 4x4x4, two plain
/// conv blocks, flatten and a linear layer with one output per domain.
class DomainClassifierImpl : public torch::nn::Module {
public:
    DomainClassifierImpl(int stage, int in_channels, Shape3 stage_extent, int n_domains, int max_channels,
                         double slope);

    /// Logits [B, n_domains].
    torch::Tensor forward(const torch::Tensor& features);

    int stage() const { return stage_; }
    int n_domains() const { return n_domains_; }
    int downsampling_blocks() const { return n_down_; }
    Shape3 pre_flatten_extent() const { return {4, 4, 4}; }

private:
    int stage_;
    int n_domains_;
    int n_down_ = 0;
    torch::nn::Sequential body_{nullptr};
    torch::nn::Linear fc_{nullptr};
};
TORCH_MODULE(DomainClassifier);

/// One classifier per encoder stage; element s-1 serves stage s.
std::vector<DomainClassifier> make_classifiers(const NetConfig& cfg, int n_domains);

/// Posterior [B, n_domains]. Throws std::invalid_argument on a stage mismatch.
torch::Tensor classify_domain(DomainClassifier& clf, const StageFeatureTap& tap);

/// Full-volume foreground/background probabilities [2, D, H, W]. Sliding
/// windows with 50% overlap cover volumes larger than the patch; smaller
/// volumes are padded and the result cropped back. With `mirror`, each
/// window averages all 8 axis-flip variants (each flipped back first).
torch::Tensor predict_with_mirroring(SegNet& net, const Image& volume, bool mirror = true);

/// Argmax over the two classes.
Mask probabilities_to_mask(const torch::Tensor& probs);

torch::Tensor image_to_tensor(const Image& img);  // [1, 1, D, H, W]

}  // namespace msu::model
