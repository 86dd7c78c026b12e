#include "msunlearn/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

namespace msu::model {

using Stride = std::array<std::int64_t, 3>;

NetConfig net_config(const RunConfig& cfg) {
    NetConfig n;
    n.depth = cfg.encoder_depth;
    n.patch = cfg.patch_size;
    n.base_channels = cfg.base_channels;
    n.max_channels = cfg.max_channels;
    return n;
}

std::vector<int> stage_channels(const NetConfig& cfg) {
    std::vector<int> ch;
    int c = cfg.base_channels;
    for (int s = 1; s <= cfg.depth; ++s) {
        ch.push_back(std::min(c, cfg.max_channels));
        c *= 2;
    }
    return ch;
}

namespace {

void init_weights(torch::nn::Module& m, double slope) {
    torch::NoGradGuard ng;
    for (auto& p : m.named_parameters(true)) {
        const auto& name = p.key();
        auto& t = p.value();
        if (name.ends_with("bias")) {
            t.zero_();
        } else if (t.dim() >= 2) {
            torch::nn::init::kaiming_normal_(t, slope, torch::kFanIn, torch::kLeakyReLU);
        }
    }
}

}  // namespace

ConvBlockImpl::ConvBlockImpl(int in_ch, int out_ch, std::array<std::int64_t, 3> stride, double slope) {
    conv_ = register_module("conv", torch::nn::Conv3d(torch::nn::Conv3dOptions(in_ch, out_ch, 3)
                                                          .stride(torch::ExpandingArray<3>(stride))
                                                          .padding(1)));
    norm_ = register_module("norm", torch::nn::InstanceNorm3d(torch::nn::InstanceNorm3dOptions(out_ch).affine(true).eps(1e-5)));
    act_ = register_module("act", torch::nn::LeakyReLU(torch::nn::LeakyReLUOptions().negative_slope(slope)));
}

torch::Tensor ConvBlockImpl::forward(const torch::Tensor& x) { return act_(norm_(conv_(x))); }

SegNetImpl::SegNetImpl(NetConfig cfg) : cfg_(cfg) {
    if (cfg_.depth < 2) throw std::invalid_argument("SegNet: depth must be >= 2");
    const auto ch = stage_channels(cfg_);
    int prev = cfg_.in_channels;
    for (int s = 1; s <= cfg_.depth; ++s) {
        const std::int64_t st = s == 1 ? 1 : 2;
        torch::nn::Sequential stage(ConvBlock(prev, ch[s - 1], Stride{st, st, st}, cfg_.leaky_slope),
                                    ConvBlock(ch[s - 1], ch[s - 1], Stride{1, 1, 1}, cfg_.leaky_slope));
        encoder_.push_back(register_module("enc" + std::to_string(s), stage));
        prev = ch[s - 1];
    }
    // Decoder level s (1..D-1) upsamples from s+1 and merges skip s.
    for (int s = 1; s < cfg_.depth; ++s) {
        torch::nn::Sequential up(
            torch::nn::ConvTranspose3d(torch::nn::ConvTranspose3dOptions(ch[s], ch[s - 1], 2).stride(2)),
            torch::nn::InstanceNorm3d(torch::nn::InstanceNorm3dOptions(ch[s - 1]).affine(true).eps(1e-5)),
            torch::nn::LeakyReLU(torch::nn::LeakyReLUOptions().negative_slope(cfg_.leaky_slope)));
        up_.push_back(register_module("up" + std::to_string(s), up));
        merge_.push_back(register_module("dec" + std::to_string(s),
                                         ConvBlock(2 * ch[s - 1], ch[s - 1], Stride{1, 1, 1}, cfg_.leaky_slope)));
    }
    head_ = register_module("head", torch::nn::Conv3d(torch::nn::Conv3dOptions(ch[0], cfg_.n_classes, 1)));
    init_weights(*this, cfg_.leaky_slope);
}

std::vector<torch::Tensor> SegNetImpl::encode(const torch::Tensor& x, int up_to_stage) {
    const int last = up_to_stage < 0 ? cfg_.depth : up_to_stage;
    if (last < 1 || last > cfg_.depth) throw std::invalid_argument("SegNet::encode: stage out of range");
    std::vector<torch::Tensor> out;
    out.reserve(static_cast<std::size_t>(last));
    torch::Tensor h = x;
    for (int s = 1; s <= last; ++s) {
        h = encoder_[static_cast<std::size_t>(s - 1)]->forward(h);
        out.push_back(h);
    }
    return out;
}

torch::Tensor SegNetImpl::decode(const std::vector<torch::Tensor>& stages) {
    if (static_cast<int>(stages.size()) != cfg_.depth) throw std::invalid_argument("SegNet::decode: need every stage");
    torch::Tensor h = stages.back();
    for (int s = cfg_.depth - 1; s >= 1; --s) {
        const auto i = static_cast<std::size_t>(s - 1);
        h = up_[i]->forward(h);
        h = merge_[i]->forward(torch::cat({h, stages[i]}, 1));
    }
    return head_(h);
}

torch::Tensor SegNetImpl::forward(const torch::Tensor& x) { return decode(encode(x)); }

std::vector<torch::Tensor> SegNetImpl::encoder_stage_parameters(int stage) {
    if (stage < 1 || stage > cfg_.depth) throw std::invalid_argument("encoder stage out of range");
    return encoder_[static_cast<std::size_t>(stage - 1)]->parameters();
}

std::vector<torch::Tensor> SegNetImpl::encoder_parameters() {
    std::vector<torch::Tensor> out;
    for (auto& e : encoder_) {
        auto p = e->parameters();
        out.insert(out.end(), p.begin(), p.end());
    }
    return out;
}

std::vector<torch::Tensor> SegNetImpl::decoder_parameters() {
    std::vector<torch::Tensor> out;
    for (auto& u : up_) {
        auto p = u->parameters();
        out.insert(out.end(), p.begin(), p.end());
    }
    for (auto& m : merge_) {
        auto p = m->parameters();
        out.insert(out.end(), p.begin(), p.end());
    }
    auto h = head_->parameters();
    out.insert(out.end(), h.begin(), h.end());
    return out;
}

SegOutput forward_segmentation(SegNet& net, const torch::Tensor& batch, bool detach_taps) {
    const auto& cfg = net->config();
    if (batch.dim() != 5 || batch.size(1) != cfg.in_channels || batch.size(2) != cfg.patch[0] ||
        batch.size(3) != cfg.patch[1] || batch.size(4) != cfg.patch[2]) {
        throw std::invalid_argument("forward_segmentation: batch shape does not match [B, " + std::to_string(cfg.in_channels) + ", " +
                                    std::to_string(cfg.patch[0]) + ", " + std::to_string(cfg.patch[1]) + ", " +
                                    std::to_string(cfg.patch[2]) + "]");
    }
    SegOutput out;
    auto stages = net->encode(batch);
    out.logits = net->decode(stages);
    out.probabilities = torch::softmax(out.logits, 1);
    for (std::size_t i = 0; i < stages.size(); ++i) {
        out.taps.push_back({static_cast<int>(i + 1), detach_taps ? stages[i].detach() : stages[i], detach_taps});
    }
    return out;
}

DomainClassifierImpl::DomainClassifierImpl(int stage, int in_channels, Shape3 extent, int n_domains,
                                           int max_channels, double slope)
    : stage_(stage), n_domains_(n_domains) {
    if (n_domains < 2) throw std::invalid_argument("DomainClassifier: need at least 2 domains");
    body_ = torch::nn::Sequential();
    int ch = in_channels;
    Shape3 cur = extent;
    // Depth follows from the shape: halve every axis still above 4.
    while (cur[0] > 4 || cur[1] > 4 || cur[2] > 4) {
        std::array<std::int64_t, 3> stride{};
        for (int a = 0; a < 3; ++a) {
            if (cur[a] < 4 || (cur[a] > 4 && cur[a] % 2 != 0))
                throw std::invalid_argument("DomainClassifier: stage extent cannot be reduced to 4x4x4");
            stride[a] = cur[a] > 4 ? 2 : 1;
            cur[a] /= stride[a];
        }
        const int next = std::min(ch * 2, std::max(max_channels, ch));
        body_->push_back(ConvBlock(ch, next, stride, slope));
        ch = next;
        ++n_down_;
    }
    if (cur != Shape3{4, 4, 4}) throw std::invalid_argument("DomainClassifier: stage extent smaller than 4x4x4");
    body_->push_back(ConvBlock(ch, ch, Stride{1, 1, 1}, slope));
    body_->push_back(ConvBlock(ch, ch, Stride{1, 1, 1}, slope));
    body_->push_back(torch::nn::Flatten());
    register_module("body", body_);
    fc_ = register_module("fc", torch::nn::Linear(ch * 64, n_domains));
    init_weights(*this, slope);
}

torch::Tensor DomainClassifierImpl::forward(const torch::Tensor& features) { return fc_(body_->forward(features)); }

std::vector<DomainClassifier> make_classifiers(const NetConfig& cfg, int n_domains) {
    const auto ch = stage_channels(cfg);
    std::vector<DomainClassifier> out;
    for (int s = 1; s <= cfg.depth; ++s) {
        out.emplace_back(s, ch[static_cast<std::size_t>(s - 1)], stage_extent(cfg.patch, s), n_domains,
                         cfg.max_channels, cfg.leaky_slope);
    }
    return out;
}

torch::Tensor classify_domain(DomainClassifier& clf, const StageFeatureTap& tap) {
    if (tap.stage != clf->stage())
        throw std::invalid_argument("classify_domain: tap from stage " + std::to_string(tap.stage) +
                                    " fed to classifier of stage " + std::to_string(clf->stage()));
    return torch::softmax(clf->forward(tap.features), 1);
}

torch::Tensor image_to_tensor(const Image& img) {
    auto t = torch::from_blob(const_cast<float*>(img.data.data()), {1, 1, img.shape[0], img.shape[1], img.shape[2]},
                              torch::kFloat32);
    return t.clone();
}

namespace {

std::vector<std::int64_t> window_starts(std::int64_t size, std::int64_t patch) {
    if (size == patch) return {0};
    const double step = 0.5 * static_cast<double>(patch);
    const auto n = static_cast<std::int64_t>(std::ceil(static_cast<double>(size - patch) / step)) + 1;
    std::vector<std::int64_t> s;
    for (std::int64_t i = 0; i < n; ++i) {
        s.push_back(static_cast<std::int64_t>(std::llround(static_cast<double>(i) * (size - patch) / (n - 1))));
    }
    return s;
}

torch::Tensor predict_patch(SegNet& net, const torch::Tensor& patch, bool mirror) {
    if (!mirror) return torch::softmax(net->forward(patch), 1);
    std::vector<torch::Tensor> variants;
    std::vector<std::vector<std::int64_t>> flips;
    for (int mask = 0; mask < 8; ++mask) {
        std::vector<std::int64_t> dims;
        for (int a = 0; a < 3; ++a)
            if (mask & (1 << a)) dims.push_back(2 + a);
        variants.push_back(dims.empty() ? patch : torch::flip(patch, dims));
        flips.push_back(dims);
    }
    const auto probs = torch::softmax(net->forward(torch::cat(variants, 0)), 1);
    torch::Tensor acc = torch::zeros_like(patch.expand({1, probs.size(1), -1, -1, -1}));
    for (int i = 0; i < 8; ++i) {
        auto p = probs.narrow(0, i, 1);
        acc += flips[static_cast<std::size_t>(i)].empty() ? p : torch::flip(p, flips[static_cast<std::size_t>(i)]);
    }
    return acc / 8.0;
}

}  // namespace

torch::Tensor predict_with_mirroring(SegNet& net, const Image& volume, bool mirror) {
    const auto& cfg = net->config();
    torch::NoGradGuard ng;
    Shape3 padded = volume.shape;
    std::array<std::int64_t, 3> off{};
    for (int a = 0; a < 3; ++a) {
        padded[a] = std::max(volume.shape[a], cfg.patch[a]);
        off[a] = (padded[a] - volume.shape[a]) / 2;
    }
    torch::Tensor vol = image_to_tensor(volume);
    if (padded != volume.shape) {
        auto big = torch::zeros({1, 1, padded[0], padded[1], padded[2]});
        big.narrow(2, off[0], volume.shape[0]).narrow(3, off[1], volume.shape[1]).narrow(4, off[2], volume.shape[2]).copy_(vol);
        vol = big;
    }
    auto acc = torch::zeros({1, cfg.n_classes, padded[0], padded[1], padded[2]});
    auto count = torch::zeros({1, 1, padded[0], padded[1], padded[2]});
    for (auto z : window_starts(padded[0], cfg.patch[0]))
        for (auto y : window_starts(padded[1], cfg.patch[1]))
            for (auto x : window_starts(padded[2], cfg.patch[2])) {
                auto patch = vol.narrow(2, z, cfg.patch[0]).narrow(3, y, cfg.patch[1]).narrow(4, x, cfg.patch[2]).contiguous();
                auto p = predict_patch(net, patch, mirror);
                acc.narrow(2, z, cfg.patch[0]).narrow(3, y, cfg.patch[1]).narrow(4, x, cfg.patch[2]) += p;
                count.narrow(2, z, cfg.patch[0]).narrow(3, y, cfg.patch[1]).narrow(4, x, cfg.patch[2]) += 1.0;
            }
    auto probs = acc / count;
    probs = probs.narrow(2, off[0], volume.shape[0]).narrow(3, off[1], volume.shape[1]).narrow(4, off[2], volume.shape[2]);
    return probs.squeeze(0).contiguous();
}

Mask probabilities_to_mask(const torch::Tensor& probs) {
    if (probs.dim() != 4) throw std::invalid_argument("probabilities_to_mask: expected [C, D, H, W]");
    const auto arg = probs.argmax(0).to(torch::kUInt8).contiguous();
    Mask m({probs.size(1), probs.size(2), probs.size(3)});
    std::memcpy(m.data.data(), arg.data_ptr<std::uint8_t>(), m.size());
    return m;
}

}  // namespace msu::model
