#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "effiseg/archive.hpp"
#include "effiseg/blocks.hpp"

namespace effiseg {

/// One row of the EfficientNet-B0 stage table.
struct MBConvStage {
  Index expand_ratio;
  Index kernel;
  Index stride;
  Index c_in;
  Index c_out;
  Index layers;
};

// Stages 1..7 of EfficientNet-B0. Cumulative strides after each stage:
// 2, 4, 8, 16, 16, 32, 32 (the stem already halves the input).
inline constexpr std::array<MBConvStage, 7> kB0Stages{{
    {1, 3, 1, 32, 16, 1},
    {6, 3, 2, 16, 24, 2},
    {6, 5, 2, 24, 40, 2},
    {6, 3, 2, 40, 80, 3},
    {6, 5, 1, 80, 112, 3},
    {6, 5, 2, 112, 192, 4},
    {6, 3, 1, 192, 320, 1},
}};

inline constexpr Index kB0StemChannels = 32;

/// Stage of the stride-8 tap (f3) and stride-16 tap (f4), 1-based.
inline constexpr int kStageF3 = 3;
inline constexpr int kStageF4 = 5;

/// Keras-style block identifier: "block6b" is stage 6, second block.
struct BlockId {
  int stage = 6;  // 1-based
  int index = 1;  // 0-based within the stage

  std::string str() const { return "block" + std::to_string(stage) + static_cast<char>('a' + index); }
  bool operator==(const BlockId&) const = default;
};

inline BlockId parse_block_id(const std::string& text) {
  if (text.size() != 7 || text.rfind("block", 0) != 0 || text[5] < '1' || text[5] > '7' || text[6] < 'a') {
    throw ConfigError("invalid encoder truncation '" + text + "' (expected e.g. block6b)");
  }
  BlockId id{text[5] - '0', text[6] - 'a'};
  if (id.index >= kB0Stages[static_cast<std::size_t>(id.stage - 1)].layers) {
    throw ConfigError("encoder truncation '" + text + "' names a block that does not exist");
  }
  // The f5 tap must come after the last stride-2 stage (stage 6).
  if (id.stage < 6) {
    throw ConfigError("encoder truncation '" + text + "' does not reach stride 32 (use block6a..block7a)");
  }
  return id;
}

struct EncoderConfig {
  enum class Init { Random, Pretrained };

  Init init = Init::Random;
  std::filesystem::path weights;  // tensor archive, required for Pretrained
  std::uint64_t seed = 0;
  std::string truncation = "block6b";
  bool trainable = true;

  bool operator==(const EncoderConfig&) const = default;
};

struct EncoderWidths {
  Index c3 = 0;
  Index c4 = 0;
  Index c5 = 0;
};

inline EncoderWidths encoder_widths(const std::string& truncation) {
  const BlockId id = parse_block_id(truncation);
  return {kB0Stages[kStageF3 - 1].c_out, kB0Stages[kStageF4 - 1].c_out,
          kB0Stages[static_cast<std::size_t>(id.stage - 1)].c_out};
}

/// Squeeze width inside an MBConv block: a quarter of the block's input width.
inline Index mbconv_squeeze_channels(Index block_c_in) { return std::max<Index>(1, block_c_in / 4); }

/// Closed-form parameter count of one MBConv block.
inline Index mbconv_param_count(Index expand_ratio, Index kernel, Index c_in, Index c_out) {
  const Index expanded = c_in * expand_ratio;
  const Index sq = mbconv_squeeze_channels(c_in);
  Index total = 0;
  if (expand_ratio != 1) total += c_in * expanded + 2 * expanded;
  total += expanded * kernel * kernel + 2 * expanded;
  total += expanded * sq + sq + sq * expanded + expanded;
  total += expanded * c_out + 2 * c_out;
  return total;
}

/// Closed-form parameter count of the backbone up to and including `truncation`.
inline Index encoder_param_count(const std::string& truncation) {
  const BlockId last = parse_block_id(truncation);
  Index total = 3 * kB0StemChannels * 9 + 2 * kB0StemChannels;
  for (int s = 1; s <= last.stage; ++s) {
    const MBConvStage& st = kB0Stages[static_cast<std::size_t>(s - 1)];
    const Index layers = (s == last.stage) ? last.index + 1 : st.layers;
    for (Index j = 0; j < layers; ++j) {
      total += mbconv_param_count(st.expand_ratio, st.kernel, j == 0 ? st.c_in : st.c_out, st.c_out);
    }
  }
  return total;
}

template <typename Scalar>
struct EncoderFeatures {
  Var<Scalar> f3;  // stride 8
  Var<Scalar> f4;  // stride 16
  Var<Scalar> f5;  // stride 32
};

/// Inverted-residual block: [1x1 expand + BN + SiLU] -> depthwise kxk + BN +
/// SiLU -> squeeze-excitation -> 1x1 project + BN, with identity skip when the
/// stride is 1 and widths match.
template <typename Scalar>
struct MBConvBlock {
  Index expand_ratio = 1;
  Index kernel = 3;
  Index stride = 1;
  Index c_in = 0;
  Index c_out = 0;

  Var<Scalar> expand_w;
  BatchNorm2d<Scalar> expand_bn;
  Var<Scalar> dw_w;
  BatchNorm2d<Scalar> dw_bn;
  SEBlockParams<Scalar> se;
  Var<Scalar> project_w;
  BatchNorm2d<Scalar> project_bn;

  static MBConvBlock make(Index expand_ratio, Index kernel, Index stride, Index c_in, Index c_out, Rng& rng) {
    MBConvBlock b;
    b.expand_ratio = expand_ratio;
    b.kernel = kernel;
    b.stride = stride;
    b.c_in = c_in;
    b.c_out = c_out;
    const Index expanded = c_in * expand_ratio;
    if (expand_ratio != 1) {
      b.expand_w = init_kernel<Scalar>(Shape4{expanded, c_in, 1, 1}, rng);
      b.expand_bn = BatchNorm2d<Scalar>(expanded);
    }
    b.dw_w = init_kernel<Scalar>(Shape4{expanded, 1, kernel, kernel}, rng);
    b.dw_bn = BatchNorm2d<Scalar>(expanded);
    b.se = SEBlockParams<Scalar>::make_with_squeeze(expanded, mbconv_squeeze_channels(c_in), Activation::SiLU, rng);
    b.project_w = init_kernel<Scalar>(Shape4{c_out, expanded, 1, 1}, rng);
    b.project_bn = BatchNorm2d<Scalar>(c_out);
    return b;
  }

  Var<Scalar> forward(const Var<Scalar>& x, bool training) {
    Var<Scalar> h = x;
    if (expand_ratio != 1) h = silu(expand_bn(conv2d(h, expand_w), training));
    const Index pad = (kernel - 1) / 2;
    h = silu(dw_bn(conv2d(h, dw_w, Conv2dOptions{stride, pad, pad, true}), training));
    h = squeeze_excitation(h, se);
    h = project_bn(conv2d(h, project_w), training);
    if (stride == 1 && c_in == c_out) h = add(h, x);
    return h;
  }

  // Layout mirrors torchvision's state_dict so exported weights load by name.
  void register_into(ParameterRegistry<Scalar>& reg, const std::string& prefix) {
    int i = 0;
    if (expand_ratio != 1) {
      reg.add(prefix + "block.0.0.weight", expand_w);
      expand_bn.register_into(reg, prefix + "block.0.1.");
      ++i;
    }
    const std::string dw = prefix + "block." + std::to_string(i) + ".";
    reg.add(dw + "0.weight", dw_w);
    dw_bn.register_into(reg, dw + "1.");
    se.register_into(reg, prefix + "block." + std::to_string(i + 1) + ".");
    const std::string pj = prefix + "block." + std::to_string(i + 2) + ".";
    reg.add(pj + "0.weight", project_w);
    project_bn.register_into(reg, pj + "1.");
  }
};

/// EfficientNet-B0 feature extractor truncated after a stride-32 block. Only
/// the stride-8, stride-16 and final outputs are exposed.
template <typename Scalar>
class EfficientNetB0Encoder {
 public:
  explicit EfficientNetB0Encoder(const EncoderConfig& cfg) : config_(cfg), last_(parse_block_id(cfg.truncation)) {
    Rng rng(derive_seed(cfg.seed, "encoder"));
    stem_w_ = init_kernel<Scalar>(Shape4{kB0StemChannels, 3, 3, 3}, rng);
    stem_bn_ = BatchNorm2d<Scalar>(kB0StemChannels);
    for (int s = 1; s <= last_.stage; ++s) {
      const MBConvStage& st = kB0Stages[static_cast<std::size_t>(s - 1)];
      const Index layers = (s == last_.stage) ? last_.index + 1 : st.layers;
      std::vector<MBConvBlock<Scalar>> stage;
      for (Index j = 0; j < layers; ++j) {
        stage.push_back(MBConvBlock<Scalar>::make(st.expand_ratio, st.kernel, j == 0 ? st.stride : 1,
                                                  j == 0 ? st.c_in : st.c_out, st.c_out, rng));
      }
      stages_.push_back(std::move(stage));
    }
    set_trainable(cfg.trainable);
  }

  const EncoderConfig& config() const { return config_; }
  EncoderWidths widths() const { return encoder_widths(config_.truncation); }

  EncoderFeatures<Scalar> forward(const Var<Scalar>& x, bool training) {
    const Shape4& s = x.shape();
    if (s.c != 3) throw ShapeError("encoder expects 3 input channels, got input " + s.str());
    if (s.h % 32 != 0 || s.w % 32 != 0) {
      throw ShapeError("encoder input spatial size must be divisible by 32, got " + s.str());
    }
    EncoderFeatures<Scalar> out;
    Var<Scalar> h = silu(stem_bn_(conv2d(x, stem_w_, Conv2dOptions{2, 1, 1, false}), training));
    for (std::size_t si = 0; si < stages_.size(); ++si) {
      for (auto& block : stages_[si]) h = block.forward(h, training);
      const int stage = static_cast<int>(si) + 1;
      check_finite(h, "encoder stage " + std::to_string(stage));
      if (stage == kStageF3) out.f3 = h;
      if (stage == kStageF4) out.f4 = h;
    }
    out.f5 = h;
    return out;
  }

  /// Inference-mode features without graph recording.
  EncoderFeatures<Scalar> extract_features(const Tensor4<Scalar>& x) {
    NoGradGuard guard;
    return forward(Var<Scalar>::constant(x), false);
  }

  void register_into(ParameterRegistry<Scalar>& reg, const std::string& prefix) {
    reg.add(prefix + "features.0.0.weight", stem_w_);
    stem_bn_.register_into(reg, prefix + "features.0.1.");
    for (std::size_t si = 0; si < stages_.size(); ++si) {
      for (std::size_t j = 0; j < stages_[si].size(); ++j) {
        stages_[si][j].register_into(reg, prefix + "features." + std::to_string(si + 1) + "." + std::to_string(j) + ".");
      }
    }
  }

  void set_trainable(bool flag) {
    ParameterRegistry<Scalar> reg;
    register_into(reg, "");
    for (auto& p : reg.parameters) p.var->set_requires_grad(flag);
    config_.trainable = flag;
  }

 private:
  EncoderConfig config_;
  BlockId last_;
  Var<Scalar> stem_w_;
  BatchNorm2d<Scalar> stem_bn_;
  std::vector<std::vector<MBConvBlock<Scalar>>> stages_;
};

/// Builds the encoder. Pretrained initialisation reads every included layer
/// from a local tensor archive and never falls back to random weights.
template <typename Scalar>
EfficientNetB0Encoder<Scalar> load_encoder(const EncoderConfig& cfg) {
  EfficientNetB0Encoder<Scalar> encoder(cfg);
  if (cfg.init == EncoderConfig::Init::Pretrained) {
    if (cfg.weights.empty()) throw IoError("pretrained encoder requested but no weight file configured");
    const TensorArchive archive = TensorArchive::load(cfg.weights, kWeightsFormat);
    ParameterRegistry<Scalar> reg;
    encoder.register_into(reg, "");
    restore_registry(archive, reg);
  }
  return encoder;
}

}  // namespace effiseg
