#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "effiseg/model_config.hpp"

namespace effiseg {

enum class Mode { Train, Infer };

struct AuditRow {
  std::string name;
  Index closed_form = 0;
  Index introspected = 0;
  bool decoder_side = false;

  bool matches() const { return closed_form == introspected; }
};

struct ParameterAudit {
  std::vector<AuditRow> per_component;
  Index total = 0;
  Index paper_total = kReferenceParameterTotal;

  Index difference() const { return total - paper_total; }
  Index decoder_total() const {
    Index t = 0;
    for (const auto& r : per_component) t += r.decoder_side ? r.introspected : 0;
    return t;
  }
  bool decoder_consistent() const {
    for (const auto& r : per_component) {
      if (r.decoder_side && !r.matches()) return false;
    }
    return true;
  }
};

/// One input edge of a decoder aggregation node.
struct DecoderEdge {
  const char* source;  // "f3", "f4", "f5" or an earlier node
  Index source_stride;
};

struct DecoderNodeSpec {
  const char* name;
  Index stride;
  std::array<DecoderEdge, 3> inputs;
};

/// Decoder wiring. Nodes are evaluated in order; a node may consume encoder
/// taps and earlier nodes. The stride-2 and stride-4 backbone activations are
/// never available as sources.
inline constexpr std::array<DecoderNodeSpec, 2> kDecoderTopology{{
    {"d4", 16, {{{"f3", 8}, {"f4", 16}, {"f5", 32}}}},
    {"d3", 8, {{{"f3", 8}, {"d4", 16}, {"f5", 32}}}},
}};

/// Partial-decoder, full-scale-connected segmentation network.
///
///   D4 = SE(Asym(concat[reduce(maxpool2(f3)), reduce(f4), reduce(up2(f5))]))   stride 16
///   D3 = SE(Asym(concat[reduce(f3), reduce(up2(D4)), reduce(up4(f5))]))        stride 8
///   out = sigmoid(up8(conv1x1(D3)))
template <typename Scalar>
class PolypSegNet {
 public:
  /// `load_pretrained = false` skips reading encoder weights (used when a
  /// checkpoint will overwrite every tensor anyway).
  explicit PolypSegNet(const ModelConfig& cfg, bool load_pretrained = true)
      : config_((cfg.validate(), cfg)), encoder_(make_encoder(cfg, load_pretrained)) {
    Rng rng(derive_seed(cfg.seed, "decoder"));
    const Index r = cfg.reduce_channels;
    const Index d = cfg.decoder_out_channels;
    for (std::size_t i = 0; i < kDecoderTopology.size(); ++i) {
      const DecoderNodeSpec& spec = kDecoderTopology[i];
      NodeParams& node = nodes_[i];
      for (std::size_t e = 0; e < spec.inputs.size(); ++e) {
        node.reduce[e] = ChannelReduceParams<Scalar>::make(source_channels(spec.inputs[e].source), r, rng);
      }
      node.asym = AsymmetricBlockParams<Scalar>::make(3 * r, d, rng);
      node.se = SEBlockParams<Scalar>::make(d, cfg.se_ratio, rng);
    }
    head_w_ = init_kernel<Scalar>(Shape4{1, d, 1, 1}, rng);
    head_b_ = init_bias<Scalar>(1, d, rng);
  }

  const ModelConfig& config() const { return config_; }
  EfficientNetB0Encoder<Scalar>& encoder() { return encoder_; }

  /// Pre-sigmoid map at input resolution, (n, 1, H, W).
  Var<Scalar> forward_logits(const Var<Scalar>& x, Mode mode) {
    return decode(encoder_.forward(x, mode == Mode::Train), mode, x.shape().h, x.shape().w);
  }

  /// Foreground probabilities, (n, 1, H, W).
  Var<Scalar> forward(const Var<Scalar>& x, Mode mode) {
    return check_finite(sigmoid(forward_logits(x, mode)), "head.sigmoid");
  }

  /// Inference-mode probabilities without graph recording.
  Tensor4<Scalar> predict(const Tensor4<Scalar>& x) {
    NoGradGuard guard;
    return forward(Var<Scalar>::constant(x), Mode::Infer).value();
  }

  /// Decoder and head applied to given encoder features; returns logits.
  Var<Scalar> decode(const EncoderFeatures<Scalar>& f, Mode mode, Index out_h, Index out_w) {
    const bool training = mode == Mode::Train;
    std::map<std::string, Var<Scalar>> sources{{"f3", f.f3}, {"f4", f.f4}, {"f5", f.f5}};
    Var<Scalar> last;
    for (std::size_t i = 0; i < kDecoderTopology.size(); ++i) {
      const DecoderNodeSpec& spec = kDecoderTopology[i];
      NodeParams& node = nodes_[i];
      std::vector<Var<Scalar>> parts;
      for (std::size_t e = 0; e < spec.inputs.size(); ++e) {
        const DecoderEdge& edge = spec.inputs[e];
        Var<Scalar> x = sources.at(edge.source);
        if (edge.source_stride < spec.stride) {
          x = resample(x, spec.stride / edge.source_stride, ResampleDirection::Down);
        } else if (edge.source_stride > spec.stride) {
          x = resample(x, edge.source_stride / spec.stride, ResampleDirection::Up);
        }
        parts.push_back(channel_reduce(x, node.reduce[e], training));
      }
      Var<Scalar> out = asymmetric_conv_block(concat_channels(parts), node.asym, training);
      last = check_finite(squeeze_excitation(out, node.se), std::string("decoder.") + spec.name);
      sources[spec.name] = last;
    }
    Var<Scalar> logits = add_channel_bias(conv2d(last, head_w_), head_b_);
    return check_finite(resize_bilinear(logits, out_h, out_w), "head");
  }

  /// Every parameter and buffer, encoder first.
  ParameterRegistry<Scalar> registry() {
    ParameterRegistry<Scalar> reg;
    encoder_.register_into(reg, "encoder.");
    for (std::size_t i = 0; i < kDecoderTopology.size(); ++i) {
      const DecoderNodeSpec& spec = kDecoderTopology[i];
      const std::string prefix = std::string("decoder.") + spec.name + ".";
      for (std::size_t e = 0; e < spec.inputs.size(); ++e) {
        nodes_[i].reduce[e].register_into(reg, prefix + "reduce_" + spec.inputs[e].source + ".");
      }
      nodes_[i].asym.register_into(reg, prefix + "asym.");
      nodes_[i].se.register_into(reg, prefix + "se.");
    }
    reg.add("head.weight", head_w_);
    reg.add("head.bias", head_b_);
    return reg;
  }

  /// Closed-form versus introspected parameter counts per component.
  ParameterAudit audit() {
    ParameterAudit a;
    const ModelConfig& c = config_;
    const Index r = c.reduce_channels;
    const Index d = c.decoder_out_channels;
    auto introspect = [](auto& component) {
      ParameterRegistry<Scalar> reg;
      component.register_into(reg, "");
      return reg.parameter_count();
    };
    a.per_component.push_back({"encoder", encoder_param_count(c.encoder.truncation), introspect(encoder_), false});
    for (std::size_t i = 0; i < kDecoderTopology.size(); ++i) {
      const DecoderNodeSpec& spec = kDecoderTopology[i];
      const std::string prefix = spec.name;
      for (std::size_t e = 0; e < spec.inputs.size(); ++e) {
        const char* src = spec.inputs[e].source;
        a.per_component.push_back({prefix + ".reduce_" + src, block_param_count(BlockKind::Reduce, source_channels(src), r),
                                   introspect(nodes_[i].reduce[e]), true});
      }
      a.per_component.push_back(
          {prefix + ".asym", block_param_count(BlockKind::Asymmetric, 3 * r, d), introspect(nodes_[i].asym), true});
      a.per_component.push_back({prefix + ".se", block_param_count(BlockKind::SqueezeExcitation, d, d, c.se_ratio),
                                 introspect(nodes_[i].se), true});
    }
    a.per_component.push_back({"head", d + 1, head_w_.value().size() + head_b_.value().size(), true});
    for (const auto& row : a.per_component) a.total += row.introspected;
    return a;
  }

 private:
  struct NodeParams {
    std::array<ChannelReduceParams<Scalar>, 3> reduce;
    AsymmetricBlockParams<Scalar> asym;
    SEBlockParams<Scalar> se;
  };

  static EfficientNetB0Encoder<Scalar> make_encoder(const ModelConfig& cfg, bool load_pretrained) {
    if (load_pretrained) return load_encoder<Scalar>(cfg.encoder);
    return EfficientNetB0Encoder<Scalar>(cfg.encoder);
  }

  Index source_channels(const std::string& source) const {
    const EncoderWidths w = encoder_widths(config_.encoder.truncation);
    if (source == "f3") return w.c3;
    if (source == "f4") return w.c4;
    if (source == "f5") return w.c5;
    return config_.decoder_out_channels;
  }

  ModelConfig config_;
  EfficientNetB0Encoder<Scalar> encoder_;
  std::array<NodeParams, kDecoderTopology.size()> nodes_;
  Var<Scalar> head_w_;
  Var<Scalar> head_b_;
};

/// Writes all parameters and buffers with a manifest (format, config, seed,
/// epoch, parameter total).
template <typename Scalar>
void save_checkpoint(PolypSegNet<Scalar>& model, const std::filesystem::path& path, int epoch = 0) {
  TensorArchive archive;
  archive.manifest["format"] = std::string(kCheckpointFormat);
  archive.manifest["config"] = model.config();
  archive.manifest["seed"] = model.config().seed;
  archive.manifest["epoch"] = epoch;
  archive.manifest["parameter_total"] = model.audit().total;
  archive.manifest["scalar"] = sizeof(Scalar) == 4 ? "f32" : "f64";
  store_registry(archive, model.registry());
  archive.save(path, kCheckpointFormat);
}

struct CheckpointInfo {
  ModelConfig config;
  int epoch = 0;
  Index parameter_total = 0;
};

inline CheckpointInfo read_checkpoint_manifest(const TensorArchive& archive, const std::filesystem::path& path) {
  const auto& m = archive.manifest;
  if (!m.contains("format") || !m.at("format").is_string() || m.at("format").get<std::string>() != kCheckpointFormat) {
    throw IoError("checkpoint manifest version mismatch in " + path.string());
  }
  CheckpointInfo info;
  try {
    info.config = m.at("config").get<ModelConfig>();
    info.epoch = m.at("epoch").get<int>();
    info.parameter_total = m.at("parameter_total").get<Index>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed checkpoint manifest in " + path.string() + ": " + e.what());
  } catch (const ConfigError& e) {
    throw IoError("malformed checkpoint config in " + path.string() + ": " + e.what());
  }
  return info;
}

/// Rebuilds the model recorded in the checkpoint and restores every tensor.
template <typename Scalar>
PolypSegNet<Scalar> load_checkpoint(const std::filesystem::path& path, CheckpointInfo* info_out = nullptr) {
  const TensorArchive archive = TensorArchive::load(path, kCheckpointFormat);
  const CheckpointInfo info = read_checkpoint_manifest(archive, path);
  PolypSegNet<Scalar> model(info.config, /*load_pretrained=*/false);
  ParameterRegistry<Scalar> reg = model.registry();
  restore_registry(archive, reg);
  if (reg.parameter_count() != info.parameter_total) {
    throw IoError("checkpoint parameter total " + std::to_string(info.parameter_total) + " does not match model (" +
                  std::to_string(reg.parameter_count()) + ")");
  }
  if (info_out) *info_out = info;
  return model;
}

/// As above, but rejects a checkpoint whose recorded architecture differs from `expected`.
template <typename Scalar>
PolypSegNet<Scalar> load_checkpoint(const std::filesystem::path& path, const ModelConfig& expected) {
  CheckpointInfo info;
  {
    const TensorArchive archive = TensorArchive::load(path, kCheckpointFormat);
    info = read_checkpoint_manifest(archive, path);
  }
  if (!same_architecture(info.config, expected)) {
    throw ConfigError("checkpoint " + path.string() + " was written for a different architecture: " +
                      nlohmann::json(info.config).dump() + " vs expected " + nlohmann::json(expected).dump());
  }
  return load_checkpoint<Scalar>(path);
}

}  // namespace effiseg
