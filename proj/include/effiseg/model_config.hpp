#pragma once

#include <cstdint>

#include <json.hpp>

#include "effiseg/efficientnet.hpp"

namespace effiseg {

/// Architecture hyperparameters of the segmentation network.
struct ModelConfig {
  Index reduce_channels = 64;
  Index se_ratio = 16;
  Index decoder_out_channels = 64;
  Index input_h = 224;
  Index input_w = 224;
  EncoderConfig encoder;
  std::uint64_t seed = 0;

  bool operator==(const ModelConfig&) const = default;

  /// Throws ConfigError when a divisibility constraint fails.
  void validate() const;
};

/// True when both configs describe the same tensors (widths, ratio, input
/// size, truncation). Initialisation source and seeds are ignored.
inline bool same_architecture(const ModelConfig& a, const ModelConfig& b) {
  return a.reduce_channels == b.reduce_channels && a.se_ratio == b.se_ratio &&
         a.decoder_out_channels == b.decoder_out_channels && a.input_h == b.input_h && a.input_w == b.input_w &&
         a.encoder.truncation == b.encoder.truncation;
}

/// Paper-scale reference total for the whole network.
inline constexpr Index kReferenceParameterTotal = 2626337;

// Strict JSON mapping: unknown keys raise ConfigError naming the key.
void to_json(nlohmann::json& j, const EncoderConfig& c);
void from_json(const nlohmann::json& j, EncoderConfig& c);
void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

/// Rejects any key of `j` not listed in `allowed`; `where` prefixes the message.
void reject_unknown_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed, const std::string& where);

}  // namespace effiseg
