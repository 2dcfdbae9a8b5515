#include "effiseg/model_config.hpp"

#include <algorithm>

namespace effiseg {

void ModelConfig::validate() const {
  if (reduce_channels < 1 || decoder_out_channels < 1 || se_ratio < 1) {
    throw ConfigError("reduce_channels, decoder_out_channels and se_ratio must be positive");
  }
  if (reduce_channels % se_ratio != 0) {
    throw ConfigError("reduce_channels (" + std::to_string(reduce_channels) + ") must be divisible by se_ratio (" +
                      std::to_string(se_ratio) + ")");
  }
  if (decoder_out_channels % se_ratio != 0) {
    throw ConfigError("decoder_out_channels (" + std::to_string(decoder_out_channels) +
                      ") must be divisible by se_ratio (" + std::to_string(se_ratio) + ")");
  }
  if (input_h < 32 || input_w < 32 || input_h % 32 != 0 || input_w % 32 != 0) {
    throw ConfigError("input_size must be divisible by 32, got " + std::to_string(input_h) + "x" +
                      std::to_string(input_w));
  }
  parse_block_id(encoder.truncation);
}

void reject_unknown_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& item : j.items()) {
    const bool known = std::any_of(allowed.begin(), allowed.end(), [&](const char* k) { return item.key() == k; });
    if (!known) throw ConfigError("unknown config key '" + where + "." + item.key() + "'");
  }
}

namespace {

template <typename T>
void read_opt(const nlohmann::json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("config key '" + where + "." + key + "' has the wrong type");
  }
}

}  // namespace

void to_json(nlohmann::json& j, const EncoderConfig& c) {
  j = nlohmann::json{{"init", c.init == EncoderConfig::Init::Pretrained ? "pretrained" : "random"},
                     {"weights", c.weights.string()},
                     {"seed", c.seed},
                     {"truncation", c.truncation},
                     {"trainable", c.trainable}};
}

void from_json(const nlohmann::json& j, EncoderConfig& c) {
  reject_unknown_keys(j, {"init", "weights", "seed", "truncation", "trainable"}, "model.encoder");
  std::string init = c.init == EncoderConfig::Init::Pretrained ? "pretrained" : "random";
  read_opt(j, "init", init, "model.encoder");
  if (init == "pretrained") {
    c.init = EncoderConfig::Init::Pretrained;
  } else if (init == "random") {
    c.init = EncoderConfig::Init::Random;
  } else {
    throw ConfigError("model.encoder.init must be 'random' or 'pretrained', got '" + init + "'");
  }
  std::string weights = c.weights.string();
  read_opt(j, "weights", weights, "model.encoder");
  c.weights = weights;
  read_opt(j, "seed", c.seed, "model.encoder");
  read_opt(j, "truncation", c.truncation, "model.encoder");
  read_opt(j, "trainable", c.trainable, "model.encoder");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"reduce_channels", c.reduce_channels},
                     {"se_ratio", c.se_ratio},
                     {"decoder_out_channels", c.decoder_out_channels},
                     {"input_size", {c.input_h, c.input_w}},
                     {"encoder", c.encoder},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  reject_unknown_keys(j, {"reduce_channels", "se_ratio", "decoder_out_channels", "input_size", "encoder", "seed"},
                      "model");
  read_opt(j, "reduce_channels", c.reduce_channels, "model");
  read_opt(j, "se_ratio", c.se_ratio, "model");
  read_opt(j, "decoder_out_channels", c.decoder_out_channels, "model");
  if (j.contains("input_size")) {
    std::vector<Index> size;
    read_opt(j, "input_size", size, "model");
    if (size.size() != 2) throw ConfigError("model.input_size must be [height, width]");
    c.input_h = size[0];
    c.input_w = size[1];
  }
  if (j.contains("encoder")) from_json(j.at("encoder"), c.encoder);
  read_opt(j, "seed", c.seed, "model");
}

}  // namespace effiseg
