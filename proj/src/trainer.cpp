#include "effiseg/trainer.hpp"

#include <cstdio>

namespace effiseg {

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("train.epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (!(learning_rate > 0)) throw ConfigError("train.learning_rate must be > 0");
  if (patience < 1) throw ConfigError("train.patience must be >= 1");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw ConfigError("train.beta1/beta2 must lie in [0, 1)");
  if (!(adam_eps > 0)) throw ConfigError("train.adam_eps must be > 0");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"epochs", c.epochs},         {"batch_size", c.batch_size}, {"learning_rate", c.learning_rate},
                     {"beta1", c.beta1},           {"beta2", c.beta2},           {"adam_eps", c.adam_eps},
                     {"patience", c.patience},     {"seed", c.seed},             {"checkpoint_dir", c.checkpoint_dir.string()}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  reject_unknown_keys(j, {"epochs", "batch_size", "learning_rate", "beta1", "beta2", "adam_eps", "patience", "seed",
                          "checkpoint_dir"},
                      "train");
  auto read = [&](const char* key, auto& out) {
    if (!j.contains(key)) return;
    try {
      out = j.at(key).get<std::decay_t<decltype(out)>>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(std::string("config key 'train.") + key + "' has the wrong type");
    }
  };
  read("epochs", c.epochs);
  read("batch_size", c.batch_size);
  read("learning_rate", c.learning_rate);
  read("beta1", c.beta1);
  read("beta2", c.beta2);
  read("adam_eps", c.adam_eps);
  read("patience", c.patience);
  read("seed", c.seed);
  std::string dir = c.checkpoint_dir.string();
  read("checkpoint_dir", dir);
  c.checkpoint_dir = dir;
}

std::string history_csv(const std::vector<EpochRecord>& history) {
  std::string out = "epoch,train_loss,val_loss,val_dice\n";
  char buf[128];
  for (const auto& r : history) {
    std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g\n", r.epoch, r.train_loss, r.val_loss, r.val_dice);
    out += buf;
  }
  return out;
}

}  // namespace effiseg
