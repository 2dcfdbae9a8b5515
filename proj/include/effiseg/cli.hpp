#pragma once

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "effiseg/data.hpp"
#include "effiseg/metrics.hpp"
#include "effiseg/model.hpp"
#include "effiseg/trainer.hpp"

namespace effiseg {

/// Process exit codes of the command-line tool.
enum ExitCode : int { kExitOk = 0, kExitRuntime = 1, kExitUsage = 2 };

struct DataConfig {
  std::filesystem::path root = "data";          // <root>/<corpus>/{images,masks}
  std::filesystem::path prepared = "prepared";  // output of prepare-data

  bool operator==(const DataConfig&) const = default;
};

/// Everything one run needs. `seed` is the master seed: it is copied into the
/// model, encoder, training and split seeds by apply_seed().
struct RunConfig {
  std::uint64_t seed = 0;
  ModelConfig model;
  TrainConfig train;
  SplitSpec split;
  DataConfig data;

  void apply_seed();
  /// Validates every section (not paths; commands check the paths they use).
  void validate() const;
};

void to_json(nlohmann::json& j, const RunConfig& c);
void from_json(const nlohmann::json& j, RunConfig& c);

/// Reads a JSON run config. Unknown keys, wrong types, unreadable files and
/// invalid values raise ConfigError.
RunConfig load_run_config(const std::filesystem::path& path);

/// Baseline totals shown as context rows by the parameter audit.
struct BaselineCount {
  const char* method;
  Index parameters;
};
inline constexpr std::array<BaselineCount, 3> kBaselineCounts{{
    {"U-Net", 15683713},
    {"U-Net++", 9042177},
    {"PraNet", 30328272},
}};

/// 2441781 -> "2,441,781"; negative values keep their sign.
std::string group_thousands(long long value);

/// Aligned per-component audit table with totals, reference and baselines.
std::string format_audit(const ParameterAudit& audit, const std::string& truncation);

/// Replaceable pieces of the commands, for tests.
struct CliHooks {
  /// Loads a checkpoint and returns a predictor plus the model config it was built with.
  std::function<std::pair<Predictor, ModelConfig>(const std::filesystem::path&)> load_predictor;
  /// Builds the model described by the config and audits it.
  std::function<ParameterAudit(const ModelConfig&)> audit;
};

CliHooks default_cli_hooks();

/// Runs the tool on `args` (without the program name). Returns an ExitCode.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err,
            const CliHooks& hooks = default_cli_hooks());

}  // namespace effiseg
