#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mixsearch/bilevel.hpp"
#include "mixsearch/error.hpp"
#include "mixsearch/io.hpp"
#include "mixsearch/mixer.hpp"
#include "mixsearch/tasks.hpp"

namespace mixsearch::cli {

namespace fs = std::filesystem;
using nlohmann::json;

std::string_view tool_version();

/// Exit statuses of the command-line tool.
enum ExitCode : int { kOk = 0, kInvalidConfig = 2, kIoFailure = 3, kVerificationFailure = 4 };
int exit_code_for(Errc code);

struct DataConfig {
  fs::path root = "data";
  int height = 32;
  int width = 32;
  std::vector<tasks::DomainSpec> domains = tasks::default_domains(32, 32);
};

struct UNetConfig {
  int base_channels = 8;
};

struct EvalConfig {
  tasks::HeadMode heads = tasks::HeadMode::All;
};

/// Everything a run needs. One global seed drives every random stream;
/// component seeds are derived from it by resolve().
struct RunConfig {
  std::uint64_t seed = 0;
  DataConfig data;
  mixer::MixConfig mix;
  bilevel::SearchConfig search;
  tasks::LossConfig loss;
  tasks::TrainConfig retrain;
  UNetConfig unet;
  EvalConfig eval;
  int threads = 1;

  /// Copies the global seed and loss into the components. Called by
  /// config_from_json and after any override.
  void resolve();
  /// Throws InvalidConfig naming the offending key.
  void validate() const;
};

/// Fills defaults for missing keys and rejects unknown ones with a message
/// naming the full key path ("search.eta_w").
RunConfig config_from_json(const json& j);
json to_json(const RunConfig& cfg);
RunConfig load_config(const fs::path& path);

/// Global flags shared by every command.
struct GlobalOptions {
  std::optional<fs::path> config;
  std::optional<std::uint64_t> seed;
  std::optional<fs::path> out;
  std::optional<int> threads;
};
/// Loads --config (or defaults), applies --seed and --threads.
RunConfig make_config(const GlobalOptions& g);

// ---------------------------------------------------------------------------
// Commands. Each throws mixsearch::Error; run() maps codes to exit statuses.

/// Writes every domain's train and test split plus manifest.json to `out`.
io::Manifest cmd_gen_data(const RunConfig& cfg, const fs::path& out);

/// Materializes the composite dataset of the given domains (all when
/// empty) under `out`.
io::Manifest cmd_mix(const RunConfig& cfg, const fs::path& data_root, const std::vector<std::string>& domains,
                     const fs::path& out);

struct SearchRequest {
  bilevel::SearchMode mode = bilevel::SearchMode::Mix;
  /// Dedicated: the one searched domain. Union and mix: the pooled domains,
  /// all of them when empty.
  std::vector<std::string> domains;
};

/// Runs the two-stage search and writes genotype.json and search_log.jsonl
/// to `out`.
io::GenotypeFile cmd_search(const RunConfig& cfg, const fs::path& data_root, const SearchRequest& req,
                            const fs::path& out, std::ostream* progress = nullptr);

struct RetrainRequest {
  std::optional<fs::path> genotype;  // unset: the micro U-Net baseline
  std::string domain;
  std::vector<std::string> eval_domains;  // empty: the training domain
  std::string report_name = "report.json";
};

/// Retrains from scratch on the domain's train split and evaluates on the
/// test split of each eval domain. Returns (and writes) the report.
json cmd_retrain_eval(const RunConfig& cfg, const fs::path& data_root, const RetrainRequest& req,
                      const fs::path& out, std::ostream* progress = nullptr);

/// Exact decimal size of the cell space. Throws InvalidConfig.
std::string cmd_count(int normal_edges, int special_edges, const std::vector<int>& sizes);

/// Prints one row per catalog op; returns true when all pass.
bool cmd_gradcheck(std::ostream& os, bool inject_fault = false, double tolerance = 1e-4);

/// Full tool entry point: parses argv, runs the command, maps errors to
/// exit codes and prints them to `err`.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace mixsearch::cli
