#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mixsearch/bilevel.hpp"
#include "mixsearch/dataset.hpp"
#include "mixsearch/tasks.hpp"
#include "mixsearch/weave.hpp"

namespace mixsearch::io {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Rasters. All failures throw IoFailure.

/// 8-bit binary PGM of a (1, 1, H, W) tensor with values in [0, 1],
/// rounded to the nearest of 256 levels.
void write_pgm(const fs::path& path, const Tensor& image);
/// (1, 1, H, W) tensor with values level / maxval.
Tensor read_pgm(const fs::path& path);

/// Little-endian float32 raster: "WNF1", then n, c, h, w as uint32, then
/// the values in NCHW order.
void write_wnf(const fs::path& path, const Tensor& t);
Tensor read_wnf(const fs::path& path);

// ---------------------------------------------------------------------------
// JSON documents

/// Creates parent directories, writes `text` and throws IoFailure on error.
void write_text(const fs::path& path, const std::string& text);
std::string read_text(const fs::path& path);
/// Two-space indented with a trailing newline; key order is fixed.
std::string dump(const json& j);
json load_json(const fs::path& path);  // IoFailure, InvalidConfig on bad syntax
void save_json(const fs::path& path, const json& j);

struct Provenance {
  std::string mode = "mix";
  int k = 2;
  double mu = 0.5;
  std::optional<int> m;
  std::uint64_t seed = 0;
  /// Searched domain for dedicated runs, otherwise the joined domain names.
  std::string source;
  weave::BranchSet branches = weave::kAllBranches;
  std::string tool_version;
  bool operator==(const Provenance&) const = default;
};

struct GenotypeFile {
  static constexpr int kSchemaVersion = 1;
  weave::Genotype genotype;
  Provenance provenance;
  bool operator==(const GenotypeFile&) const = default;
};

json to_json(const GenotypeFile& g);
/// Throws IncompatibleGenotype on schema violations, unknown op names,
/// edges outside the cell or branches outside the grid.
GenotypeFile genotype_from_json(const json& j);

json to_json(const bilevel::EpochRecord& r);  // NaN losses become null
json to_json(const tasks::EvalReport& r);
tasks::EvalReport report_from_json(const json& j);
json to_json(const tasks::DomainSpec& d);
json to_json(const tasks::TrainLog& log);

// ---------------------------------------------------------------------------
// Dataset directories
//
// A directory holds manifest.json plus one file pair per sample. Plain
// samples are stored as <id>.pgm and <id>_mask.pgm under
// <dataset>/<split>/; composites as <id>.wnf and <id>_label.wnf, since
// 8-bit levels would break their linearity.

struct ManifestEntry {
  std::string dataset;
  std::string split;
  std::string sample_id;
  int domain_id = 0;
  std::string image;  // relative to the directory
  std::string label;
  std::vector<double> weights{1.0};
  std::vector<std::string> sources;
};

struct Manifest {
  static constexpr int kSchemaVersion = 1;
  std::string kind = "domains";  // or "composite"
  std::vector<tasks::DomainSpec> domains;
  std::uint64_t seed = 0;
  json extra = json::object();
  std::vector<ManifestEntry> entries;
};

json to_json(const Manifest& m);
/// Checks weights sum to 1 within 1e-9 and that every referenced file
/// exists under `root`. Throws IoFailure or InvalidConfig.
Manifest manifest_from_json(const json& j, const fs::path& root);

/// Appends the samples of `ds` to `manifest` and writes their files.
void write_samples(const fs::path& root, const Dataset& ds, const std::string& split, Manifest& manifest);
/// Loads (dataset, split) from a directory; EmptyDataset when absent.
Dataset load_dataset(const fs::path& root, const Manifest& manifest, const std::string& dataset,
                     const std::string& split);

/// Dataset names in manifest order.
std::vector<std::string> dataset_names(const Manifest& manifest);

}  // namespace mixsearch::io
