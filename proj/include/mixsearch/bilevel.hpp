#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <span>
#include <string_view>
#include <utility>
#include <vector>

#include "mixsearch/dataset.hpp"
#include "mixsearch/mixer.hpp"
#include "mixsearch/optim.hpp"
#include "mixsearch/tasks.hpp"
#include "mixsearch/weave.hpp"

namespace mixsearch::bilevel {

struct StageDims {
  int depth = 5;
  int layers = 8;
  bool operator==(const StageDims&) const = default;
};

/// Two-stage search settings. Learning rates for the architecture are fixed;
/// the weight rate follows a cosine from eta_w down to zero over each stage.
struct SearchConfig {
  int epochs_per_stage = 30;
  int warmup_epochs = 5;
  std::array<StageDims, 2> stage_dims{{{5, 8}, {6, 10}}};
  int base_channels = 8;
  int steps = 4;
  int num_classes = 2;
  double eta_w = 0.025;
  double w_momentum = 0.9;
  double w_weight_decay = 3e-4;
  double eta_alpha = 2e-4;
  double eta_beta = 2e-4;
  std::pair<double, double> arch_betas{0.5, 0.999};
  double arch_weight_decay = 1e-3;
  int batch_size = 8;
  std::uint64_t seed = 0;
  weave::BranchSet branches = weave::kAllBranches;
  weave::EdgeMode edge_mode = weave::EdgeMode::Top2;
  tasks::LossConfig loss;

  /// Throws InvalidConfig (or InfeasibleGrid for unusable stage grids).
  void validate() const;
  weave::GridSpec grid(int stage, int in_channels = 1) const;
};

enum class SearchMode { Dedicated, Union, Mix };
std::string_view mode_name(SearchMode m);
SearchMode mode_from_name(std::string_view name);

struct DataSplit {
  Dataset weight_train;
  Dataset arch_train;
};

/// Random disjoint halves; the weight side gets the odd sample.
/// Throws TooSmall below two samples.
DataSplit split_half(const Dataset& ds, std::uint64_t seed);

/// One SGD step on the network weights; architecture logits stay frozen.
/// Returns the loss before the update. Throws NonFiniteLoss.
double weight_step(const weave::WeaveNet& net, optim::Sgd& opt, const Batch& batch, double lr,
                   const tasks::LossConfig& loss);

/// Adam on beta, then a fresh pass for alpha against the updated beta.
/// Weights stay frozen. Returns the loss of the first pass. Throws
/// NonFiniteLoss.
double arch_step(const weave::WeaveNet& net, optim::Adam& beta_opt, optim::Adam& alpha_opt,
                 const Batch& batch, double eta_beta, double eta_alpha,
                 const tasks::LossConfig& loss);

/// Mean softmax mass of each candidate over the edges that use the set.
/// `edge_logits[e]` holds one logit per candidate.
std::vector<double> op_importance(std::size_t set_size,
                                  const std::vector<std::vector<double>>& edge_logits);

/// Keeps the ceil(|set| / 2) most important ops in their original order;
/// ties favour the lower index. With no edges the leading half survives.
std::vector<ops::OpKind> halve_ops(const std::vector<ops::OpKind>& set,
                                   const std::vector<std::vector<double>>& edge_logits);

/// Logits of every edge drawing from op set `set_index`, across cell types.
std::vector<std::vector<double>> edges_using_set(const weave::ArchLogits& logits, int set_index);

/// Halves all three op sets.
weave::OpSets halve_op_sets(const weave::OpSets& sets, const weave::ArchLogits& logits);

/// Mean softmax entropy (nats) over the edges of each op set.
std::array<double, 3> set_entropy(const weave::ArchLogits& logits);

struct EpochRecord {
  int stage = 0;
  int epoch = 0;
  bool warmup = false;
  double weight_loss = 0.0;
  /// NaN during warm-up, when no architecture step runs.
  double arch_loss = 0.0;
  std::array<double, 3> entropy{};  // Down-, Normal-, Up-ops
  double seconds = 0.0;
};

enum class StepKind { Weight, Arch };

struct SearchHooks {
  std::function<void(int stage, int epoch, StepKind kind, const weave::WeaveNet& net)> before_step;
  std::function<void(int stage, int epoch, StepKind kind, const weave::WeaveNet& net)> after_step;
  std::function<void(int stage, const weave::WeaveNet& net)> stage_start;
  std::function<void(const EpochRecord&)> on_epoch;
};

struct SearchResult {
  weave::Genotype genotype;
  std::array<weave::OpSets, 2> op_sets;
  weave::ArchLogits final_logits;
  std::vector<EpochRecord> log;
};

/// Training pool for a mode: the lone dataset, the union, or the composite
/// dataset. Throws InvalidConfig for a dedicated search over several
/// datasets and EmptyDataset when nothing is given.
Dataset search_pool(std::span<const Dataset> datasets, const mixer::MixConfig& mix, SearchMode mode);

/// Stage 0 searches the small grid with the full op sets, the op sets are
/// halved, and stage 1 searches the large grid from a fresh start. The
/// genotype is read off the stage-1 logits.
SearchResult run_search(std::span<const Dataset> datasets, const mixer::MixConfig& mix,
                        const SearchConfig& cfg, SearchMode mode, const SearchHooks* hooks = nullptr);

}  // namespace mixsearch::bilevel
