#include "mixsearch/bilevel.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>

#include "mixsearch/error.hpp"

namespace mixsearch::bilevel {

namespace {

std::vector<double> softmax(const std::vector<double>& v) {
  const double top = *std::max_element(v.begin(), v.end());
  std::vector<double> p(v.size());
  double z = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) z += p[i] = std::exp(v[i] - top);
  for (double& x : p) x /= z;
  return p;
}

// One pass over the batch with only `group` trainable; returns the loss.
double backprop(const weave::WeaveNet& net, const Batch& batch, ParamGroup group,
                const tasks::LossConfig& loss, const char* what) {
  Tape tape;
  for (ParamGroup g : {ParamGroup::Weight, ParamGroup::Alpha, ParamGroup::Beta}) {
    tape.set_trainable(g, g == group);
  }
  Var l = tasks::seg_loss(tape, net.forward(tape, tape.constant(batch.images)), batch.labels, loss);
  const double value = l.value().item();
  if (!std::isfinite(value)) throw Error(Errc::NonFiniteLoss, std::string(what) + " loss is not finite");
  tape.backward(l);
  return value;
}

std::vector<std::size_t> shuffled(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
  return order;
}

std::vector<std::size_t> batch_indices(const std::vector<std::size_t>& order, std::size_t b,
                                       std::size_t size) {
  const std::size_t lo = b * size, hi = std::min(order.size(), lo + size);
  return {order.begin() + static_cast<std::ptrdiff_t>(lo), order.begin() + static_cast<std::ptrdiff_t>(hi)};
}

// Stream tags for derive_seed.
constexpr std::uint64_t kSplitStream = 0x73706c6974ULL;
constexpr std::uint64_t kInitStream = 0x696e6974ULL;
constexpr std::uint64_t kWeightOrder = 0x776f7264ULL;
constexpr std::uint64_t kArchOrder = 0x616f7264ULL;

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

void SearchConfig::validate() const {
  if (epochs_per_stage < 1) throw Error(Errc::InvalidConfig, "epochs_per_stage must be >= 1");
  if (warmup_epochs < 0 || warmup_epochs >= epochs_per_stage) {
    throw Error(Errc::InvalidConfig, "warmup_epochs must lie in [0, epochs_per_stage)");
  }
  if (batch_size < 1) throw Error(Errc::InvalidConfig, "batch_size must be >= 1");
  if (base_channels < 1 || steps < 1 || num_classes < 2) {
    throw Error(Errc::InvalidConfig, "base_channels, steps >= 1 and num_classes >= 2 required");
  }
  if (!(eta_w > 0.0) || !(eta_alpha >= 0.0) || !(eta_beta >= 0.0)) {
    throw Error(Errc::InvalidConfig, "learning rates must be positive");
  }
  if (!(w_momentum >= 0.0 && w_momentum < 1.0) || !(w_weight_decay >= 0.0)) {
    throw Error(Errc::InvalidConfig, "weight momentum must lie in [0, 1) and decay be >= 0");
  }
  const auto [b1, b2] = arch_betas;
  if (!(b1 >= 0.0 && b1 < 1.0) || !(b2 >= 0.0 && b2 < 1.0) || !(arch_weight_decay >= 0.0)) {
    throw Error(Errc::InvalidConfig, "arch betas must lie in [0, 1) and decay be >= 0");
  }
  if (!branches[0] && !branches[1] && !branches[2]) {
    throw Error(Errc::InvalidConfig, "at least one branch must be enabled");
  }
  loss.validate();
  for (int s = 0; s < 2; ++s) grid(s).validate();
}

weave::GridSpec SearchConfig::grid(int stage, int in_channels) const {
  const StageDims& dims = stage_dims.at(static_cast<std::size_t>(stage));
  return weave::GridSpec{.depth = dims.depth,
                         .layers = dims.layers,
                         .base_channels = base_channels,
                         .num_classes = num_classes,
                         .steps = steps,
                         .in_channels = in_channels};
}

std::string_view mode_name(SearchMode m) {
  switch (m) {
    case SearchMode::Dedicated: return "dedicated";
    case SearchMode::Union: return "union";
    case SearchMode::Mix: return "mix";
  }
  throw Error(Errc::InvalidConfig, "unknown search mode");
}

SearchMode mode_from_name(std::string_view name) {
  for (auto m : {SearchMode::Dedicated, SearchMode::Union, SearchMode::Mix})
    if (mode_name(m) == name) return m;
  throw Error(Errc::InvalidConfig, "unknown search mode '" + std::string(name) + "'");
}

// ---------------------------------------------------------------------------
// Steps

DataSplit split_half(const Dataset& ds, std::uint64_t seed) {
  if (ds.size() < 2) throw Error(Errc::TooSmall, "cannot split '" + ds.name + "' with fewer than 2 samples");
  const auto order = shuffled(ds.size(), derive_seed(seed, kSplitStream));
  const std::size_t n_weight = (ds.size() + 1) / 2;
  DataSplit out;
  out.weight_train.name = ds.name + "/weight";
  out.arch_train.name = ds.name + "/arch";
  // Keep the original relative order inside each half.
  std::vector<std::size_t> w(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_weight));
  std::vector<std::size_t> a(order.begin() + static_cast<std::ptrdiff_t>(n_weight), order.end());
  std::sort(w.begin(), w.end());
  std::sort(a.begin(), a.end());
  for (std::size_t i : w) out.weight_train.samples.push_back(ds.samples[i]);
  for (std::size_t i : a) out.arch_train.samples.push_back(ds.samples[i]);
  return out;
}

double weight_step(const weave::WeaveNet& net, optim::Sgd& opt, const Batch& batch, double lr,
                   const tasks::LossConfig& loss) {
  opt.zero_grad();
  const double value = backprop(net, batch, ParamGroup::Weight, loss, "weight");
  opt.step(lr);
  return value;
}

double arch_step(const weave::WeaveNet& net, optim::Adam& beta_opt, optim::Adam& alpha_opt,
                 const Batch& batch, double eta_beta, double eta_alpha,
                 const tasks::LossConfig& loss) {
  beta_opt.zero_grad();
  const double value = backprop(net, batch, ParamGroup::Beta, loss, "architecture");
  beta_opt.step(eta_beta);
  alpha_opt.zero_grad();
  backprop(net, batch, ParamGroup::Alpha, loss, "architecture");
  alpha_opt.step(eta_alpha);
  return value;
}

// ---------------------------------------------------------------------------
// Op-set halving

std::vector<double> op_importance(std::size_t set_size,
                                  const std::vector<std::vector<double>>& edge_logits) {
  std::vector<double> mass(set_size, 0.0);
  if (edge_logits.empty()) return mass;
  for (const auto& logits : edge_logits) {
    if (logits.size() != set_size) {
      throw Error(Errc::ShapeMismatch, "edge has " + std::to_string(logits.size()) +
                                           " logits for a set of " + std::to_string(set_size));
    }
    const auto p = softmax(logits);
    for (std::size_t i = 0; i < set_size; ++i) mass[i] += p[i];
  }
  for (double& m : mass) m /= static_cast<double>(edge_logits.size());
  return mass;
}

std::vector<ops::OpKind> halve_ops(const std::vector<ops::OpKind>& set,
                                   const std::vector<std::vector<double>>& edge_logits) {
  if (set.size() < 2) throw Error(Errc::InvalidQuery, "halving needs at least two candidate ops");
  const auto mass = op_importance(set.size(), edge_logits);
  std::vector<std::size_t> rank(set.size());
  std::iota(rank.begin(), rank.end(), 0);
  std::stable_sort(rank.begin(), rank.end(), [&](std::size_t a, std::size_t b) { return mass[a] > mass[b]; });
  rank.resize((set.size() + 1) / 2);
  std::sort(rank.begin(), rank.end());
  std::vector<ops::OpKind> out;
  for (std::size_t i : rank) out.push_back(set[i]);
  return out;
}

std::vector<std::vector<double>> edges_using_set(const weave::ArchLogits& logits, int set_index) {
  std::vector<std::vector<double>> out;
  for (int t = 0; t < 3; ++t) {
    const auto type = static_cast<ops::CellType>(t);
    const auto specs = weave::cell_edges(type, logits.steps);
    const auto& alpha = logits.alpha[t];
    if (alpha.empty()) continue;
    if (alpha.size() != specs.size()) {
      throw Error(Errc::ShapeMismatch, "alpha has " + std::to_string(alpha.size()) + " edges for " +
                                           std::string(ops::cell_type_name(type)) + " cells");
    }
    for (std::size_t e = 0; e < specs.size(); ++e)
      if (ops::op_set_index(type, specs[e].cls) == set_index) out.push_back(alpha[e]);
  }
  return out;
}

weave::OpSets halve_op_sets(const weave::OpSets& sets, const weave::ArchLogits& logits) {
  weave::OpSets out;
  for (int s = 0; s < 3; ++s) out.sets[s] = halve_ops(sets.sets[s], edges_using_set(logits, s));
  return out;
}

std::array<double, 3> set_entropy(const weave::ArchLogits& logits) {
  std::array<double, 3> out{};
  for (int s = 0; s < 3; ++s) {
    const auto edges = edges_using_set(logits, s);
    double h = 0.0;
    for (const auto& e : edges)
      for (double p : softmax(e))
        if (p > 0.0) h -= p * std::log(p);
    out[s] = edges.empty() ? 0.0 : h / static_cast<double>(edges.size());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Search

Dataset search_pool(std::span<const Dataset> datasets, const mixer::MixConfig& mix, SearchMode mode) {
  if (datasets.empty()) throw Error(Errc::EmptyDataset, "search needs at least one dataset");
  switch (mode) {
    case SearchMode::Dedicated:
      if (datasets.size() != 1) {
        throw Error(Errc::InvalidConfig, "dedicated search takes exactly one dataset, got " +
                                             std::to_string(datasets.size()));
      }
      return datasets[0];
    case SearchMode::Union:
      return mixer::build_union(datasets);
    case SearchMode::Mix:
      return mixer::build_composite_dataset(datasets, mix);
  }
  throw Error(Errc::InvalidConfig, "unknown search mode");
}

SearchResult run_search(std::span<const Dataset> datasets, const mixer::MixConfig& mix,
                        const SearchConfig& cfg, SearchMode mode, const SearchHooks* hooks) {
  cfg.validate();
  const Dataset pool = search_pool(datasets, mix, mode);
  if (pool.empty()) throw Error(Errc::EmptyDataset, "search pool is empty");
  const DataSplit split = split_half(pool, cfg.seed);
  const Sample& first = pool.samples.front();
  const int in_channels = first.image.shape().c;

  const std::size_t bs = static_cast<std::size_t>(cfg.batch_size);
  const std::size_t n_w = split.weight_train.size(), n_a = split.arch_train.size();
  const std::size_t w_batches = (n_w + bs - 1) / bs, a_batches = (n_a + bs - 1) / bs;
  const std::size_t total = w_batches * static_cast<std::size_t>(cfg.epochs_per_stage);
  const std::size_t horizon = std::max<std::size_t>(1, total - 1);

  SearchResult result;
  result.op_sets[0] = weave::OpSets::full();
  for (int stage = 0; stage < 2; ++stage) {
    const weave::GridSpec grid = cfg.grid(stage, in_channels);
    grid.check_input(first.height(), first.width());
    Rng init(derive_seed(cfg.seed, kInitStream, static_cast<std::uint64_t>(stage)));
    const weave::WeaveNet net = weave::build_supernet(grid, result.op_sets[stage], init, cfg.branches);
    optim::Sgd w_opt(net.parameters(ParamGroup::Weight), cfg.w_momentum, cfg.w_weight_decay);
    optim::Adam beta_opt(net.parameters(ParamGroup::Beta), cfg.arch_betas.first, cfg.arch_betas.second,
                         cfg.arch_weight_decay);
    optim::Adam alpha_opt(net.parameters(ParamGroup::Alpha), cfg.arch_betas.first, cfg.arch_betas.second,
                          cfg.arch_weight_decay);
    if (hooks && hooks->stage_start) hooks->stage_start(stage, net);

    std::size_t step = 0;
    for (int epoch = 0; epoch < cfg.epochs_per_stage; ++epoch) {
      const auto start = std::chrono::steady_clock::now();
      const bool warmup = epoch < cfg.warmup_epochs;
      const auto epoch_key = static_cast<std::uint64_t>(stage * 100000 + epoch);
      const auto w_order = shuffled(n_w, derive_seed(cfg.seed, kWeightOrder, epoch_key));
      const auto a_order = shuffled(n_a, derive_seed(cfg.seed, kArchOrder, epoch_key));
      double w_sum = 0.0, a_sum = 0.0;
      for (std::size_t b = 0; b < w_batches; ++b, ++step) {
        const Batch wb = make_batch(split.weight_train, batch_indices(w_order, b, bs));
        if (hooks && hooks->before_step) hooks->before_step(stage, epoch, StepKind::Weight, net);
        w_sum += weight_step(net, w_opt, wb, optim::cosine_lr(cfg.eta_w, step, horizon), cfg.loss);
        if (hooks && hooks->after_step) hooks->after_step(stage, epoch, StepKind::Weight, net);
        if (warmup) continue;
        // The arch split is cycled when it has fewer batches.
        const Batch ab = make_batch(split.arch_train, batch_indices(a_order, b % a_batches, bs));
        if (hooks && hooks->before_step) hooks->before_step(stage, epoch, StepKind::Arch, net);
        a_sum += arch_step(net, beta_opt, alpha_opt, ab, cfg.eta_beta, cfg.eta_alpha, cfg.loss);
        if (hooks && hooks->after_step) hooks->after_step(stage, epoch, StepKind::Arch, net);
      }
      EpochRecord rec;
      rec.stage = stage;
      rec.epoch = epoch;
      rec.warmup = warmup;
      rec.weight_loss = w_sum / static_cast<double>(w_batches);
      rec.arch_loss = warmup ? std::numeric_limits<double>::quiet_NaN() : a_sum / static_cast<double>(w_batches);
      rec.entropy = set_entropy(net.arch_logits());
      rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      result.log.push_back(rec);
      if (hooks && hooks->on_epoch) hooks->on_epoch(rec);
    }

    const weave::ArchLogits logits = net.arch_logits();
    if (stage == 0) {
      result.op_sets[1] = halve_op_sets(result.op_sets[0], logits);
    } else {
      result.final_logits = logits;
      result.genotype = weave::discretize(logits, result.op_sets[1], grid, cfg.edge_mode);
    }
  }
  return result;
}

}  // namespace mixsearch::bilevel
