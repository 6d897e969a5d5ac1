#include "mixsearch/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>

#include "mixsearch/autodiff.hpp"
#include "mixsearch/error.hpp"
#include "mixsearch/parallel.hpp"
#include "mixsearch/rng.hpp"
#include "mixsearch/verify.hpp"

#ifndef MIXSEARCH_VERSION
#define MIXSEARCH_VERSION "0.0.0"
#endif

namespace mixsearch::cli {

namespace {

constexpr std::uint64_t kMixStream = 0x6d6978;
constexpr std::uint64_t kRetrainStream = 0x7274726e;
constexpr std::uint64_t kUNetStream = 0x756e6574;

[[noreturn]] void bad(const std::string& key, const std::string& why) {
  throw Error(Errc::InvalidConfig, "config key '" + key + "': " + why);
}

// Reads one JSON object, remembering which keys were consumed so leftovers
// can be reported by name.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) bad(path_.empty() ? "<root>" : path_, "expected an object");
  }

  std::string key(const std::string& k) const { return path_.empty() ? k : path_ + "." + k; }

  const json* find(const std::string& k) {
    seen_.insert(k);
    auto it = j_.find(k);
    return it == j_.end() ? nullptr : &*it;
  }

  template <typename T>
  void get(const std::string& k, T& dst) {
    const json* v = find(k);
    if (!v) return;
    try {
      dst = v->get<T>();
    } catch (const json::exception&) {
      bad(key(k), "wrong type");
    }
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) bad(key(it.key()), "unknown key");
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

template <typename F>
auto translate(const std::string& key, F&& f) {
  try {
    return f();
  } catch (const Error& e) {
    bad(key, e.what());
  }
}

weave::BranchSet parse_branches(const std::vector<std::string>& names, const std::string& key) {
  if (names.empty()) bad(key, "at least one branch is required");
  weave::BranchSet set{false, false, false};
  for (const auto& n : names) set[static_cast<int>(translate(key, [&] { return weave::branch_from_name(n); }))] = true;
  return set;
}

std::vector<std::string> branch_names(const weave::BranchSet& set) {
  std::vector<std::string> out;
  for (weave::Branch b : weave::kBranches)
    if (set[static_cast<int>(b)]) out.emplace_back(weave::branch_name(b));
  return out;
}

std::string_view edge_mode_name(weave::EdgeMode m) { return m == weave::EdgeMode::Top2 ? "top2" : "all_edges"; }

weave::EdgeMode edge_mode_from(const std::string& s, const std::string& key) {
  if (s == "top2") return weave::EdgeMode::Top2;
  if (s == "all_edges") return weave::EdgeMode::AllEdges;
  bad(key, "expected 'top2' or 'all_edges'");
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');)
    if (!item.empty()) out.push_back(item);
  return out;
}

std::string join(const std::vector<std::string>& v, const char* sep) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? sep : "") + v[i];
  return out;
}

void parse_domain(const json& j, const std::string& path, tasks::DomainSpec& d) {
  Section s(j, path);
  s.get("name", d.name);
  if (const json* f = s.find("family")) {
    d.family = translate(s.key("family"), [&] { return tasks::family_from_name(f->get<std::string>()); });
  }
  if (const json* p = s.find("polarity")) {
    d.polarity = translate(s.key("polarity"), [&] { return tasks::polarity_from_name(p->get<std::string>()); });
  }
  s.get("domain_id", d.domain_id);
  s.get("noise", d.noise);
  s.get("size_min", d.size_min);
  s.get("size_max", d.size_max);
  s.get("train_count", d.train_count);
  s.get("test_count", d.test_count);
  s.finish();
}

json domain_json(const tasks::DomainSpec& d) {
  return json{{"name", d.name},
              {"domain_id", d.domain_id},
              {"family", tasks::family_name(d.family)},
              {"polarity", tasks::polarity_name(d.polarity)},
              {"noise", d.noise},
              {"size_min", d.size_min},
              {"size_max", d.size_max},
              {"train_count", d.train_count},
              {"test_count", d.test_count}};
}

io::Manifest load_manifest(const fs::path& root) {
  return io::manifest_from_json(io::load_json(root / "manifest.json"), root);
}

// Picks named datasets from a manifest; every dataset when `names` is empty.
std::vector<std::string> select(const io::Manifest& m, const std::vector<std::string>& names) {
  const auto all = io::dataset_names(m);
  if (names.empty()) return all;
  for (const auto& n : names) {
    if (std::find(all.begin(), all.end(), n) == all.end()) {
      throw Error(Errc::EmptyDataset, "domain '" + n + "' is not in the dataset directory");
    }
  }
  return names;
}

struct FaultGuard {
  explicit FaultGuard(bool on) { ad::fault::flip_conv_weight_grad_sign(on); }
  ~FaultGuard() { ad::fault::flip_conv_weight_grad_sign(false); }
};

}  // namespace

std::string_view tool_version() { return MIXSEARCH_VERSION; }

int exit_code_for(Errc code) {
  switch (code) {
    case Errc::IoFailure:
    case Errc::EmptyDataset:
      return kIoFailure;
    case Errc::NonFinite:
    case Errc::NonFiniteLoss:
      return kVerificationFailure;
    default:
      return kInvalidConfig;
  }
}

// ---------------------------------------------------------------------------
// Configuration

void RunConfig::resolve() {
  mix.seed = derive_seed(seed, kMixStream);
  search.seed = seed;
  search.loss = loss;
  retrain.seed = derive_seed(seed, kRetrainStream);
  retrain.loss = loss;
  for (auto& d : data.domains) {
    d.height = data.height;
    d.width = data.width;
  }
}

void RunConfig::validate() const {
  if (threads < 1) bad("threads", "must be at least 1");
  if (data.domains.empty()) bad("data.domains", "at least one domain is required");
  std::set<std::string> names;
  for (std::size_t i = 0; i < data.domains.size(); ++i) {
    const std::string key = "data.domains[" + std::to_string(i) + "]";
    translate(key, [&] { data.domains[i].validate(); return 0; });
    if (!names.insert(data.domains[i].name).second) bad(key + ".name", "duplicate domain name");
  }
  if (mix.k < 1) bad("mix.k", "must be at least 1");
  if (!(mix.mu > 0.0)) bad("mix.mu", "must be positive");
  if (mix.m && *mix.m < 1) bad("mix.m", "must be positive");
  translate("loss", [&] { loss.validate(); return 0; });
  translate("retrain", [&] { retrain.validate(); return 0; });
  translate("search", [&] { search.validate(); return 0; });
  for (int stage = 0; stage < 2; ++stage) {
    translate("data.height", [&] { search.grid(stage).check_input(data.height, data.width); return 0; });
  }
  if (unet.base_channels < 1) bad("unet.base_channels", "must be positive");
}

RunConfig config_from_json(const json& j) {
  RunConfig cfg;
  Section root(j, "");
  root.get("seed", cfg.seed);
  root.get("threads", cfg.threads);

  if (const json* dj = root.find("data")) {
    Section s(*dj, "data");
    std::string r = cfg.data.root.string();
    s.get("root", r);
    cfg.data.root = r;
    s.get("height", cfg.data.height);
    s.get("width", cfg.data.width);
    cfg.data.domains = tasks::default_domains(cfg.data.height, cfg.data.width);
    int train = -1, test = -1;
    s.get("train_count", train);
    s.get("test_count", test);
    if (const json* list = s.find("domains")) {
      if (!list->is_array()) bad("data.domains", "expected a list");
      cfg.data.domains.clear();
      for (std::size_t i = 0; i < list->size(); ++i) {
        tasks::DomainSpec d;
        d.domain_id = static_cast<int>(i);
        parse_domain((*list)[i], "data.domains[" + std::to_string(i) + "]", d);
        cfg.data.domains.push_back(d);
      }
    }
    for (auto& d : cfg.data.domains) {
      if (train >= 0) d.train_count = train;
      if (test >= 0) d.test_count = test;
    }
    s.finish();
  }

  if (const json* mj = root.find("mix")) {
    Section s(*mj, "mix");
    s.get("k", cfg.mix.k);
    s.get("mu", cfg.mix.mu);
    if (const json* m = s.find("m"); m && !m->is_null()) {
      int v = 0;
      s.get("m", v);
      cfg.mix.m = v;
    }
    s.get("include_originals", cfg.mix.include_originals);
    s.finish();
  }

  if (const json* sj = root.find("search")) {
    Section s(*sj, "search");
    auto& c = cfg.search;
    s.get("epochs_per_stage", c.epochs_per_stage);
    s.get("warmup_epochs", c.warmup_epochs);
    if (const json* dims = s.find("stage_dims")) {
      std::array<std::array<int, 2>, 2> v{};
      try {
        v = dims->get<std::array<std::array<int, 2>, 2>>();
      } catch (const json::exception&) {
        bad("search.stage_dims", "expected [[depth, layers], [depth, layers]]");
      }
      for (int i = 0; i < 2; ++i) c.stage_dims[i] = {v[i][0], v[i][1]};
    }
    s.get("base_channels", c.base_channels);
    s.get("steps", c.steps);
    s.get("eta_w", c.eta_w);
    s.get("w_momentum", c.w_momentum);
    s.get("w_weight_decay", c.w_weight_decay);
    s.get("eta_alpha", c.eta_alpha);
    s.get("eta_beta", c.eta_beta);
    s.get("arch_betas", c.arch_betas);
    s.get("arch_weight_decay", c.arch_weight_decay);
    s.get("batch_size", c.batch_size);
    std::vector<std::string> br;
    if (s.find("branches")) {
      s.get("branches", br);
      c.branches = parse_branches(br, "search.branches");
    }
    std::string mode;
    if (s.find("edge_mode")) {
      s.get("edge_mode", mode);
      c.edge_mode = edge_mode_from(mode, "search.edge_mode");
    }
    s.finish();
  }

  if (const json* lj = root.find("loss")) {
    Section s(*lj, "loss");
    s.get("ce_weight", cfg.loss.ce_weight);
    s.get("dice_weight", cfg.loss.dice_weight);
    s.get("deep_supervision", cfg.loss.deep_supervision);
    s.get("dice_smooth", cfg.loss.dice_smooth);
    s.finish();
  }

  if (const json* rj = root.find("retrain")) {
    Section s(*rj, "retrain");
    s.get("epochs", cfg.retrain.epochs);
    s.get("batch_size", cfg.retrain.batch_size);
    s.get("lr", cfg.retrain.lr);
    s.get("momentum", cfg.retrain.momentum);
    s.get("weight_decay", cfg.retrain.weight_decay);
    s.finish();
  }

  if (const json* uj = root.find("unet")) {
    Section s(*uj, "unet");
    s.get("base_channels", cfg.unet.base_channels);
    s.finish();
  }

  if (const json* ej = root.find("eval")) {
    Section s(*ej, "eval");
    std::string heads = "all";
    s.get("heads", heads);
    if (heads == "all") cfg.eval.heads = tasks::HeadMode::All;
    else if (heads == "final") cfg.eval.heads = tasks::HeadMode::Final;
    else bad("eval.heads", "expected 'all' or 'final'");
    s.finish();
  }

  root.finish();
  cfg.resolve();
  cfg.validate();
  return cfg;
}

json to_json(const RunConfig& cfg) {
  json domains = json::array();
  for (const auto& d : cfg.data.domains) domains.push_back(domain_json(d));
  const auto& s = cfg.search;
  return json{
      {"seed", cfg.seed},
      {"threads", cfg.threads},
      {"data",
       {{"root", cfg.data.root.generic_string()},
        {"height", cfg.data.height},
        {"width", cfg.data.width},
        {"domains", std::move(domains)}}},
      {"mix",
       {{"k", cfg.mix.k},
        {"mu", cfg.mix.mu},
        {"m", cfg.mix.m ? json(*cfg.mix.m) : json(nullptr)},
        {"include_originals", cfg.mix.include_originals}}},
      {"search",
       {{"epochs_per_stage", s.epochs_per_stage},
        {"warmup_epochs", s.warmup_epochs},
        {"stage_dims",
         {{s.stage_dims[0].depth, s.stage_dims[0].layers}, {s.stage_dims[1].depth, s.stage_dims[1].layers}}},
        {"base_channels", s.base_channels},
        {"steps", s.steps},
        {"eta_w", s.eta_w},
        {"w_momentum", s.w_momentum},
        {"w_weight_decay", s.w_weight_decay},
        {"eta_alpha", s.eta_alpha},
        {"eta_beta", s.eta_beta},
        {"arch_betas", s.arch_betas},
        {"arch_weight_decay", s.arch_weight_decay},
        {"batch_size", s.batch_size},
        {"branches", branch_names(s.branches)},
        {"edge_mode", edge_mode_name(s.edge_mode)}}},
      {"loss",
       {{"ce_weight", cfg.loss.ce_weight},
        {"dice_weight", cfg.loss.dice_weight},
        {"deep_supervision", cfg.loss.deep_supervision},
        {"dice_smooth", cfg.loss.dice_smooth}}},
      {"retrain",
       {{"epochs", cfg.retrain.epochs},
        {"batch_size", cfg.retrain.batch_size},
        {"lr", cfg.retrain.lr},
        {"momentum", cfg.retrain.momentum},
        {"weight_decay", cfg.retrain.weight_decay}}},
      {"unet", {{"base_channels", cfg.unet.base_channels}}},
      {"eval", {{"heads", cfg.eval.heads == tasks::HeadMode::All ? "all" : "final"}}},
  };
}

RunConfig load_config(const fs::path& path) { return config_from_json(io::load_json(path)); }

RunConfig make_config(const GlobalOptions& g) {
  RunConfig cfg = g.config ? load_config(*g.config) : RunConfig{};
  if (g.seed) cfg.seed = *g.seed;
  if (g.threads) cfg.threads = *g.threads;
  cfg.resolve();
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------------------------------
// Commands

io::Manifest cmd_gen_data(const RunConfig& cfg, const fs::path& out) {
  io::Manifest m;
  m.kind = "domains";
  m.seed = cfg.seed;
  for (const auto& d : cfg.data.domains) {
    m.domains.push_back(d);
    const Dataset train = tasks::gen_domain(d, d.train_count, cfg.seed, tasks::Split::Train);
    const Dataset test = tasks::gen_domain(d, d.test_count, cfg.seed, tasks::Split::Test);
    io::write_samples(out, train, "train", m);
    io::write_samples(out, test, "test", m);
  }
  io::save_json(out / "manifest.json", io::to_json(m));
  return m;
}

io::Manifest cmd_mix(const RunConfig& cfg, const fs::path& data_root, const std::vector<std::string>& domains,
                     const fs::path& out) {
  const io::Manifest src = load_manifest(data_root);
  std::vector<Dataset> sets;
  for (const auto& name : select(src, domains)) sets.push_back(io::load_dataset(data_root, src, name, "train"));
  Dataset mixed = mixer::build_composite_dataset(sets, cfg.mix);
  mixed.name = "mix";
  io::Manifest m;
  m.kind = "composite";
  m.seed = cfg.seed;
  m.extra = {{"k", cfg.mix.k},
             {"mu", cfg.mix.mu},
             {"m", cfg.mix.m ? json(*cfg.mix.m) : json(nullptr)},
             {"include_originals", cfg.mix.include_originals},
             {"sources", select(src, domains)}};
  io::write_samples(out, mixed, "train", m);
  io::save_json(out / "manifest.json", io::to_json(m));
  return m;
}

io::GenotypeFile cmd_search(const RunConfig& cfg, const fs::path& data_root, const SearchRequest& req,
                            const fs::path& out, std::ostream* progress) {
  if (req.mode == bilevel::SearchMode::Dedicated && req.domains.size() != 1) {
    throw Error(Errc::InvalidConfig, "a dedicated search needs exactly one domain");
  }
  const io::Manifest manifest = load_manifest(data_root);
  const auto names = select(manifest, req.domains);
  std::vector<Dataset> sets;
  for (const auto& n : names) sets.push_back(io::load_dataset(data_root, manifest, n, "train"));

  bilevel::SearchHooks hooks;
  if (progress) {
    hooks.on_epoch = [progress](const bilevel::EpochRecord& r) {
      *progress << "stage " << r.stage << " epoch " << r.epoch << (r.warmup ? " (warm-up)" : "")
                << " weight_loss " << r.weight_loss << " arch_loss " << r.arch_loss << '\n';
    };
  }
  const auto result = bilevel::run_search(sets, cfg.mix, cfg.search, req.mode, &hooks);

  io::GenotypeFile g;
  g.genotype = result.genotype;
  g.provenance.mode = std::string(bilevel::mode_name(req.mode));
  g.provenance.k = cfg.mix.k;
  g.provenance.mu = cfg.mix.mu;
  g.provenance.m = cfg.mix.m;
  g.provenance.seed = cfg.seed;
  g.provenance.source = join(names, "+");
  g.provenance.branches = cfg.search.branches;
  g.provenance.tool_version = std::string(tool_version());

  io::save_json(out / "genotype.json", io::to_json(g));
  std::string log;
  for (const auto& r : result.log) log += io::to_json(r).dump() + "\n";
  io::write_text(out / "search_log.jsonl", log);
  return g;
}

json cmd_retrain_eval(const RunConfig& cfg, const fs::path& data_root, const RetrainRequest& req,
                      const fs::path& out, std::ostream* progress) {
  const io::Manifest manifest = load_manifest(data_root);
  const Dataset train = io::load_dataset(data_root, manifest, req.domain, "train");
  const auto eval_names = req.eval_domains.empty() ? std::vector<std::string>{req.domain} : req.eval_domains;
  std::vector<Dataset> tests;
  for (const auto& n : select(manifest, eval_names)) tests.push_back(io::load_dataset(data_root, manifest, n, "test"));

  const auto t0 = std::chrono::steady_clock::now();
  std::unique_ptr<tasks::SegModel> model;
  tasks::TrainLog log;
  json report{{"schema_version", 1}, {"train_domain", req.domain}};
  if (req.genotype) {
    const io::GenotypeFile g = io::genotype_from_json(io::load_json(*req.genotype));
    g.genotype.grid.check_input(train[0].height(), train[0].width());
    model = tasks::retrain(g.genotype, g.genotype.grid, train, cfg.retrain, &log);
    report["model"] = "weave";
    report["provenance"] = io::to_json(g)["provenance"];
  } else {
    Rng rng(derive_seed(cfg.retrain.seed, kUNetStream));
    model = std::make_unique<tasks::MicroUNet>(train[0].image.shape().c, cfg.unet.base_channels,
                                               train[0].num_classes(), rng);
    log = tasks::train_model(*model, train, cfg.retrain);
    report["model"] = "unet";
  }
  report["parameter_count"] = model->parameter_count();
  report["train"] = io::to_json(log);

  json evals = json::array();
  for (const auto& t : tests) {
    auto r = tasks::evaluate(*model, t, cfg.eval.heads);
    r.dataset = t.name;
    evals.push_back(io::to_json(r));
    if (progress) *progress << t.name << ": dice " << r.dice << " jaccard " << r.jaccard << '\n';
  }
  report["evaluations"] = std::move(evals);
  // Wall time lives in its own field so the rest of the report stays reproducible.
  report["timing"] = {{"seconds", std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()}};
  io::save_json(out / req.report_name, report);
  return report;
}

std::string cmd_count(int normal_edges, int special_edges, const std::vector<int>& sizes) {
  std::array<int, 4> s{1, 1, 1, 1};
  if (sizes.size() == 1 && special_edges == 0) {
    s[0] = sizes[0];  // the special sizes never enter an empty product
  } else if (sizes.size() == 4) {
    std::copy(sizes.begin(), sizes.end(), s.begin());
  } else {
    throw Error(Errc::InvalidConfig, "--sizes expects four values (normal, down, up, normal-special)");
  }
  try {
    return weave::count_cell_space(normal_edges, special_edges, s).str();
  } catch (const Error& e) {
    throw Error(Errc::InvalidConfig, e.what());
  }
}

bool cmd_gradcheck(std::ostream& os, bool inject_fault, double tolerance) {
  FaultGuard guard(inject_fault);
  const auto rows = verify::op_gradcheck(tolerance);
  bool ok = true;
  os << std::left << std::setw(16) << "op" << std::right << std::setw(13) << "input_err" << std::setw(13)
     << "param_err" << "  result\n";
  for (const auto& r : rows) {
    ok = ok && r.pass();
    os << std::left << std::setw(16) << r.name << std::right << std::scientific << std::setprecision(3)
       << std::setw(13) << r.input_error << std::setw(13) << r.param_error << "  " << (r.pass() ? "PASS" : "FAIL")
       << '\n';
  }
  os << std::defaultfloat << (ok ? "all " : "some ") << rows.size() << " ops "
     << (ok ? "pass" : "FAILED") << " at tolerance " << tolerance << '\n';
  return ok;
}

// ---------------------------------------------------------------------------
// Entry point

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Mixed-domain architecture search for segmentation", "mixsearch"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_version_flag("--version", std::string(tool_version()));

  std::string config_path, out_dir;
  std::uint64_t seed = 0;
  int threads = 0;
  auto* o_config = app.add_option("--config", config_path, "JSON run configuration");
  auto* o_seed = app.add_option("--seed", seed, "Global seed");
  auto* o_out = app.add_option("--out", out_dir, "Output directory");
  auto* o_threads = app.add_option("--threads", threads, "Worker threads")->check(CLI::PositiveNumber);

  std::string data_dir;
  auto add_data = [&](CLI::App* sub) { return sub->add_option("--data", data_dir, "Dataset directory"); };

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic domains");

  auto* mix = app.add_subcommand("mix", "Materialize a composite dataset");
  std::string domains_csv;
  add_data(mix);
  mix->add_option("--domains", domains_csv, "Comma-separated domains (default: all)");

  auto* search = app.add_subcommand("search", "Run the two-stage architecture search");
  std::string dedicated, branches_csv;
  int k = 0, m = 0;
  double mu = 0.0;
  add_data(search);
  auto* o_ded = search->add_option("--dedicated", dedicated, "Search on one domain");
  auto* f_union = search->add_flag("--union", "Search on the union of the domains");
  auto* f_mix = search->add_flag("--mix", "Search on the composite dataset");
  o_ded->excludes(f_union)->excludes(f_mix);
  f_union->excludes(f_mix);
  search->add_option("--domains", domains_csv, "Comma-separated pooled domains (default: all)");
  auto* o_k = search->add_option("--k", k, "Samples per composite")->check(CLI::PositiveNumber);
  auto* o_mu = search->add_option("--mu", mu, "Beta concentration")->check(CLI::PositiveNumber);
  auto* o_m = search->add_option("--m", m, "Number of composites")->check(CLI::PositiveNumber);
  auto* o_br = search->add_option("--branches", branches_csv, "Enabled branches, e.g. normal,up");

  auto* retrain = app.add_subcommand("retrain-eval", "Retrain a genotype from scratch and evaluate it");
  std::string genotype, model = "weave", domain, eval_csv, report = "report.json";
  add_data(retrain);
  auto* o_geno = retrain->add_option("--genotype", genotype, "genotype.json from a search");
  retrain->add_option("--model", model, "weave or unet")->check(CLI::IsMember({"weave", "unet"}));
  retrain->add_option("--domain", domain, "Training domain")->required();
  retrain->add_option("--eval-domains", eval_csv, "Comma-separated test domains (default: the training domain)");
  retrain->add_option("--report", report, "Report file name");

  auto* count = app.add_subcommand("count", "Exact size of the cell search space");
  int normal_edges = 0, special_edges = 0;
  std::string sizes_csv;
  count->add_option("--normal-edges", normal_edges)->required();
  count->add_option("--special-edges", special_edges)->required();
  count->add_option("--sizes", sizes_csv, "n_normal,n_down,n_up,n_normal_special")->required();

  auto* grad = app.add_subcommand("gradcheck", "Finite-difference check of every op");
  bool inject = false;
  double tol = 1e-4;
  grad->add_flag("--inject-fault", inject, "Flip the sign of the conv weight gradient");
  grad->add_option("--tolerance", tol)->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kInvalidConfig;
  }

  try {
    GlobalOptions g;
    if (*o_config) g.config = config_path;
    if (*o_seed) g.seed = seed;
    if (*o_threads) g.threads = threads;

    if (*count) {
      std::vector<int> sizes;
      for (const auto& s : split_list(sizes_csv)) {
        try {
          sizes.push_back(std::stoi(s));
        } catch (const std::exception&) {
          throw Error(Errc::InvalidConfig, "--sizes: '" + s + "' is not an integer");
        }
      }
      out << cmd_count(normal_edges, special_edges, sizes) << '\n';
      return kOk;
    }
    if (*grad) return cmd_gradcheck(out, inject, tol) ? kOk : kVerificationFailure;

    RunConfig cfg = make_config(g);
    set_num_threads(cfg.threads);
    const fs::path data = data_dir.empty() ? cfg.data.root : fs::path(data_dir);
    const fs::path dest = *o_out ? fs::path(out_dir) : fs::path();

    if (*gen) {
      const fs::path where = dest.empty() ? cfg.data.root : dest;
      const auto mf = cmd_gen_data(cfg, where);
      out << "wrote " << mf.entries.size() << " samples to " << where.string() << '\n';
    } else if (*mix) {
      const fs::path where = dest.empty() ? fs::path("out") / "mix" : dest;
      const auto mf = cmd_mix(cfg, data, split_list(domains_csv), where);
      out << "wrote " << mf.entries.size() << " samples to " << where.string() << '\n';
    } else if (*search) {
      if (*o_k) cfg.mix.k = k;
      if (*o_mu) cfg.mix.mu = mu;
      if (*o_m) cfg.mix.m = m;
      if (*o_br) cfg.search.branches = parse_branches(split_list(branches_csv), "--branches");
      cfg.validate();
      SearchRequest req;
      if (*o_ded) {
        req.mode = bilevel::SearchMode::Dedicated;
        req.domains = {dedicated};
      } else {
        req.mode = *f_union ? bilevel::SearchMode::Union : bilevel::SearchMode::Mix;
        req.domains = split_list(domains_csv);
      }
      const fs::path where = dest.empty() ? fs::path("out") : dest;
      cmd_search(cfg, data, req, where, &err);
      out << "wrote " << (where / "genotype.json").string() << '\n';
    } else if (*retrain) {
      RetrainRequest req;
      if (model == "weave") {
        if (!*o_geno) throw Error(Errc::InvalidConfig, "--genotype is required unless --model unet");
        req.genotype = genotype;
      }
      req.domain = domain;
      req.eval_domains = split_list(eval_csv);
      req.report_name = report;
      const fs::path where = dest.empty() ? fs::path("out") : dest;
      const json r = cmd_retrain_eval(cfg, data, req, where, &err);
      out << io::dump(r["evaluations"]);
    }
    return kOk;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace mixsearch::cli
