#include <fstream>
#include <sstream>

#include "mixsearch/autodiff.hpp"
#include "mixsearch/cli.hpp"
#include "mixsearch/io.hpp"
#include "test_util.hpp"

namespace mixsearch {
namespace {

using testing::expect_throws_code;
using nlohmann::json;
namespace fs = std::filesystem;

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("mixsearch_test_cli_" + name);
  fs::remove_all(p);
  return p;
}

std::string bytes_of(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int run_cli(std::vector<std::string> args, std::string* out = nullptr, std::string* err = nullptr) {
  args.insert(args.begin(), "mixsearch");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream o, e;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), o, e);
  if (out) *out = o.str();
  if (err) *err = e.str();
  return code;
}

const char* kTinyConfig = R"({
  "seed": 3,
  "data": {"height": 16, "width": 16, "train_count": 8, "test_count": 4},
  "search": {"epochs_per_stage": 2, "warmup_epochs": 1, "stage_dims": [[3, 4], [3, 6]],
             "base_channels": 2, "steps": 2, "batch_size": 4},
  "retrain": {"epochs": 2, "batch_size": 4},
  "unet": {"base_channels": 2}
})";

cli::RunConfig tiny_config() { return cli::config_from_json(json::parse(kTinyConfig)); }

// Generated once and shared by the command tests below.
const fs::path& tiny_data() {
  static const fs::path root = [] {
    const fs::path p = scratch("data");
    cli::cmd_gen_data(tiny_config(), p);
    return p;
  }();
  return root;
}

// ---------------------------------------------------------------------------
// Rasters

TEST(Io, PgmRoundTripIsExactOnTheLevelGrid) {
  const fs::path dir = scratch("pgm");
  Tensor img({1, 1, 5, 7});
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = static_cast<double>((i * 37) % 256) / 255.0;
  io::write_pgm(dir / "a.pgm", img);
  const Tensor back = io::read_pgm(dir / "a.pgm");
  ASSERT_EQ(back.shape(), img.shape());
  for (std::size_t i = 0; i < img.size(); ++i) EXPECT_DOUBLE_EQ(back[i], img[i]);
  const std::string raw = bytes_of(dir / "a.pgm");
  EXPECT_EQ(raw.substr(0, 3), "P5\n");
  EXPECT_EQ(raw.size(), std::string("P5\n7 5\n255\n").size() + 35);
}

TEST(Io, PgmRejectsGarbageAndWrongShapes) {
  const fs::path dir = scratch("pgm_bad");
  io::write_text(dir / "x.pgm", "P2\n2 2\n255\n0 0 0 0\n");
  expect_throws_code([&] { io::read_pgm(dir / "x.pgm"); }, Errc::IoFailure);
  io::write_text(dir / "y.pgm", "P5\n4 4\n255\nab");
  expect_throws_code([&] { io::read_pgm(dir / "y.pgm"); }, Errc::IoFailure);
  expect_throws_code([&] { io::read_pgm(dir / "missing.pgm"); }, Errc::IoFailure);
  expect_throws_code([&] { io::write_pgm(dir / "z.pgm", Tensor({1, 2, 4, 4})); }, Errc::ShapeMismatch);
}

TEST(Io, WnfStoresFloat32LittleEndian) {
  const fs::path dir = scratch("wnf");
  const Tensor t = testing::random_tensor({2, 3, 4, 5}, 11);
  io::write_wnf(dir / "t.wnf", t);
  const std::string raw = bytes_of(dir / "t.wnf");
  ASSERT_EQ(raw.size(), 4 + 16 + 4 * t.size());
  EXPECT_EQ(raw.substr(0, 4), "WNF1");
  EXPECT_EQ(static_cast<unsigned char>(raw[4]), 2);
  EXPECT_EQ(static_cast<unsigned char>(raw[8]), 3);
  const Tensor back = io::read_wnf(dir / "t.wnf");
  ASSERT_EQ(back.shape(), t.shape());
  for (std::size_t i = 0; i < t.size(); ++i) EXPECT_EQ(back[i], static_cast<double>(static_cast<float>(t[i])));
  io::write_text(dir / "bad.wnf", "WNF2");
  expect_throws_code([&] { io::read_wnf(dir / "bad.wnf"); }, Errc::IoFailure);
}

// ---------------------------------------------------------------------------
// Genotype documents

weave::Genotype random_genotype(std::uint64_t seed) {
  Rng rng(seed);
  weave::Genotype g;
  g.grid.depth = 4 + static_cast<int>(rng.index(3));
  g.grid.layers = 8;
  g.grid.base_channels = 4;
  g.grid.steps = 2 + static_cast<int>(rng.index(3));
  for (int t = 0; t < 3; ++t) {
    const auto type = static_cast<ops::CellType>(t);
    for (const auto& e : weave::cell_edges(type, g.grid.steps)) {
      if (rng.uniform() < 0.4) continue;
      const auto cands = ops::candidate_set(type, e.cls);
      g.cells[t].push_back(weave::GenotypeEdge{e.source, e.target, cands[rng.index(cands.size())]});
    }
  }
  for (const auto& n : g.grid.nodes()) {
    if (n.d == 0 && n.l == 0) continue;
    g.branches[n] = weave::kBranches[rng.index(3)];
  }
  return g;
}

TEST(Io, GenotypeRoundTripsLosslessly) {
  for (std::uint64_t s = 0; s < 50; ++s) {
    io::GenotypeFile f;
    f.genotype = random_genotype(s);
    f.provenance.mode = s % 2 ? "mix" : "dedicated";
    f.provenance.k = 1 + static_cast<int>(s % 3);
    f.provenance.mu = 0.1 * static_cast<double>(s + 1);
    if (s % 3 == 0) f.provenance.m = static_cast<int>(s) + 5;
    f.provenance.seed = s * 1234567;
    f.provenance.source = "ellipse";
    f.provenance.branches = {s % 2 == 0, true, s % 5 != 0};
    f.provenance.tool_version = "t";
    const std::string text = io::dump(io::to_json(f));
    const io::GenotypeFile back = io::genotype_from_json(json::parse(text));
    EXPECT_EQ(back, f) << "seed " << s;
    EXPECT_EQ(io::dump(io::to_json(back)), text);
  }
}

TEST(Io, GenotypeUsesCanonicalOpNames) {
  io::GenotypeFile f;
  f.genotype = random_genotype(7);
  const json j = io::to_json(f);
  for (const auto& cell : j["cells"]) {
    for (const auto& e : cell) EXPECT_EQ(ops::op_name(ops::op_from_name(e["op"].get<std::string>())), e["op"]);
  }
}

TEST(Io, GenotypeValidationRejectsForeignContent) {
  io::GenotypeFile f;
  f.genotype = random_genotype(3);
  f.genotype.cells[0] = {{0, 0, ops::OpKind::Conv1}};
  const json good = io::to_json(f);

  json j = good;
  j["schema_version"] = 2;
  expect_throws_code([&] { io::genotype_from_json(j); }, Errc::IncompatibleGenotype);
  j = good;
  j["cells"]["normal"][0]["op"] = "conv_7";
  expect_throws_code([&] { io::genotype_from_json(j); }, Errc::IncompatibleGenotype);
  j = good;
  j["cells"]["normal"][0]["op"] = "avg_pool_2";  // a down op on a normal edge
  expect_throws_code([&] { io::genotype_from_json(j); }, Errc::IncompatibleGenotype);
  j = good;
  j["cells"]["normal"][0]["target"] = 40;
  expect_throws_code([&] { io::genotype_from_json(j); }, Errc::IncompatibleGenotype);
  j = good;
  j["branches"].push_back({{"node", {9, 9}}, {"branch", "up"}});
  expect_throws_code([&] { io::genotype_from_json(j); }, Errc::IncompatibleGenotype);
  j = good;
  j.erase("grid");
  expect_throws_code([&] { io::genotype_from_json(j); }, Errc::IncompatibleGenotype);
}

TEST(Io, EpochRecordWritesNullForMissingLoss) {
  bilevel::EpochRecord r;
  r.arch_loss = std::nan("");
  r.warmup = true;
  const json j = io::to_json(r);
  EXPECT_TRUE(j["arch_loss"].is_null());
  EXPECT_TRUE(j["warmup"].get<bool>());
}

TEST(Io, ReportRoundTrip) {
  tasks::EvalReport r;
  r.dataset = "polygon";
  r.samples = 12;
  r.dice = 81.5;
  r.jaccard = 70.25;
  r.parameter_count = 999;
  r.heads = {{"X0_5", 70.0, 60.0}, {"X0_7", 81.5, 70.25}};
  const auto back = io::report_from_json(io::to_json(r));
  EXPECT_EQ(back.dataset, r.dataset);
  EXPECT_EQ(back.samples, r.samples);
  EXPECT_EQ(back.dice, r.dice);
  EXPECT_EQ(back.heads.size(), 2u);
  EXPECT_EQ(back.heads[1].head, "X0_7");
  EXPECT_EQ(back.parameter_count, 999u);
}

// ---------------------------------------------------------------------------
// Manifests and dataset directories

TEST(Io, ManifestChecksWeightsAndFiles) {
  const fs::path& root = tiny_data();
  const json good = io::load_json(root / "manifest.json");
  EXPECT_NO_THROW(io::manifest_from_json(good, root));

  json j = good;
  j["samples"][0]["weights"] = {0.5, 0.4};
  j["samples"][0]["sources"] = {"a", "b"};
  expect_throws_code([&] { io::manifest_from_json(j, root); }, Errc::InvalidConfig);
  j = good;
  j["samples"][0]["image"] = "nowhere.pgm";
  expect_throws_code([&] { io::manifest_from_json(j, root); }, Errc::IoFailure);
}

TEST(Io, DatasetDirectoryRoundTrip) {
  const auto cfg = tiny_config();
  const fs::path& root = tiny_data();
  const auto m = io::manifest_from_json(io::load_json(root / "manifest.json"), root);
  EXPECT_EQ(io::dataset_names(m), (std::vector<std::string>{"ellipse", "polygon", "annulus"}));
  const Dataset direct = tasks::gen_domain(cfg.data.domains[1], 8, cfg.seed, tasks::Split::Train);
  const Dataset loaded = io::load_dataset(root, m, "polygon", "train");
  ASSERT_EQ(loaded.size(), direct.size());
  for (std::size_t i = 0; i < loaded.size(); ++i) {
    EXPECT_EQ(loaded[i].sample_id, direct[i].sample_id);
    EXPECT_EQ(loaded[i].domain_id, 1);
    // Images lose at most half a level; masks are exact.
    for (std::size_t p = 0; p < direct[i].image.size(); ++p) {
      EXPECT_LE(std::abs(loaded[i].image[p] - direct[i].image[p]), 0.5 / 255 + 1e-12);
    }
    for (std::size_t p = 0; p < direct[i].label.size(); ++p) EXPECT_EQ(loaded[i].label[p], direct[i].label[p]);
  }
  expect_throws_code([&] { io::load_dataset(root, m, "polygon", "val"); }, Errc::EmptyDataset);
}

TEST(Io, CompositesAreStoredAsFloatRasters) {
  const auto cfg = tiny_config();
  const fs::path out = scratch("mix");
  const auto m = cli::cmd_mix(cfg, tiny_data(), {"ellipse", "annulus"}, out);
  EXPECT_EQ(m.kind, "composite");
  EXPECT_EQ(m.entries.size(), 16u + 32u);  // originals + 2x union size
  const auto back = io::manifest_from_json(io::load_json(out / "manifest.json"), out);
  const Dataset loaded = io::load_dataset(out, back, "mix", "train");
  const auto src = io::manifest_from_json(io::load_json(tiny_data() / "manifest.json"), tiny_data());
  std::vector<Dataset> sets{io::load_dataset(tiny_data(), src, "ellipse", "train"),
                            io::load_dataset(tiny_data(), src, "annulus", "train")};
  const Dataset direct = mixer::build_composite_dataset(sets, cfg.mix);
  ASSERT_EQ(loaded.size(), direct.size());
  for (std::size_t i = 0; i < loaded.size(); ++i) {
    EXPECT_EQ(loaded[i].weights, direct[i].weights);
    EXPECT_EQ(loaded[i].sources, direct[i].sources);
    for (std::size_t p = 0; p < direct[i].label.size(); ++p) {
      EXPECT_EQ(loaded[i].label[p], static_cast<double>(static_cast<float>(direct[i].label[p])));
    }
  }
}

// ---------------------------------------------------------------------------
// Configuration

TEST(Config, DefaultsValidate) {
  cli::RunConfig cfg;
  cfg.resolve();
  EXPECT_NO_THROW(cfg.validate());
  const auto again = cli::config_from_json(cli::to_json(cfg));
  EXPECT_EQ(cli::to_json(again), cli::to_json(cfg));
}

TEST(Config, UnknownKeysAreNamed) {
  for (const auto& [text, key] : std::vector<std::pair<std::string, std::string>>{
           {R"({"sead": 1})", "'sead'"},
           {R"({"search": {"eta_ww": 1}})", "'search.eta_ww'"},
           {R"({"data": {"domains": [{"name": "a", "colour": 1}]}})", "'data.domains[0].colour'"},
       }) {
    try {
      cli::config_from_json(json::parse(text));
      FAIL() << text;
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), Errc::InvalidConfig);
      EXPECT_NE(std::string(e.what()).find(key), std::string::npos) << e.what();
    }
  }
}

TEST(Config, BadValuesAreNamed) {
  for (const auto& [text, key] : std::vector<std::pair<std::string, std::string>>{
           {R"({"mix": {"mu": 0}})", "mix.mu"},
           {R"({"search": {"eta_w": "fast"}})", "search.eta_w"},
           {R"({"search": {"branches": ["sideways"]}})", "search.branches"},
           {R"({"data": {"height": 20}})", "data.height"},
           {R"({"retrain": {"epochs": 0}})", "retrain"},
       }) {
    try {
      cli::config_from_json(json::parse(text));
      FAIL() << text;
    } catch (const Error& e) {
      EXPECT_NE(std::string(e.what()).find(key), std::string::npos) << e.what();
    }
  }
}

TEST(Config, SeedFeedsEveryComponent) {
  auto a = tiny_config();
  auto b = a;
  b.seed = 4;
  b.resolve();
  EXPECT_NE(a.mix.seed, b.mix.seed);
  EXPECT_NE(a.search.seed, b.search.seed);
  EXPECT_NE(a.retrain.seed, b.retrain.seed);
}

// ---------------------------------------------------------------------------
// Commands

TEST(Commands, GenDataWritesOnePairPerSample) {
  const auto cfg = tiny_config();
  const fs::path& root = tiny_data();
  std::size_t pgm = 0, masks = 0;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.path().extension() != ".pgm") continue;
    ++pgm;
    if (e.path().stem().string().ends_with("_mask")) ++masks;
  }
  EXPECT_EQ(masks, 3u * (8 + 4));
  EXPECT_EQ(pgm, 2 * masks);
  // Masks hold only 0 and 255.
  const std::string raw = bytes_of(root / "ellipse" / "train" / "ellipse_train_00000_mask.pgm");
  for (std::size_t i = raw.size() - 256; i < raw.size(); ++i) {
    const auto v = static_cast<unsigned char>(raw[i]);
    EXPECT_TRUE(v == 0 || v == 255);
  }
  (void)cfg;
}

TEST(Commands, GenDataIsByteIdenticalOnRerun) {
  const fs::path other = scratch("data_rerun");
  cli::cmd_gen_data(tiny_config(), other);
  for (const auto& e : fs::recursive_directory_iterator(tiny_data())) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), tiny_data());
    EXPECT_EQ(bytes_of(e.path()), bytes_of(other / rel)) << rel;
  }
}

TEST(Commands, GenDataIntoAFileFails) {
  const fs::path dir = scratch("blocked");
  io::write_text(dir / "file", "x");
  expect_throws_code([&] { cli::cmd_gen_data(tiny_config(), dir / "file" / "data"); }, Errc::IoFailure);
}

TEST(Commands, CountExamples) {
  EXPECT_EQ(cli::cmd_count(10, 4, {7, 6, 4, 7}), "1116624659297");
  EXPECT_EQ(cli::cmd_count(0, 4, {1, 1, 1, 1}), "3");
  EXPECT_EQ(cli::cmd_count(14, 0, {6}), "235092492288");  // 6^14 * 3
  expect_throws_code([] { cli::cmd_count(-1, 4, {1, 1, 1, 1}); }, Errc::InvalidConfig);
  expect_throws_code([] { cli::cmd_count(1, 1, {1, 0, 1, 1}); }, Errc::InvalidConfig);
  expect_throws_code([] { cli::cmd_count(1, 1, {1, 2}); }, Errc::InvalidConfig);
}

TEST(Commands, CountThroughTheToolPrintsDigitsOnly) {
  std::string out;
  EXPECT_EQ(run_cli({"count", "--normal-edges", "10", "--special-edges", "4", "--sizes", "7,6,4,7"}, &out), 0);
  EXPECT_EQ(out, "1116624659297\n");
  EXPECT_EQ(run_cli({"count", "--normal-edges", "10", "--special-edges", "4", "--sizes", "7,x,4,7"}), 2);
  EXPECT_EQ(run_cli({"count", "--normal-edges", "10"}), 2);
}

TEST(Commands, ExitCodes) {
  std::string err;
  EXPECT_EQ(run_cli({"bogus"}), 2);
  EXPECT_EQ(run_cli({"--config", "/nonexistent/cfg.json", "gen-data"}, nullptr, &err), 3);
  EXPECT_NE(err.find("IoFailure"), std::string::npos);
  const fs::path dir = scratch("badcfg");
  io::write_text(dir / "cfg.json", R"({"loss": {"dice_wieght": 1}})");
  EXPECT_EQ(run_cli({"--config", (dir / "cfg.json").string(), "gen-data"}, nullptr, &err), 2);
  EXPECT_NE(err.find("loss.dice_wieght"), std::string::npos) << err;
  io::write_text(dir / "broken.json", "{");
  EXPECT_EQ(run_cli({"--config", (dir / "broken.json").string(), "gen-data"}), 2);
  EXPECT_EQ(cli::exit_code_for(Errc::IoFailure), 3);
  EXPECT_EQ(cli::exit_code_for(Errc::IncompatibleGenotype), 2);
}

TEST(Commands, GradcheckListsSixteenRowsAndCatchesAFault) {
  std::ostringstream os;
  EXPECT_TRUE(cli::cmd_gradcheck(os));
  std::size_t rows = 0, fails = 0;
  std::istringstream in(os.str());
  for (std::string line; std::getline(in, line);) {
    if (line.ends_with("PASS")) ++rows;
    if (line.ends_with("FAIL")) ++rows, ++fails;
  }
  EXPECT_EQ(rows, 16u);
  EXPECT_EQ(fails, 0u);

  std::ostringstream bad;
  EXPECT_FALSE(cli::cmd_gradcheck(bad, /*inject_fault=*/true));
  EXPECT_NE(bad.str().find("conv_2 "), std::string::npos);
  EXPECT_NE(bad.str().find("FAIL"), std::string::npos);
  EXPECT_FALSE(ad::fault::conv_weight_grad_flipped());  // restored afterwards
  EXPECT_EQ(run_cli({"gradcheck", "--inject-fault"}), 4);
}

TEST(Commands, SearchRecordsProvenance) {
  auto cfg = tiny_config();
  const fs::path out = scratch("search_mix");
  const auto g = cli::cmd_search(cfg, tiny_data(), {bilevel::SearchMode::Mix, {}}, out);
  EXPECT_EQ(g.provenance.mode, "mix");
  EXPECT_EQ(g.provenance.k, 2);
  EXPECT_EQ(g.provenance.mu, 0.5);
  EXPECT_EQ(g.provenance.seed, 3u);
  EXPECT_EQ(g.provenance.source, "ellipse+polygon+annulus");
  EXPECT_EQ(io::genotype_from_json(io::load_json(out / "genotype.json")), g);
  const std::string log = bytes_of(out / "search_log.jsonl");
  EXPECT_EQ(std::count(log.begin(), log.end(), '\n'), 4);

  const auto d = cli::cmd_search(cfg, tiny_data(), {bilevel::SearchMode::Dedicated, {"ellipse"}}, scratch("ded"));
  EXPECT_EQ(d.provenance.mode, "dedicated");
  EXPECT_EQ(d.provenance.source, "ellipse");
  expect_throws_code([&] { cli::cmd_search(cfg, tiny_data(), {bilevel::SearchMode::Dedicated, {}}, scratch("x")); },
                     Errc::InvalidConfig);
  expect_throws_code(
      [&] { cli::cmd_search(cfg, tiny_data(), {bilevel::SearchMode::Union, {"hexagon"}}, scratch("x")); },
      Errc::EmptyDataset);
}

TEST(Commands, UnionOfOneDomainMatchesDedicated) {
  const auto cfg = tiny_config();
  const auto d = cli::cmd_search(cfg, tiny_data(), {bilevel::SearchMode::Dedicated, {"polygon"}}, scratch("d1"));
  const auto u = cli::cmd_search(cfg, tiny_data(), {bilevel::SearchMode::Union, {"polygon"}}, scratch("u1"));
  EXPECT_EQ(d.genotype, u.genotype);
}

TEST(Commands, SearchThroughTheToolIsByteDeterministic) {
  const fs::path dir = scratch("det");
  io::write_text(dir / "cfg.json", kTinyConfig);
  const std::string cfg = (dir / "cfg.json").string();
  for (const char* o : {"a", "b"}) {
    ASSERT_EQ(run_cli({"--config", cfg, "search", "--data", tiny_data().string(), "--mix", "--k", "2", "--mu", "0.5",
                       "--out", (dir / o).string()}),
              0);
  }
  EXPECT_EQ(bytes_of(dir / "a" / "genotype.json"), bytes_of(dir / "b" / "genotype.json"));
  EXPECT_EQ(run_cli({"search", "--dedicated", "ellipse", "--union"}), 2);
}

TEST(Commands, RetrainEvalReportsEveryHeadAndCrossDomainScores) {
  const auto cfg = tiny_config();
  const fs::path out = scratch("retrain");
  cli::cmd_search(cfg, tiny_data(), {bilevel::SearchMode::Mix, {}}, out);
  cli::RetrainRequest req;
  req.genotype = out / "genotype.json";
  req.domain = "ellipse";
  req.eval_domains = {"ellipse", "annulus"};
  const json r = cli::cmd_retrain_eval(cfg, tiny_data(), req, out);
  EXPECT_EQ(r["model"], "weave");
  ASSERT_EQ(r["evaluations"].size(), 2u);
  EXPECT_EQ(r["evaluations"][1]["dataset"], "annulus");
  EXPECT_EQ(r["evaluations"][0]["heads"].size(), 3u);  // a (3, 6) grid has three heads
  EXPECT_GT(r["parameter_count"].get<std::size_t>(), 0u);
  EXPECT_TRUE(fs::exists(out / "report.json"));

  // Training twice gives the same report apart from timing.
  json again = cli::cmd_retrain_eval(cfg, tiny_data(), req, out);
  again.erase("timing");
  json first = r;
  first.erase("timing");
  EXPECT_EQ(again, first);
}

TEST(Commands, RetrainRejectsIncompatibleGenotypes) {
  const auto cfg = tiny_config();
  const fs::path dir = scratch("incompat");
  io::write_text(dir / "g.json", R"({"schema_version": 1})");
  cli::RetrainRequest req;
  req.genotype = dir / "g.json";
  req.domain = "ellipse";
  expect_throws_code([&] { cli::cmd_retrain_eval(cfg, tiny_data(), req, dir); }, Errc::IncompatibleGenotype);
  req.genotype = dir / "missing.json";
  expect_throws_code([&] { cli::cmd_retrain_eval(cfg, tiny_data(), req, dir); }, Errc::IoFailure);
}

TEST(Commands, UNetBaseline) {
  const auto cfg = tiny_config();
  cli::RetrainRequest req;
  req.domain = "polygon";
  const json r = cli::cmd_retrain_eval(cfg, tiny_data(), req, scratch("unet"));
  EXPECT_EQ(r["model"], "unet");
  EXPECT_EQ(r["evaluations"][0]["heads"].size(), 1u);
}

}  // namespace
}  // namespace mixsearch
