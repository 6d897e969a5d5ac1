#include "mixsearch/io.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "mixsearch/error.hpp"

namespace mixsearch::io {

namespace {

static_assert(std::endian::native == std::endian::little, "WNF1 writer assumes a little-endian host");

[[noreturn]] void io_fail(const fs::path& path, const std::string& what) {
  throw Error(Errc::IoFailure, path.string() + ": " + what);
}

std::ofstream open_out(const fs::path& path) {
  std::error_code ec;
  if (path.has_parent_path()) fs::create_directories(path.parent_path(), ec);
  if (ec) io_fail(path.parent_path(), "cannot create directory (" + ec.message() + ")");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) io_fail(path, "cannot open for writing");
  return out;
}

std::ifstream open_in(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) io_fail(path, "cannot open for reading");
  return in;
}

void close_out(std::ofstream& out, const fs::path& path) {
  out.close();
  if (!out) io_fail(path, "write failed");
}

// Reads the next PGM header token, skipping whitespace and comments.
std::string pgm_token(std::istream& in, const fs::path& path) {
  std::string tok;
  int ch;
  while ((ch = in.get()) != EOF) {
    if (ch == '#') {
      while ((ch = in.get()) != EOF && ch != '\n') {
      }
    } else if (!std::isspace(ch)) {
      tok.push_back(static_cast<char>(ch));
      break;
    }
  }
  while ((ch = in.peek()) != EOF && !std::isspace(ch) && ch != '#') tok.push_back(static_cast<char>(in.get()));
  if (tok.empty()) io_fail(path, "truncated PGM header");
  return tok;
}

int pgm_int(std::istream& in, const fs::path& path) {
  const std::string tok = pgm_token(in, path);
  try {
    std::size_t used = 0;
    const int v = std::stoi(tok, &used);
    if (used != tok.size() || v <= 0) throw std::invalid_argument(tok);
    return v;
  } catch (const std::exception&) {
    io_fail(path, "bad PGM header field '" + tok + "'");
  }
}

template <typename T>
T get(const json& j, const char* key, const char* where) {
  if (!j.is_object() || !j.contains(key)) {
    throw Error(Errc::InvalidConfig, std::string(where) + ": missing key '" + key + "'");
  }
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw Error(Errc::InvalidConfig, std::string(where) + ": key '" + key + "' has the wrong type");
  }
}

json branch_list(const weave::BranchSet& set) {
  json out = json::array();
  for (weave::Branch b : weave::kBranches)
    if (set[static_cast<int>(b)]) out.push_back(weave::branch_name(b));
  return out;
}

weave::BranchSet branch_set(const json& j, const char* where) {
  if (!j.is_array()) throw Error(Errc::InvalidConfig, std::string(where) + ": branches must be a list");
  weave::BranchSet set{false, false, false};
  for (const auto& b : j) set[static_cast<int>(weave::branch_from_name(b.get<std::string>()))] = true;
  return set;
}

}  // namespace

// ---------------------------------------------------------------------------
// Rasters

void write_pgm(const fs::path& path, const Tensor& image) {
  const Shape s = image.shape();
  if (s.n != 1 || s.c != 1) throw Error(Errc::ShapeMismatch, "PGM needs a (1,1,H,W) tensor, got " + s.str());
  std::string bytes(s.plane(), '\0');
  for (std::size_t i = 0; i < s.plane(); ++i) {
    const double v = std::clamp(image[i], 0.0, 1.0);
    bytes[i] = static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0)));
  }
  auto out = open_out(path);
  out << "P5\n" << s.w << ' ' << s.h << "\n255\n";
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  close_out(out, path);
}

Tensor read_pgm(const fs::path& path) {
  auto in = open_in(path);
  if (pgm_token(in, path) != "P5") io_fail(path, "not a binary PGM (P5)");
  const int w = pgm_int(in, path), h = pgm_int(in, path), maxval = pgm_int(in, path);
  if (maxval > 255) io_fail(path, "only 8-bit PGM is supported");
  in.get();  // single whitespace before the raster
  std::string bytes(static_cast<std::size_t>(w) * h, '\0');
  in.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size())) io_fail(path, "truncated PGM raster");
  Tensor t({1, 1, h, w});
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    t[i] = static_cast<double>(static_cast<unsigned char>(bytes[i])) / maxval;
  }
  return t;
}

void write_wnf(const fs::path& path, const Tensor& t) {
  const Shape s = t.shape();
  const std::array<std::uint32_t, 4> dims{static_cast<std::uint32_t>(s.n), static_cast<std::uint32_t>(s.c),
                                          static_cast<std::uint32_t>(s.h), static_cast<std::uint32_t>(s.w)};
  std::vector<float> data(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) data[i] = static_cast<float>(t[i]);
  auto out = open_out(path);
  out.write("WNF1", 4);
  out.write(reinterpret_cast<const char*>(dims.data()), sizeof dims);
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(float)));
  close_out(out, path);
}

Tensor read_wnf(const fs::path& path) {
  auto in = open_in(path);
  char magic[4];
  std::array<std::uint32_t, 4> dims{};
  in.read(magic, 4);
  in.read(reinterpret_cast<char*>(dims.data()), sizeof dims);
  if (!in || std::memcmp(magic, "WNF1", 4) != 0) io_fail(path, "not a WNF1 raster");
  for (auto d : dims)
    if (d == 0 || d > (1u << 20)) io_fail(path, "implausible WNF1 dimensions");
  Tensor t({static_cast<int>(dims[0]), static_cast<int>(dims[1]), static_cast<int>(dims[2]),
            static_cast<int>(dims[3])});
  std::vector<float> data(t.size());
  in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(float)));
  if (in.gcount() != static_cast<std::streamsize>(data.size() * sizeof(float))) io_fail(path, "truncated WNF1 raster");
  for (std::size_t i = 0; i < data.size(); ++i) t[i] = data[i];
  return t;
}

// ---------------------------------------------------------------------------
// Text and JSON

void write_text(const fs::path& path, const std::string& text) {
  auto out = open_out(path);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  close_out(out, path);
}

std::string read_text(const fs::path& path) {
  auto in = open_in(path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string dump(const json& j) { return j.dump(2) + "\n"; }

json load_json(const fs::path& path) {
  const std::string text = read_text(path);
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw Error(Errc::InvalidConfig, path.string() + ": " + e.what());
  }
}

void save_json(const fs::path& path, const json& j) { write_text(path, dump(j)); }

// ---------------------------------------------------------------------------
// Genotype files

json to_json(const GenotypeFile& g) {
  const weave::GridSpec& grid = g.genotype.grid;
  json cells = json::object();
  for (int t = 0; t < 3; ++t) {
    json edges = json::array();
    for (const auto& e : g.genotype.cells[t]) {
      edges.push_back({{"source", e.source}, {"target", e.target}, {"op", ops::op_name(e.op)}});
    }
    cells[std::string(ops::cell_type_name(static_cast<ops::CellType>(t)))] = std::move(edges);
  }
  json branches = json::array();
  for (const auto& [node, b] : g.genotype.branches) {
    branches.push_back({{"node", {node.d, node.l}}, {"branch", weave::branch_name(b)}});
  }
  const Provenance& p = g.provenance;
  return json{
      {"schema_version", GenotypeFile::kSchemaVersion},
      {"grid",
       {{"depth", grid.depth},
        {"layers", grid.layers},
        {"base_channels", grid.base_channels},
        {"num_classes", grid.num_classes},
        {"steps", grid.steps},
        {"in_channels", grid.in_channels}}},
      {"cells", std::move(cells)},
      {"branches", std::move(branches)},
      {"provenance",
       {{"mode", p.mode},
        {"k", p.k},
        {"mu", p.mu},
        {"m", p.m ? json(*p.m) : json(nullptr)},
        {"seed", p.seed},
        {"source", p.source},
        {"branches", branch_list(p.branches)},
        {"tool_version", p.tool_version}}},
  };
}

GenotypeFile genotype_from_json(const json& j) {
  const char* where = "genotype";
  try {
    if (get<int>(j, "schema_version", where) != GenotypeFile::kSchemaVersion) {
      throw Error(Errc::IncompatibleGenotype, "unsupported genotype schema_version");
    }
    GenotypeFile out;
    weave::GridSpec& grid = out.genotype.grid;
    const json& gj = j.at("grid");
    grid.depth = get<int>(gj, "depth", "grid");
    grid.layers = get<int>(gj, "layers", "grid");
    grid.base_channels = get<int>(gj, "base_channels", "grid");
    grid.num_classes = get<int>(gj, "num_classes", "grid");
    grid.steps = get<int>(gj, "steps", "grid");
    grid.in_channels = get<int>(gj, "in_channels", "grid");
    try {
      grid.validate();
    } catch (const Error& e) {
      throw Error(Errc::IncompatibleGenotype, std::string("genotype grid: ") + e.what());
    }
    const json& cj = j.at("cells");
    for (int t = 0; t < 3; ++t) {
      const auto type = static_cast<ops::CellType>(t);
      const std::string name(ops::cell_type_name(type));
      const auto specs = weave::cell_edges(type, grid.steps);
      for (const auto& ej : cj.at(name)) {
        weave::GenotypeEdge e;
        e.source = get<int>(ej, "source", "cell edge");
        e.target = get<int>(ej, "target", "cell edge");
        e.op = ops::op_from_name(get<std::string>(ej, "op", "cell edge"));
        const auto it = std::find_if(specs.begin(), specs.end(), [&](const weave::CellEdge& c) {
          return c.source == e.source && c.target == e.target;
        });
        if (it == specs.end()) {
          throw Error(Errc::IncompatibleGenotype, name + " cell has no edge " + std::to_string(e.source) +
                                                      " -> " + std::to_string(e.target));
        }
        const auto allowed = ops::candidate_set(type, it->cls);
        if (std::find(allowed.begin(), allowed.end(), e.op) == allowed.end()) {
          throw Error(Errc::IncompatibleGenotype, std::string(ops::op_name(e.op)) + " cannot sit on " + name +
                                                      " edge " + std::to_string(e.source) + " -> " +
                                                      std::to_string(e.target));
        }
        out.genotype.cells[t].push_back(e);
      }
    }
    for (const auto& bj : j.at("branches")) {
      const auto node = bj.at("node").get<std::array<int, 2>>();
      const weave::Node n{node[0], node[1]};
      if (!grid.contains(n)) throw Error(Errc::IncompatibleGenotype, "branch for node " + n.str() + " outside the grid");
      out.genotype.branches[n] = weave::branch_from_name(get<std::string>(bj, "branch", "branch"));
    }
    const json& pj = j.at("provenance");
    Provenance& p = out.provenance;
    p.mode = get<std::string>(pj, "mode", "provenance");
    p.k = get<int>(pj, "k", "provenance");
    p.mu = get<double>(pj, "mu", "provenance");
    if (pj.contains("m") && !pj.at("m").is_null()) p.m = pj.at("m").get<int>();
    p.seed = get<std::uint64_t>(pj, "seed", "provenance");
    p.source = get<std::string>(pj, "source", "provenance");
    p.branches = branch_set(pj.at("branches"), "provenance");
    p.tool_version = get<std::string>(pj, "tool_version", "provenance");
    return out;
  } catch (const json::exception& e) {
    throw Error(Errc::IncompatibleGenotype, std::string("malformed genotype: ") + e.what());
  } catch (const Error& e) {
    if (e.code() == Errc::IncompatibleGenotype) throw;
    throw Error(Errc::IncompatibleGenotype, e.what());
  }
}

// ---------------------------------------------------------------------------
// Logs and reports

json to_json(const bilevel::EpochRecord& r) {
  auto num = [](double v) { return std::isfinite(v) ? json(v) : json(nullptr); };
  return json{{"stage", r.stage},
              {"epoch", r.epoch},
              {"warmup", r.warmup},
              {"weight_loss", num(r.weight_loss)},
              {"arch_loss", num(r.arch_loss)},
              {"entropy", {{"down", r.entropy[0]}, {"normal", r.entropy[1]}, {"up", r.entropy[2]}}},
              {"seconds", r.seconds}};
}

json to_json(const tasks::EvalReport& r) {
  json heads = json::array();
  for (const auto& h : r.heads) heads.push_back({{"head", h.head}, {"dice", h.dice}, {"jaccard", h.jaccard}});
  return json{{"dataset", r.dataset},   {"samples", r.samples},
              {"dice", r.dice},         {"jaccard", r.jaccard},
              {"heads", std::move(heads)}, {"parameter_count", r.parameter_count}};
}

tasks::EvalReport report_from_json(const json& j) {
  tasks::EvalReport r;
  r.dataset = get<std::string>(j, "dataset", "report");
  r.samples = get<std::size_t>(j, "samples", "report");
  r.dice = get<double>(j, "dice", "report");
  r.jaccard = get<double>(j, "jaccard", "report");
  r.parameter_count = get<std::size_t>(j, "parameter_count", "report");
  for (const auto& h : j.at("heads")) {
    r.heads.push_back({get<std::string>(h, "head", "head"), get<double>(h, "dice", "head"),
                       get<double>(h, "jaccard", "head")});
  }
  return r;
}

json to_json(const tasks::DomainSpec& d) {
  return json{{"name", d.name},
              {"domain_id", d.domain_id},
              {"family", tasks::family_name(d.family)},
              {"polarity", tasks::polarity_name(d.polarity)},
              {"noise", d.noise},
              {"size_min", d.size_min},
              {"size_max", d.size_max},
              {"height", d.height},
              {"width", d.width},
              {"train_count", d.train_count},
              {"test_count", d.test_count}};
}

json to_json(const tasks::TrainLog& log) {
  json losses = json::array();
  for (double l : log.epoch_loss) losses.push_back(std::isfinite(l) ? json(l) : json(nullptr));
  return json{{"epoch_loss", std::move(losses)},
              {"first_lr", log.first_lr},
              {"last_lr", log.last_lr},
              {"steps", log.steps}};
}

// ---------------------------------------------------------------------------
// Dataset directories

json to_json(const Manifest& m) {
  json domains = json::array();
  for (const auto& d : m.domains) domains.push_back(to_json(d));
  json samples = json::array();
  for (const auto& e : m.entries) {
    json s{{"dataset", e.dataset}, {"split", e.split},   {"id", e.sample_id},
           {"domain_id", e.domain_id}, {"image", e.image}, {"label", e.label}};
    if (e.weights.size() > 1) {
      s["weights"] = e.weights;
      s["sources"] = e.sources;
    }
    samples.push_back(std::move(s));
  }
  return json{{"schema_version", Manifest::kSchemaVersion},
              {"kind", m.kind},
              {"seed", m.seed},
              {"domains", std::move(domains)},
              {"extra", m.extra},
              {"samples", std::move(samples)}};
}

Manifest manifest_from_json(const json& j, const fs::path& root) {
  const char* where = "manifest";
  if (get<int>(j, "schema_version", where) != Manifest::kSchemaVersion) {
    throw Error(Errc::InvalidConfig, "unsupported manifest schema_version");
  }
  Manifest m;
  m.kind = get<std::string>(j, "kind", where);
  m.seed = get<std::uint64_t>(j, "seed", where);
  if (j.contains("extra")) m.extra = j.at("extra");
  try {
    for (const auto& d : j.at("domains")) {
      tasks::DomainSpec s;
      s.name = get<std::string>(d, "name", "domain");
      s.domain_id = get<int>(d, "domain_id", "domain");
      s.family = tasks::family_from_name(get<std::string>(d, "family", "domain"));
      s.polarity = tasks::polarity_from_name(get<std::string>(d, "polarity", "domain"));
      s.noise = get<double>(d, "noise", "domain");
      s.size_min = get<double>(d, "size_min", "domain");
      s.size_max = get<double>(d, "size_max", "domain");
      s.height = get<int>(d, "height", "domain");
      s.width = get<int>(d, "width", "domain");
      s.train_count = get<int>(d, "train_count", "domain");
      s.test_count = get<int>(d, "test_count", "domain");
      m.domains.push_back(s);
    }
    for (const auto& s : j.at("samples")) {
      ManifestEntry e;
      e.dataset = get<std::string>(s, "dataset", "sample");
      e.split = get<std::string>(s, "split", "sample");
      e.sample_id = get<std::string>(s, "id", "sample");
      e.domain_id = get<int>(s, "domain_id", "sample");
      e.image = get<std::string>(s, "image", "sample");
      e.label = get<std::string>(s, "label", "sample");
      if (s.contains("weights")) {
        e.weights = s.at("weights").get<std::vector<double>>();
        e.sources = s.at("sources").get<std::vector<std::string>>();
      } else {
        e.sources = {e.sample_id};
      }
      double sum = 0.0;
      for (double w : e.weights) sum += w;
      if (std::abs(sum - 1.0) > 1e-9) {
        throw Error(Errc::InvalidConfig, "manifest weights of '" + e.sample_id + "' sum to " + std::to_string(sum));
      }
      for (const auto& f : {e.image, e.label}) {
        if (!fs::exists(root / f)) io_fail(root / f, "referenced by the manifest but missing");
      }
      m.entries.push_back(std::move(e));
    }
  } catch (const json::exception& e) {
    throw Error(Errc::InvalidConfig, std::string("malformed manifest: ") + e.what());
  }
  return m;
}

void write_samples(const fs::path& root, const Dataset& ds, const std::string& split, Manifest& manifest) {
  const fs::path dir = fs::path(ds.name) / split;
  for (const Sample& s : ds.samples) {
    ManifestEntry e;
    e.dataset = ds.name;
    e.split = split;
    e.sample_id = s.sample_id;
    e.domain_id = s.domain_id;
    e.weights = s.weights;
    e.sources = s.sources;
    if (s.is_composite() || manifest.kind == "composite") {
      e.image = (dir / (s.sample_id + ".wnf")).generic_string();
      e.label = (dir / (s.sample_id + "_label.wnf")).generic_string();
      write_wnf(root / e.image, s.image);
      write_wnf(root / e.label, s.label);
    } else {
      e.image = (dir / (s.sample_id + ".pgm")).generic_string();
      e.label = (dir / (s.sample_id + "_mask.pgm")).generic_string();
      write_pgm(root / e.image, s.image);
      write_pgm(root / e.label, tasks::foreground_mask(s.label));
    }
    manifest.entries.push_back(std::move(e));
  }
}

Dataset load_dataset(const fs::path& root, const Manifest& manifest, const std::string& dataset,
                     const std::string& split) {
  Dataset ds;
  ds.name = dataset;
  for (const auto& e : manifest.entries) {
    if (e.dataset != dataset || e.split != split) continue;
    Sample s;
    s.sample_id = e.sample_id;
    s.domain_id = e.domain_id;
    s.weights = e.weights;
    s.sources = e.sources;
    if (e.image.ends_with(".wnf")) {
      s.image = read_wnf(root / e.image);
      s.label = read_wnf(root / e.label);
    } else {
      s.image = read_pgm(root / e.image);
      const Tensor mask = read_pgm(root / e.label);
      const Shape ms = mask.shape();
      s.label = Tensor({1, 2, ms.h, ms.w});
      for (std::size_t p = 0; p < ms.plane(); ++p) {
        const double fg = mask[p] > 0.5 ? 1.0 : 0.0;
        s.label[p] = 1.0 - fg;
        s.label[ms.plane() + p] = fg;
      }
    }
    if (s.image.shape().h != s.label.shape().h || s.image.shape().w != s.label.shape().w) {
      throw Error(Errc::IoFailure, "image and label sizes differ for '" + e.sample_id + "'");
    }
    ds.samples.push_back(std::move(s));
  }
  if (ds.empty()) throw Error(Errc::EmptyDataset, "no samples for " + dataset + "/" + split + " in " + root.string());
  return ds;
}

std::vector<std::string> dataset_names(const Manifest& manifest) {
  std::vector<std::string> out;
  for (const auto& e : manifest.entries)
    if (std::find(out.begin(), out.end(), e.dataset) == out.end()) out.push_back(e.dataset);
  return out;
}

}  // namespace mixsearch::io
