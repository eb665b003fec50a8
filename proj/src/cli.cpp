#include "mkdiff/cli.hpp"
#include "mkdiff/eval.hpp"
#include "mkdiff/parallel.hpp"
#include "mkdiff/rng.hpp"
#include "mkdiff/spgraph.hpp"

#include <CLI11.hpp>

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <sstream>

namespace mkdiff {

namespace {

enum class Kind { kInt, kUInt, kDouble, kString, kBool, kList };

struct KeySpec {
  const char* name;
  Kind kind;
  bool extra;  // command-specific rather than a training or run setting
};

const std::vector<KeySpec>& key_specs() {
  static const std::vector<KeySpec> specs = {
      {"task", Kind::kString, false},
      {"epochs", Kind::kInt, false},
      {"lr", Kind::kDouble, false},
      {"margin", Kind::kDouble, false},
      {"descriptor_dim", Kind::kInt, false},
      {"triplets_per_step", Kind::kInt, false},
      {"sigmas", Kind::kList, false},
      {"k", Kind::kInt, false},
      {"mode", Kind::kString, false},
      {"t", Kind::kInt, false},
      {"lambda", Kind::kDouble, false},
      {"propagation", Kind::kString, false},
      {"m", Kind::kInt, false},
      {"cg_tol", Kind::kDouble, false},
      {"cg_max_iter", Kind::kInt, false},
      {"layers", Kind::kInt, false},
      {"width", Kind::kInt, false},
      {"dropout", Kind::kDouble, false},
      {"seed", Kind::kUInt, false},
      {"n_classes", Kind::kInt, false},
      {"train_outlier_ratio", Kind::kDouble, false},
      {"val_max_pairs", Kind::kInt, false},
      {"manifest", Kind::kString, false},
      {"out", Kind::kString, false},
      {"deterministic", Kind::kBool, false},
      {"threads", Kind::kInt, false},
      {"command", Kind::kString, true},
      {"shapes", Kind::kInt, true},
      {"points", Kind::kInt, true},
      {"format", Kind::kString, true},
      {"ckpt", Kind::kString, true},
      {"cloud", Kind::kString, true},
      {"disturbance", Kind::kString, true},
      {"value", Kind::kDouble, true},
      {"grid", Kind::kList, true},
      {"max_pairs", Kind::kInt, true},
      {"k_max", Kind::kInt, true},
      {"roc_thresholds", Kind::kInt, true},
  };
  return specs;
}

const KeySpec* find_key(const std::string& name) {
  for (const auto& s : key_specs())
    if (name == s.name) return &s;
  return nullptr;
}

const char* kind_name(Kind k) {
  switch (k) {
    case Kind::kInt: return "an integer";
    case Kind::kUInt: return "a non-negative integer";
    case Kind::kDouble: return "a number";
    case Kind::kString: return "a string";
    case Kind::kBool: return "a boolean";
    case Kind::kList: return "a list of numbers";
  }
  return "?";
}

[[noreturn]] void type_error(const std::string& key, Kind kind, const std::string& got) {
  throw UsageError("config key '" + key + "' expects " + kind_name(kind) + ", got " + got);
}

template <typename T>
bool parse_whole(const std::string& s, T& out) {
  const auto* end = s.data() + s.size();
  const auto [p, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc() && p == end;
}

bool parse_double(const std::string& s, double& out) {
  if (s.empty()) return false;
  char* end = nullptr;
  out = std::strtod(s.c_str(), &end);
  return end == s.c_str() + s.size() && std::isfinite(out);
}

nlohmann::json parse_flag_value(const std::string& key, Kind kind, const std::string& v) {
  const std::string quoted = "'" + v + "'";
  switch (kind) {
    case Kind::kInt: {
      long long x;
      if (!parse_whole(v, x)) type_error(key, kind, quoted);
      return x;
    }
    case Kind::kUInt: {
      unsigned long long x;
      if (!parse_whole(v, x)) type_error(key, kind, quoted);
      return x;
    }
    case Kind::kDouble: {
      double x;
      if (!parse_double(v, x)) type_error(key, kind, quoted);
      return x;
    }
    case Kind::kString: return v;
    case Kind::kBool:
      if (v == "true" || v == "1") return true;
      if (v == "false" || v == "0") return false;
      type_error(key, kind, quoted);
    case Kind::kList: {
      nlohmann::json arr = nlohmann::json::array();
      std::string body = v;
      if (!body.empty() && body.front() == '[' && body.back() == ']') body = body.substr(1, body.size() - 2);
      std::stringstream ss(body);
      std::string item;
      while (std::getline(ss, item, ',')) {
        item.erase(0, item.find_first_not_of(" \t"));
        item.erase(item.find_last_not_of(" \t") + 1);
        double x;
        if (!parse_double(item, x)) type_error(key, kind, quoted);
        arr.push_back(x);
      }
      if (arr.empty()) type_error(key, kind, quoted);
      return arr;
    }
  }
  return nullptr;
}

void check_type(const std::string& key, Kind kind, const nlohmann::json& v) {
  bool ok = false;
  switch (kind) {
    case Kind::kInt: ok = v.is_number_integer(); break;
    case Kind::kUInt: ok = v.is_number_unsigned() || (v.is_number_integer() && v.get<long long>() >= 0); break;
    case Kind::kDouble: ok = v.is_number(); break;
    case Kind::kString: ok = v.is_string(); break;
    case Kind::kBool: ok = v.is_boolean(); break;
    case Kind::kList:
      ok = v.is_array() && !v.empty() && std::all_of(v.begin(), v.end(), [](const auto& x) { return x.is_number(); });
      break;
  }
  if (!ok) type_error(key, kind, v.dump());
}

}  // namespace

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> k;
    for (const auto& s : key_specs()) k.emplace_back(s.name);
    return k;
  }();
  return keys;
}

nlohmann::json RunConfig::to_json() const {
  nlohmann::json j = mkdiff::to_json(train);
  j["manifest"] = manifest.string();
  j["out"] = out.string();
  j["deterministic"] = deterministic;
  j["threads"] = threads;
  for (const auto& [k, v] : extra.items()) j[k] = v;
  return j;
}

RunConfig parse_config(const nlohmann::json& document, const std::map<std::string, std::string>& overrides,
                       bool require_manifest) {
  if (!document.is_object()) throw UsageError("config file must hold a single JSON object");
  nlohmann::json merged = nlohmann::json::object();
  for (const auto& [key, value] : document.items()) {
    const KeySpec* spec = find_key(key);
    if (!spec) throw UsageError("unknown config key '" + key + "'");
    check_type(key, spec->kind, value);
    merged[key] = value;
  }
  for (const auto& [key, value] : overrides) {
    const KeySpec* spec = find_key(key);
    if (!spec) throw UsageError("unknown config key '" + key + "'");
    merged[key] = parse_flag_value(key, spec->kind, value);
  }

  RunConfig rc;
  try {
    rc.train = train_config_from_json(merged);
    rc.train.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(std::string("invalid configuration: ") + e.what());
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(std::string("invalid configuration: ") + e.what());
  }
  if (merged.contains("manifest")) rc.manifest = merged["manifest"].get<std::string>();
  if (merged.contains("out")) rc.out = merged["out"].get<std::string>();
  rc.deterministic = merged.value("deterministic", false);
  rc.threads = merged.value("threads", 0);
  if (rc.threads < 0) throw UsageError("config key 'threads' must be >= 0");
  for (const auto& s : key_specs())
    if (s.extra && merged.contains(s.name)) rc.extra[s.name] = merged[s.name];
  if (require_manifest && rc.manifest.empty()) throw UsageError("missing required key 'manifest'");
  return rc;
}

RunConfig parse_config(const std::optional<std::filesystem::path>& file,
                       const std::map<std::string, std::string>& overrides, bool require_manifest) {
  nlohmann::json doc = nlohmann::json::object();
  if (file) {
    std::ifstream is(*file);
    if (!is) throw UsageError("cannot read config file " + file->string());
    try {
      doc = nlohmann::json::parse(is);
    } catch (const nlohmann::json::parse_error& e) {
      throw UsageError("config file " + file->string() + " is not valid JSON: " + e.what());
    }
  }
  return parse_config(doc, overrides, require_manifest);
}

// Commands ---------------------------------------------------------------------------

namespace {

namespace fs = std::filesystem;

struct Command {
  std::string name;
  std::string help;
  bool needs_manifest;
  std::vector<std::string> required;  // extra keys that must be present
  std::function<void(RunConfig&)> run;
};

void write_json(const nlohmann::json& j, const fs::path& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << j.dump(2) << '\n';
}

std::string extra_string(const RunConfig& rc, const std::string& key, const std::string& fallback = "") {
  return rc.extra.contains(key) ? rc.extra[key].get<std::string>() : fallback;
}

template <typename T>
T extra_value(const RunConfig& rc, const std::string& key, T fallback) {
  return rc.extra.contains(key) ? rc.extra[key].get<T>() : fallback;
}

PointCloud load_any(const fs::path& path) { return load_cloud(path, format_from_extension(path)); }

std::vector<PointCloud> load_test_split(const RunConfig& rc) {
  const auto manifest = load_manifest(rc.manifest);
  std::vector<PointCloud> clouds;
  for (auto i : manifest.indices(Split::kTest)) clouds.push_back(load_shape(manifest.shapes[i]));
  if (clouds.empty()) throw std::runtime_error("manifest has no test shapes");
  return clouds;
}

std::string extension_for(CloudFormat f) {
  switch (f) {
    case CloudFormat::kBinF32: return ".bin";
    case CloudFormat::kXyzAscii: return ".xyz";
    case CloudFormat::kPlyAscii: return ".ply";
  }
  return ".bin";
}

void cmd_synth(RunConfig& rc) {
  const int shapes = extra_value(rc, "shapes", 55);
  const int points = extra_value(rc, "points", 1024);
  const auto format = parse_cloud_format(extra_string(rc, "format", "bin-f32"));
  rc.extra["shapes"] = shapes;
  rc.extra["points"] = points;
  rc.extra["format"] = to_string(format);
  if (points < 100) throw UsageError("--points must be >= 100");
  constexpr int kPosesPerSubject = 5;
  const int subjects = (shapes + kPosesPerSubject - 1) / kPosesPerSubject;
  if (subjects < 3) throw UsageError("--shapes must cover at least 3 subjects (11 or more shapes)");
  // Subject-disjoint 70/10/20 split.
  const int n_val = std::max(1, static_cast<int>(std::lround(0.1 * subjects)));
  const int n_test = std::max(1, static_cast<int>(std::lround(0.2 * subjects)));
  const int n_train = subjects - n_val - n_test;
  if (n_train < 1) throw UsageError("too few subjects for a train split");

  DatasetManifest manifest;
  fs::create_directories(rc.out / "shapes");
  for (int i = 0; i < shapes; ++i) {
    const int subject = i / kPosesPerSubject;
    const int pose = i % kPosesPerSubject;
    const auto s = static_cast<std::uint64_t>(subject);
    const auto p = static_cast<std::uint64_t>(pose);
    const PointCloud cloud = generate_synthetic_body(derive_seed(rc.train.seed, "subject", {s}),
                                                     static_cast<std::size_t>(points),
                                                     random_pose(derive_seed(rc.train.seed, "pose", {s, p})));
    char name[32];
    std::snprintf(name, sizeof name, "shape_%03d", i);
    const fs::path path = rc.out / "shapes" / (name + extension_for(format));
    save_cloud(cloud, path, format);
    ShapeEntry e;
    e.cloud = path;
    e.labels = labels_sidecar(path);
    e.subject = subject;
    e.pose = pose;
    e.split = subject < n_train ? Split::kTrain : subject < n_train + n_val ? Split::kVal : Split::kTest;
    manifest.shapes.push_back(e);
  }
  save_manifest(manifest, rc.out / "manifest.json");
  std::cout << "wrote " << shapes << " shapes (" << manifest.indices(Split::kTrain).size() << " train / "
            << manifest.indices(Split::kVal).size() << " val / " << manifest.indices(Split::kTest).size()
            << " test) to " << (rc.out / "manifest.json").string() << '\n';
}

std::size_t count_components(const NeighborLists& nb) {
  const auto edges = symmetric_edges(nb);
  std::vector<int> seen(edges.size(), 0);
  std::size_t comps = 0;
  std::vector<std::int32_t> stack;
  for (std::size_t s = 0; s < edges.size(); ++s) {
    if (seen[s]) continue;
    ++comps;
    seen[s] = 1;
    stack.push_back(static_cast<std::int32_t>(s));
    while (!stack.empty()) {
      const auto u = stack.back();
      stack.pop_back();
      for (const auto& [v, w] : edges[static_cast<std::size_t>(u)])
        if (!seen[static_cast<std::size_t>(v)]) {
          seen[static_cast<std::size_t>(v)] = 1;
          stack.push_back(v);
        }
    }
  }
  return comps;
}

nlohmann::json graph_stats(const PointCloud& cloud, const TrainConfig& cfg) {
  if (static_cast<std::size_t>(cfg.k) >= cloud.size())
    throw std::invalid_argument("k must be smaller than the number of points");
  const auto nb = build_knn(cloud.coords, cfg.k);
  nlohmann::json per_sigma = nlohmann::json::array();
  for (double sigma : cfg.sigmas) {
    const auto a = build_adjacency(nb, sigma);
    double lo = std::numeric_limits<double>::infinity(), hi = 0.0, sum = 0.0;
    for (std::size_t i = 0; i < a.rows(); ++i) {
      double d = 0.0;
      for (auto p = a.row_ptr()[i]; p < a.row_ptr()[i + 1]; ++p) d += a.values()[static_cast<std::size_t>(p)];
      lo = std::min(lo, d);
      hi = std::max(hi, d);
      sum += d;
    }
    per_sigma.push_back({{"sigma", sigma},
                         {"nnz", a.nnz()},
                         {"min_degree", lo},
                         {"mean_degree", sum / static_cast<double>(a.rows())},
                         {"max_degree", hi}});
  }
  return {{"n", cloud.size()},
          {"k", cfg.k},
          {"mean_knn_dist", nb.dists.mean()},
          {"max_knn_dist", nb.dists.maxCoeff()},
          {"components", count_components(nb)},
          {"sigmas", per_sigma}};
}

void cmd_graph_stats(RunConfig& rc) {
  nlohmann::json shapes = nlohmann::json::array();
  if (rc.extra.contains("cloud")) {
    shapes.push_back(graph_stats(load_any(extra_string(rc, "cloud")), rc.train));
  } else if (!rc.manifest.empty()) {
    const auto manifest = load_manifest(rc.manifest);
    for (const auto& e : manifest.shapes) shapes.push_back(graph_stats(load_shape(e), rc.train));
  } else {
    throw UsageError("graph-stats needs --cloud or --manifest");
  }
  write_json({{"shapes", shapes}}, rc.out / "graph_stats.json");
  for (const auto& s : shapes)
    std::cout << "n=" << s["n"] << " k=" << s["k"] << " components=" << s["components"]
              << " mean_knn_dist=" << s["mean_knn_dist"].get<double>() << '\n';
}

void cmd_train(RunConfig& rc, Task task) {
  rc.train.task = task;
  const auto manifest = load_manifest(rc.manifest);
  std::ofstream log(rc.out / "train_log.jsonl");
  if (!log) throw std::runtime_error("cannot write training log");
  auto on_epoch = [&](const EpochRecord& r) {
    const nlohmann::json j = {
        {"epoch", r.epoch}, {"train_loss", r.train_loss}, {"val_metric", r.val_metric}, {"wall_ms", r.wall_ms}};
    log << j.dump() << '\n' << std::flush;
    std::cout << j.dump() << '\n' << std::flush;
  };
  const Checkpoint ckpt = task == Task::kDescriptor ? train_descriptor(rc.train, manifest, on_epoch)
                                                    : train_segmentation(rc.train, manifest, on_epoch);
  save_checkpoint(ckpt, rc.out / "model.ckpt");
  const auto& best = ckpt.history[static_cast<std::size_t>(ckpt.best_epoch - 1)];
  std::cout << "best epoch " << ckpt.best_epoch << " validation "
            << (task == Task::kDescriptor ? "CMC@10 " : "Dice ") << best.val_metric << "; checkpoint "
            << (rc.out / "model.ckpt").string() << '\n';
}

void cmd_extract(RunConfig& rc) {
  const Checkpoint ckpt = load_checkpoint(extra_string(rc, "ckpt"));
  const PointCloud cloud = load_any(extra_string(rc, "cloud"));
  ExtractTiming timing;
  const Matrix d = extract_descriptors(ckpt, cloud, &timing);
  std::ofstream os(rc.out / "descriptors.csv");
  if (!os) throw std::runtime_error("cannot write descriptors");
  os << std::setprecision(17);
  for (Eigen::Index i = 0; i < d.rows(); ++i)
    for (Eigen::Index j = 0; j < d.cols(); ++j) os << d(i, j) << (j + 1 == d.cols() ? '\n' : ',');
  write_json({{"points", cloud.size()},
              {"bank_ms", timing.bank_ms},
              {"forward_ms", timing.forward_ms},
              {"points_per_second", timing.points_per_second}},
             rc.out / "timing.json");
  std::cout << "extracted " << d.rows() << "x" << d.cols() << " descriptors; bank " << timing.bank_ms
            << " ms, forward " << timing.forward_ms << " ms (" << timing.points_per_second << " points/s)\n";
}

void cmd_eval_desc(RunConfig& rc) {
  const Checkpoint ckpt = load_checkpoint(extra_string(rc, "ckpt"));
  const auto clouds = load_test_split(rc);
  std::vector<Matrix> desc;
  std::vector<NeighborLists> graphs;
  for (const auto& c : clouds) {
    desc.push_back(extract_descriptors(ckpt, c));
    graphs.push_back(build_knn(c.coords, ckpt.config.k));
  }
  DescriptorEvalOptions opts;
  opts.k_max = extra_value(rc, "k_max", opts.k_max);
  opts.max_pairs = extra_value(rc, "max_pairs", opts.max_pairs);
  opts.roc_thresholds = extra_value(rc, "roc_thresholds", opts.roc_thresholds);
  opts.seed = rc.train.seed;
  const auto ev = evaluate_descriptors(desc, clouds, graphs, opts);
  write_csv(ev.cmc, rc.out / "cmc.csv");
  write_csv(ev.roc, rc.out / "roc.csv");
  write_csv(ev.quality, rc.out / "quality.csv");
  const double cmc10 = ev.cmc.at(10.0);
  write_json({{"pairs", ev.pairs},
              {"cmc_at_1", ev.cmc.ys.front()},
              {"cmc_at_10", cmc10},
              {"auc", ev.roc.meta["auc"]},
              {"cmc", to_json(ev.cmc)},
              {"roc", to_json(ev.roc)},
              {"quality", to_json(ev.quality)}},
             rc.out / "metrics.json");
  std::cout << "pairs=" << ev.pairs << " CMC@1=" << ev.cmc.ys.front() << " CMC@10=" << cmc10
            << " AUC=" << ev.roc.meta["auc"].get<double>() << '\n';
}

void cmd_eval_seg(RunConfig& rc) {
  const Checkpoint ckpt = load_checkpoint(extra_string(rc, "ckpt"));
  const DiceReport r = evaluate_segmentation(ckpt, load_test_split(rc));
  write_json(to_json(r), rc.out / "dice.json");
  std::cout << "mean Dice " << r.mean << " +- " << r.std << " over " << r.per_shape.size() << " shapes\n";
}

void cmd_perturb(RunConfig& rc) {
  const fs::path in = extra_string(rc, "cloud");
  const auto in_format = format_from_extension(in);
  const PointCloud cloud = load_cloud(in, in_format);
  const auto kind = parse_disturbance(extra_string(rc, "disturbance"));
  const double value = rc.extra.at("value").get<double>();
  const auto format = rc.extra.contains("format") ? parse_cloud_format(extra_string(rc, "format")) : in_format;
  const auto seed = derive_seed(rc.train.seed, to_string(kind));
  PointCloud out;
  switch (kind) {
    case Disturbance::kNoise: out = add_gaussian_noise(cloud, value, seed); break;
    case Disturbance::kMissing: out = remove_points(cloud, value, seed); break;
    case Disturbance::kOutlier: out = add_outliers(cloud, value, seed); break;
  }
  const fs::path path = rc.out / (in.stem().string() + extension_for(format));
  if (fs::exists(path) && fs::equivalent(path, in)) throw UsageError("refusing to overwrite the input cloud");
  save_cloud(out, path, format);
  std::cout << "wrote " << out.size() << " points to " << path.string() << '\n';
}

void cmd_sweep(RunConfig& rc) {
  const Checkpoint ckpt = load_checkpoint(extra_string(rc, "ckpt"));
  const auto kind = parse_disturbance(extra_string(rc, "disturbance"));
  std::vector<double> grid = rc.extra.contains("grid") ? rc.extra["grid"].get<std::vector<double>>()
                                                        : default_grid(kind);
  std::sort(grid.begin(), grid.end());
  grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
  const auto rows = robustness_sweep(ckpt, load_test_split(rc), kind, grid, rc.train.seed);
  nlohmann::json table = nlohmann::json::array();
  MetricCurve curve;
  for (const auto& r : rows) {
    table.push_back({{"value", r.value}, {"dice", to_json(r.report)}});
    curve.xs.push_back(r.value);
    curve.ys.push_back(r.report.mean);
    std::cout << to_string(kind) << "=" << r.value << " mean Dice " << r.report.mean << " +- " << r.report.std
              << '\n';
  }
  curve.meta = {{"metric", "mean_dice"}, {"disturbance", to_string(kind)}};
  write_json({{"disturbance", to_string(kind)}, {"rows", table}}, rc.out / "sweep.json");
  write_csv(curve, rc.out / "sweep.csv");
}

std::vector<Command> commands() {
  return {
      {"synth", "Generate a synthetic labelled body dataset and manifest", false, {}, cmd_synth},
      {"graph-stats", "Report kNN graph and kernel statistics", false, {}, cmd_graph_stats},
      {"train-desc", "Train a descriptor model", true, {}, [](RunConfig& rc) { cmd_train(rc, Task::kDescriptor); }},
      {"train-seg", "Train a segmentation model", true, {},
       [](RunConfig& rc) { cmd_train(rc, Task::kSegmentation); }},
      {"extract", "Compute descriptors for one cloud", false, {"ckpt", "cloud"}, cmd_extract},
      {"eval-desc", "CMC, ROC and correspondence quality on the test split", true, {"ckpt"}, cmd_eval_desc},
      {"eval-seg", "Dice on the test split", true, {"ckpt"}, cmd_eval_seg},
      {"perturb", "Apply a disturbance to one cloud", false, {"cloud", "disturbance", "value"}, cmd_perturb},
      {"sweep", "Robustness sweep of a segmentation model", true, {"ckpt", "disturbance"}, cmd_sweep},
  };
}

void absolutize(RunConfig& rc) {
  if (!rc.manifest.empty()) rc.manifest = fs::absolute(rc.manifest);
  rc.out = fs::absolute(rc.out);
  for (const char* key : {"ckpt", "cloud"})
    if (rc.extra.contains(key)) rc.extra[key] = fs::absolute(rc.extra[key].get<std::string>()).string();
}

}  // namespace

int run_command(int argc, const char* const* argv) {
  CLI::App app{"mkdiff: multi-kernel diffusion networks for point clouds"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  const auto cmds = commands();
  std::map<std::string, std::string> values;
  std::string config_file;
  bool deterministic = false;
  for (const auto& c : cmds) {
    CLI::App* sub = app.add_subcommand(c.name, c.help);
    sub->add_option("--config", config_file, "JSON config file (flat object of keys below)");
    sub->add_flag("--deterministic", deterministic, "Single-threaded, bit-reproducible run");
    for (const auto& spec : key_specs()) {
      const std::string key = spec.name;
      if (key == "deterministic" || key == "command") continue;
      std::string names = "--" + key;
      std::string dashed = key;
      std::replace(dashed.begin(), dashed.end(), '_', '-');
      if (dashed != key) names += ",--" + dashed;
      sub->add_option_function<std::string>(
          names, [&values, key](const std::string& v) { values[key] = v; }, kind_name(spec.kind));
    }
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    if (code == 0) return 0;
    std::cerr << app.help();
    return 1;
  }

  const Command* cmd = nullptr;
  for (const auto& c : cmds)
    if (app.got_subcommand(c.name)) cmd = &c;

  try {
    RunConfig rc = parse_config(config_file.empty() ? std::nullopt : std::optional<fs::path>(config_file),
                                values, cmd->needs_manifest);
    if (deterministic) rc.deterministic = true;
    if (rc.extra.contains("command") && rc.extra["command"].get<std::string>() != cmd->name)
      throw UsageError("config was resolved for '" + rc.extra["command"].get<std::string>() + "', not '" +
                       cmd->name + "'");
    rc.extra["command"] = cmd->name;
    if (rc.out.empty()) throw UsageError("missing required key 'out'");
    for (const auto& key : cmd->required)
      if (!rc.extra.contains(key)) throw UsageError("missing required key '" + key + "'");
    absolutize(rc);

    if (rc.threads > 0) set_thread_count(rc.threads);
    set_deterministic_mode(rc.deterministic);
    fs::create_directories(rc.out);
    cmd->run(rc);
    write_json(rc.to_json(), rc.out / "config.resolved.json");
    return 0;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}

int run_command(const std::vector<std::string>& args) {
  std::vector<const char*> argv{"mkdiff"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return run_command(static_cast<int>(argv.size()), argv.data());
}

}  // namespace mkdiff
