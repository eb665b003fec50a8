#include "mkdiff/tasks.hpp"
#include "mkdiff/eval.hpp"
#include "mkdiff/parallel.hpp"
#include "mkdiff/rng.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <set>

namespace mkdiff {

std::string to_string(Task task) { return task == Task::kDescriptor ? "descriptor" : "segmentation"; }

Task parse_task(const std::string& name) {
  if (name == "descriptor") return Task::kDescriptor;
  if (name == "segmentation") return Task::kSegmentation;
  throw std::invalid_argument("unknown task '" + name + "'");
}

std::vector<double> default_sigmas() { return {0.0125, 0.025, 0.05, 0.1, 0.125, 0.25, 0.5, 1.0}; }

void TrainConfig::validate() const {
  if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  if (!(lr > 0.0)) throw std::invalid_argument("lr must be > 0");
  if (!(margin > 0.0)) throw std::invalid_argument("margin must be > 0");
  if (descriptor_dim < 1) throw std::invalid_argument("descriptor_dim must be >= 1");
  if (triplets_per_step < 1) throw std::invalid_argument("triplets_per_step must be >= 1");
  if (sigmas.empty()) throw std::invalid_argument("sigmas must not be empty");
  for (double s : sigmas)
    if (!(s > 0.0)) throw std::invalid_argument("sigmas must be > 0");
  if (k < 1) throw std::invalid_argument("k must be >= 1");
  if (n_layers < 1 || hidden_width < 1) throw std::invalid_argument("layers and width must be >= 1");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw std::invalid_argument("dropout must be in [0, 1)");
  if (n_classes < 1) throw std::invalid_argument("n_classes must be >= 1");
  if (!(train_outlier_ratio >= 0.0)) throw std::invalid_argument("train_outlier_ratio must be >= 0");
  diffusion.validate();
}

Architecture TrainConfig::architecture() const {
  Architecture a;
  a.n_layers = n_layers;
  a.hidden_width = hidden_width;
  a.n_kernels = static_cast<int>(sigmas.size());
  a.input_dim = 1;
  a.dropout_p = dropout;
  a.head = task == Task::kDescriptor ? Head::kDescriptor : Head::kSegmentation;
  a.out_dim = task == Task::kDescriptor ? descriptor_dim : output_classes();
  return a;
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"task", to_string(c.task)},
          {"epochs", c.epochs},
          {"lr", c.lr},
          {"margin", c.margin},
          {"descriptor_dim", c.descriptor_dim},
          {"triplets_per_step", c.triplets_per_step},
          {"sigmas", c.sigmas},
          {"k", c.k},
          {"mode", to_string(c.diffusion.mode)},
          {"t", c.diffusion.t},
          {"lambda", c.diffusion.lambda},
          {"propagation", to_string(c.diffusion.propagation)},
          {"m", c.diffusion.m},
          {"cg_tol", c.diffusion.cg_tol},
          {"cg_max_iter", c.diffusion.cg_max_iter},
          {"layers", c.n_layers},
          {"width", c.hidden_width},
          {"dropout", c.dropout},
          {"seed", c.seed},
          {"n_classes", c.n_classes},
          {"train_outlier_ratio", c.train_outlier_ratio},
          {"val_max_pairs", c.val_max_pairs}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.task = parse_task(j.value("task", to_string(c.task)));
  c.epochs = j.value("epochs", c.epochs);
  c.lr = j.value("lr", c.lr);
  c.margin = j.value("margin", c.margin);
  c.descriptor_dim = j.value("descriptor_dim", c.descriptor_dim);
  c.triplets_per_step = j.value("triplets_per_step", c.triplets_per_step);
  c.sigmas = j.value("sigmas", c.sigmas);
  c.k = j.value("k", c.k);
  c.diffusion.mode = parse_diffusion_mode(j.value("mode", to_string(c.diffusion.mode)));
  c.diffusion.t = j.value("t", c.diffusion.t);
  c.diffusion.lambda = j.value("lambda", c.diffusion.lambda);
  c.diffusion.propagation = parse_propagation(j.value("propagation", to_string(c.diffusion.propagation)));
  c.diffusion.m = j.value("m", c.diffusion.m);
  c.diffusion.cg_tol = j.value("cg_tol", c.diffusion.cg_tol);
  c.diffusion.cg_max_iter = j.value("cg_max_iter", c.diffusion.cg_max_iter);
  c.n_layers = j.value("layers", c.n_layers);
  c.hidden_width = j.value("width", c.hidden_width);
  c.dropout = j.value("dropout", c.dropout);
  c.seed = j.value("seed", c.seed);
  c.n_classes = j.value("n_classes", c.n_classes);
  c.train_outlier_ratio = j.value("train_outlier_ratio", c.train_outlier_ratio);
  c.val_max_pairs = j.value("val_max_pairs", c.val_max_pairs);
  return c;
}

nlohmann::json to_json(const Architecture& a) {
  return {{"n_layers", a.n_layers},   {"hidden_width", a.hidden_width}, {"n_kernels", a.n_kernels},
          {"out_dim", a.out_dim},     {"input_dim", a.input_dim},       {"dropout_p", a.dropout_p},
          {"norm_eps", a.norm_eps},   {"head", to_string(a.head)},      {"activation", "relu"}};
}

Architecture architecture_from_json(const nlohmann::json& j) {
  Architecture a;
  a.n_layers = j.at("n_layers").get<int>();
  a.hidden_width = j.at("hidden_width").get<int>();
  a.n_kernels = j.at("n_kernels").get<int>();
  a.out_dim = j.at("out_dim").get<int>();
  a.input_dim = j.at("input_dim").get<int>();
  a.dropout_p = j.at("dropout_p").get<double>();
  a.norm_eps = j.at("norm_eps").get<double>();
  a.head = parse_head(j.at("head").get<std::string>());
  a.validate();
  return a;
}

// Triplets -----------------------------------------------------------------------

CorrIndex::CorrIndex(const std::vector<std::int64_t>& c) : corr(c) {
  std::int64_t hi = -1;
  for (auto v : c) hi = std::max(hi, v);
  lookup.assign(static_cast<std::size_t>(hi + 1), -1);
  for (std::size_t i = 0; i < c.size(); ++i)
    if (c[i] >= 0) lookup[static_cast<std::size_t>(c[i])] = static_cast<std::int64_t>(i);
}

std::int64_t CorrIndex::find(std::int64_t c) const {
  if (c < 0 || static_cast<std::size_t>(c) >= lookup.size()) return -1;
  return lookup[static_cast<std::size_t>(c)];
}

std::vector<Triplet> sample_triplets(const std::vector<CorrIndex>& shapes,
                                     const std::vector<std::size_t>& candidates,
                                     std::size_t n_triplets, std::uint64_t seed) {
  std::vector<std::size_t> usable;
  for (auto s : candidates) {
    if (s >= shapes.size()) throw std::out_of_range("triplet candidate out of range");
    const auto& c = shapes[s].corr;
    if (std::any_of(c.begin(), c.end(), [](std::int64_t v) { return v >= 0; })) usable.push_back(s);
  }
  if (usable.size() < 2) throw std::invalid_argument("triplet sampling needs two shapes with correspondences");

  auto rng = make_rng(seed, "triplets");
  auto pick = [&](std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng); };
  const std::size_t a = usable[pick(usable.size())];
  auto other = [&]() {
    std::size_t s;
    do s = usable[pick(usable.size())];
    while (s == a);
    return s;
  };
  const std::size_t p = other();
  const std::size_t n = other();

  const auto& A = shapes[a];
  const auto& P = shapes[p];
  const auto& N = shapes[n];
  // Anchors need a counterpart on the positive shape.
  std::vector<std::size_t> anchors;
  for (std::size_t i = 0; i < A.corr.size(); ++i)
    if (A.corr[i] >= 0 && P.find(A.corr[i]) >= 0) anchors.push_back(i);
  if (anchors.empty()) throw std::invalid_argument("sampled shapes share no correspondences");

  std::vector<Triplet> out;
  out.reserve(n_triplets);
  while (out.size() < n_triplets) {
    const std::size_t ia = anchors[pick(anchors.size())];
    const auto ip = static_cast<std::size_t>(P.find(A.corr[ia]));
    std::size_t in = 0;
    bool found = false;
    for (int attempt = 0; attempt < 64 && !found; ++attempt) {
      in = pick(N.corr.size());
      found = N.corr[in] != A.corr[ia];
    }
    if (!found) throw std::invalid_argument("negative shape has no non-corresponding point");
    out.push_back({a, ia, p, ip, n, in});
  }
  return out;
}

// Shapes -------------------------------------------------------------------------

PreparedShape prepare_shape(PointCloud cloud, const TrainConfig& config) {
  PreparedShape s;
  s.bank = build_kernel_bank(cloud.coords, config.sigmas, config.k, config.diffusion,
                             derive_seed(config.seed, "bank"));
  s.input = ones_features(cloud.size());
  s.cloud = std::move(cloud);
  return s;
}

namespace {

using Clock = std::chrono::steady_clock;

double elapsed_ms(Clock::time_point since) {
  if (deterministic_mode()) return 0.0;  // keep logs byte-comparable
  return std::chrono::duration<double, std::milli>(Clock::now() - since).count();
}

int label_offset(const TrainConfig& c) { return c.has_background() ? 0 : 1; }

std::vector<int> to_channels(const std::vector<int>& labels, int offset, int n_out) {
  std::vector<int> out(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    out[i] = labels[i] - offset;
    if (out[i] < 0 || out[i] >= n_out)
      throw std::invalid_argument("label " + std::to_string(labels[i]) + " has no output channel");
  }
  return out;
}

std::vector<PreparedShape> load_split(const DatasetManifest& m, Split split, const TrainConfig& c,
                                      bool outliers) {
  std::vector<PreparedShape> out;
  for (auto i : m.indices(split)) {
    PointCloud cloud = load_shape(m.shapes[i]);
    if (outliers) {
      // Each shape gets its own ratio in [0, r] so the model sees every clutter level.
      auto rng = make_rng(c.seed, "train-outlier-ratio", {i});
      const double ratio = std::uniform_real_distribution<double>(0.0, c.train_outlier_ratio)(rng);
      cloud = add_outliers(cloud, ratio, derive_seed(c.seed, "train-outliers", {i}));
    }
    out.push_back(prepare_shape(std::move(cloud), c));
  }
  return out;
}

double val_cmc10(const Checkpoint& ckpt, const std::vector<PreparedShape>& val) {
  if (val.size() < 2) return 0.0;
  std::vector<Matrix> desc;
  for (const auto& s : val) desc.push_back(extract_descriptors(ckpt, s.bank, s.input));
  const auto pairs = shape_pairs(val.size(), ckpt.config.val_max_pairs, derive_seed(ckpt.config.seed, "val-pairs"));
  std::vector<MetricCurve> curves;
  for (auto [i, j] : pairs) {
    const auto target = match_by_corr(*val[i].cloud.corr, *val[j].cloud.corr);
    curves.push_back(cmc_curve(desc[i], desc[j], target, 10));
  }
  return mean_curve(curves).ys.back();
}

double val_dice(const Checkpoint& ckpt, const std::vector<PreparedShape>& val) {
  if (val.empty()) return 0.0;
  std::vector<std::vector<int>> preds, gts;
  for (const auto& s : val) {
    preds.push_back(predict_labels(ckpt, s.bank, s.input));
    gts.push_back(*s.cloud.labels);
  }
  return dice_report(preds, gts, kBodyParts + 1, body_classes(ckpt.config.has_background())).mean;
}

/// Shared epoch bookkeeping for both loops.
struct Tracker {
  Checkpoint best;
  double best_metric = -std::numeric_limits<double>::infinity();
  std::vector<EpochRecord> history;

  void record(const EpochRecord& rec, const Checkpoint& current, const EpochCallback& cb) {
    history.push_back(rec);
    if (rec.val_metric > best_metric) {
      best_metric = rec.val_metric;
      best = current;
      best.best_epoch = rec.epoch;
    }
    if (cb) cb(rec);
  }

  Checkpoint finish() {
    best.history = history;
    return best;
  }
};

void check_finite_loss(double loss, int epoch) {
  if (!std::isfinite(loss))
    throw NumericalError("training loss became non-finite in epoch " + std::to_string(epoch));
}

}  // namespace

Checkpoint train_descriptor(const TrainConfig& config, const std::vector<PreparedShape>& train,
                            const std::vector<PreparedShape>& val, const EpochCallback& on_epoch) {
  TrainConfig cfg = config;
  cfg.task = Task::kDescriptor;
  cfg.validate();
  if (train.size() < 2) throw std::invalid_argument("descriptor training needs at least two shapes");
  std::vector<CorrIndex> corr;
  for (const auto& s : train) {
    if (!s.cloud.corr) throw std::invalid_argument("descriptor training needs correspondences");
    corr.emplace_back(*s.cloud.corr);
  }
  std::vector<std::size_t> all(train.size());
  std::iota(all.begin(), all.end(), 0);

  Checkpoint ckpt;
  ckpt.config = cfg;
  ckpt.arch = cfg.architecture();
  ckpt.params = init_params(ckpt.arch, derive_seed(cfg.seed, "params"));
  OptimizerState opt = make_adam(ckpt.params, cfg.lr);
  Tracker tracker;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = Clock::now();
    double loss_sum = 0.0;
    const auto steps = train.size();
    for (std::size_t step = 0; step < steps; ++step) {
      const auto e = static_cast<std::uint64_t>(epoch);
      const auto triplets = sample_triplets(corr, all, static_cast<std::size_t>(cfg.triplets_per_step),
                                            derive_seed(cfg.seed, "triplets", {e, step}));
      // Every triplet of a step shares its three shapes.
      std::vector<std::size_t> shapes{triplets.front().shape_a, triplets.front().shape_p,
                                      triplets.front().shape_n};
      std::sort(shapes.begin(), shapes.end());
      shapes.erase(std::unique(shapes.begin(), shapes.end()), shapes.end());
      std::vector<ForwardResult> fw;
      std::vector<Matrix> dy;
      for (auto s : shapes) {
        fw.push_back(forward(ckpt.arch, ckpt.params, train[s].bank, train[s].input, Mode::kTrain,
                             derive_seed(cfg.seed, "dropout", {e, step, s})));
        dy.push_back(Matrix::Zero(fw.back().y.rows(), fw.back().y.cols()));
      }
      auto slot = [&](std::size_t s) {
        return static_cast<std::size_t>(std::find(shapes.begin(), shapes.end(), s) - shapes.begin());
      };
      const std::size_t sa = slot(triplets.front().shape_a), sp = slot(triplets.front().shape_p),
                        sn = slot(triplets.front().shape_n);
      const double scale = 1.0 / static_cast<double>(triplets.size());
      double step_loss = 0.0;
      for (const auto& t : triplets) {
        const auto ia = static_cast<Eigen::Index>(t.idx_a), ip = static_cast<Eigen::Index>(t.idx_p),
                   in = static_cast<Eigen::Index>(t.idx_n);
        const TripletLoss l = triplet_hinge_loss(fw[sa].y.row(ia).transpose(), fw[sp].y.row(ip).transpose(),
                                                 fw[sn].y.row(in).transpose(), cfg.margin);
        if (l.loss == 0.0) continue;
        step_loss += l.loss;
        dy[sa].row(ia) += scale * l.grad_anchor.transpose();
        dy[sp].row(ip) += scale * l.grad_pos.transpose();
        dy[sn].row(in) += scale * l.grad_neg.transpose();
      }
      step_loss *= scale;
      check_finite_loss(step_loss, epoch);
      loss_sum += step_loss;
      Gradients grads = ckpt.params.zeros_like();
      for (std::size_t i = 0; i < shapes.size(); ++i)
        grads.add_scaled(backward(ckpt.arch, ckpt.params, train[shapes[i]].bank, fw[i].cache, dy[i]), 1.0);
      adam_step(ckpt.params, grads, opt);
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(steps);
    rec.val_metric = val_cmc10(ckpt, val);
    rec.wall_ms = elapsed_ms(t0);
    tracker.record(rec, ckpt, on_epoch);
  }
  return tracker.finish();
}

Checkpoint train_segmentation(const TrainConfig& config, const std::vector<PreparedShape>& train,
                              const std::vector<PreparedShape>& val, const EpochCallback& on_epoch) {
  TrainConfig cfg = config;
  cfg.task = Task::kSegmentation;
  cfg.validate();
  if (train.empty()) throw std::invalid_argument("segmentation training needs shapes");
  const int n_out = cfg.output_classes();
  const int offset = label_offset(cfg);
  std::vector<std::vector<int>> channels;
  std::vector<int> all_labels;
  for (const auto& s : train) {
    if (!s.cloud.labels) throw std::invalid_argument("segmentation training needs labels");
    channels.push_back(to_channels(*s.cloud.labels, offset, n_out));
    all_labels.insert(all_labels.end(), channels.back().begin(), channels.back().end());
  }
  const Vector weights = label_weights(all_labels, n_out);

  Checkpoint ckpt;
  ckpt.config = cfg;
  ckpt.arch = cfg.architecture();
  ckpt.params = init_params(ckpt.arch, derive_seed(cfg.seed, "params"));
  OptimizerState opt = make_adam(ckpt.params, cfg.lr);
  Tracker tracker;

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = Clock::now();
    const auto e = static_cast<std::uint64_t>(epoch);
    auto shuffle_rng = make_rng(cfg.seed, "order", {e});
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0.0;
    for (auto s : order) {
      auto fw = forward(ckpt.arch, ckpt.params, train[s].bank, train[s].input, Mode::kTrain,
                        derive_seed(cfg.seed, "dropout", {e, s}));
      const auto ce = weighted_ce_loss(fw.y, channels[s], weights);
      check_finite_loss(ce.loss, epoch);
      loss_sum += ce.loss;
      const Gradients g = backward(ckpt.arch, ckpt.params, train[s].bank, fw.cache, ce.grad);
      adam_step(ckpt.params, g, opt);
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(train.size());
    rec.val_metric = val_dice(ckpt, val);
    rec.wall_ms = elapsed_ms(t0);
    tracker.record(rec, ckpt, on_epoch);
  }
  return tracker.finish();
}

Checkpoint train_descriptor(const TrainConfig& config, const DatasetManifest& manifest,
                            const EpochCallback& on_epoch) {
  const auto train = load_split(manifest, Split::kTrain, config, false);
  const auto val = load_split(manifest, Split::kVal, config, false);
  if (val.empty()) throw std::invalid_argument("manifest has no validation shapes");
  return train_descriptor(config, train, val, on_epoch);
}

Checkpoint train_segmentation(const TrainConfig& config, const DatasetManifest& manifest,
                              const EpochCallback& on_epoch) {
  TrainConfig cfg = config;
  cfg.task = Task::kSegmentation;
  cfg.n_classes = manifest.n_classes;
  const bool outliers = cfg.has_background();
  const auto train = load_split(manifest, Split::kTrain, cfg, outliers);
  const auto val = load_split(manifest, Split::kVal, cfg, outliers);
  if (val.empty()) throw std::invalid_argument("manifest has no validation shapes");
  return train_segmentation(cfg, train, val, on_epoch);
}

// Inference ------------------------------------------------------------------------

Matrix extract_descriptors(const Checkpoint& ckpt, const KernelBank& bank, const Matrix& input) {
  if (ckpt.arch.head != Head::kDescriptor) throw std::invalid_argument("checkpoint is not a descriptor model");
  return forward(ckpt.arch, ckpt.params, bank, input, Mode::kEval).y;
}

Matrix extract_descriptors(const Checkpoint& ckpt, const PointCloud& cloud, ExtractTiming* timing) {
  if (ckpt.arch.head != Head::kDescriptor) throw std::invalid_argument("checkpoint is not a descriptor model");
  if (static_cast<std::size_t>(ckpt.config.k) >= cloud.size())
    throw std::invalid_argument("cloud has fewer points than the checkpoint's k requires");
  const auto t0 = Clock::now();
  const PreparedShape s = prepare_shape(cloud, ckpt.config);
  const auto t1 = Clock::now();
  Matrix d = extract_descriptors(ckpt, s.bank, s.input);
  const auto t2 = Clock::now();
  if (timing) {
    timing->bank_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
    timing->forward_ms = std::chrono::duration<double, std::milli>(t2 - t1).count();
    timing->points_per_second =
        static_cast<double>(cloud.size()) / std::max(1e-9, timing->forward_ms / 1000.0);
  }
  return d;
}

std::vector<int> argmax_labels(const Matrix& logits, int offset) {
  std::vector<int> out(static_cast<std::size_t>(logits.rows()));
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    Eigen::Index best = 0;
    for (Eigen::Index c = 1; c < logits.cols(); ++c)
      if (logits(i, c) > logits(i, best)) best = c;
    out[static_cast<std::size_t>(i)] = static_cast<int>(best) + offset;
  }
  return out;
}

std::vector<int> predict_labels(const Checkpoint& ckpt, const KernelBank& bank, const Matrix& input) {
  if (ckpt.arch.head != Head::kSegmentation) throw std::invalid_argument("checkpoint is not a segmentation model");
  const auto fw = forward(ckpt.arch, ckpt.params, bank, input, Mode::kEval);
  return argmax_labels(fw.y, label_offset(ckpt.config));
}

std::vector<int> predict_labels(const Checkpoint& ckpt, const PointCloud& cloud) {
  if (static_cast<std::size_t>(ckpt.config.k) >= cloud.size())
    throw std::invalid_argument("cloud has fewer points than the checkpoint's k requires");
  const PreparedShape s = prepare_shape(cloud, ckpt.config);
  return predict_labels(ckpt, s.bank, s.input);
}

}  // namespace mkdiff
