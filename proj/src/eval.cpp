#include "mkdiff/eval.hpp"
#include "mkdiff/parallel.hpp"
#include "mkdiff/rng.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <queue>
#include <unordered_map>

namespace mkdiff {

double MetricCurve::at(double x) const {
  if (xs.empty()) throw std::invalid_argument("empty curve");
  if (x <= xs.front()) return ys.front();
  if (x >= xs.back()) return ys.back();
  const auto it = std::upper_bound(xs.begin(), xs.end(), x);
  const auto j = static_cast<std::size_t>(it - xs.begin());
  const double f = (x - xs[j - 1]) / (xs[j] - xs[j - 1]);
  return ys[j - 1] + f * (ys[j] - ys[j - 1]);
}

void MetricCurve::validate(bool nondecreasing) const {
  if (xs.size() != ys.size()) throw std::invalid_argument("curve xs and ys differ in length");
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (!(ys[i] >= 0.0 && ys[i] <= 1.0)) throw std::invalid_argument("curve value outside [0, 1]");
    if (i > 0 && !(xs[i] > xs[i - 1])) throw std::invalid_argument("curve abscissa not strictly increasing");
    if (nondecreasing && i > 0 && ys[i] < ys[i - 1]) throw std::invalid_argument("curve decreases");
  }
}

std::vector<std::int64_t> match_by_corr(const std::vector<std::int64_t>& corr_src,
                                        const std::vector<std::int64_t>& corr_tgt) {
  std::unordered_map<std::int64_t, std::int64_t> where;
  where.reserve(corr_tgt.size());
  for (std::size_t j = 0; j < corr_tgt.size(); ++j)
    if (corr_tgt[j] >= 0) where.emplace(corr_tgt[j], static_cast<std::int64_t>(j));
  std::vector<std::int64_t> out(corr_src.size(), -1);
  for (std::size_t i = 0; i < corr_src.size(); ++i) {
    if (corr_src[i] < 0) continue;
    const auto it = where.find(corr_src[i]);
    if (it != where.end()) out[i] = it->second;
  }
  return out;
}

namespace {

void check_pair(const Matrix& src, const Matrix& tgt, const std::vector<std::int64_t>& target_of) {
  if (src.cols() != tgt.cols()) throw std::invalid_argument("descriptor dimensions differ");
  if (target_of.size() != static_cast<std::size_t>(src.rows()))
    throw std::invalid_argument("correspondence map does not match the source descriptors");
  for (auto t : target_of)
    if (t >= tgt.rows()) throw std::invalid_argument("correspondence points outside the target");
}

/// Nearest target row by descriptor distance; ties go to the smaller index.
Eigen::Index nearest(const Matrix& tgt, const Eigen::Ref<const Eigen::RowVectorXd>& q) {
  Eigen::Index best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (Eigen::Index j = 0; j < tgt.rows(); ++j) {
    const double d = (tgt.row(j) - q).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = j;
    }
  }
  return best;
}

}  // namespace

std::vector<std::size_t> correspondence_ranks(const Matrix& desc_src, const Matrix& desc_tgt,
                                              const std::vector<std::int64_t>& target_of) {
  check_pair(desc_src, desc_tgt, target_of);
  std::vector<std::size_t> ranks(target_of.size(), 0);
  parallel_for(target_of.size(), [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) {
      const auto t = target_of[i];
      if (t < 0) continue;
      const auto q = desc_src.row(static_cast<Eigen::Index>(i));
      const double dt = (desc_tgt.row(t) - q).squaredNorm();
      std::size_t rank = 1;
      for (Eigen::Index j = 0; j < desc_tgt.rows(); ++j) {
        if (j == t) continue;
        const double d = (desc_tgt.row(j) - q).squaredNorm();
        if (d < dt || (d == dt && j < t)) ++rank;
      }
      ranks[i] = rank;
    }
  }, 16);
  return ranks;
}

MetricCurve cmc_curve(const Matrix& desc_src, const Matrix& desc_tgt,
                      const std::vector<std::int64_t>& target_of, int k_max) {
  if (k_max < 1) throw std::invalid_argument("k_max must be >= 1");
  const auto ranks = correspondence_ranks(desc_src, desc_tgt, target_of);
  std::vector<std::size_t> hist(static_cast<std::size_t>(k_max) + 1, 0);
  std::size_t matched = 0;
  for (auto r : ranks) {
    if (r == 0) continue;
    ++matched;
    if (r <= static_cast<std::size_t>(k_max)) ++hist[r];
  }
  if (matched == 0) throw std::invalid_argument("no corresponding points between the shapes");
  MetricCurve c;
  std::size_t cum = 0;
  for (int k = 1; k <= k_max; ++k) {
    cum += hist[static_cast<std::size_t>(k)];
    c.xs.push_back(k);
    c.ys.push_back(static_cast<double>(cum) / static_cast<double>(matched));
  }
  c.meta = {{"metric", "cmc"}, {"points", matched}};
  return c;
}

MetricCurve mean_curve(const std::vector<MetricCurve>& curves) {
  if (curves.empty()) throw std::invalid_argument("no curves to average");
  MetricCurve out = curves.front();
  for (std::size_t c = 1; c < curves.size(); ++c) {
    if (curves[c].xs != out.xs) throw std::invalid_argument("curves have different abscissae");
    for (std::size_t i = 0; i < out.ys.size(); ++i) out.ys[i] += curves[c].ys[i];
  }
  for (auto& y : out.ys) y = std::clamp(y / static_cast<double>(curves.size()), 0.0, 1.0);
  out.meta["curves"] = curves.size();
  return out;
}

PairDistances sample_pair_distances(const Matrix& desc_src, const Matrix& desc_tgt,
                                    const std::vector<std::int64_t>& target_of, std::uint64_t seed) {
  check_pair(desc_src, desc_tgt, target_of);
  if (desc_tgt.rows() < 2) throw std::invalid_argument("negative pairs need two target points");
  auto rng = make_rng(seed, "roc-negatives");
  std::uniform_int_distribution<Eigen::Index> pick(0, desc_tgt.rows() - 2);
  PairDistances out;
  for (std::size_t i = 0; i < target_of.size(); ++i) {
    const auto t = target_of[i];
    if (t < 0) continue;
    const auto q = desc_src.row(static_cast<Eigen::Index>(i));
    out.positive.push_back((desc_tgt.row(t) - q).norm());
    Eigen::Index j = pick(rng);
    if (j >= t) ++j;  // uniform over targets other than the correspondent
    out.negative.push_back((desc_tgt.row(j) - q).norm());
  }
  return out;
}

MetricCurve roc_curve(const PairDistances& pairs, int n_thresholds) {
  const auto& pos = pairs.positive;
  const auto& neg = pairs.negative;
  if (pos.empty() || neg.empty()) throw std::invalid_argument("ROC needs positive and negative pairs");
  if (n_thresholds < 2) throw std::invalid_argument("ROC needs at least two thresholds");

  std::vector<double> sp = pos, sn = neg;
  std::sort(sp.begin(), sp.end());
  std::sort(sn.begin(), sn.end());
  const double lo = std::min(sp.front(), sn.front());
  const double hi = std::max(sp.back(), sn.back());

  std::vector<std::pair<double, double>> pts{{0.0, 0.0}};
  for (int i = 0; i < n_thresholds; ++i) {
    const double th = i + 1 == n_thresholds ? hi : lo + (hi - lo) * i / (n_thresholds - 1);
    const auto tp = std::upper_bound(sp.begin(), sp.end(), th) - sp.begin();
    const auto fp = std::upper_bound(sn.begin(), sn.end(), th) - sn.begin();
    pts.emplace_back(static_cast<double>(fp) / static_cast<double>(sn.size()),
                     static_cast<double>(tp) / static_cast<double>(sp.size()));
  }
  MetricCurve c;
  for (const auto& [x, y] : pts) {
    if (!c.xs.empty() && x == c.xs.back()) {
      c.ys.back() = std::max(c.ys.back(), y);
    } else {
      c.xs.push_back(x);
      c.ys.push_back(y);
    }
  }

  // Mann-Whitney statistic with midranks.
  std::vector<std::pair<double, int>> all;
  for (double d : pos) all.emplace_back(d, 1);
  for (double d : neg) all.emplace_back(d, 0);
  std::sort(all.begin(), all.end());
  double rank_sum_neg = 0.0;
  for (std::size_t i = 0; i < all.size();) {
    std::size_t j = i;
    while (j < all.size() && all[j].first == all[i].first) ++j;
    const double midrank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t t = i; t < j; ++t)
      if (all[t].second == 0) rank_sum_neg += midrank;
    i = j;
  }
  const double np = static_cast<double>(pos.size()), nn = static_cast<double>(neg.size());
  const double auc = (rank_sum_neg - nn * (nn + 1) / 2) / (np * nn);
  c.meta = {{"metric", "roc"}, {"auc", auc}, {"positives", pos.size()}, {"negatives", neg.size()},
            {"thresholds", n_thresholds}};
  return c;
}

MetricCurve correspondence_quality(const Matrix& desc_src, const Matrix& desc_tgt,
                                   const std::vector<std::int64_t>& target_of,
                                   const NeighborLists& nb_tgt, const std::vector<double>& radii) {
  check_pair(desc_src, desc_tgt, target_of);
  if (nb_tgt.size() != static_cast<std::size_t>(desc_tgt.rows()))
    throw std::invalid_argument("target graph does not match the target descriptors");
  if (radii.empty()) throw std::invalid_argument("no radii");
  const double r_max = *std::max_element(radii.begin(), radii.end());
  const auto edges = symmetric_edges(nb_tgt);
  const double inf = std::numeric_limits<double>::infinity();

  std::vector<double> err(target_of.size(), -1.0);
  parallel_for(target_of.size(), [&](std::size_t b, std::size_t e) {
    std::vector<double> dist(edges.size(), inf);
    std::vector<std::int32_t> touched;
    using Item = std::pair<double, std::int32_t>;
    for (std::size_t i = b; i < e; ++i) {
      const auto t = target_of[i];
      if (t < 0) continue;
      const auto m = static_cast<std::int32_t>(nearest(desc_tgt, desc_src.row(static_cast<Eigen::Index>(i))));
      // Dijkstra from the true correspondent, cut off beyond the largest radius.
      double found = inf;
      std::priority_queue<Item, std::vector<Item>, std::greater<>> pq;
      dist[static_cast<std::size_t>(t)] = 0.0;
      touched.push_back(static_cast<std::int32_t>(t));
      pq.emplace(0.0, static_cast<std::int32_t>(t));
      while (!pq.empty()) {
        const auto [d, u] = pq.top();
        pq.pop();
        if (d > dist[static_cast<std::size_t>(u)]) continue;
        if (u == m) {
          found = d;
          break;
        }
        if (d > r_max) break;
        for (const auto& [v, w] : edges[static_cast<std::size_t>(u)]) {
          const double nd = d + w;
          if (nd < dist[static_cast<std::size_t>(v)]) {
            if (dist[static_cast<std::size_t>(v)] == inf) touched.push_back(v);
            dist[static_cast<std::size_t>(v)] = nd;
            pq.emplace(nd, v);
          }
        }
      }
      for (auto v : touched) dist[static_cast<std::size_t>(v)] = inf;
      touched.clear();
      err[i] = found;
    }
  }, 16);

  std::size_t matched = 0;
  for (double x : err)
    if (x >= 0.0) ++matched;
  if (matched == 0) throw std::invalid_argument("no corresponding points between the shapes");
  std::vector<double> rs = radii;
  std::sort(rs.begin(), rs.end());
  MetricCurve c;
  for (double r : rs) {
    std::size_t hit = 0;
    for (double x : err)
      if (x >= 0.0 && x <= r) ++hit;
    c.xs.push_back(r);
    c.ys.push_back(static_cast<double>(hit) / static_cast<double>(matched));
  }
  c.meta = {{"metric", "correspondence_quality"}, {"points", matched}, {"geodesic", "knn-graph"}};
  return c;
}

// Dice -----------------------------------------------------------------------------

std::vector<double> dice_per_class(const std::vector<int>& pred, const std::vector<int>& gt, int n_labels,
                                   const std::vector<int>& classes) {
  if (pred.size() != gt.size()) throw std::invalid_argument("prediction and ground truth differ in length");
  std::vector<std::size_t> np(static_cast<std::size_t>(n_labels), 0), ng(np), both(np);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] < 0 || pred[i] >= n_labels || gt[i] < 0 || gt[i] >= n_labels)
      throw std::invalid_argument("label out of range at node " + std::to_string(i));
    ++np[static_cast<std::size_t>(pred[i])];
    ++ng[static_cast<std::size_t>(gt[i])];
    if (pred[i] == gt[i]) ++both[static_cast<std::size_t>(gt[i])];
  }
  std::vector<double> out;
  for (int c : classes) {
    if (c < 0 || c >= n_labels) throw std::invalid_argument("class " + std::to_string(c) + " out of range");
    const auto u = static_cast<std::size_t>(c);
    const std::size_t denom = np[u] + ng[u];
    out.push_back(denom == 0 ? std::numeric_limits<double>::quiet_NaN()
                             : 2.0 * static_cast<double>(both[u]) / static_cast<double>(denom));
  }
  return out;
}

DiceReport dice_report(const std::vector<std::vector<int>>& preds, const std::vector<std::vector<int>>& gts,
                       int n_labels, const std::vector<int>& classes) {
  if (preds.size() != gts.size() || preds.empty())
    throw std::invalid_argument("dice needs matching, non-empty prediction and ground-truth sets");
  DiceReport r;
  r.classes = classes;
  std::vector<double> class_sum(classes.size(), 0.0);
  std::vector<std::size_t> class_n(classes.size(), 0);
  for (std::size_t s = 0; s < preds.size(); ++s) {
    const auto d = dice_per_class(preds[s], gts[s], n_labels, classes);
    double sum = 0.0;
    std::size_t cnt = 0;
    for (std::size_t c = 0; c < d.size(); ++c) {
      if (std::isnan(d[c])) continue;
      sum += d[c];
      ++cnt;
      class_sum[c] += d[c];
      ++class_n[c];
    }
    if (cnt == 0) throw std::invalid_argument("shape " + std::to_string(s) + " has none of the scored classes");
    r.per_shape.push_back(sum / static_cast<double>(cnt));
  }
  for (std::size_t c = 0; c < classes.size(); ++c)
    r.per_class.push_back(class_n[c] ? class_sum[c] / static_cast<double>(class_n[c])
                                     : std::numeric_limits<double>::quiet_NaN());
  const double n = static_cast<double>(r.per_shape.size());
  r.mean = std::accumulate(r.per_shape.begin(), r.per_shape.end(), 0.0) / n;
  double var = 0.0;
  for (double v : r.per_shape) var += (v - r.mean) * (v - r.mean);
  r.std = std::sqrt(var / n);
  return r;
}

DiceReport dice_report(const std::vector<int>& pred, const std::vector<int>& gt, int n_labels,
                       const std::vector<int>& classes) {
  return dice_report(std::vector<std::vector<int>>{pred}, std::vector<std::vector<int>>{gt}, n_labels, classes);
}

std::vector<int> body_classes(bool with_background) {
  std::vector<int> c;
  for (int i = with_background ? 0 : 1; i <= kBodyParts; ++i) c.push_back(i);
  return c;
}

namespace {

nlohmann::json nullable(double v) { return std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v); }

}  // namespace

nlohmann::json to_json(const MetricCurve& c) { return {{"xs", c.xs}, {"ys", c.ys}, {"meta", c.meta}}; }

nlohmann::json to_json(const DiceReport& r) {
  nlohmann::json per_class = nlohmann::json::object();
  for (std::size_t i = 0; i < r.classes.size(); ++i) per_class[std::to_string(r.classes[i])] = nullable(r.per_class[i]);
  return {{"mean", r.mean}, {"std", r.std}, {"per_class", per_class}, {"per_shape", r.per_shape}};
}

void write_csv(const MetricCurve& c, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "# meta " << c.meta.dump() << "\nx,y\n" << std::setprecision(10);
  for (std::size_t i = 0; i < c.xs.size(); ++i) os << c.xs[i] << ',' << c.ys[i] << '\n';
}

// Drivers ----------------------------------------------------------------------------

std::vector<std::pair<std::size_t, std::size_t>> shape_pairs(std::size_t n, int max_pairs, std::uint64_t seed) {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (i != j) pairs.emplace_back(i, j);
  if (max_pairs > 0 && pairs.size() > static_cast<std::size_t>(max_pairs)) {
    auto rng = make_rng(seed, "pairs");
    std::shuffle(pairs.begin(), pairs.end(), rng);
    pairs.resize(static_cast<std::size_t>(max_pairs));
    std::sort(pairs.begin(), pairs.end());
  }
  return pairs;
}

DescriptorEvaluation evaluate_descriptors(const std::vector<Matrix>& descriptors,
                                          const std::vector<PointCloud>& clouds,
                                          const std::vector<NeighborLists>& graphs,
                                          const DescriptorEvalOptions& opts) {
  if (descriptors.size() != clouds.size() || graphs.size() != clouds.size())
    throw std::invalid_argument("descriptor, cloud and graph counts differ");
  if (clouds.size() < 2) throw std::invalid_argument("descriptor evaluation needs two shapes");
  std::vector<double> radii = opts.radii;
  if (radii.empty())
    for (int i = 0; i <= 30; ++i) radii.push_back(0.01 * i);

  const auto pairs = shape_pairs(clouds.size(), opts.max_pairs, opts.seed);
  std::vector<MetricCurve> cmcs, quals;
  PairDistances pooled;
  for (const auto& [i, j] : pairs) {
    if (!clouds[i].corr || !clouds[j].corr) throw std::invalid_argument("descriptor evaluation needs correspondences");
    const auto target = match_by_corr(*clouds[i].corr, *clouds[j].corr);
    cmcs.push_back(cmc_curve(descriptors[i], descriptors[j], target, opts.k_max));
    quals.push_back(correspondence_quality(descriptors[i], descriptors[j], target, graphs[j], radii));
    const auto pd = sample_pair_distances(descriptors[i], descriptors[j], target,
                                          derive_seed(opts.seed, "roc", {i, j}));
    pooled.positive.insert(pooled.positive.end(), pd.positive.begin(), pd.positive.end());
    pooled.negative.insert(pooled.negative.end(), pd.negative.begin(), pd.negative.end());
  }
  DescriptorEvaluation ev;
  ev.cmc = mean_curve(cmcs);
  ev.quality = mean_curve(quals);
  ev.roc = roc_curve(pooled, opts.roc_thresholds);
  ev.pairs = pairs.size();
  ev.cmc.meta["pairs"] = ev.pairs;
  ev.quality.meta["pairs"] = ev.pairs;
  ev.roc.meta["pairs"] = ev.pairs;
  return ev;
}

std::string to_string(Disturbance d) {
  switch (d) {
    case Disturbance::kNoise: return "noise";
    case Disturbance::kMissing: return "missing";
    case Disturbance::kOutlier: return "outlier";
  }
  return "?";
}

Disturbance parse_disturbance(const std::string& name) {
  if (name == "noise") return Disturbance::kNoise;
  if (name == "missing") return Disturbance::kMissing;
  if (name == "outlier") return Disturbance::kOutlier;
  throw std::invalid_argument("unknown disturbance '" + name + "' (noise, missing, outlier)");
}

std::vector<double> default_grid(Disturbance d) {
  if (d == Disturbance::kNoise) return {0.0, 0.01, 0.02, 0.03, 0.04, 0.05};
  return {0.0, 0.1, 0.2, 0.3, 0.4, 0.5};
}

namespace {

PointCloud disturb(const PointCloud& c, Disturbance d, double value, std::uint64_t seed) {
  switch (d) {
    case Disturbance::kNoise: return add_gaussian_noise(c, value, seed);
    case Disturbance::kMissing: return remove_points(c, value, seed);
    case Disturbance::kOutlier: return add_outliers(c, value, seed);
  }
  return c;
}

}  // namespace

DiceReport evaluate_segmentation(const Checkpoint& ckpt, const std::vector<PointCloud>& clouds,
                                 bool with_background) {
  if (clouds.empty()) throw std::invalid_argument("no clouds to evaluate");
  std::vector<std::vector<int>> preds, gts;
  for (const auto& c : clouds) {
    if (!c.labels) throw std::invalid_argument("segmentation evaluation needs labels");
    preds.push_back(predict_labels(ckpt, c));
    gts.push_back(*c.labels);
  }
  return dice_report(preds, gts, kBodyParts + 1, body_classes(with_background || ckpt.config.has_background()));
}

std::vector<SweepRow> robustness_sweep(const Checkpoint& ckpt, const std::vector<PointCloud>& clouds,
                                       Disturbance disturbance, const std::vector<double>& grid,
                                       std::uint64_t seed) {
  if (ckpt.arch.head != Head::kSegmentation) throw std::invalid_argument("robustness sweeps need a segmentation model");
  std::vector<SweepRow> rows;
  for (double v : grid) {
    std::vector<PointCloud> perturbed;
    for (std::size_t i = 0; i < clouds.size(); ++i)
      perturbed.push_back(disturb(clouds[i], disturbance, v, derive_seed(seed, to_string(disturbance), {i})));
    rows.push_back({v, evaluate_segmentation(ckpt, perturbed, disturbance == Disturbance::kOutlier)});
  }
  return rows;
}

}  // namespace mkdiff
