#pragma once

#include "mkdiff/spgraph.hpp"
#include "mkdiff/tasks.hpp"
#include "mkdiff/types.hpp"

#include <json.hpp>

#include <filesystem>
#include <string>
#include <vector>

namespace mkdiff {

struct MetricCurve {
  std::vector<double> xs;  // strictly increasing
  std::vector<double> ys;  // in [0, 1]
  nlohmann::json meta = nlohmann::json::object();

  /// Linear interpolation; clamps outside the sampled range.
  double at(double x) const;
  void validate(bool nondecreasing) const;
};

/// Pairs of points across two shapes: src row i corresponds to tgt row
/// target_of[i] (-1 when the source point has no counterpart).
std::vector<std::int64_t> match_by_corr(const std::vector<std::int64_t>& corr_src,
                                        const std::vector<std::int64_t>& corr_tgt);

/// Rank of each source point's true correspondent among all target points by
/// descriptor distance (1 = nearest). Equal distances rank the smaller index
/// first. Entries for unmatched points are 0.
std::vector<std::size_t> correspondence_ranks(const Matrix& desc_src, const Matrix& desc_tgt,
                                              const std::vector<std::int64_t>& target_of);

/// CMC(k) for k = 1..k_max over one shape pair.
MetricCurve cmc_curve(const Matrix& desc_src, const Matrix& desc_tgt,
                      const std::vector<std::int64_t>& target_of, int k_max);
/// Pointwise mean of curves sharing the same abscissa.
MetricCurve mean_curve(const std::vector<MetricCurve>& curves);

struct PairDistances {
  std::vector<double> positive;
  std::vector<double> negative;
};

/// Distances of corresponding pairs and of one seeded non-corresponding pair
/// per positive.
PairDistances sample_pair_distances(const Matrix& desc_src, const Matrix& desc_tgt,
                                    const std::vector<std::int64_t>& target_of, std::uint64_t seed);

/// ROC over thresholds on the observed distance range (x = FPR, y = TPR).
/// meta["auc"] is the exact Mann-Whitney AUC (ties count one half).
MetricCurve roc_curve(const PairDistances& pairs, int n_thresholds);

/// Fraction of descriptor matches within geodesic radius r of the true
/// correspondent on the target graph, for each r in `radii`.
MetricCurve correspondence_quality(const Matrix& desc_src, const Matrix& desc_tgt,
                                   const std::vector<std::int64_t>& target_of,
                                   const NeighborLists& nb_tgt, const std::vector<double>& radii);

struct DiceReport {
  std::vector<int> classes;
  std::vector<double> per_class;  // mean over shapes where the class occurs
  std::vector<double> per_shape;  // label-averaged Dice per shape
  double mean = 0.0;
  double std = 0.0;
};

/// Per-class Dice of one labelling; NaN for classes absent from both.
std::vector<double> dice_per_class(const std::vector<int>& pred, const std::vector<int>& gt,
                                   int n_labels, const std::vector<int>& classes);

/// Aggregates per-shape label-averaged Dice; mean and std are over shapes.
DiceReport dice_report(const std::vector<std::vector<int>>& preds,
                       const std::vector<std::vector<int>>& gts, int n_labels,
                       const std::vector<int>& classes);
DiceReport dice_report(const std::vector<int>& pred, const std::vector<int>& gt, int n_labels,
                       const std::vector<int>& classes);

/// Body-part classes 1..15, plus 0 when `with_background`.
std::vector<int> body_classes(bool with_background);

nlohmann::json to_json(const MetricCurve& curve);
nlohmann::json to_json(const DiceReport& report);
/// `# meta` header line followed by `x,y` rows.
void write_csv(const MetricCurve& curve, const std::filesystem::path& path);

// Protocol drivers ----------------------------------------------------------------

struct DescriptorEvalOptions {
  int k_max = 100;
  int max_pairs = 0;  // 0 = all ordered pairs
  int roc_thresholds = 200;
  std::vector<double> radii;  // empty = 0..0.3 in 0.01 steps
  std::uint64_t seed = 1;
};

struct DescriptorEvaluation {
  MetricCurve cmc;
  MetricCurve roc;
  MetricCurve quality;
  std::size_t pairs = 0;
};

/// Evaluates descriptors of shapes that share a correspondence convention.
DescriptorEvaluation evaluate_descriptors(const std::vector<Matrix>& descriptors,
                                          const std::vector<PointCloud>& clouds,
                                          const std::vector<NeighborLists>& graphs,
                                          const DescriptorEvalOptions& opts);

/// Ordered shape pairs (i != j), optionally capped by seeded sampling.
std::vector<std::pair<std::size_t, std::size_t>> shape_pairs(std::size_t n, int max_pairs,
                                                             std::uint64_t seed);

enum class Disturbance { kNoise, kMissing, kOutlier };

std::string to_string(Disturbance d);
Disturbance parse_disturbance(const std::string& name);
std::vector<double> default_grid(Disturbance d);

struct SweepRow {
  double value = 0.0;
  DiceReport report;
};

/// Perturbs every cloud at each grid value, rebuilds its bank, predicts and
/// scores. Outlier sweeps score the background class too.
std::vector<SweepRow> robustness_sweep(const Checkpoint& ckpt, const std::vector<PointCloud>& clouds,
                                       Disturbance disturbance, const std::vector<double>& grid,
                                       std::uint64_t seed);

/// Dice of a segmentation checkpoint on clean clouds.
DiceReport evaluate_segmentation(const Checkpoint& ckpt, const std::vector<PointCloud>& clouds,
                                 bool with_background = false);

}  // namespace mkdiff
