#include "mkdiff/eval.hpp"
#include "oracles.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>

using namespace mkdiff;

namespace {

std::vector<std::int64_t> identity_map(std::size_t n) {
  std::vector<std::int64_t> m(n);
  std::iota(m.begin(), m.end(), 0);
  return m;
}

Matrix random_unit_rows(std::size_t n, int d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g;
  Matrix x(static_cast<Eigen::Index>(n), d);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = g(rng);
  x.rowwise().normalize();
  return x;
}

/// Brute-force rank: 1 + number of targets strictly closer, or equally close
/// with a smaller index.
std::size_t brute_rank(const Matrix& s, const Matrix& t, std::size_t i, std::size_t truth) {
  const auto si = static_cast<Eigen::Index>(i);
  const double dt = (s.row(si) - t.row(static_cast<Eigen::Index>(truth))).squaredNorm();
  std::size_t r = 1;
  for (Eigen::Index j = 0; j < t.rows(); ++j) {
    const double dj = (s.row(si) - t.row(j)).squaredNorm();
    if (dj < dt || (dj == dt && static_cast<std::size_t>(j) < truth)) ++r;
  }
  return r;
}

double brute_auc(const std::vector<double>& pos, const std::vector<double>& neg) {
  double s = 0.0;
  for (double p : pos)
    for (double n : neg) s += p < n ? 1.0 : (p == n ? 0.5 : 0.0);
  return s / static_cast<double>(pos.size() * neg.size());
}

}  // namespace

TEST_CASE("match by correspondence") {
  const auto m = match_by_corr({3, 0, -1, 7}, {0, 7, 3, 5});
  CHECK(m == std::vector<std::int64_t>{2, 0, -1, 1});
}

TEST_CASE("cmc perfect and exhaustive") {
  const std::size_t n = 30;
  const Matrix onehot = Matrix::Identity(n, n);
  const auto c = cmc_curve(onehot, onehot, identity_map(n), 10);
  CHECK(c.ys.front() == 1.0);
  const Matrix r = random_unit_rows(n, 4, 2);
  const auto full = cmc_curve(r, random_unit_rows(n, 4, 3), identity_map(n), static_cast<int>(n));
  CHECK(full.ys.back() == 1.0);
  full.validate(true);
  CHECK_THROWS(cmc_curve(r, random_unit_rows(n, 5, 3), identity_map(n), 5));
}

TEST_CASE("cmc matches brute-force ranking") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const std::size_t n = 60 + 14 * seed;
    const Matrix s = random_unit_rows(n, 3, seed);
    Matrix t = random_unit_rows(n, 3, seed + 100);
    t.row(5) = t.row(7);  // exact tie
    std::vector<std::int64_t> map(n);
    std::mt19937_64 rng(seed);
    std::iota(map.begin(), map.end(), 0);
    std::shuffle(map.begin(), map.end(), rng);
    map[0] = -1;
    const auto ranks = correspondence_ranks(s, t, map);
    CHECK(ranks[0] == 0);
    std::vector<double> hist(n + 1, 0.0);
    std::size_t matched = 0;
    for (std::size_t i = 1; i < n; ++i) {
      const auto br = brute_rank(s, t, i, static_cast<std::size_t>(map[i]));
      CHECK(ranks[i] == br);
      hist[br] += 1.0;
      ++matched;
    }
    const auto c = cmc_curve(s, t, map, 20);
    double cum = 0.0;
    for (int k = 1; k <= 20; ++k) {
      cum += hist[static_cast<std::size_t>(k)];
      CHECK(c.ys[static_cast<std::size_t>(k - 1)] == doctest::Approx(cum / static_cast<double>(matched)).epsilon(1e-14));
      CHECK(c.xs[static_cast<std::size_t>(k - 1)] == k);
    }
  }
}

TEST_CASE("cmc of random descriptors is near chance") {
  std::vector<MetricCurve> curves;
  for (std::uint64_t s = 0; s < 20; ++s)
    curves.push_back(cmc_curve(random_unit_rows(100, 16, s), random_unit_rows(100, 16, s + 50), identity_map(100), 10));
  const auto m = mean_curve(curves);
  CHECK(std::abs(m.at(10) - 0.1) < 0.03);
}

TEST_CASE("roc") {
  PairDistances sep{{0.1, 0.2, 0.3}, {0.5, 0.6, 0.9}};
  const auto r = roc_curve(sep, 50);
  CHECK(r.meta["auc"].get<double>() == 1.0);
  CHECK(r.xs.front() == 0.0);
  CHECK(r.ys.back() == 1.0);
  r.validate(true);
  CHECK_THROWS(roc_curve(PairDistances{{0.1}, {}}, 10));

  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u;
  PairDistances pd;
  for (int i = 0; i < 400; ++i) {
    pd.positive.push_back(std::round(u(rng) * 40.0) / 50.0);
    pd.negative.push_back(std::round((0.2 + u(rng)) * 40.0) / 50.0);
  }
  const double auc = roc_curve(pd, 100).meta["auc"].get<double>();
  CHECK(auc == doctest::Approx(brute_auc(pd.positive, pd.negative)).epsilon(1e-12));
  PairDistances tr = pd;
  for (auto* v : {&tr.positive, &tr.negative})
    for (double& d : *v) d = std::exp(3.0 * d) + std::sqrt(d);
  CHECK(roc_curve(tr, 100).meta["auc"].get<double>() == auc);

  PairDistances same;
  for (int i = 0; i < 4000; ++i) {
    same.positive.push_back(u(rng));
    same.negative.push_back(u(rng));
  }
  CHECK(std::abs(roc_curve(same, 100).meta["auc"].get<double>() - 0.5) < 0.03);

  const auto spd = sample_pair_distances(Matrix::Identity(20, 20), Matrix::Identity(20, 20), identity_map(20), 3);
  CHECK(spd.positive.size() == 20);
  CHECK(spd.negative.size() == 20);
  for (double d : spd.positive) CHECK(d == 0.0);
  for (double d : spd.negative) CHECK(d == doctest::Approx(std::sqrt(2.0)));
}

TEST_CASE("correspondence quality") {
  const Matrix x = oracle::random_cloud(80, 5);
  const auto nb = build_knn(x, 8);
  const Matrix onehot = Matrix::Identity(80, 80);
  const std::vector<double> radii = {0.0, 0.1, 0.5};
  const auto q = correspondence_quality(onehot, onehot, identity_map(80), nb, radii);
  for (double y : q.ys) CHECK(y == 1.0);
  const auto rnd = correspondence_quality(random_unit_rows(80, 4, 1), random_unit_rows(80, 4, 2), identity_map(80), nb,
                                          {0.0, 0.2, 0.4, 0.8, 1.6, 5.0});
  rnd.validate(true);
  CHECK(rnd.ys.front() < 0.2);
}

TEST_CASE("dice examples") {
  const auto d = dice_per_class({1, 1, 1, 1}, {1, 1, 2, 2}, 3, {1, 2});
  CHECK(d[0] == doctest::Approx(2.0 / 3.0));
  CHECK(d[1] == 0.0);
  const auto rep = dice_report({1, 1, 1, 1}, {1, 1, 2, 2}, 3, {1, 2});
  CHECK(rep.mean == doctest::Approx(1.0 / 3.0));
  CHECK(dice_report({1, 2, 2}, {1, 2, 2}, 3, {1, 2}).mean == 1.0);
  // Absent from both: skipped, not scored 1.
  CHECK(std::isnan(dice_per_class({1, 1}, {1, 1}, 3, {1, 2})[1]));
  CHECK(dice_report({1, 1}, {1, 2}, 3, {1, 2}).mean == doctest::Approx(1.0 / 3.0));
  CHECK_THROWS(dice_report({1, 3}, {1, 1}, 3, {1, 2}));
  CHECK_THROWS(dice_report({1}, {1, 1}, 3, {1, 2}));
}

TEST_CASE("dice matches a confusion-matrix oracle") {
  std::mt19937_64 rng(8);
  for (int rep = 0; rep < 30; ++rep) {
    const int c = 2 + rep % 7;
    const std::size_t n = 1 + rng() % 1000;
    std::vector<std::vector<int>> preds, gts;
    std::vector<double> oracle_means;
    std::vector<int> classes(static_cast<std::size_t>(c));
    std::iota(classes.begin(), classes.end(), 0);
    for (int s = 0; s < 3; ++s) {
      std::vector<int> p(n), g(n);
      for (std::size_t i = 0; i < n; ++i) {
        g[i] = static_cast<int>(rng() % static_cast<unsigned>(c));
        p[i] = rng() % 3 == 0 ? static_cast<int>(rng() % static_cast<unsigned>(c)) : g[i];
      }
      Eigen::MatrixXd conf = Eigen::MatrixXd::Zero(c, c);
      for (std::size_t i = 0; i < n; ++i) conf(p[i], g[i]) += 1.0;
      double sum = 0.0;
      int used = 0;
      for (int k = 0; k < c; ++k) {
        const double denom = conf.row(k).sum() + conf.col(k).sum();
        if (denom == 0.0) continue;
        sum += 2.0 * conf(k, k) / denom;
        ++used;
      }
      oracle_means.push_back(sum / used);
      CHECK(dice_report(p, g, c, classes).mean == doctest::Approx(dice_report(g, p, c, classes).mean).epsilon(1e-14));
      preds.push_back(std::move(p));
      gts.push_back(std::move(g));
    }
    const auto r = dice_report(preds, gts, c, classes);
    const double mean = (oracle_means[0] + oracle_means[1] + oracle_means[2]) / 3.0;
    double var = 0.0;
    for (double m : oracle_means) var += (m - mean) * (m - mean);
    CHECK(r.mean == doctest::Approx(mean).epsilon(1e-12));
    CHECK(r.std == doctest::Approx(std::sqrt(var / 3.0)).epsilon(1e-9));
    for (std::size_t s = 0; s < 3; ++s) CHECK(r.per_shape[s] == doctest::Approx(oracle_means[s]).epsilon(1e-12));
  }
}

TEST_CASE("shape pairs and csv export") {
  const auto all = shape_pairs(4, 0, 1);
  CHECK(all.size() == 12);
  for (const auto& [a, b] : all) CHECK(a != b);
  CHECK(shape_pairs(10, 7, 1).size() == 7);
  CHECK(shape_pairs(10, 7, 1) == shape_pairs(10, 7, 1));

  MetricCurve c{{1, 2, 3}, {0.25, 0.5, 1.0}, {{"kind", "cmc"}}};
  CHECK(c.at(1.5) == doctest::Approx(0.375));
  CHECK(c.at(0.0) == 0.25);
  CHECK(c.at(9.0) == 1.0);
  const auto path = std::filesystem::temp_directory_path() / "mkdiff_curve.csv";
  write_csv(c, path);
  std::ifstream in(path);
  std::string first, header;
  std::getline(in, first);
  std::getline(in, header);
  CHECK(first.rfind("# meta ", 0) == 0);
  CHECK(header == "x,y");
  std::filesystem::remove(path);
  MetricCurve bad{{1, 1}, {0.1, 0.2}, {}};
  CHECK_THROWS(bad.validate(false));
  MetricCurve dec{{1, 2}, {0.5, 0.2}, {}};
  CHECK_THROWS(dec.validate(true));
}

TEST_CASE("disturbance grids") {
  CHECK(parse_disturbance(to_string(Disturbance::kOutlier)) == Disturbance::kOutlier);
  const auto noise = default_grid(Disturbance::kNoise);
  CHECK(noise.size() == 6);
  CHECK(noise.back() == doctest::Approx(0.05));
  const auto missing = default_grid(Disturbance::kMissing);
  CHECK(std::find(missing.begin(), missing.end(), 0.5) != missing.end());
  CHECK_THROWS(parse_disturbance("wind"));
}

TEST_CASE("zero disturbance reproduces the clean report") {
  TrainConfig cfg;
  cfg.task = Task::kSegmentation;
  cfg.k = 8;
  cfg.sigmas = {0.05, 0.2};
  cfg.n_layers = 1;
  cfg.hidden_width = 4;
  Checkpoint ck;
  ck.config = cfg;
  ck.arch = cfg.architecture();
  ck.params = init_params(ck.arch, 2);
  std::vector<PointCloud> clouds;
  for (std::uint64_t s = 0; s < 2; ++s) clouds.push_back(generate_synthetic_body(s, 150, random_pose(s)));
  const auto clean = evaluate_segmentation(ck, clouds);
  for (auto d : {Disturbance::kNoise, Disturbance::kMissing, Disturbance::kOutlier}) {
    const auto rows = robustness_sweep(ck, clouds, d, {0.0}, 3);
    REQUIRE(rows.size() == 1);
    if (d == Disturbance::kOutlier) continue;  // scored with the background class
    CHECK(rows[0].report.mean == clean.mean);
    CHECK(rows[0].report.per_shape == clean.per_shape);
  }
}
