#include "mkdiff/pointset.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

using namespace mkdiff;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("mkdiff_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

PointCloud two_points() {
  PointCloud c;
  c.coords.resize(2, 3);
  c.coords << 0.125, -1.5, 3.0, 1.0 / 3.0, 2.0, -0.75;
  return c;
}

}  // namespace

TEST_CASE("xyz parsing") {
  const auto dir = temp_dir("xyz");
  {
    std::ofstream(dir / "a.xyz") << "0 0 0\n1 0 0\n";
  }
  const auto c = load_cloud(dir / "a.xyz", CloudFormat::kXyzAscii);
  REQUIRE(c.size() == 2);
  CHECK(c.coords(1, 0) == 1.0);
  CHECK(c.coords.row(0).isZero());

  {
    std::ofstream(dir / "bad.xyz") << "0 0 abc\n";
  }
  try {
    load_cloud(dir / "bad.xyz", CloudFormat::kXyzAscii);
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(e.line() == 1);
  }
}

TEST_CASE("binary round trip is bit exact and sized as documented") {
  const auto dir = temp_dir("bin");
  PointCloud c = two_points();
  c.labels = std::vector<int>{3, 15};
  c.corr = std::vector<std::int64_t>{7, 9};
  save_cloud(c, dir / "c.bin", CloudFormat::kBinF32);
  CHECK(fs::file_size(dir / "c.bin") == 8 + 24);
  const auto back = load_cloud(dir / "c.bin", CloudFormat::kBinF32);
  for (Eigen::Index i = 0; i < 2; ++i)
    for (int d = 0; d < 3; ++d) CHECK(back.coords(i, d) == static_cast<double>(static_cast<float>(c.coords(i, d))));
  REQUIRE(back.labels);
  CHECK(*back.labels == *c.labels);
  CHECK(*back.corr == *c.corr);

  // Second round trip from f32-representable values is exact.
  save_cloud(back, dir / "d.bin", CloudFormat::kBinF32);
  CHECK(load_cloud(dir / "d.bin", CloudFormat::kBinF32).coords == back.coords);
}

TEST_CASE("ascii formats write one line per point and round trip") {
  const auto dir = temp_dir("ascii");
  PointCloud c = two_points();
  c.labels = std::vector<int>{1, 2};
  save_cloud(c, dir / "c.xyz", CloudFormat::kXyzAscii);
  std::ifstream is(dir / "c.xyz");
  int lines = 0;
  for (std::string l; std::getline(is, l);) ++lines;
  CHECK(lines == 2);
  CHECK(fs::exists(labels_sidecar(dir / "c.xyz")));
  const auto xyz = load_cloud(dir / "c.xyz", CloudFormat::kXyzAscii);
  CHECK((xyz.coords - c.coords).cwiseAbs().maxCoeff() < 1e-8);

  save_cloud(c, dir / "c.ply", CloudFormat::kPlyAscii);
  const auto ply = load_cloud(dir / "c.ply", CloudFormat::kPlyAscii);
  CHECK((ply.coords - c.coords).cwiseAbs().maxCoeff() < 1e-8);
  CHECK(*ply.labels == *c.labels);
}

TEST_CASE("synthetic body") {
  const auto a = generate_synthetic_body(1, 1024, Pose{});
  REQUIRE(a.size() == 1024);
  std::set<int> labels(a.labels->begin(), a.labels->end());
  CHECK(labels.size() == 15);
  CHECK(*labels.begin() == 1);
  CHECK(*labels.rbegin() == 15);
  const double height = a.coords.col(2).maxCoeff() - a.coords.col(2).minCoeff();
  CHECK(height >= 1.6);
  CHECK(height <= 1.8);
  a.validate();

  const auto again = generate_synthetic_body(1, 1024, Pose{});
  CHECK(again.coords == a.coords);

  const auto posed = generate_synthetic_body(1, 1024, random_pose(5));
  CHECK(*posed.corr == *a.corr);
  CHECK(*posed.labels == *a.labels);
  CHECK(posed.coords != a.coords);

  // Different subjects keep labels and correspondences index-aligned.
  const auto other = generate_synthetic_body(2, 1024, random_pose(6));
  CHECK(*other.labels == *a.labels);
  CHECK(*other.corr == *a.corr);
}

TEST_CASE("gaussian noise") {
  const auto c = generate_synthetic_body(3, 500, Pose{});
  CHECK(add_gaussian_noise(c, 0.0, 1).coords == c.coords);
  CHECK(add_gaussian_noise(c, 0.01, 4).coords == add_gaussian_noise(c, 0.01, 4).coords);

  PointCloud big;
  big.coords = Matrix::Zero(100000, 3);
  const auto noisy = add_gaussian_noise(big, 0.02, 9);
  for (int d = 0; d < 3; ++d) {
    const double mean = noisy.coords.col(d).mean();
    const double sd = std::sqrt((noisy.coords.col(d).array() - mean).square().mean());
    CHECK(std::abs(sd - 0.02) < 0.02 * 0.02);
  }
}

TEST_CASE("point removal") {
  auto c = generate_synthetic_body(3, 1000, Pose{});
  CHECK(remove_points(c, 0.0, 1).coords == c.coords);
  const auto r = remove_points(c, 0.3, 2);
  REQUIRE(r.size() == 700);
  for (std::size_t i = 0; i < r.size(); ++i) {
    const auto src = static_cast<std::size_t>((*r.corr)[i]);
    CHECK((*r.labels)[i] == (*c.labels)[src]);
    CHECK(r.coords.row(static_cast<Eigen::Index>(i)) == c.coords.row(static_cast<Eigen::Index>(src)));
  }
  PointCloud big;
  big.coords = Matrix::Zero(6890, 3);
  CHECK(remove_points(big, 0.5, 3).size() == 3445);
  CHECK_THROWS(remove_points(c, 1.0, 1));
}

TEST_CASE("outliers") {
  const auto c = generate_synthetic_body(3, 1000, Pose{});
  CHECK(add_outliers(c, 0.0, 1).coords == c.coords);
  const auto o = add_outliers(c, 0.5, 2);
  REQUIRE(o.size() == 1500);
  CHECK(std::count(o.labels->begin(), o.labels->end(), 0) == 500);
  CHECK(o.coords.topRows(1000) == c.coords);
  CHECK(std::equal(c.labels->begin(), c.labels->end(), o.labels->begin()));
  const Eigen::RowVector3d lo = c.coords.colwise().minCoeff(), hi = c.coords.colwise().maxCoeff();
  for (Eigen::Index i = 1000; i < 1500; ++i) {
    CHECK((*o.corr)[static_cast<std::size_t>(i)] == kNoCorrespondence);
    for (int d = 0; d < 3; ++d) {
      CHECK(o.coords(i, d) >= lo[d]);
      CHECK(o.coords(i, d) <= hi[d]);
    }
  }
}

TEST_CASE("manifest round trip") {
  const auto dir = temp_dir("manifest");
  DatasetManifest m;
  for (int i = 0; i < 3; ++i) {
    const auto path = dir / ("s" + std::to_string(i) + ".bin");
    save_cloud(generate_synthetic_body(static_cast<std::uint64_t>(i), 200, Pose{}), path, CloudFormat::kBinF32);
    m.shapes.push_back({path, labels_sidecar(path), i, 0, static_cast<Split>(i)});
  }
  save_manifest(m, dir / "manifest.json");
  const auto back = load_manifest(dir / "manifest.json");
  REQUIRE(back.shapes.size() == 3);
  CHECK(back.indices(Split::kVal) == std::vector<std::size_t>{1});
  CHECK(load_shape(back.shapes[2]).size() == 200);
}

TEST_CASE("cloud validation") {
  PointCloud c = two_points();
  c.labels = std::vector<int>{0, 16};
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c.labels.reset();
  c.corr = std::vector<std::int64_t>{4, 4};
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}
