#pragma once

#include "mkdiff/types.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace mkdiff {

/// Number of body-part labels; label 0 is reserved for background points.
inline constexpr int kBodyParts = 15;

enum BodyPart : int {
  kBackground = 0,
  kHead = 1,
  kThorax,
  kAbdomen,
  kLeftHand,
  kLeftLowerArm,
  kLeftUpperArm,
  kLeftFoot,
  kLeftLowerLeg,
  kLeftUpperLeg,
  kRightHand,
  kRightLowerArm,
  kRightUpperArm,
  kRightFoot,
  kRightLowerLeg,
  kRightUpperLeg,
};

/// Correspondence index carried by points with no counterpart (outliers).
inline constexpr std::int64_t kNoCorrespondence = -1;

struct PointCloud {
  Matrix coords;                           // n x 3
  std::optional<Matrix> features;          // n x f
  std::optional<std::vector<int>> labels;  // n
  std::optional<std::vector<std::int64_t>> corr;

  std::size_t size() const { return static_cast<std::size_t>(coords.rows()); }

  /// Throws std::invalid_argument when an invariant is violated.
  void validate(int n_classes = kBodyParts + 1) const;
};

enum class CloudFormat { kXyzAscii, kPlyAscii, kBinF32 };

CloudFormat parse_cloud_format(const std::string& name);
std::string to_string(CloudFormat format);
/// Guesses the format from the file extension (.xyz/.txt, .ply, .bin).
CloudFormat format_from_extension(const std::filesystem::path& path);

/// Reads coordinates and, if present, the `<stem>.labels` / `<stem>.corr`
/// side-cars next to the file.
PointCloud load_cloud(const std::filesystem::path& path, CloudFormat format);
void save_cloud(const PointCloud& cloud, const std::filesystem::path& path, CloudFormat format);

std::filesystem::path labels_sidecar(const std::filesystem::path& cloud_path);
std::filesystem::path corr_sidecar(const std::filesystem::path& cloud_path);

// Synthetic data ------------------------------------------------------------

/// Joint angles in radians: shoulder abduction L/R, shoulder flexion L/R,
/// elbow flexion L/R, hip flexion L/R, knee flexion L/R.
using Pose = std::array<double, 10>;

/// Articulated capsule body of about 1.7 units height with 15 labelled parts.
///
/// The surface sampling parameterization depends only on `n_points`, so every
/// body generated with the same point count is index-aligned: point i of one
/// body corresponds to point i of any other. `seed` selects the subject
/// (limb proportions); `pose` articulates the joints. Right-side limbs are
/// slightly thicker and more densely sampled than left-side limbs, which
/// gives the otherwise mirror-symmetric figure a detectable handedness.
PointCloud generate_synthetic_body(std::uint64_t seed, std::size_t n_points, const Pose& pose);

/// A random but plausible pose.
Pose random_pose(std::uint64_t seed);

// Disturbances ----------------------------------------------------------------

PointCloud add_gaussian_noise(const PointCloud& cloud, double stddev, std::uint64_t seed);
PointCloud remove_points(const PointCloud& cloud, double ratio, std::uint64_t seed);
PointCloud add_outliers(const PointCloud& cloud, double ratio, std::uint64_t seed);

// Dataset manifest -------------------------------------------------------------

enum class Split { kTrain, kVal, kTest };

std::string to_string(Split split);
Split parse_split(const std::string& name);

struct ShapeEntry {
  std::filesystem::path cloud;
  std::filesystem::path labels;  // empty when the shape is unlabelled
  int subject = 0;
  int pose = 0;
  Split split = Split::kTrain;
};

struct DatasetManifest {
  std::vector<ShapeEntry> shapes;
  int n_classes = kBodyParts;
  double units_scale = 1.0;

  std::vector<std::size_t> indices(Split split) const;
  void validate() const;
};

/// JSON manifest; relative paths resolve against the manifest directory.
DatasetManifest load_manifest(const std::filesystem::path& path);
void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);

/// Loads one manifest entry (cloud plus side-cars).
PointCloud load_shape(const ShapeEntry& entry);

}  // namespace mkdiff
