#pragma once

#include "mkdiff/net.hpp"
#include "mkdiff/pointset.hpp"
#include "mkdiff/spectral.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace mkdiff {

enum class Task { kDescriptor, kSegmentation };

std::string to_string(Task task);
Task parse_task(const std::string& name);

/// Default sigma grid, in length units of a ~1.7 unit tall body.
std::vector<double> default_sigmas();

struct TrainConfig {
  Task task = Task::kDescriptor;
  int epochs = 50;
  double lr = 1e-4;
  double margin = 0.2;
  int descriptor_dim = 16;
  int triplets_per_step = 6890;
  std::vector<double> sigmas = default_sigmas();
  int k = 100;
  DiffusionConfig diffusion;
  int n_layers = 4;
  int hidden_width = 64;
  double dropout = 0.2;
  std::uint64_t seed = 1;
  int n_classes = kBodyParts;
  /// Upper bound of the outlier ratio added once to each training and
  /// validation cloud (drawn per shape); > 0 adds the background class.
  double train_outlier_ratio = 0.0;
  /// Cap on ordered shape pairs scored for the validation CMC.
  int val_max_pairs = 20;

  void validate() const;
  /// Architecture implied by this configuration.
  Architecture architecture() const;
  /// Whether label 0 is a predicted class.
  bool has_background() const { return task == Task::kSegmentation && train_outlier_ratio > 0.0; }
  int output_classes() const { return has_background() ? n_classes + 1 : n_classes; }
};

nlohmann::json to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const Architecture& arch);
Architecture architecture_from_json(const nlohmann::json& j);

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_metric = 0.0;
  double wall_ms = 0.0;
};

struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;
  Architecture arch;
  TrainConfig config;
  NetworkParams params;
  std::vector<EpochRecord> history;
  int best_epoch = 0;
};

/// `MKDC` magic, u32 version, u64 metadata length, JSON metadata, then the
/// tensors as little-endian f64 in registry order.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

struct Triplet {
  std::size_t shape_a, idx_a;
  std::size_t shape_p, idx_p;
  std::size_t shape_n, idx_n;
};

/// Correspondence lookup for one shape: corr index -> point index.
struct CorrIndex {
  std::vector<std::int64_t> corr;  // per point
  std::vector<std::int64_t> lookup;

  explicit CorrIndex(const std::vector<std::int64_t>& corr);
  /// Point carrying correspondence c, or -1.
  std::int64_t find(std::int64_t c) const;
};

/// Triplets for one optimization step. One anchor shape, one positive shape
/// and one negative shape are drawn from `shapes` (positive and negative
/// differ from the anchor); anchors are uniform points of the anchor shape.
std::vector<Triplet> sample_triplets(const std::vector<CorrIndex>& shapes,
                                     const std::vector<std::size_t>& candidates,
                                     std::size_t n_triplets, std::uint64_t seed);

/// A loaded shape with its diffusion bank, ready for forward passes.
struct PreparedShape {
  PointCloud cloud;
  KernelBank bank;
  Matrix input;
};

PreparedShape prepare_shape(PointCloud cloud, const TrainConfig& config);

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Training loops return the checkpoint of the best validation epoch.
Checkpoint train_descriptor(const TrainConfig& config, const DatasetManifest& manifest,
                            const EpochCallback& on_epoch = {});
Checkpoint train_segmentation(const TrainConfig& config, const DatasetManifest& manifest,
                              const EpochCallback& on_epoch = {});

/// Same loops over clouds already in memory.
Checkpoint train_descriptor(const TrainConfig& config, const std::vector<PreparedShape>& train,
                            const std::vector<PreparedShape>& val,
                            const EpochCallback& on_epoch = {});
Checkpoint train_segmentation(const TrainConfig& config, const std::vector<PreparedShape>& train,
                              const std::vector<PreparedShape>& val,
                              const EpochCallback& on_epoch = {});

struct ExtractTiming {
  double bank_ms = 0.0;
  double forward_ms = 0.0;
  double points_per_second = 0.0;  // forward only, precomputed operators
};

Matrix extract_descriptors(const Checkpoint& ckpt, const PointCloud& cloud,
                           ExtractTiming* timing = nullptr);
Matrix extract_descriptors(const Checkpoint& ckpt, const KernelBank& bank, const Matrix& input);

/// Per-node argmax of the logits in data label convention; ties go to the
/// smaller class.
std::vector<int> predict_labels(const Checkpoint& ckpt, const PointCloud& cloud);
std::vector<int> predict_labels(const Checkpoint& ckpt, const KernelBank& bank, const Matrix& input);
std::vector<int> argmax_labels(const Matrix& logits, int label_offset);

}  // namespace mkdiff
