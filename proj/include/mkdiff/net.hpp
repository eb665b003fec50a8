#pragma once

#include "mkdiff/spectral.hpp"
#include "mkdiff/types.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace mkdiff {

enum class Head { kDescriptor, kSegmentation };

std::string to_string(Head head);
Head parse_head(const std::string& name);

struct Architecture {
  int n_layers = 4;
  int hidden_width = 64;
  int n_kernels = 8;
  int out_dim = 16;
  int input_dim = 1;
  double dropout_p = 0.2;
  double norm_eps = 1e-5;
  Head head = Head::kDescriptor;

  void validate() const;
  /// Closed-form count of trainable scalars.
  std::size_t parameter_count() const;
};

/// One mkdCNN layer: diffusion bank -> 1x1 conv -> norm -> ReLU -> dropout ->
/// 1x1 conv -> norm -> ReLU.
struct LayerParams {
  Matrix w1;  // (S * c_in) x hidden
  Vector b1;
  Vector scale1, shift1;
  Matrix w2;  // hidden x hidden
  Vector b2;
  Vector scale2, shift2;
};

struct NetworkParams {
  std::vector<LayerParams> layers;
  Matrix w_out;  // hidden x out_dim
  Vector b_out;

  struct TensorRef {
    std::string name;
    double* data;
    Eigen::Index rows;
    Eigen::Index cols;
    Eigen::Index size() const { return rows * cols; }
  };
  struct ConstTensorRef {
    std::string name;
    const double* data;
    Eigen::Index rows;
    Eigen::Index cols;
    Eigen::Index size() const { return rows * cols; }
  };
  /// Every tensor in a fixed registry order (layers first, then the head).
  std::vector<TensorRef> tensors();
  std::vector<ConstTensorRef> tensors() const;

  std::size_t parameter_count() const;
  bool all_finite() const;
  /// Same shapes, all zeros.
  NetworkParams zeros_like() const;
  void add_scaled(const NetworkParams& other, double alpha);
};

using Gradients = NetworkParams;

NetworkParams init_params(const Architecture& arch, std::uint64_t seed);

// Building blocks ---------------------------------------------------------------

struct InstanceNormCache {
  Matrix xhat;   // normalized, pre-affine
  Vector inv_std;
};

/// Per-channel normalization over all nodes of one graph.
Matrix instance_norm_forward(const Matrix& x, const Vector& scale, const Vector& shift, double eps,
                             InstanceNormCache* cache = nullptr);
/// Returns dX; accumulates dscale / dshift.
Matrix instance_norm_backward(const Matrix& dy, const InstanceNormCache& cache, const Vector& scale,
                              Vector& dscale, Vector& dshift);

enum class Mode { kTrain, kEval };

/// Inverted dropout. In eval mode, or with p == 0, the mask is empty and the
/// output is the input.
Matrix dropout(const Matrix& x, double p, std::uint64_t seed, Mode mode, Matrix* mask = nullptr);

// Network -----------------------------------------------------------------------

struct LayerCache {
  Matrix input;     // layer input H (n x c_in)
  Matrix diffused;  // apply_bank(H)
  InstanceNormCache norm1;
  Matrix pre_act1;  // after norm1 affine
  Matrix mask;      // dropout mask, empty when inactive
  Matrix dropped;   // input to the second conv
  InstanceNormCache norm2;
  Matrix pre_act2;
};

struct ForwardCache {
  std::vector<LayerCache> layers;
  Matrix hidden;   // last layer output
  Matrix raw_out;  // head output before row normalization
  Vector row_norms;
  Mode mode = Mode::kEval;
};

struct ForwardResult {
  Matrix y;
  ForwardCache cache;
};

/// Runs the network on one point cloud. `seed` drives the dropout masks.
ForwardResult forward(const Architecture& arch, const NetworkParams& params, const KernelBank& bank,
                      const Matrix& x, Mode mode, std::uint64_t seed = 0);

/// Reverse-mode gradients of sum(dY .* Y) with respect to every parameter.
/// When `dx` is non-null it receives the input gradient.
Gradients backward(const Architecture& arch, const NetworkParams& params, const KernelBank& bank,
                   const ForwardCache& cache, const Matrix& dy, Matrix* dx = nullptr);

/// All-ones node features, the featureless-input convention.
Matrix ones_features(std::size_t n, int dim = 1);

// Losses --------------------------------------------------------------------------

struct TripletLoss {
  double loss = 0.0;
  Vector grad_anchor, grad_pos, grad_neg;
};

/// max(0, |a - p| - |a - n| + margin); zero subgradient at the kink.
TripletLoss triplet_hinge_loss(const Eigen::Ref<const Vector>& anchor,
                               const Eigen::Ref<const Vector>& pos,
                               const Eigen::Ref<const Vector>& neg, double margin);

struct CrossEntropyLoss {
  double loss = 0.0;
  Matrix grad;  // d loss / d logits
};

/// Mean over nodes of w[y_i] * -log softmax(logits_i)[y_i]. `labels` index
/// output channels.
CrossEntropyLoss weighted_ce_loss(const Matrix& logits, const std::vector<int>& labels,
                                  const Vector& class_weights);

/// sqrt(1 / freq_c), rescaled to unit mean. Throws if a class never occurs.
Vector label_weights(const std::vector<int>& labels, int n_classes);

Matrix softmax_rows(const Matrix& logits);

// Optimizer ----------------------------------------------------------------------

struct OptimizerState {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::int64_t step = 0;
  NetworkParams m;
  NetworkParams v;
};

OptimizerState make_adam(const NetworkParams& params, double lr = 1e-4);

/// Bias-corrected Adam. Throws NumericalError on a non-finite gradient, leaving
/// params and state untouched.
void adam_step(NetworkParams& params, const Gradients& grads, OptimizerState& state);

}  // namespace mkdiff
