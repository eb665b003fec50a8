#pragma once

#include "mkdiff/spgraph.hpp"
#include "mkdiff/types.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace mkdiff {

/// The m algebraically smallest eigenpairs of a symmetric matrix.
struct SpectralDecomposition {
  Vector eigvals;  // ascending
  Matrix eigvecs;  // n x m, orthonormal columns

  int m() const { return static_cast<int>(eigvals.size()); }
};

struct LanczosOptions {
  double tol = 1e-9;     // relative residual target
  int max_restarts = 8;  // Krylov-dimension doublings before giving up
};

/// Lanczos with full reorthogonalization. The Krylov dimension grows until
/// every requested pair has ||L q - lambda q|| <= tol * max(1, |lambda|); at
/// dimension n the result is exact up to rounding.
SpectralDecomposition lanczos_eigs(const SparseMatrix& l, int m, std::uint64_t seed,
                                   const LanczosOptions& opts = {});

struct CgOptions {
  double tol = 1e-8;
  int max_iter = 1000;
};

/// Solves (lambda L + I) X = B column by column with conjugate gradients.
/// L must be symmetric positive semidefinite.
Matrix cg_solve(const SparseMatrix& l, double lambda, const Matrix& b, const CgOptions& opts = {});

enum class DiffusionMode { kRandomWalk, kExactSpectral, kExactCg };
enum class Propagation { kSymNormalized, kRwNormalized };

std::string to_string(DiffusionMode mode);
std::string to_string(Propagation prop);
DiffusionMode parse_diffusion_mode(const std::string& name);
Propagation parse_propagation(const std::string& name);

struct DiffusionConfig {
  DiffusionMode mode = DiffusionMode::kRandomWalk;
  int t = 7;
  double lambda = 1.0;
  Propagation propagation = Propagation::kSymNormalized;
  int m = 64;  // eigenpairs for kExactSpectral
  double cg_tol = 1e-8;
  int cg_max_iter = 1000;

  void validate() const;
};

/// One per-sigma diffusion operator in whichever representation the mode
/// needs.
struct DiffusionOperator {
  double sigma = 0.0;
  SparseMatrix matrix;            // propagation matrix (rw) or L_sym (exact-cg)
  SparseMatrix matrix_t;          // transpose, only for a non-symmetric propagation
  SpectralDecomposition spectrum; // exact-spectral only
};

/// Diffuses the columns of P: P' = (I - L)^t P, Q (lambda Lambda + I)^-1 Q^T P
/// or (lambda L + I)^-1 P.
Matrix diffuse(const DiffusionOperator& op, const DiffusionConfig& config, const Matrix& p);
/// Adjoint of diffuse, used for back-propagation.
Matrix diffuse_transpose(const DiffusionOperator& op, const DiffusionConfig& config,
                         const Matrix& p);

/// Diffusion stage shared by every layer of a network on one point cloud.
struct KernelBank {
  std::vector<double> sigmas;  // ascending
  std::vector<DiffusionOperator> operators;
  DiffusionConfig config;
  int k = 0;

  std::size_t size() const { return operators.size(); }
  std::size_t nodes() const;
};

KernelBank build_kernel_bank(const Matrix& coords, std::vector<double> sigmas, int k,
                             const DiffusionConfig& config, std::uint64_t seed = 0);
KernelBank build_kernel_bank(const NeighborLists& nb, std::vector<double> sigmas,
                             const DiffusionConfig& config, std::uint64_t seed = 0);

/// Concatenates diffuse(op_s, P) for every sigma: n x (S * f), blocks ordered
/// by ascending sigma.
Matrix apply_bank(const KernelBank& bank, const Matrix& p);
/// Adjoint of apply_bank: n x (S * f) -> n x f.
Matrix apply_bank_transpose(const KernelBank& bank, const Matrix& g);

}  // namespace mkdiff
