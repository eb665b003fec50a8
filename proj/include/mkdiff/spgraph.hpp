#pragma once

#include "mkdiff/types.hpp"

#include <cstdint>
#include <vector>

namespace mkdiff {

/// Exact k nearest neighbours of every point, nearest first.
struct NeighborLists {
  int k = 0;
  Eigen::Matrix<std::int32_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> indices;  // n x k
  Matrix dists;                                                                           // n x k

  std::size_t size() const { return static_cast<std::size_t>(indices.rows()); }
};

/// Square CSR matrix. Column indices are strictly increasing within each row
/// and no explicit zeros are stored.
class SparseMatrix {
 public:
  SparseMatrix() = default;
  explicit SparseMatrix(std::size_t n);

  struct Triplet {
    std::int32_t row;
    std::int32_t col;
    double value;
  };
  /// Duplicate (row, col) entries are summed; resulting zeros are dropped.
  static SparseMatrix from_triplets(std::size_t n, std::vector<Triplet> triplets);
  static SparseMatrix identity(std::size_t n);

  std::size_t rows() const { return n_; }
  std::size_t nnz() const { return values_.size(); }

  const std::vector<std::int64_t>& row_ptr() const { return row_ptr_; }
  const std::vector<std::int32_t>& col_idx() const { return col_idx_; }
  const std::vector<double>& values() const { return values_; }

  /// Stored value at (i, j), zero when absent. O(log row length).
  double coeff(std::size_t i, std::size_t j) const;

  SparseMatrix transpose() const;
  bool is_symmetric(double tol = 0.0) const;
  Matrix to_dense() const;

 private:
  std::size_t n_ = 0;
  std::vector<std::int64_t> row_ptr_{0};
  std::vector<std::int32_t> col_idx_;
  std::vector<double> values_;
};

using DegreeVector = Vector;

enum class LaplacianKind { kSym, kRw };

/// Exact Euclidean kNN through a kd-tree. Ties are broken by smaller index and
/// a point never lists itself.
NeighborLists build_knn(const Matrix& coords, int k);

/// O(n^2) reference used to cross-check build_knn.
NeighborLists build_knn_brute_force(const Matrix& coords, int k);

/// Gaussian-weighted kNN adjacency, exp(-d^2 / (2 sigma^2)), made symmetric by
/// an elementwise max with its transpose.
SparseMatrix build_adjacency(const NeighborLists& nb, double sigma);

/// Row sums of A; throws NumericalError on an isolated node.
DegreeVector degrees(const SparseMatrix& adjacency);

/// L_sym = I - D^-1/2 A D^-1/2 or L_rw = I - D^-1 A.
SparseMatrix laplacian(const SparseMatrix& adjacency, LaplacianKind kind);

/// Propagation operators I - L, built directly from A so no cancellation
/// happens on the diagonal: D^-1/2 A D^-1/2 (kSym) or D^-1 A (kRw).
SparseMatrix propagation(const SparseMatrix& adjacency, LaplacianKind kind);

/// out = M * X. Rows are computed independently, so the parallel and
/// sequential paths produce identical results.
void spmm(const SparseMatrix& m, const Matrix& x, Matrix& out);
Matrix spmm(const SparseMatrix& m, const Matrix& x);
/// out = alpha * M * X + beta * out.
void spmm_axpby(const SparseMatrix& m, const Matrix& x, double alpha, double beta, Matrix& out);

/// Dijkstra over the symmetrized kNN graph with Euclidean edge lengths.
/// Unreachable nodes get +infinity.
std::vector<double> graph_geodesics(const NeighborLists& nb, std::size_t source);

/// Symmetrized kNN edges as adjacency lists of (neighbour, length).
std::vector<std::vector<std::pair<std::int32_t, double>>> symmetric_edges(const NeighborLists& nb);

}  // namespace mkdiff
