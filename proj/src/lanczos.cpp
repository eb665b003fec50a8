#include "mkdiff/rng.hpp"
#include "mkdiff/spectral.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>

namespace mkdiff {
namespace {

void matvec(const SparseMatrix& l, const double* x, double* y) {
  const auto& rp = l.row_ptr();
  const auto& ci = l.col_idx();
  const auto& v = l.values();
  for (std::size_t r = 0; r < l.rows(); ++r) {
    double s = 0.0;
    for (auto p = rp[r]; p < rp[r + 1]; ++p)
      s += v[static_cast<std::size_t>(p)] * x[ci[static_cast<std::size_t>(p)]];
    y[r] = s;
  }
}

/// Orthogonalizes w against the first `cols` columns of V, twice.
void reorthogonalize(const Eigen::MatrixXd& basis, Eigen::Index cols, Eigen::VectorXd& w) {
  if (cols == 0) return;
  for (int pass = 0; pass < 2; ++pass) {
    const Eigen::VectorXd h = basis.leftCols(cols).transpose() * w;
    w.noalias() -= basis.leftCols(cols) * h;
  }
}

}  // namespace

SpectralDecomposition lanczos_eigs(const SparseMatrix& l, int m, std::uint64_t seed,
                                   const LanczosOptions& opts) {
  const auto n = static_cast<Eigen::Index>(l.rows());
  if (m < 1 || m > n) throw std::invalid_argument("lanczos: need 1 <= m <= n");
  double scale = 0.0;
  for (double v : l.values()) scale = std::max(scale, std::abs(v));
  if (!l.is_symmetric(1e-12 * std::max(1.0, scale)))
    throw std::invalid_argument("lanczos: matrix is not symmetric");

  auto rng = make_rng(seed, "lanczos");
  std::normal_distribution<double> normal(0.0, 1.0);
  auto random_unit = [&](const Eigen::MatrixXd& basis, Eigen::Index cols) -> Eigen::VectorXd {
    for (int attempt = 0; attempt < 8; ++attempt) {
      Eigen::VectorXd v(n);
      for (Eigen::Index i = 0; i < n; ++i) v[i] = normal(rng);
      reorthogonalize(basis, cols, v);
      const double nv = v.norm();
      if (nv > 1e-8) return v / nv;
    }
    throw NumericalError("lanczos: cannot extend the Krylov basis");
  };

  Eigen::Index dim = std::min<Eigen::Index>(n, std::max<Eigen::Index>(2 * m + 20, 40));
  Eigen::MatrixXd basis(n, dim);
  std::vector<double> alpha, beta;  // beta[j] couples v_j and v_{j+1}
  basis.col(0) = random_unit(basis, 0);
  Eigen::VectorXd w(n);
  Eigen::Index built = 0;  // columns whose alpha is known

  for (int attempt = 0; attempt <= opts.max_restarts; ++attempt) {
    if (basis.cols() < dim) basis.conservativeResize(n, dim);
    for (Eigen::Index j = built; j < dim; ++j) {
      matvec(l, basis.col(j).data(), w.data());
      const double a = basis.col(j).dot(w);
      alpha.push_back(a);
      w.noalias() -= a * basis.col(j);
      if (j > 0) w.noalias() -= beta[static_cast<std::size_t>(j - 1)] * basis.col(j - 1);
      reorthogonalize(basis, j + 1, w);
      if (j + 1 == n) break;
      double b = w.norm();
      if (j + 1 < dim) {
        if (b <= 1e-10 * std::max(1.0, scale)) {
          // Invariant subspace found: continue from a fresh orthogonal direction.
          b = 0.0;
          basis.col(j + 1) = random_unit(basis, j + 1);
        } else {
          basis.col(j + 1) = w / b;
        }
      } else if (b <= 1e-10 * std::max(1.0, scale)) {
        b = 0.0;
      }
      beta.push_back(b);
      if (j + 1 == dim) w /= (b > 0.0 ? b : 1.0);
    }
    built = static_cast<Eigen::Index>(alpha.size());
    const Eigen::Index kdim = built;

    Eigen::VectorXd diag = Eigen::Map<const Eigen::VectorXd>(alpha.data(), kdim);
    Eigen::VectorXd sub(std::max<Eigen::Index>(kdim - 1, 0));
    for (Eigen::Index j = 0; j + 1 < kdim; ++j) sub[j] = beta[static_cast<std::size_t>(j)];
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> tri;
    tri.computeFromTridiagonal(diag, sub, Eigen::ComputeEigenvectors);
    if (tri.info() != Eigen::Success) throw NumericalError("lanczos: tridiagonal solve failed");

    SpectralDecomposition out;
    out.eigvals = tri.eigenvalues().head(m);
    const Eigen::MatrixXd ritz = basis.leftCols(kdim) * tri.eigenvectors().leftCols(m);
    out.eigvecs = ritz;

    bool converged = true;
    Eigen::VectorXd lq(n);
    for (int i = 0; i < m && converged; ++i) {
      matvec(l, ritz.col(i).data(), lq.data());
      const double res = (lq - out.eigvals[i] * ritz.col(i)).norm();
      converged = res <= opts.tol * std::max(1.0, std::abs(out.eigvals[i]));
    }
    if (converged || kdim == n) {
      if (!converged) throw NumericalError("lanczos: full Krylov space did not converge");
      return out;
    }

    // Grow the Krylov space, picking up from the last residual direction.
    const Eigen::Index next = std::min<Eigen::Index>(n, 2 * dim);
    basis.conservativeResize(n, next);
    if (beta.back() > 0.0) {
      basis.col(kdim) = w;
    } else {
      basis.col(kdim) = random_unit(basis, kdim);
    }
    dim = next;
  }
  throw NumericalError("lanczos: no convergence after " + std::to_string(opts.max_restarts) +
                       " restarts");
}

}  // namespace mkdiff
