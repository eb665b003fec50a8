#include "mkdiff/spectral.hpp"
#include "mkdiff/parallel.hpp"

#include <algorithm>
#include <cmath>

namespace mkdiff {

std::string to_string(DiffusionMode mode) {
  switch (mode) {
    case DiffusionMode::kRandomWalk: return "rw";
    case DiffusionMode::kExactSpectral: return "exact-spectral";
    case DiffusionMode::kExactCg: return "exact-cg";
  }
  return "?";
}

std::string to_string(Propagation prop) {
  return prop == Propagation::kSymNormalized ? "sym-normalized" : "rw-normalized";
}

DiffusionMode parse_diffusion_mode(const std::string& name) {
  if (name == "rw") return DiffusionMode::kRandomWalk;
  if (name == "exact-spectral") return DiffusionMode::kExactSpectral;
  if (name == "exact-cg") return DiffusionMode::kExactCg;
  throw std::invalid_argument("unknown diffusion mode '" + name + "'");
}

Propagation parse_propagation(const std::string& name) {
  if (name == "sym-normalized" || name == "sym") return Propagation::kSymNormalized;
  if (name == "rw-normalized" || name == "rw") return Propagation::kRwNormalized;
  throw std::invalid_argument("unknown propagation '" + name + "'");
}

void DiffusionConfig::validate() const {
  if (t < 0) throw std::invalid_argument("diffusion steps t must be >= 0");
  if (!(lambda >= 0.0)) throw std::invalid_argument("diffusion time lambda must be >= 0");
  if (mode == DiffusionMode::kExactSpectral && m < 1)
    throw std::invalid_argument("exact-spectral needs m >= 1");
  if (!(cg_tol > 0.0) || cg_max_iter < 1) throw std::invalid_argument("invalid CG settings");
}

// Conjugate gradients ----------------------------------------------------------------

Matrix cg_solve(const SparseMatrix& l, double lambda, const Matrix& b, const CgOptions& opts) {
  if (!(lambda >= 0.0)) throw std::invalid_argument("cg_solve: lambda must be >= 0");
  if (b.rows() != static_cast<Eigen::Index>(l.rows()))
    throw std::invalid_argument("cg_solve: right-hand side has wrong row count");
  if (lambda == 0.0) return b;

  const auto cols = b.cols();
  const Eigen::RowVectorXd b_norm = b.colwise().norm();
  const Eigen::RowVectorXd target = opts.tol * b_norm;

  // A X = lambda L X + X.
  auto apply = [&](const Matrix& x, Matrix& out) {
    out = x;
    spmm_axpby(l, x, lambda, 1.0, out);
  };

  Matrix x = Matrix::Zero(b.rows(), cols);
  Matrix r = b, p, ap;
  int iters = 0;
  // The outer loop restarts from the true residual if the recurrence drifted.
  for (int restart = 0; restart < 4; ++restart) {
    if (restart > 0) {
      apply(x, ap);
      r = b - ap;
    }
    Eigen::RowVectorXd rr = r.colwise().squaredNorm();
    auto done = [&](Eigen::Index c) { return std::sqrt(rr[c]) <= target[c]; };
    p = r;
    for (Eigen::Index c = 0; c < cols; ++c)
      if (done(c)) p.col(c).setZero();
    while (iters < opts.max_iter) {
      bool all_done = true;
      for (Eigen::Index c = 0; c < cols; ++c) all_done = all_done && done(c);
      if (all_done) break;
      apply(p, ap);
      ++iters;
      Eigen::RowVectorXd alpha = Eigen::RowVectorXd::Zero(cols);
      for (Eigen::Index c = 0; c < cols; ++c) {
        if (done(c)) continue;
        const double pap = p.col(c).dot(ap.col(c));
        if (pap > 0.0) alpha[c] = rr[c] / pap;
      }
      x.noalias() += p * alpha.asDiagonal();
      r.noalias() -= ap * alpha.asDiagonal();
      const Eigen::RowVectorXd rr_new = r.colwise().squaredNorm();
      for (Eigen::Index c = 0; c < cols; ++c) {
        if (alpha[c] == 0.0) {
          p.col(c).setZero();
          continue;
        }
        const double beta = rr_new[c] / rr[c];
        rr[c] = rr_new[c];
        if (done(c))
          p.col(c).setZero();
        else
          p.col(c) = r.col(c) + beta * p.col(c);
      }
    }
    apply(x, ap);
    const Eigen::RowVectorXd true_res = (ap - b).colwise().norm();
    if ((true_res.array() <= target.array()).all()) return x;
    if (iters >= opts.max_iter) break;
  }
  throw NumericalError("cg_solve: tolerance not reached within " + std::to_string(opts.max_iter) +
                       " iterations");
}

// Diffusion --------------------------------------------------------------------------

namespace {

Matrix power_apply(const SparseMatrix& m, int t, const Matrix& p) {
  Matrix cur = p, next(p.rows(), p.cols());
  for (int s = 0; s < t; ++s) {
    spmm(m, cur, next);
    cur.swap(next);
  }
  return cur;
}

Matrix spectral_apply(const SpectralDecomposition& sd, double lambda, const Matrix& p) {
  Matrix coeffs = sd.eigvecs.transpose() * p;
  for (Eigen::Index i = 0; i < coeffs.rows(); ++i) coeffs.row(i) /= lambda * sd.eigvals[i] + 1.0;
  return sd.eigvecs * coeffs;
}

void check_rows(const DiffusionOperator& op, const DiffusionConfig& config, const Matrix& p) {
  const auto n = config.mode == DiffusionMode::kExactSpectral ? op.spectrum.eigvecs.rows()
                                                              : static_cast<Eigen::Index>(op.matrix.rows());
  if (p.rows() != n)
    throw std::invalid_argument("diffuse: features have " + std::to_string(p.rows()) +
                                " rows, operator has " + std::to_string(n));
}

}  // namespace

Matrix diffuse(const DiffusionOperator& op, const DiffusionConfig& config, const Matrix& p) {
  check_rows(op, config, p);
  switch (config.mode) {
    case DiffusionMode::kRandomWalk: return power_apply(op.matrix, config.t, p);
    case DiffusionMode::kExactSpectral: return spectral_apply(op.spectrum, config.lambda, p);
    case DiffusionMode::kExactCg:
      return cg_solve(op.matrix, config.lambda, p, CgOptions{config.cg_tol, config.cg_max_iter});
  }
  throw std::logic_error("unreachable");
}

Matrix diffuse_transpose(const DiffusionOperator& op, const DiffusionConfig& config,
                         const Matrix& p) {
  if (config.mode == DiffusionMode::kRandomWalk && op.matrix_t.rows() > 0) {
    check_rows(op, config, p);
    return power_apply(op.matrix_t, config.t, p);
  }
  // Every other operator is symmetric.
  return diffuse(op, config, p);
}

// Kernel bank ------------------------------------------------------------------------

std::size_t KernelBank::nodes() const {
  if (operators.empty()) return 0;
  const auto& op = operators.front();
  return config.mode == DiffusionMode::kExactSpectral
             ? static_cast<std::size_t>(op.spectrum.eigvecs.rows())
             : op.matrix.rows();
}

KernelBank build_kernel_bank(const NeighborLists& nb, std::vector<double> sigmas,
                             const DiffusionConfig& config, std::uint64_t seed) {
  if (sigmas.empty()) throw std::invalid_argument("kernel bank needs at least one sigma");
  config.validate();
  std::sort(sigmas.begin(), sigmas.end());
  KernelBank bank;
  bank.sigmas = sigmas;
  bank.config = config;
  bank.k = nb.k;
  bank.operators.resize(sigmas.size());
  const int m = std::min<int>(config.m, static_cast<int>(nb.size()));
  parallel_for(sigmas.size(), [&](std::size_t begin, std::size_t end) {
    for (std::size_t s = begin; s < end; ++s) {
      DiffusionOperator& op = bank.operators[s];
      op.sigma = sigmas[s];
      const SparseMatrix adj = build_adjacency(nb, sigmas[s]);
      switch (config.mode) {
        case DiffusionMode::kRandomWalk:
          if (config.propagation == Propagation::kSymNormalized) {
            op.matrix = propagation(adj, LaplacianKind::kSym);
          } else {
            op.matrix = propagation(adj, LaplacianKind::kRw);
            op.matrix_t = op.matrix.transpose();
          }
          break;
        case DiffusionMode::kExactCg:
          op.matrix = laplacian(adj, LaplacianKind::kSym);
          break;
        case DiffusionMode::kExactSpectral:
          op.spectrum = lanczos_eigs(laplacian(adj, LaplacianKind::kSym), m, seed + s);
          break;
      }
    }
  }, 1);
  return bank;
}

KernelBank build_kernel_bank(const Matrix& coords, std::vector<double> sigmas, int k,
                             const DiffusionConfig& config, std::uint64_t seed) {
  return build_kernel_bank(build_knn(coords, k), std::move(sigmas), config, seed);
}

Matrix apply_bank(const KernelBank& bank, const Matrix& p) {
  if (bank.operators.empty()) throw std::invalid_argument("apply_bank: empty bank");
  if (static_cast<std::size_t>(p.rows()) != bank.nodes())
    throw std::invalid_argument("apply_bank: features have " + std::to_string(p.rows()) +
                                " rows, bank has " + std::to_string(bank.nodes()));
  const auto f = p.cols();
  Matrix out(p.rows(), f * static_cast<Eigen::Index>(bank.size()));
  for (std::size_t s = 0; s < bank.size(); ++s)
    out.middleCols(static_cast<Eigen::Index>(s) * f, f) = diffuse(bank.operators[s], bank.config, p);
  return out;
}

Matrix apply_bank_transpose(const KernelBank& bank, const Matrix& g) {
  const auto s_count = static_cast<Eigen::Index>(bank.size());
  if (s_count == 0 || g.cols() % s_count != 0)
    throw std::invalid_argument("apply_bank_transpose: width is not a multiple of the bank size");
  const auto f = g.cols() / s_count;
  Matrix out = Matrix::Zero(g.rows(), f);
  for (Eigen::Index s = 0; s < s_count; ++s) {
    const Matrix block = g.middleCols(s * f, f);
    out += diffuse_transpose(bank.operators[static_cast<std::size_t>(s)], bank.config, block);
  }
  return out;
}

}  // namespace mkdiff
