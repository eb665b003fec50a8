#include "mkdiff/spgraph.hpp"
#include "mkdiff/parallel.hpp"

#include "kdtree.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <queue>

namespace mkdiff {

// SparseMatrix ------------------------------------------------------------------

SparseMatrix::SparseMatrix(std::size_t n) : n_(n), row_ptr_(n + 1, 0) {}

SparseMatrix SparseMatrix::from_triplets(std::size_t n, std::vector<Triplet> triplets) {
  for (const auto& t : triplets)
    if (t.row < 0 || t.col < 0 || static_cast<std::size_t>(t.row) >= n ||
        static_cast<std::size_t>(t.col) >= n)
      throw std::out_of_range("sparse triplet index out of range");
  std::sort(triplets.begin(), triplets.end(), [](const Triplet& a, const Triplet& b) {
    return a.row != b.row ? a.row < b.row : a.col < b.col;
  });
  SparseMatrix m(n);
  m.col_idx_.reserve(triplets.size());
  m.values_.reserve(triplets.size());
  std::size_t i = 0;
  for (std::size_t r = 0; r < n; ++r) {
    while (i < triplets.size() && static_cast<std::size_t>(triplets[i].row) == r) {
      const auto col = triplets[i].col;
      double v = 0.0;
      while (i < triplets.size() && static_cast<std::size_t>(triplets[i].row) == r &&
             triplets[i].col == col)
        v += triplets[i++].value;
      if (v != 0.0) {
        m.col_idx_.push_back(col);
        m.values_.push_back(v);
      }
    }
    m.row_ptr_[r + 1] = static_cast<std::int64_t>(m.values_.size());
  }
  return m;
}

SparseMatrix SparseMatrix::identity(std::size_t n) {
  SparseMatrix m(n);
  m.col_idx_.resize(n);
  m.values_.assign(n, 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    m.col_idx_[i] = static_cast<std::int32_t>(i);
    m.row_ptr_[i + 1] = static_cast<std::int64_t>(i + 1);
  }
  return m;
}

double SparseMatrix::coeff(std::size_t i, std::size_t j) const {
  const auto first = col_idx_.begin() + row_ptr_[i];
  const auto last = col_idx_.begin() + row_ptr_[i + 1];
  auto it = std::lower_bound(first, last, static_cast<std::int32_t>(j));
  if (it == last || static_cast<std::size_t>(*it) != j) return 0.0;
  return values_[static_cast<std::size_t>(it - col_idx_.begin())];
}

SparseMatrix SparseMatrix::transpose() const {
  SparseMatrix t(n_);
  t.col_idx_.resize(nnz());
  t.values_.resize(nnz());
  for (auto c : col_idx_) ++t.row_ptr_[static_cast<std::size_t>(c) + 1];
  for (std::size_t r = 0; r < n_; ++r) t.row_ptr_[r + 1] += t.row_ptr_[r];
  std::vector<std::int64_t> cursor(t.row_ptr_.begin(), t.row_ptr_.end() - 1);
  // Rows are visited in order, so each transposed row fills with increasing columns.
  for (std::size_t r = 0; r < n_; ++r)
    for (auto p = row_ptr_[r]; p < row_ptr_[r + 1]; ++p) {
      const auto c = static_cast<std::size_t>(col_idx_[static_cast<std::size_t>(p)]);
      const auto dst = static_cast<std::size_t>(cursor[c]++);
      t.col_idx_[dst] = static_cast<std::int32_t>(r);
      t.values_[dst] = values_[static_cast<std::size_t>(p)];
    }
  return t;
}

bool SparseMatrix::is_symmetric(double tol) const {
  for (std::size_t r = 0; r < n_; ++r)
    for (auto p = row_ptr_[r]; p < row_ptr_[r + 1]; ++p) {
      const auto c = static_cast<std::size_t>(col_idx_[static_cast<std::size_t>(p)]);
      if (std::abs(values_[static_cast<std::size_t>(p)] - coeff(c, r)) > tol) return false;
    }
  return true;
}

Matrix SparseMatrix::to_dense() const {
  const auto n = static_cast<Eigen::Index>(n_);
  Matrix d = Matrix::Zero(n, n);
  for (std::size_t r = 0; r < n_; ++r)
    for (auto p = row_ptr_[r]; p < row_ptr_[r + 1]; ++p)
      d(static_cast<Eigen::Index>(r), col_idx_[static_cast<std::size_t>(p)]) =
          values_[static_cast<std::size_t>(p)];
  return d;
}

// kNN ---------------------------------------------------------------------------

namespace {

void check_knn_args(const Matrix& coords, int k) {
  if (coords.cols() != 3) throw std::invalid_argument("kNN expects n x 3 coordinates");
  if (k < 1) throw std::invalid_argument("k must be >= 1");
  if (static_cast<Eigen::Index>(k) >= coords.rows())
    throw std::invalid_argument("k = " + std::to_string(k) + " must be smaller than n = " +
                                std::to_string(coords.rows()));
}

}  // namespace

NeighborLists build_knn(const Matrix& coords, int k) {
  check_knn_args(coords, k);
  const auto n = static_cast<std::size_t>(coords.rows());
  NeighborLists nb;
  nb.k = k;
  nb.indices.resize(coords.rows(), k);
  nb.dists.resize(coords.rows(), k);
  const detail::KdTree tree(coords);
  parallel_for(n, [&](std::size_t begin, std::size_t end) {
    std::vector<std::pair<double, std::int32_t>> found;
    for (std::size_t i = begin; i < end; ++i) {
      tree.knn(i, k, found);
      for (int j = 0; j < k; ++j) {
        nb.indices(static_cast<Eigen::Index>(i), j) = found[static_cast<std::size_t>(j)].second;
        nb.dists(static_cast<Eigen::Index>(i), j) = std::sqrt(found[static_cast<std::size_t>(j)].first);
      }
    }
  });
  return nb;
}

NeighborLists build_knn_brute_force(const Matrix& coords, int k) {
  check_knn_args(coords, k);
  const auto n = coords.rows();
  NeighborLists nb;
  nb.k = k;
  nb.indices.resize(n, k);
  nb.dists.resize(n, k);
  std::vector<std::pair<double, std::int32_t>> all;
  for (Eigen::Index i = 0; i < n; ++i) {
    all.clear();
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j == i) continue;
      const double dx = coords(i, 0) - coords(j, 0);
      const double dy = coords(i, 1) - coords(j, 1);
      const double dz = coords(i, 2) - coords(j, 2);
      all.emplace_back(dx * dx + dy * dy + dz * dz, static_cast<std::int32_t>(j));
    }
    std::sort(all.begin(), all.end());
    for (int j = 0; j < k; ++j) {
      nb.indices(i, j) = all[static_cast<std::size_t>(j)].second;
      nb.dists(i, j) = std::sqrt(all[static_cast<std::size_t>(j)].first);
    }
  }
  return nb;
}

// Adjacency and Laplacians ----------------------------------------------------------

SparseMatrix build_adjacency(const NeighborLists& nb, double sigma) {
  if (!(sigma > 0.0)) throw std::invalid_argument("sigma must be > 0");
  const auto n = nb.size();
  const double inv = 1.0 / (2.0 * sigma * sigma);
  std::vector<SparseMatrix::Triplet> trip;
  trip.reserve(2 * n * static_cast<std::size_t>(nb.k));
  for (std::size_t i = 0; i < n; ++i)
    for (int j = 0; j < nb.k; ++j) {
      const auto col = nb.indices(static_cast<Eigen::Index>(i), j);
      const double d = nb.dists(static_cast<Eigen::Index>(i), j);
      // Both directions are emitted; the max below symmetrizes.
      const double w = std::exp(-d * d * inv);
      trip.push_back({static_cast<std::int32_t>(i), col, w});
      trip.push_back({col, static_cast<std::int32_t>(i), w});
    }
  std::sort(trip.begin(), trip.end(), [](const auto& a, const auto& b) {
    return a.row != b.row ? a.row < b.row : a.col < b.col;
  });
  std::vector<SparseMatrix::Triplet> merged;
  merged.reserve(trip.size());
  for (const auto& t : trip) {
    if (!merged.empty() && merged.back().row == t.row && merged.back().col == t.col)
      merged.back().value = std::max(merged.back().value, t.value);
    else
      merged.push_back(t);
  }
  // Underflowed weights (far neighbours, tiny sigma) are dropped by from_triplets.
  return SparseMatrix::from_triplets(n, std::move(merged));
}

DegreeVector degrees(const SparseMatrix& a) {
  const auto n = a.rows();
  DegreeVector d(static_cast<Eigen::Index>(n));
  const auto& rp = a.row_ptr();
  const auto& v = a.values();
  for (std::size_t r = 0; r < n; ++r) {
    double s = 0.0;
    for (auto p = rp[r]; p < rp[r + 1]; ++p) s += v[static_cast<std::size_t>(p)];
    if (!(s > 0.0))
      throw NumericalError("node " + std::to_string(r) + " is isolated (zero degree)");
    d[static_cast<Eigen::Index>(r)] = s;
  }
  return d;
}

SparseMatrix propagation(const SparseMatrix& a, LaplacianKind kind) {
  const DegreeVector d = degrees(a);
  const auto n = a.rows();
  std::vector<SparseMatrix::Triplet> trip;
  trip.reserve(a.nnz());
  const auto& rp = a.row_ptr();
  const auto& ci = a.col_idx();
  const auto& v = a.values();
  for (std::size_t r = 0; r < n; ++r)
    for (auto p = rp[r]; p < rp[r + 1]; ++p) {
      const auto c = ci[static_cast<std::size_t>(p)];
      const double w = v[static_cast<std::size_t>(p)];
      const double dr = d[static_cast<Eigen::Index>(r)];
      const double val = kind == LaplacianKind::kSym ? w / (std::sqrt(dr) * std::sqrt(d[c])) : w / dr;
      trip.push_back({static_cast<std::int32_t>(r), c, val});
    }
  return SparseMatrix::from_triplets(n, std::move(trip));
}

SparseMatrix laplacian(const SparseMatrix& a, LaplacianKind kind) {
  const SparseMatrix prop = propagation(a, kind);
  const auto n = a.rows();
  std::vector<SparseMatrix::Triplet> trip;
  trip.reserve(prop.nnz() + n);
  for (std::size_t r = 0; r < n; ++r) trip.push_back({static_cast<std::int32_t>(r),
                                                      static_cast<std::int32_t>(r), 1.0});
  const auto& rp = prop.row_ptr();
  for (std::size_t r = 0; r < n; ++r)
    for (auto p = rp[r]; p < rp[r + 1]; ++p)
      trip.push_back({static_cast<std::int32_t>(r), prop.col_idx()[static_cast<std::size_t>(p)],
                      -prop.values()[static_cast<std::size_t>(p)]});
  return SparseMatrix::from_triplets(n, std::move(trip));
}

// Products ------------------------------------------------------------------------

void spmm_axpby(const SparseMatrix& m, const Matrix& x, double alpha, double beta, Matrix& out) {
  const auto n = static_cast<Eigen::Index>(m.rows());
  if (x.rows() != n)
    throw std::invalid_argument("spmm: matrix is " + std::to_string(n) + "x" + std::to_string(n) +
                                " but X has " + std::to_string(x.rows()) + " rows");
  if (out.rows() != n || out.cols() != x.cols()) {
    if (beta != 0.0) throw std::invalid_argument("spmm: output shape mismatch");
    out.resize(n, x.cols());
  }
  const auto c = x.cols();
  const auto& rp = m.row_ptr();
  const auto& ci = m.col_idx();
  const auto& v = m.values();
  parallel_for(m.rows(), [&](std::size_t begin, std::size_t end) {
    Eigen::RowVectorXd acc(c);
    for (std::size_t r = begin; r < end; ++r) {
      acc.setZero();
      for (auto p = rp[r]; p < rp[r + 1]; ++p)
        acc.noalias() += v[static_cast<std::size_t>(p)] * x.row(ci[static_cast<std::size_t>(p)]);
      const auto row = static_cast<Eigen::Index>(r);
      if (beta == 0.0)
        out.row(row) = alpha * acc;
      else
        out.row(row) = alpha * acc + beta * out.row(row);
    }
  }, 32);
}

void spmm(const SparseMatrix& m, const Matrix& x, Matrix& out) { spmm_axpby(m, x, 1.0, 0.0, out); }

Matrix spmm(const SparseMatrix& m, const Matrix& x) {
  Matrix out;
  spmm(m, x, out);
  return out;
}

// Geodesics -------------------------------------------------------------------------

std::vector<std::vector<std::pair<std::int32_t, double>>> symmetric_edges(const NeighborLists& nb) {
  const auto n = nb.size();
  std::vector<std::vector<std::pair<std::int32_t, double>>> adj(n);
  for (std::size_t i = 0; i < n; ++i)
    for (int j = 0; j < nb.k; ++j) {
      const auto c = nb.indices(static_cast<Eigen::Index>(i), j);
      const double d = nb.dists(static_cast<Eigen::Index>(i), j);
      adj[i].emplace_back(c, d);
      adj[static_cast<std::size_t>(c)].emplace_back(static_cast<std::int32_t>(i), d);
    }
  for (auto& row : adj) {
    std::sort(row.begin(), row.end());
    row.erase(std::unique(row.begin(), row.end(),
                          [](const auto& a, const auto& b) { return a.first == b.first; }),
              row.end());
  }
  return adj;
}

std::vector<double> graph_geodesics(const NeighborLists& nb, std::size_t source) {
  const auto n = nb.size();
  if (source >= n) throw std::out_of_range("geodesic source out of range");
  const auto adj = symmetric_edges(nb);
  std::vector<double> dist(n, std::numeric_limits<double>::infinity());
  using Item = std::pair<double, std::size_t>;
  std::priority_queue<Item, std::vector<Item>, std::greater<>> queue;
  dist[source] = 0.0;
  queue.emplace(0.0, source);
  while (!queue.empty()) {
    auto [d, u] = queue.top();
    queue.pop();
    if (d > dist[u]) continue;
    for (const auto& [v, w] : adj[u]) {
      const double nd = d + w;
      if (nd < dist[static_cast<std::size_t>(v)]) {
        dist[static_cast<std::size_t>(v)] = nd;
        queue.emplace(nd, static_cast<std::size_t>(v));
      }
    }
  }
  return dist;
}

}  // namespace mkdiff
