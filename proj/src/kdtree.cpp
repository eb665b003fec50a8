#include "kdtree.hpp"

#include <algorithm>
#include <numeric>

namespace mkdiff::detail {

KdTree::KdTree(const Matrix& points, int leaf_size) : pts_(points), leaf_size_(leaf_size) {
  perm_.resize(static_cast<std::size_t>(points.rows()));
  std::iota(perm_.begin(), perm_.end(), 0);
  nodes_.reserve(2 * perm_.size() / static_cast<std::size_t>(leaf_size_) + 1);
  if (!perm_.empty()) build(0, static_cast<std::int32_t>(perm_.size()), 0);
}

std::int32_t KdTree::build(std::int32_t begin, std::int32_t end, int depth) {
  const auto id = static_cast<std::int32_t>(nodes_.size());
  nodes_.push_back(Node{begin, end});
  if (end - begin <= leaf_size_) return id;

  // Split on the axis of largest spread.
  Eigen::RowVector3d lo = pts_.row(perm_[begin]), hi = lo;
  for (auto i = begin; i < end; ++i) {
    lo = lo.cwiseMin(pts_.row(perm_[i]));
    hi = hi.cwiseMax(pts_.row(perm_[i]));
  }
  int axis = 0;
  (hi - lo).maxCoeff(&axis);
  if (hi[axis] - lo[axis] <= 0.0) return id;  // all points coincide

  const auto mid = begin + (end - begin) / 2;
  std::nth_element(perm_.begin() + begin, perm_.begin() + mid, perm_.begin() + end,
                   [&](std::int32_t a, std::int32_t b) { return pts_(a, axis) < pts_(b, axis); });
  const double split = pts_(perm_[mid], axis);
  nodes_[id].axis = axis;
  nodes_[id].split = split;
  (void)depth;
  const auto l = build(begin, mid, depth + 1);
  const auto r = build(mid, end, depth + 1);
  nodes_[id].left = l;
  nodes_[id].right = r;
  return id;
}

double KdTree::sq_dist(std::size_t a, std::size_t b) const {
  const double dx = pts_(a, 0) - pts_(b, 0);
  const double dy = pts_(a, 1) - pts_(b, 1);
  const double dz = pts_(a, 2) - pts_(b, 2);
  return dx * dx + dy * dy + dz * dz;
}

void KdTree::knn(std::size_t query, int k, std::vector<std::pair<double, std::int32_t>>& out) const {
  out.clear();
  const auto kk = static_cast<std::size_t>(k);
  // `out` is kept sorted; the last entry is the current worst.
  auto offer = [&](double d, std::int32_t idx) {
    const std::pair<double, std::int32_t> cand{d, idx};
    if (out.size() == kk && !(cand < out.back())) return;
    out.insert(std::upper_bound(out.begin(), out.end(), cand), cand);
    if (out.size() > kk) out.pop_back();
  };
  auto bound = [&]() {
    return out.size() < kk ? std::numeric_limits<double>::infinity() : out.back().first;
  };

  std::vector<std::pair<std::int32_t, double>> stack;  // node, squared plane distance
  stack.emplace_back(0, 0.0);
  const auto qrow = pts_.row(static_cast<Eigen::Index>(query));
  while (!stack.empty()) {
    auto [id, plane] = stack.back();
    stack.pop_back();
    // Equal distances may still win on index, so only prune strictly.
    if (plane > bound()) continue;
    const Node& node = nodes_[static_cast<std::size_t>(id)];
    if (node.left < 0) {
      for (auto i = node.begin; i < node.end; ++i) {
        const auto p = perm_[static_cast<std::size_t>(i)];
        if (static_cast<std::size_t>(p) == query) continue;
        offer(sq_dist(query, static_cast<std::size_t>(p)), p);
      }
      continue;
    }
    const double diff = qrow[node.axis] - node.split;
    const auto near = diff < 0 ? node.left : node.right;
    const auto far = diff < 0 ? node.right : node.left;
    stack.emplace_back(far, std::max(plane, diff * diff));
    stack.emplace_back(near, plane);
  }
}

}  // namespace mkdiff::detail
