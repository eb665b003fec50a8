#pragma once

#include "mkdiff/types.hpp"

#include <cstdint>
#include <utility>
#include <vector>

namespace mkdiff::detail {

/// Static 3-d tree with leaf buckets for exact k-nearest-neighbour queries.
class KdTree {
 public:
  explicit KdTree(const Matrix& points, int leaf_size = 12);

  /// The k nearest points to point `query` (itself excluded), ordered by
  /// (squared distance, index). Output pairs are (squared distance, index).
  void knn(std::size_t query, int k, std::vector<std::pair<double, std::int32_t>>& out) const;

 private:
  struct Node {
    std::int32_t begin, end;  // range in perm_
    std::int32_t left = -1, right = -1;
    int axis = -1;
    double split = 0.0;
  };

  std::int32_t build(std::int32_t begin, std::int32_t end, int depth);
  double sq_dist(std::size_t a, std::size_t b) const;

  const Matrix& pts_;
  int leaf_size_;
  std::vector<std::int32_t> perm_;
  std::vector<Node> nodes_;
};

}  // namespace mkdiff::detail
