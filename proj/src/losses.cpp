#include "mkdiff/net.hpp"

#include <cmath>

namespace mkdiff {

TripletLoss triplet_hinge_loss(const Eigen::Ref<const Vector>& anchor, const Eigen::Ref<const Vector>& pos,
                               const Eigen::Ref<const Vector>& neg, double margin) {
  if (anchor.size() != pos.size() || anchor.size() != neg.size())
    throw std::invalid_argument("triplet vectors differ in length");
  TripletLoss out;
  out.grad_anchor = Vector::Zero(anchor.size());
  out.grad_pos = Vector::Zero(anchor.size());
  out.grad_neg = Vector::Zero(anchor.size());
  const Vector ap = anchor - pos;
  const Vector an = anchor - neg;
  const double d_ap = ap.norm();
  const double d_an = an.norm();
  const double value = d_ap - d_an + margin;
  if (!(value > 0.0)) return out;
  out.loss = value;
  if (d_ap > 0.0) {
    out.grad_anchor += ap / d_ap;
    out.grad_pos -= ap / d_ap;
  }
  if (d_an > 0.0) {
    out.grad_anchor -= an / d_an;
    out.grad_neg += an / d_an;
  }
  return out;
}

Matrix softmax_rows(const Matrix& logits) {
  Matrix p = logits.colwise() - logits.rowwise().maxCoeff();
  p = p.array().exp();
  p.array().colwise() /= p.rowwise().sum().array();
  return p;
}

CrossEntropyLoss weighted_ce_loss(const Matrix& logits, const std::vector<int>& labels,
                                  const Vector& class_weights) {
  const auto n = logits.rows();
  const auto c = logits.cols();
  if (static_cast<Eigen::Index>(labels.size()) != n)
    throw std::invalid_argument("label count does not match logits");
  if (class_weights.size() != c) throw std::invalid_argument("class weight count does not match logits");
  CrossEntropyLoss out;
  // log-softmax with max subtraction.
  const Eigen::VectorXd mx = logits.rowwise().maxCoeff();
  const Matrix shifted = logits.colwise() - mx;
  const Eigen::VectorXd lse = shifted.array().exp().rowwise().sum().log();
  out.grad = shifted.array().exp().colwise() / lse.array().exp();
  double total = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= c) throw std::invalid_argument("label " + std::to_string(y) + " out of range");
    const double w = class_weights[y];
    total += w * (lse[i] - shifted(i, y));
    out.grad(i, y) -= 1.0;
    out.grad.row(i) *= w / static_cast<double>(n);
  }
  out.loss = total / static_cast<double>(n);
  return out;
}

Vector label_weights(const std::vector<int>& labels, int n_classes) {
  if (n_classes < 1) throw std::invalid_argument("need at least one class");
  std::vector<std::size_t> count(static_cast<std::size_t>(n_classes), 0);
  for (int l : labels) {
    if (l < 0 || l >= n_classes) throw std::invalid_argument("label " + std::to_string(l) + " out of range");
    ++count[static_cast<std::size_t>(l)];
  }
  Vector w(n_classes);
  const double total = static_cast<double>(labels.size());
  for (int c = 0; c < n_classes; ++c) {
    if (count[static_cast<std::size_t>(c)] == 0)
      throw std::invalid_argument("class " + std::to_string(c) + " never occurs in the training labels");
    w[c] = std::sqrt(total / static_cast<double>(count[static_cast<std::size_t>(c)]));
  }
  return w / w.mean();
}

}  // namespace mkdiff
