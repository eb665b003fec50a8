#include "mkdiff/net.hpp"
#include "oracles.hpp"

#include <doctest.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <random>
#include <numeric>

using namespace mkdiff;

namespace {

/// Independent closed form: per layer two 1x1 convs with biases and two
/// affine norms, then the head conv.
std::size_t count_formula(int layers, int s, int in, int h, int out) {
  std::size_t total = 0;
  int c = in;
  for (int l = 0; l < layers; ++l) {
    total += static_cast<std::size_t>(s * c * h + h + 2 * h + h * h + h + 2 * h);
    c = h;
  }
  return total + static_cast<std::size_t>(h * out + out);
}

Architecture small_arch(Head head) {
  Architecture a;
  a.n_layers = 2;
  a.hidden_width = 5;
  a.n_kernels = 2;
  a.out_dim = head == Head::kDescriptor ? 4 : 3;
  a.head = head;
  return a;
}

KernelBank small_bank(const Matrix& x, std::vector<double> sigmas = {0.3, 0.8}) {
  return build_kernel_bank(x, std::move(sigmas), 4, DiffusionConfig{});
}

}  // namespace

TEST_CASE("parameter count") {
  Architecture a;
  CHECK(a.parameter_count() == count_formula(4, 8, 1, 64, 16));
  CHECK(a.parameter_count() == 117776);
  CHECK(init_params(a, 1).parameter_count() == a.parameter_count());
  Architecture seg = a;
  seg.head = Head::kSegmentation;
  seg.out_dim = 15;
  seg.hidden_width = 32;
  seg.n_kernels = 1;
  CHECK(seg.parameter_count() == count_formula(4, 1, 1, 32, 15));
}

TEST_CASE("initialization") {
  Architecture a;
  const auto p = init_params(a, 3);
  const auto q = init_params(a, 3);
  CHECK(p.layers[1].w1 == q.layers[1].w1);
  CHECK(p.w_out == q.w_out);
  CHECK(init_params(a, 4).w_out != p.w_out);
  for (const auto& l : p.layers) {
    CHECK(l.b1.isZero());
    CHECK(l.b2.isZero());
    CHECK(l.shift1.isZero());
    CHECK((l.scale2.array() == 1.0).all());
    const double bound = std::sqrt(6.0 / static_cast<double>(l.w1.rows()));
    CHECK(l.w1.cwiseAbs().maxCoeff() <= bound);
  }
  CHECK(p.b_out.isZero());
  CHECK(p.all_finite());
  const auto names = p.tensors();
  CHECK(names.front().name == "layer0.w1");
  CHECK(names.back().name == "head.b");
}

TEST_CASE("instance norm") {
  Matrix x{{1.0}, {-1.0}};
  const Matrix y = instance_norm_forward(x, Vector::Ones(1), Vector::Zero(1), 1e-5);
  CHECK(y(0, 0) == doctest::Approx(0.999995).epsilon(1e-7));
  CHECK(y(1, 0) == doctest::Approx(-0.999995).epsilon(1e-7));

  const Matrix c = Matrix::Constant(6, 2, 3.5);
  CHECK(instance_norm_forward(c, Vector::Ones(2), Vector::Zero(2), 1e-5).isZero());

  const Matrix r = oracle::random_cloud(500, 8, 4.0);
  const Matrix z = instance_norm_forward(r, Vector::Ones(3), Vector::Zero(3), 1e-5);
  for (int j = 0; j < 3; ++j) {
    CHECK(std::abs(z.col(j).mean()) < 1e-10);
    CHECK(std::abs(z.col(j).squaredNorm() / 500.0 - 1.0) < 1e-4);
  }
}

TEST_CASE("dropout") {
  const Matrix x = oracle::random_cloud(100, 1);
  CHECK(dropout(x, 0.5, 1, Mode::kEval) == x);
  CHECK(dropout(x, 0.0, 1, Mode::kTrain) == x);
  const Matrix big = Matrix::Ones(1000, 1000);
  Matrix mask;
  const Matrix y = dropout(big, 0.2, 7, Mode::kTrain, &mask);
  const double zeros = static_cast<double>((y.array() == 0.0).count()) / 1e6;
  CHECK(std::abs(zeros - 0.2) < 0.002);
  CHECK(((y.array() == 0.0) || (y.array() == 1.25)).all());
  CHECK(dropout(big, 0.2, 7, Mode::kTrain) == y);
}

TEST_CASE("forward contracts") {
  const Matrix x = oracle::random_cloud(40, 5);
  const auto bank = small_bank(x);
  const auto arch = small_arch(Head::kDescriptor);
  const auto p = oracle::perturbed_params(arch, 1);
  const auto r = forward(arch, p, bank, ones_features(40), Mode::kEval);
  REQUIRE(r.y.rows() == 40);
  REQUIRE(r.y.cols() == 4);
  CHECK((r.y.rowwise().norm().array() - 1.0).abs().maxCoeff() < 1e-6);
  CHECK(forward(arch, p, bank, ones_features(40), Mode::kEval).y == r.y);
  CHECK_THROWS(forward(arch, p, bank, ones_features(39), Mode::kEval));
}

TEST_CASE("literal random-walk propagation flattens featureless input") {
  const Matrix x = oracle::random_cloud(50, 6);
  DiffusionConfig cfg;
  cfg.propagation = Propagation::kRwNormalized;
  const auto bank = build_kernel_bank(x, {0.3, 0.8}, 5, cfg);
  const Matrix d = apply_bank(bank, ones_features(50));
  CHECK((d.array() - 1.0).abs().maxCoeff() < 1e-12);
  // Row-stochastic averaging never widens a channel's range.
  const auto arch = small_arch(Head::kSegmentation);
  const auto r = forward(arch, oracle::perturbed_params(arch, 2), bank, ones_features(50), Mode::kEval);
  for (const auto& layer : r.cache.layers) {
    const Eigen::Index c = layer.input.cols();
    for (Eigen::Index j = 0; j < layer.diffused.cols(); ++j) {
      const auto in = layer.input.col(j % c);
      const auto out = layer.diffused.col(j);
      CHECK(out.maxCoeff() - out.minCoeff() <= in.maxCoeff() - in.minCoeff() + 1e-12);
    }
  }
}

TEST_CASE("permutation equivariance") {
  const Matrix x = oracle::random_cloud(60, 9);
  const auto arch = small_arch(Head::kSegmentation);
  const auto p = oracle::perturbed_params(arch, 4);
  const auto y = forward(arch, p, small_bank(x), ones_features(60), Mode::kEval).y;
  std::mt19937_64 rng(1);
  for (int rep = 0; rep < 5; ++rep) {
    std::vector<int> perm(60);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    const Matrix xp = oracle::permute_rows(x, perm);
    const auto yp = forward(arch, p, small_bank(xp), ones_features(60), Mode::kEval).y;
    CHECK((yp - oracle::permute_rows(y, perm)).cwiseAbs().maxCoeff() < 1e-10);
  }
}

TEST_CASE("descriptor gradients match finite differences") {
  const Matrix x = oracle::random_cloud(12, 21);
  const auto bank = small_bank(x);
  const auto arch = small_arch(Head::kDescriptor);
  const auto params = oracle::perturbed_params(arch, 5);
  const Matrix in = ones_features(12);
  const std::vector<std::array<int, 3>> triplets = {{0, 1, 2}, {3, 4, 5}, {6, 7, 8}, {9, 10, 11}, {2, 5, 7}};
  auto loss_and_dy = [&](const NetworkParams& p, Matrix* dy, ForwardCache* cache) {
    auto r = forward(arch, p, bank, in, Mode::kTrain, 17);
    double loss = 0.0;
    if (dy) *dy = Matrix::Zero(r.y.rows(), r.y.cols());
    for (const auto& t : triplets) {
      const auto l = triplet_hinge_loss(r.y.row(t[0]).transpose(), r.y.row(t[1]).transpose(),
                                        r.y.row(t[2]).transpose(), 1.0);
      loss += l.loss;
      if (dy) {
        dy->row(t[0]) += l.grad_anchor.transpose();
        dy->row(t[1]) += l.grad_pos.transpose();
        dy->row(t[2]) += l.grad_neg.transpose();
      }
    }
    if (cache) *cache = std::move(r.cache);
    return loss;
  };
  Matrix dy;
  ForwardCache cache;
  loss_and_dy(params, &dy, &cache);
  Matrix dx;
  const auto g = backward(arch, params, bank, cache, dy, &dx);
  const auto num = oracle::numeric_gradient(params, [&](const NetworkParams& p) { return loss_and_dy(p, nullptr, nullptr); });
  std::string worst;
  const double err = oracle::gradient_rel_error(g, num, &worst);
  INFO("worst tensor " << worst);
  CHECK(err < 1e-4);
  CHECK(dx.rows() == 12);
}

TEST_CASE("segmentation gradients match finite differences") {
  const Matrix x = oracle::random_cloud(12, 22);
  const auto bank = small_bank(x);
  const auto arch = small_arch(Head::kSegmentation);
  const auto params = oracle::perturbed_params(arch, 6);
  const std::vector<int> labels = {0, 1, 2, 0, 1, 2, 0, 0, 1, 2, 2, 1};
  const Vector w = label_weights(labels, 3);
  Matrix in(12, 1);
  for (int i = 0; i < 12; ++i) in(i, 0) = 0.5 + 0.1 * i;
  auto loss = [&](const NetworkParams& p) {
    return weighted_ce_loss(forward(arch, p, bank, in, Mode::kTrain, 3).y, labels, w).loss;
  };
  auto r = forward(arch, params, bank, in, Mode::kTrain, 3);
  const auto ce = weighted_ce_loss(r.y, labels, w);
  Matrix dx;
  const auto g = backward(arch, params, bank, r.cache, ce.grad, &dx);
  std::string worst;
  const double err = oracle::gradient_rel_error(g, oracle::numeric_gradient(params, loss), &worst);
  INFO("worst tensor " << worst);
  CHECK(err < 1e-4);

  // Input gradient.
  const double h = 1e-5;
  for (int i = 0; i < 12; i += 5) {
    Matrix up = in, down = in;
    up(i, 0) += h;
    down(i, 0) -= h;
    const double fd = (weighted_ce_loss(forward(arch, params, bank, up, Mode::kTrain, 3).y, labels, w).loss -
                       weighted_ce_loss(forward(arch, params, bank, down, Mode::kTrain, 3).y, labels, w).loss) /
                      (2 * h);
    CHECK(dx(i, 0) == doctest::Approx(fd).epsilon(1e-5));
  }

  const auto zero = backward(arch, params, bank, r.cache, Matrix::Zero(12, 3));
  for (const auto& t : zero.tensors())
    for (Eigen::Index i = 0; i < t.size(); ++i) CHECK(t.data[i] == 0.0);
}

TEST_CASE("triplet hinge loss") {
  Vector a(2), p(2), n(2);
  a << 0, 0;
  p << 0.5, 0;
  n << 0, 0.6;
  CHECK(triplet_hinge_loss(a, p, n, 0.2).loss == doctest::Approx(0.1));
  CHECK(triplet_hinge_loss(a, a, n.normalized(), 0.2).loss == 0.0);
  const auto zero = triplet_hinge_loss(a, a, Vector::Unit(2, 0), 0.2);
  CHECK(zero.grad_anchor.isZero());

  std::mt19937_64 rng(3);
  std::normal_distribution<double> g;
  for (int rep = 0; rep < 20; ++rep) {
    Vector v[3];
    for (auto& e : v) e = Vector::NullaryExpr(6, [&] { return g(rng); });
    const auto l = triplet_hinge_loss(v[0], v[1], v[2], 2.0);
    if (l.loss < 1e-3) continue;
    const Vector* grads[3] = {&l.grad_anchor, &l.grad_pos, &l.grad_neg};
    for (int which = 0; which < 3; ++which)
      for (int i = 0; i < 6; ++i) {
        Vector up[3] = {v[0], v[1], v[2]}, down[3] = {v[0], v[1], v[2]};
        up[which][i] += 1e-6;
        down[which][i] -= 1e-6;
        const double fd = (triplet_hinge_loss(up[0], up[1], up[2], 2.0).loss -
                           triplet_hinge_loss(down[0], down[1], down[2], 2.0).loss) /
                          2e-6;
        CHECK(std::abs((*grads[which])[i] - fd) <= 1e-6 * std::max(1.0, std::abs(fd)));
      }
  }
}

TEST_CASE("weighted cross entropy") {
  const Matrix uniform = Matrix::Zero(4, 2);
  const std::vector<int> labels = {0, 1, 1, 0};
  const auto l = weighted_ce_loss(uniform, labels, Vector::Ones(2));
  CHECK(l.loss == doctest::Approx(std::log(2.0)).epsilon(1e-14));
  const auto l2 = weighted_ce_loss(uniform, labels, Vector::Constant(2, 2.0));
  CHECK(l2.loss == 2 * l.loss);
  CHECK(l2.grad == 2 * l.grad);
  Matrix confident = Matrix::Zero(2, 2);
  confident(0, 0) = 100;
  confident(1, 1) = 100;
  CHECK(weighted_ce_loss(confident, {0, 1}, Vector::Ones(2)).loss < 1e-40);
  CHECK_THROWS(weighted_ce_loss(uniform, {0, 1, 2, 0}, Vector::Ones(2)));
  const Matrix s = softmax_rows(oracle::random_cloud(5, 2, 50.0));
  CHECK((s.rowwise().sum().array() - 1.0).abs().maxCoeff() < 1e-14);
}

TEST_CASE("label weights") {
  CHECK(label_weights({0, 1, 2, 0, 1, 2}, 3).isApprox(Vector::Ones(3)));
  std::vector<int> skew(10, 0);
  skew[8] = skew[9] = 1;
  const Vector w = label_weights(skew, 2);
  CHECK(w[0] == doctest::Approx(2.0 / 3.0));
  CHECK(w[1] == doctest::Approx(4.0 / 3.0));
  CHECK(w.mean() == doctest::Approx(1.0));
  std::vector<int> bigger;
  for (int r = 0; r < 7; ++r) bigger.insert(bigger.end(), skew.begin(), skew.end());
  CHECK(label_weights(bigger, 2).isApprox(w, 1e-14));
  CHECK_THROWS(label_weights({0, 0}, 2));
}

TEST_CASE("adam") {
  Architecture a = small_arch(Head::kDescriptor);
  NetworkParams p = init_params(a, 1);
  const NetworkParams before = p;
  OptimizerState st = make_adam(p, 1e-4);
  adam_step(p, p.zeros_like(), st);
  CHECK(st.step == 1);
  CHECK(p.w_out == before.w_out);

  for (double g : {1.0, 1000.0, -0.001}) {
    NetworkParams q = before;
    OptimizerState s = make_adam(q, 1e-4);
    NetworkParams grad = q.zeros_like();
    grad.b_out[0] = g;
    adam_step(q, grad, s);
    const double delta = q.b_out[0] - before.b_out[0];
    CHECK(std::abs(delta + (g > 0 ? 1e-4 : -1e-4)) < 1e-4 * 1e-3);
  }

  NetworkParams bad = p.zeros_like();
  bad.w_out(0, 0) = std::nan("");
  const NetworkParams keep = p;
  CHECK_THROWS_AS(adam_step(p, bad, st), NumericalError);
  CHECK(p.w_out == keep.w_out);
  CHECK(st.step == 1);
}
