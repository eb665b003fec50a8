#include "mkdiff/net.hpp"
#include "mkdiff/rng.hpp"

#include <cmath>

namespace mkdiff {

std::string to_string(Head head) {
  return head == Head::kDescriptor ? "descriptor" : "segmentation";
}

Head parse_head(const std::string& name) {
  if (name == "descriptor") return Head::kDescriptor;
  if (name == "segmentation") return Head::kSegmentation;
  throw std::invalid_argument("unknown head '" + name + "'");
}

void Architecture::validate() const {
  if (n_layers < 1 || hidden_width < 1 || n_kernels < 1 || out_dim < 1 || input_dim < 1)
    throw std::invalid_argument("architecture dimensions must be >= 1");
  if (!(dropout_p >= 0.0 && dropout_p < 1.0)) throw std::invalid_argument("dropout must be in [0, 1)");
  if (!(norm_eps > 0.0)) throw std::invalid_argument("norm eps must be > 0");
}

std::size_t Architecture::parameter_count() const {
  const auto s = static_cast<std::size_t>(n_kernels);
  const auto h = static_cast<std::size_t>(hidden_width);
  std::size_t total = 0;
  for (int l = 0; l < n_layers; ++l) {
    const auto c_in = l == 0 ? static_cast<std::size_t>(input_dim) : h;
    total += s * c_in * h + h + 2 * h;  // conv 1 + norm 1
    total += h * h + h + 2 * h;         // conv 2 + norm 2
  }
  return total + h * static_cast<std::size_t>(out_dim) + static_cast<std::size_t>(out_dim);
}

// Parameters ----------------------------------------------------------------------

namespace {

template <typename Ref, typename Params, typename Fn>
void for_each_tensor(Params& p, Fn&& fn) {
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    auto& L = p.layers[l];
    const std::string pre = "layer" + std::to_string(l) + ".";
    fn(pre + "w1", L.w1.data(), L.w1.rows(), L.w1.cols());
    fn(pre + "b1", L.b1.data(), L.b1.size(), Eigen::Index{1});
    fn(pre + "scale1", L.scale1.data(), L.scale1.size(), Eigen::Index{1});
    fn(pre + "shift1", L.shift1.data(), L.shift1.size(), Eigen::Index{1});
    fn(pre + "w2", L.w2.data(), L.w2.rows(), L.w2.cols());
    fn(pre + "b2", L.b2.data(), L.b2.size(), Eigen::Index{1});
    fn(pre + "scale2", L.scale2.data(), L.scale2.size(), Eigen::Index{1});
    fn(pre + "shift2", L.shift2.data(), L.shift2.size(), Eigen::Index{1});
  }
  fn(std::string("head.w"), p.w_out.data(), p.w_out.rows(), p.w_out.cols());
  fn(std::string("head.b"), p.b_out.data(), p.b_out.size(), Eigen::Index{1});
}

}  // namespace

std::vector<NetworkParams::TensorRef> NetworkParams::tensors() {
  std::vector<TensorRef> out;
  for_each_tensor<TensorRef>(*this, [&](std::string name, double* d, Eigen::Index r, Eigen::Index c) {
    out.push_back({std::move(name), d, r, c});
  });
  return out;
}

std::vector<NetworkParams::ConstTensorRef> NetworkParams::tensors() const {
  std::vector<ConstTensorRef> out;
  for_each_tensor<ConstTensorRef>(*this, [&](std::string name, const double* d, Eigen::Index r,
                                             Eigen::Index c) { out.push_back({std::move(name), d, r, c}); });
  return out;
}

std::size_t NetworkParams::parameter_count() const {
  std::size_t total = 0;
  for (const auto& t : tensors()) total += static_cast<std::size_t>(t.size());
  return total;
}

bool NetworkParams::all_finite() const {
  for (const auto& t : tensors())
    for (Eigen::Index i = 0; i < t.size(); ++i)
      if (!std::isfinite(t.data[i])) return false;
  return true;
}

NetworkParams NetworkParams::zeros_like() const {
  NetworkParams z = *this;
  for (auto& t : z.tensors()) std::fill(t.data, t.data + t.size(), 0.0);
  return z;
}

void NetworkParams::add_scaled(const NetworkParams& other, double alpha) {
  auto mine = tensors();
  const auto theirs = other.tensors();
  if (mine.size() != theirs.size()) throw std::invalid_argument("parameter layout mismatch");
  for (std::size_t i = 0; i < mine.size(); ++i) {
    if (mine[i].size() != theirs[i].size()) throw std::invalid_argument("parameter shape mismatch");
    for (Eigen::Index j = 0; j < mine[i].size(); ++j) mine[i].data[j] += alpha * theirs[i].data[j];
  }
}

NetworkParams init_params(const Architecture& arch, std::uint64_t seed) {
  arch.validate();
  auto rng = make_rng(seed, "init");
  auto uniform = [&](Eigen::Index rows, Eigen::Index cols, Eigen::Index fan_in) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    std::uniform_real_distribution<double> u(-bound, bound);
    Matrix w(rows, cols);
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = u(rng);
    return w;
  };
  const Eigen::Index h = arch.hidden_width;
  NetworkParams p;
  for (int l = 0; l < arch.n_layers; ++l) {
    const Eigen::Index c_in = l == 0 ? arch.input_dim : h;
    const Eigen::Index fan = c_in * arch.n_kernels;
    LayerParams L;
    L.w1 = uniform(fan, h, fan);
    L.b1 = Vector::Zero(h);
    L.scale1 = Vector::Ones(h);
    L.shift1 = Vector::Zero(h);
    L.w2 = uniform(h, h, h);
    L.b2 = Vector::Zero(h);
    L.scale2 = Vector::Ones(h);
    L.shift2 = Vector::Zero(h);
    p.layers.push_back(std::move(L));
  }
  p.w_out = uniform(h, arch.out_dim, h);
  p.b_out = Vector::Zero(arch.out_dim);
  return p;
}

// Building blocks -------------------------------------------------------------------

Matrix instance_norm_forward(const Matrix& x, const Vector& scale, const Vector& shift, double eps,
                             InstanceNormCache* cache) {
  if (x.rows() < 1) throw std::invalid_argument("instance norm needs at least one node");
  if (scale.size() != x.cols() || shift.size() != x.cols())
    throw std::invalid_argument("instance norm affine has wrong width");
  const double n = static_cast<double>(x.rows());
  const Eigen::RowVectorXd mean = x.colwise().sum() / n;
  Matrix xhat = x.rowwise() - mean;
  const Eigen::RowVectorXd var = xhat.colwise().squaredNorm() / n;
  const Eigen::RowVectorXd inv_std = (var.array() + eps).rsqrt();
  xhat.array().rowwise() *= inv_std.array();
  Matrix y = (xhat.array().rowwise() * scale.transpose().array()).rowwise() + shift.transpose().array();
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->inv_std = inv_std.transpose();
  }
  return y;
}

Matrix instance_norm_backward(const Matrix& dy, const InstanceNormCache& cache, const Vector& scale,
                              Vector& dscale, Vector& dshift) {
  const double n = static_cast<double>(dy.rows());
  dshift += dy.colwise().sum().transpose();
  dscale += (dy.array() * cache.xhat.array()).colwise().sum().matrix().transpose();
  const Matrix dxhat = dy.array().rowwise() * scale.transpose().array();
  const Eigen::RowVectorXd sum_d = dxhat.colwise().sum();
  const Eigen::RowVectorXd sum_dx = (dxhat.array() * cache.xhat.array()).colwise().sum();
  Matrix dx = (n * dxhat).rowwise() - sum_d;
  dx.array() -= cache.xhat.array().rowwise() * sum_dx.array();
  dx.array().rowwise() *= (cache.inv_std.transpose().array() / n);
  return dx;
}

Matrix dropout(const Matrix& x, double p, std::uint64_t seed, Mode mode, Matrix* mask) {
  if (!(p >= 0.0 && p < 1.0)) throw std::invalid_argument("dropout p must be in [0, 1)");
  if (mode == Mode::kEval || p == 0.0) {
    if (mask) mask->resize(0, 0);
    return x;
  }
  auto rng = make_rng(seed, "dropout");
  std::bernoulli_distribution keep(1.0 - p);
  const double scale = 1.0 / (1.0 - p);
  Matrix m(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = keep(rng) ? scale : 0.0;
  Matrix y = x.cwiseProduct(m);
  if (mask) *mask = std::move(m);
  return y;
}

Matrix ones_features(std::size_t n, int dim) {
  return Matrix::Ones(static_cast<Eigen::Index>(n), dim);
}

// Network ---------------------------------------------------------------------------

namespace {

void check_layout(const Architecture& arch, const NetworkParams& params, const KernelBank& bank) {
  if (static_cast<int>(params.layers.size()) != arch.n_layers)
    throw std::invalid_argument("parameters do not match the architecture depth");
  if (static_cast<int>(bank.size()) != arch.n_kernels)
    throw std::invalid_argument("bank has " + std::to_string(bank.size()) + " kernels, network expects " +
                                std::to_string(arch.n_kernels));
}

Matrix relu(const Matrix& x) { return x.cwiseMax(0.0); }

}  // namespace

ForwardResult forward(const Architecture& arch, const NetworkParams& params, const KernelBank& bank,
                      const Matrix& x, Mode mode, std::uint64_t seed) {
  check_layout(arch, params, bank);
  if (static_cast<std::size_t>(x.rows()) != bank.nodes())
    throw std::invalid_argument("input has " + std::to_string(x.rows()) + " nodes, bank has " +
                                std::to_string(bank.nodes()));
  if (x.cols() != arch.input_dim) throw std::invalid_argument("input width does not match architecture");

  ForwardResult res;
  res.cache.mode = mode;
  Matrix h = x;
  for (int l = 0; l < arch.n_layers; ++l) {
    const LayerParams& P = params.layers[static_cast<std::size_t>(l)];
    LayerCache c;
    c.diffused = apply_bank(bank, h);
    Matrix z1 = c.diffused * P.w1;
    z1.rowwise() += P.b1.transpose();
    c.pre_act1 = instance_norm_forward(z1, P.scale1, P.shift1, arch.norm_eps, &c.norm1);
    c.dropped = dropout(relu(c.pre_act1), arch.dropout_p,
                        derive_seed(seed, "layer", {static_cast<std::uint64_t>(l)}), mode, &c.mask);
    Matrix z2 = c.dropped * P.w2;
    z2.rowwise() += P.b2.transpose();
    c.pre_act2 = instance_norm_forward(z2, P.scale2, P.shift2, arch.norm_eps, &c.norm2);
    c.input = std::move(h);
    h = relu(c.pre_act2);
    res.cache.layers.push_back(std::move(c));
  }
  Matrix out = h * params.w_out;
  out.rowwise() += params.b_out.transpose();
  res.cache.hidden = std::move(h);
  if (arch.head == Head::kDescriptor) {
    res.cache.row_norms = out.rowwise().norm();
    res.y = out;
    for (Eigen::Index i = 0; i < out.rows(); ++i) {
      const double nrm = res.cache.row_norms[i];
      if (nrm > 0.0) res.y.row(i) /= nrm;
    }
  } else {
    res.y = out;
  }
  res.cache.raw_out = std::move(out);
  if (!res.y.allFinite()) throw NumericalError("forward produced non-finite activations");
  return res;
}

Gradients backward(const Architecture& arch, const NetworkParams& params, const KernelBank& bank,
                   const ForwardCache& cache, const Matrix& dy, Matrix* dx) {
  check_layout(arch, params, bank);
  if (cache.layers.size() != params.layers.size())
    throw std::invalid_argument("cache does not match the network depth");
  if (dy.rows() != cache.raw_out.rows() || dy.cols() != cache.raw_out.cols())
    throw std::invalid_argument("output gradient shape does not match the forward pass");

  Gradients g = params.zeros_like();
  Matrix d_out = dy;
  if (arch.head == Head::kDescriptor) {
    // d(o / |o|) = (I - y y^T) / |o|.
    for (Eigen::Index i = 0; i < dy.rows(); ++i) {
      const double nrm = cache.row_norms[i];
      if (nrm <= 0.0) {
        d_out.row(i).setZero();
        continue;
      }
      const Eigen::RowVectorXd y = cache.raw_out.row(i) / nrm;
      d_out.row(i) = (dy.row(i) - y.dot(dy.row(i)) * y) / nrm;
    }
  }
  g.w_out.noalias() = cache.hidden.transpose() * d_out;
  g.b_out = d_out.colwise().sum().transpose();
  Matrix dh = d_out * params.w_out.transpose();

  for (int l = arch.n_layers - 1; l >= 0; --l) {
    const auto li = static_cast<std::size_t>(l);
    const LayerParams& P = params.layers[li];
    LayerParams& G = g.layers[li];
    const LayerCache& c = cache.layers[li];

    Matrix d = dh.cwiseProduct((c.pre_act2.array() > 0.0).cast<double>().matrix());
    Matrix dz2 = instance_norm_backward(d, c.norm2, P.scale2, G.scale2, G.shift2);
    G.w2.noalias() = c.dropped.transpose() * dz2;
    G.b2 = dz2.colwise().sum().transpose();
    d = dz2 * P.w2.transpose();
    if (c.mask.size() > 0) d = d.cwiseProduct(c.mask);
    d = d.cwiseProduct((c.pre_act1.array() > 0.0).cast<double>().matrix());
    Matrix dz1 = instance_norm_backward(d, c.norm1, P.scale1, G.scale1, G.shift1);
    G.w1.noalias() = c.diffused.transpose() * dz1;
    G.b1 = dz1.colwise().sum().transpose();
    if (l > 0 || dx) {
      const Matrix dd = dz1 * P.w1.transpose();
      dh = apply_bank_transpose(bank, dd);
    }
  }
  if (dx) *dx = std::move(dh);
  return g;
}

// Optimizer --------------------------------------------------------------------------

OptimizerState make_adam(const NetworkParams& params, double lr) {
  OptimizerState s;
  s.lr = lr;
  s.m = params.zeros_like();
  s.v = params.zeros_like();
  return s;
}

void adam_step(NetworkParams& params, const Gradients& grads, OptimizerState& state) {
  auto p = params.tensors();
  const auto g = grads.tensors();
  auto m = state.m.tensors();
  auto v = state.v.tensors();
  if (p.size() != g.size() || p.size() != m.size() || p.size() != v.size())
    throw std::invalid_argument("adam: tensor layout mismatch");
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i].size() != g[i].size() || p[i].size() != m[i].size())
      throw std::invalid_argument("adam: shape mismatch in " + p[i].name);
    for (Eigen::Index j = 0; j < g[i].size(); ++j)
      if (!std::isfinite(g[i].data[j]))
        throw NumericalError("adam: non-finite gradient in " + g[i].name);
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < p.size(); ++i)
    for (Eigen::Index j = 0; j < p[i].size(); ++j) {
      const double gj = g[i].data[j];
      double& mj = m[i].data[j];
      double& vj = v[i].data[j];
      mj = state.beta1 * mj + (1.0 - state.beta1) * gj;
      vj = state.beta2 * vj + (1.0 - state.beta2) * gj * gj;
      p[i].data[j] -= state.lr * (mj / c1) / (std::sqrt(vj / c2) + state.eps);
    }
  if (!params.all_finite()) throw NumericalError("adam: parameters became non-finite");
}

}  // namespace mkdiff
