#include "fastgsc/mlp.hpp"

#include <cmath>
#include <stdexcept>

namespace fastgsc {

using Eigen::MatrixXd;

namespace {

MatrixXd apply_activation(const MatrixXd& z, Activation act) {
  if (act == Activation::kTanh) return z.array().tanh().matrix();
  return (z.array() / (1.0 + (-z.array()).exp())).matrix();
}

// d act(z) / dz, elementwise.
MatrixXd activation_slope(const MatrixXd& z, Activation act) {
  if (act == Activation::kTanh) {
    return (1.0 - z.array().tanh().square()).matrix();
  }
  const Eigen::ArrayXXd s = 1.0 / (1.0 + (-z.array()).exp());
  return (s * (1.0 + z.array() * (1.0 - s))).matrix();
}

}  // namespace

Mlp::Mlp(std::vector<int> layer_sizes, Activation activation)
    : sizes_(std::move(layer_sizes)), activation_(activation) {
  if (sizes_.size() < 2) throw std::invalid_argument("Mlp needs at least input and output sizes");
  std::size_t total = 0;
  for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
    offsets_.push_back(total);
    total += static_cast<std::size_t>(sizes_[l + 1]) * static_cast<std::size_t>(sizes_[l] + 1);
  }
  params_.assign(total, 0.0);
}

void Mlp::initialize(Rng& rng, double output_scale) {
  const std::size_t layers = sizes_.size() - 1;
  for (std::size_t l = 0; l < layers; ++l) {
    const int in = sizes_[l];
    const int out = sizes_[l + 1];
    double bound = std::sqrt(6.0 / static_cast<double>(in + out));
    if (l + 1 == layers) bound *= output_scale;
    std::uniform_real_distribution<double> dist(-bound, bound);
    double* w = params_.data() + weight_offset(l);
    for (int i = 0; i < in * out; ++i) w[i] = dist(rng);
    for (int i = 0; i < out; ++i) w[in * out + i] = 0.0;
  }
}

MatrixXd Mlp::forward(const MatrixXd& input) const {
  MatrixXd a = input;
  const std::size_t layers = sizes_.size() - 1;
  for (std::size_t l = 0; l < layers; ++l) {
    const int in = sizes_[l];
    const int out = sizes_[l + 1];
    const double* base = params_.data() + weight_offset(l);
    Eigen::Map<const MatrixXd> w(base, out, in);
    Eigen::Map<const Eigen::VectorXd> b(base + in * out, out);
    MatrixXd z = w * a;
    z.colwise() += b;
    a = (l + 1 == layers) ? std::move(z) : apply_activation(z, activation_);
  }
  return a;
}

MatrixXd Mlp::forward(const MatrixXd& input, Cache& cache) const {
  const std::size_t layers = sizes_.size() - 1;
  cache.pre.clear();
  cache.post.clear();
  cache.post.push_back(input);
  for (std::size_t l = 0; l < layers; ++l) {
    const int in = sizes_[l];
    const int out = sizes_[l + 1];
    const double* base = params_.data() + weight_offset(l);
    Eigen::Map<const MatrixXd> w(base, out, in);
    Eigen::Map<const Eigen::VectorXd> b(base + in * out, out);
    MatrixXd z = w * cache.post.back();
    z.colwise() += b;
    if (l + 1 == layers) return z;
    cache.post.push_back(apply_activation(z, activation_));
    cache.pre.push_back(std::move(z));
  }
  return cache.post.back();
}

void Mlp::backward(const Cache& cache, const MatrixXd& grad_output, std::span<double> grad) const {
  if (grad.size() != params_.size()) throw std::invalid_argument("gradient buffer size mismatch");
  const std::size_t layers = sizes_.size() - 1;
  MatrixXd delta = grad_output;
  for (std::size_t l = layers; l-- > 0;) {
    const int in = sizes_[l];
    const int out = sizes_[l + 1];
    const double* base = params_.data() + weight_offset(l);
    double* gbase = grad.data() + weight_offset(l);
    Eigen::Map<MatrixXd> gw(gbase, out, in);
    Eigen::Map<Eigen::VectorXd> gb(gbase + in * out, out);
    gw.noalias() += delta * cache.post[l].transpose();
    gb += delta.rowwise().sum();
    if (l > 0) {
      Eigen::Map<const MatrixXd> w(base, out, in);
      MatrixXd back = w.transpose() * delta;
      delta = back.cwiseProduct(activation_slope(cache.pre[l - 1], activation_));
    }
  }
}

Adam::Adam(std::size_t n, double lr, double beta1, double beta2, double eps)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), m_(n, 0.0), v_(n, 0.0) {}

void Adam::step(std::vector<double>& params, std::span<const double> grad) {
  if (params.size() != m_.size() || grad.size() != m_.size()) {
    throw std::invalid_argument("Adam state size mismatch");
  }
  ++step_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(step_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * grad[i];
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * grad[i] * grad[i];
    params[i] -= lr_ * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + eps_);
  }
}

double clip_grad_norm(std::span<double> grad, double max_norm) {
  double sq = 0.0;
  for (double g : grad) sq += g * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double scale = max_norm / norm;
    for (double& g : grad) g *= scale;
  }
  return norm;
}

}  // namespace fastgsc
