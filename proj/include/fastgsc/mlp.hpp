#pragma once

#include <span>
#include <vector>

#include <Eigen/Dense>

#include "fastgsc/rng.hpp"

namespace fastgsc {

enum class Activation { kSilu, kTanh };

// Fully connected network with a smooth nonlinearity on every hidden layer
// and a linear output layer. Parameters live in one flat buffer, per layer
// W (out x in, column-major) followed by b (out). Samples are columns.
class Mlp {
 public:
  struct Cache {
    std::vector<Eigen::MatrixXd> pre;   // pre-activations of hidden layers
    std::vector<Eigen::MatrixXd> post;  // post[0] is the input
  };

  Mlp() = default;
  Mlp(std::vector<int> layer_sizes, Activation activation);

  void initialize(Rng& rng, double output_scale = 1.0);

  int input_dim() const { return sizes_.front(); }
  int output_dim() const { return sizes_.back(); }
  std::size_t num_params() const { return params_.size(); }
  const std::vector<int>& layer_sizes() const { return sizes_; }
  Activation activation() const { return activation_; }

  std::vector<double>& params() { return params_; }
  const std::vector<double>& params() const { return params_; }

  Eigen::MatrixXd forward(const Eigen::MatrixXd& input) const;
  Eigen::MatrixXd forward(const Eigen::MatrixXd& input, Cache& cache) const;

  // Adds dL/dparams to `grad` given dL/doutput for the cached forward pass.
  void backward(const Cache& cache, const Eigen::MatrixXd& grad_output,
                std::span<double> grad) const;

 private:
  std::size_t weight_offset(std::size_t layer) const { return offsets_[layer]; }

  std::vector<int> sizes_;
  Activation activation_ = Activation::kSilu;
  std::vector<std::size_t> offsets_;
  std::vector<double> params_;
};

class Adam {
 public:
  Adam() = default;
  Adam(std::size_t n, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

  void step(std::vector<double>& params, std::span<const double> grad);
  void set_learning_rate(double lr) { lr_ = lr; }
  double learning_rate() const { return lr_; }

 private:
  double lr_ = 1e-3;
  double beta1_ = 0.9;
  double beta2_ = 0.999;
  double eps_ = 1e-8;
  long step_ = 0;
  std::vector<double> m_;
  std::vector<double> v_;
};

// Rescales grad in place so its L2 norm is at most max_norm; returns the
// norm before clipping.
double clip_grad_norm(std::span<double> grad, double max_norm);

}  // namespace fastgsc
