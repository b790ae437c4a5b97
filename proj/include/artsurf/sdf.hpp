#pragma once

#include <functional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "artsurf/core.hpp"

namespace artsurf {

// Learnable signed distance field: positional encoding -> dense softplus MLP -> scalar,
// plus the learnable opacity sharpness k (stored as log k so it stays positive).
class SdfNetwork {
 public:
  SdfNetwork() = default;
  // hidden: widths of the hidden layers (default elsewhere: 8 x 64). Weights get
  // He-style random init from the seed; the output layer starts at zero.
  static SdfNetwork make(const std::vector<int>& hidden, int pe_frequencies, uint64_t seed);

  int input_dim() const { return 3 + 6 * pe_frequencies_; }
  int num_layers() const { return static_cast<int>(weights_.size()); }
  const std::vector<int>& hidden_widths() const { return hidden_; }
  int pe_frequencies() const { return pe_frequencies_; }

  double k() const { return std::exp(log_k_); }
  double log_k() const { return log_k_; }
  void set_log_k(double v) { log_k_ = v; }

  std::vector<Eigen::MatrixXd>& weights() { return weights_; }
  const std::vector<Eigen::MatrixXd>& weights() const { return weights_; }
  std::vector<Eigen::VectorXd>& biases() { return biases_; }
  const std::vector<Eigen::VectorXd>& biases() const { return biases_; }

  // Flat parameter vector (weights row-major then bias, layer by layer); log_k excluded.
  size_t num_params() const;
  void get_params(std::vector<double>& out) const;
  void set_params(const std::vector<double>& in);

  double eval(const Vec3& x) const;
  Vec3 gradient(const Vec3& x) const;
  void eval_batch(const std::vector<Vec3>& xs, std::vector<double>& values) const;
  void gradient_batch(const std::vector<Vec3>& xs, std::vector<Vec3>& grads) const;

  void save_json(const std::string& path) const;
  static SdfNetwork load_json(const std::string& path);

 private:
  friend struct SdfBackprop;
  std::vector<int> hidden_;
  int pe_frequencies_ = 4;
  std::vector<Eigen::MatrixXd> weights_;  // layer l: out x in
  std::vector<Eigen::VectorXd> biases_;
  double log_k_ = std::log(0.1);
};

// A backward-pass work item. fbar is the upstream gradient on f(x); p is the
// upstream gradient on grad f(x) (zero for plain value items). x_grad_index
// selects where d/dx lands in the caller's buffer; -1 detaches the position.
struct SdfBackwardItem {
  Vec3 x;
  double fbar = 0.0;
  Vec3 p{0, 0, 0};
  int x_grad_index = -1;
};

struct SdfGrads {
  std::vector<Eigen::MatrixXd> dw;
  std::vector<Eigen::VectorXd> db;

  void init_like(const SdfNetwork& net);
  void add(const SdfGrads& o);
  void to_flat(std::vector<double>& out) const;  // same layout as get_params
  void clear();
};

// Accumulates parameter gradients (and optionally per-item position gradients in
// x_grads, indexed by x_grad_index) for all items. Items are processed in fixed-size
// batches reduced in batch order, so the result is independent of thread count.
void sdf_backward(const SdfNetwork& net, const std::vector<SdfBackwardItem>& items,
                  SdfGrads& grads, std::vector<Vec3>* x_grads);

// Bell-shaped activation: e^{kf} / (1 + e^{kf})^2 = sech^2(kf/2)/4. Even in f,
// maximum 1/4 at f = 0.
double phi_k(double f, double k);
// Monotone logistic sigmoid of kf (ablation alternative to phi_k in Eq-2-style opacity).
double phi_sigmoid(double f, double k);

enum class OpacityActivation { kBell, kSigmoid };

struct SdfOpacityGrad {
  double d_fi = 0, d_fnext = 0, d_k = 0;
};

// Opacity of a Gaussian center from consecutive SDF values:
// max((Phi(f_i) - Phi(f_next)) / Phi(f_i), 0), computed in log space.
double sdf_to_opacity(double f_i, double f_next, double k,
                      OpacityActivation act = OpacityActivation::kBell,
                      SdfOpacityGrad* grad = nullptr);

struct SdfSampleBatch {
  std::vector<Vec3> points;
  std::vector<double> values;
  std::vector<Vec3> gradients;
};

// Supervised fit of the network to an analytic target over a box (used for the
// sphere-shaped geometric init and by tests).
void fit_sdf_supervised(SdfNetwork& net, const std::function<double(const Vec3&)>& target,
                        const Bounds3& bounds, int iters, int batch, double lr, uint64_t seed);

// Geometric init: approximate sphere of the given radius around center.
void geometric_init(SdfNetwork& net, const Vec3& center, double radius, uint64_t seed);

}  // namespace artsurf
