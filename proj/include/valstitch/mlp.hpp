#pragma once

#include <Eigen/Dense>

#include <string>
#include <vector>

#include "valstitch/rng.hpp"

// Minimal dense network numerics in 64-bit floats. Batches are stored one
// sample per column (features x batch), so a layer is y = act(W x + b).
namespace valstitch::nn {

enum class Activation { SiLU, Identity };

const char* activation_name(Activation a);
Activation activation_from_name(const std::string& name);

double silu(double x);

struct Layer {
  Eigen::MatrixXd w;  // out x in
  Eigen::VectorXd b;  // out
  Activation act = Activation::SiLU;
};

struct Mlp {
  std::vector<Layer> layers;

  int depth() const { return static_cast<int>(layers.size()); }
  int input_dim() const { return layers.empty() ? 0 : static_cast<int>(layers.front().w.cols()); }
  int output_dim() const { return layers.empty() ? 0 : static_cast<int>(layers.back().w.rows()); }
  int width_after(int i) const;  // feature width after layer i (i=0: input)
};

// He-style random init with SiLU hidden layers and an Identity output layer.
Mlp make_mlp(const std::vector<int>& widths, Rng& rng);
Mlp make_mlp(const std::vector<int>& widths, const std::vector<Activation>& acts,
             Rng& rng);

// Recorded forward pass over a contiguous layer range [begin, end).
struct Tape {
  int begin = 0;
  int end = 0;
  std::vector<Eigen::MatrixXd> inputs;   // inputs[l - begin] fed into layer l
  std::vector<Eigen::MatrixXd> preacts;  // W x + b for layer l
};

struct Gradients {
  std::vector<Eigen::MatrixXd> dw;
  std::vector<Eigen::VectorXd> db;
};

Gradients zero_gradients(const Mlp& mlp);
void accumulate(Gradients& into, const Gradients& g);
void scale(Gradients& g, double s);

// Full forward. If tape is non-null it records activations for backward.
Eigen::MatrixXd forward(const Mlp& mlp, const Eigen::MatrixXd& x, Tape* tape = nullptr);

// Forward over layers [begin, end), 0-based. forward == forward_range(0, depth).
Eigen::MatrixXd forward_range(const Mlp& mlp, const Eigen::MatrixXd& x, int begin,
                              int end, Tape* tape = nullptr);

// Post-activation hidden state after layer i (1-based, 1 <= i <= depth).
Eigen::MatrixXd forward_truncated(const Mlp& mlp, const Eigen::MatrixXd& x, int i);

// Applies layers j..depth (1-based j) to a hidden state.
Eigen::MatrixXd forward_suffix(const Mlp& mlp, const Eigen::MatrixXd& h, int j);

// Exact reverse-mode gradients for the range recorded on the tape. Returns
// dL/dx for the tape's first input; per-layer parameter gradients are written
// into grads (full-depth container, untouched outside the range) when given.
Eigen::MatrixXd backward(const Mlp& mlp, const Tape& tape, const Eigen::MatrixXd& dy,
                         Gradients* grads = nullptr);

// Flat parameter views in declaration order (layer 0 W column-major, layer 0
// b, layer 1 W, ...). Used by the optimizer and the checkpoint writer.
Eigen::Index param_count(const Mlp& mlp);
Eigen::VectorXd flatten_params(const Mlp& mlp);
void set_params(Mlp& mlp, const Eigen::VectorXd& flat);
Eigen::VectorXd flatten_gradients(const Mlp& mlp, const Gradients& g);

// Decoupled-weight-decay adaptive-moment optimizer over a flat parameter
// vector. Deterministic given its state. An optional per-coordinate learning
// rate multiplier supports parameter groups.
struct AdamW {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;

  long step_count = 0;
  Eigen::VectorXd m;
  Eigen::VectorXd v;
  Eigen::VectorXd lr_scale;  // empty means all ones

  void init(Eigen::Index n);
  void step(Eigen::VectorXd& params, const Eigen::VectorXd& grads);
};

}  // namespace valstitch::nn
