#include "valstitch/mlp.hpp"

#include <cmath>
#include <stdexcept>

namespace valstitch::nn {

const char* activation_name(Activation a) {
  return a == Activation::SiLU ? "silu" : "identity";
}

Activation activation_from_name(const std::string& name) {
  if (name == "silu") return Activation::SiLU;
  if (name == "identity") return Activation::Identity;
  throw std::invalid_argument("unknown activation: " + name);
}

double silu(double x) { return x / (1.0 + std::exp(-x)); }

namespace {

inline Eigen::MatrixXd apply_act(Activation act, const Eigen::MatrixXd& a) {
  if (act == Activation::Identity) return a;
  return a.array() / (1.0 + (-a.array()).exp());
}

// d act / d preact, elementwise.
inline Eigen::ArrayXXd act_deriv(Activation act, const Eigen::MatrixXd& a) {
  if (act == Activation::Identity)
    return Eigen::ArrayXXd::Ones(a.rows(), a.cols());
  Eigen::ArrayXXd s = 1.0 / (1.0 + (-a.array()).exp());
  return s * (1.0 + a.array() * (1.0 - s));
}

}  // namespace

int Mlp::width_after(int i) const {
  if (i == 0) return input_dim();
  return static_cast<int>(layers.at(i - 1).w.rows());
}

Mlp make_mlp(const std::vector<int>& widths, Rng& rng) {
  if (widths.size() < 2)
    throw std::invalid_argument("make_mlp: need at least input and output widths");
  std::vector<Activation> acts(widths.size() - 1, Activation::SiLU);
  acts.back() = Activation::Identity;
  return make_mlp(widths, acts, rng);
}

Mlp make_mlp(const std::vector<int>& widths, const std::vector<Activation>& acts,
             Rng& rng) {
  if (widths.size() < 2 || acts.size() != widths.size() - 1)
    throw std::invalid_argument("make_mlp: widths/activations mismatch");
  Mlp mlp;
  for (size_t l = 0; l + 1 < widths.size(); ++l) {
    if (widths[l] <= 0 || widths[l + 1] <= 0)
      throw std::invalid_argument("make_mlp: widths must be positive");
    Layer layer;
    const double gain = acts[l] == Activation::SiLU ? std::sqrt(2.0) : 1.0;
    layer.w = gain / std::sqrt(double(widths[l])) *
              rng.normal_mat(widths[l + 1], widths[l]);
    layer.b = Eigen::VectorXd::Zero(widths[l + 1]);
    layer.act = acts[l];
    mlp.layers.push_back(std::move(layer));
  }
  return mlp;
}

Gradients zero_gradients(const Mlp& mlp) {
  Gradients g;
  for (const Layer& l : mlp.layers) {
    g.dw.emplace_back(Eigen::MatrixXd::Zero(l.w.rows(), l.w.cols()));
    g.db.emplace_back(Eigen::VectorXd::Zero(l.b.size()));
  }
  return g;
}

void accumulate(Gradients& into, const Gradients& g) {
  for (size_t i = 0; i < into.dw.size(); ++i) {
    into.dw[i] += g.dw[i];
    into.db[i] += g.db[i];
  }
}

void scale(Gradients& g, double s) {
  for (size_t i = 0; i < g.dw.size(); ++i) {
    g.dw[i] *= s;
    g.db[i] *= s;
  }
}

Eigen::MatrixXd forward_range(const Mlp& mlp, const Eigen::MatrixXd& x, int begin,
                              int end, Tape* tape) {
  if (begin < 0 || end > mlp.depth() || begin > end)
    throw std::invalid_argument("forward_range: bad layer range");
  if (begin < end && x.rows() != mlp.layers[begin].w.cols())
    throw std::invalid_argument("forward_range: input width mismatch");
  if (tape) {
    tape->begin = begin;
    tape->end = end;
    tape->inputs.clear();
    tape->preacts.clear();
  }
  Eigen::MatrixXd h = x;
  for (int l = begin; l < end; ++l) {
    const Layer& layer = mlp.layers[l];
    Eigen::MatrixXd a = (layer.w * h).colwise() + layer.b;
    if (tape) {
      tape->inputs.push_back(std::move(h));
      tape->preacts.push_back(a);
    }
    h = apply_act(layer.act, a);
  }
  return h;
}

Eigen::MatrixXd forward(const Mlp& mlp, const Eigen::MatrixXd& x, Tape* tape) {
  return forward_range(mlp, x, 0, mlp.depth(), tape);
}

Eigen::MatrixXd forward_truncated(const Mlp& mlp, const Eigen::MatrixXd& x, int i) {
  if (i < 1 || i > mlp.depth())
    throw std::invalid_argument("forward_truncated: layer index out of range");
  return forward_range(mlp, x, 0, i);
}

Eigen::MatrixXd forward_suffix(const Mlp& mlp, const Eigen::MatrixXd& h, int j) {
  if (j < 1 || j > mlp.depth())
    throw std::invalid_argument("forward_suffix: layer index out of range");
  return forward_range(mlp, h, j - 1, mlp.depth());
}

Eigen::MatrixXd backward(const Mlp& mlp, const Tape& tape, const Eigen::MatrixXd& dy,
                         Gradients* grads) {
  const int n_layers = tape.end - tape.begin;
  if (static_cast<int>(tape.inputs.size()) != n_layers)
    throw std::invalid_argument("backward: tape does not match its layer range");
  if (grads && static_cast<int>(grads->dw.size()) != mlp.depth())
    throw std::invalid_argument("backward: gradient container has wrong depth");
  Eigen::MatrixXd dh = dy;
  for (int l = tape.end - 1; l >= tape.begin; --l) {
    const int ti = l - tape.begin;
    const Layer& layer = mlp.layers[l];
    if (dh.rows() != layer.w.rows() || dh.cols() != tape.preacts[ti].cols())
      throw std::invalid_argument("backward: upstream gradient shape mismatch");
    Eigen::MatrixXd da =
        (dh.array() * act_deriv(layer.act, tape.preacts[ti])).matrix();
    if (grads) {
      grads->dw[l] += da * tape.inputs[ti].transpose();
      grads->db[l] += da.rowwise().sum();
    }
    dh = layer.w.transpose() * da;
  }
  return dh;
}

Eigen::Index param_count(const Mlp& mlp) {
  Eigen::Index n = 0;
  for (const Layer& l : mlp.layers) n += l.w.size() + l.b.size();
  return n;
}

Eigen::VectorXd flatten_params(const Mlp& mlp) {
  Eigen::VectorXd flat(param_count(mlp));
  Eigen::Index at = 0;
  for (const Layer& l : mlp.layers) {
    flat.segment(at, l.w.size()) = Eigen::Map<const Eigen::VectorXd>(l.w.data(), l.w.size());
    at += l.w.size();
    flat.segment(at, l.b.size()) = l.b;
    at += l.b.size();
  }
  return flat;
}

void set_params(Mlp& mlp, const Eigen::VectorXd& flat) {
  if (flat.size() != param_count(mlp))
    throw std::invalid_argument("set_params: size mismatch");
  Eigen::Index at = 0;
  for (Layer& l : mlp.layers) {
    Eigen::Map<Eigen::VectorXd>(l.w.data(), l.w.size()) = flat.segment(at, l.w.size());
    at += l.w.size();
    l.b = flat.segment(at, l.b.size());
    at += l.b.size();
  }
}

Eigen::VectorXd flatten_gradients(const Mlp& mlp, const Gradients& g) {
  Eigen::VectorXd flat(param_count(mlp));
  Eigen::Index at = 0;
  for (size_t i = 0; i < g.dw.size(); ++i) {
    flat.segment(at, g.dw[i].size()) =
        Eigen::Map<const Eigen::VectorXd>(g.dw[i].data(), g.dw[i].size());
    at += g.dw[i].size();
    flat.segment(at, g.db[i].size()) = g.db[i];
    at += g.db[i].size();
  }
  return flat;
}

void AdamW::init(Eigen::Index n) {
  step_count = 0;
  m = Eigen::VectorXd::Zero(n);
  v = Eigen::VectorXd::Zero(n);
}

void AdamW::step(Eigen::VectorXd& params, const Eigen::VectorXd& grads) {
  if (m.size() != params.size())
    throw std::invalid_argument("AdamW::step: optimizer not initialized for this size");
  if (grads.size() != params.size())
    throw std::invalid_argument("AdamW::step: gradient size mismatch");
  ++step_count;
  m = beta1 * m + (1.0 - beta1) * grads;
  v = beta2 * v + (1.0 - beta2) * grads.cwiseProduct(grads);
  const double bc1 = 1.0 - std::pow(beta1, double(step_count));
  const double bc2 = 1.0 - std::pow(beta2, double(step_count));
  Eigen::VectorXd denom = (v / bc2).cwiseSqrt();
  denom.array() += eps;
  Eigen::VectorXd update = (m / bc1).cwiseQuotient(denom);
  if (weight_decay != 0.0) update += weight_decay * params;
  if (lr_scale.size() == 0) {
    params -= lr * update;
  } else {
    params -= lr * lr_scale.cwiseProduct(update);
  }
}

}  // namespace valstitch::nn
