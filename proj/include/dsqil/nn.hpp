#pragma once

// Dense MLP substrate: batched forward/backward over Eigen matrices, Adam,
// Polyak averaging and JSON checkpoints. Samples are stored column-wise.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "dsqil/errors.hpp"
#include "dsqil/rng.hpp"

namespace dsqil::nn {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

enum class Activation { ReLU, Tanh, Identity, Sigmoid };

inline std::string to_string(Activation a) {
  switch (a) {
    case Activation::ReLU: return "relu";
    case Activation::Tanh: return "tanh";
    case Activation::Identity: return "identity";
    case Activation::Sigmoid: return "sigmoid";
  }
  return "identity";
}

inline Activation activation_from_string(const std::string& name) {
  if (name == "relu") return Activation::ReLU;
  if (name == "tanh") return Activation::Tanh;
  if (name == "identity") return Activation::Identity;
  if (name == "sigmoid") return Activation::Sigmoid;
  throw PreconditionError("unknown activation '" + name + "'");
}

struct MlpSpec {
  std::vector<int> widths;  // input, hidden..., output
  Activation hidden = Activation::ReLU;
  Activation output = Activation::Identity;

  static MlpSpec make(int input, int hidden_layers, int hidden_width, int out,
                      Activation hidden_act, Activation output_act) {
    MlpSpec spec;
    spec.widths.push_back(input);
    for (int i = 0; i < hidden_layers; ++i) spec.widths.push_back(hidden_width);
    spec.widths.push_back(out);
    spec.hidden = hidden_act;
    spec.output = output_act;
    spec.validate();
    return spec;
  }

  void validate() const {
    if (widths.size() < 2) throw PreconditionError("MlpSpec needs at least 2 widths");
    for (int w : widths) {
      if (w < 1) throw PreconditionError("MlpSpec widths must be >= 1");
    }
    if (hidden == Activation::Sigmoid || output == Activation::ReLU || output == Activation::Tanh) {
      throw PreconditionError("unsupported activation placement");
    }
  }

  int input_dim() const { return widths.front(); }
  int output_dim() const { return widths.back(); }
  std::size_t num_layers() const { return widths.size() - 1; }

  bool operator==(const MlpSpec&) const = default;
};

struct Layer {
  Matrix weight;  // out x in
  Vector bias;    // out
};

/// Per-layer weights and biases. Used both for parameters and for gradients,
/// which share the same tree shape.
struct ParamTree {
  std::vector<Layer> layers;

  static ParamTree zeros(const MlpSpec& spec) {
    ParamTree tree;
    for (std::size_t l = 0; l < spec.num_layers(); ++l) {
      tree.layers.push_back({Matrix::Zero(spec.widths[l + 1], spec.widths[l]),
                             Vector::Zero(spec.widths[l + 1])});
    }
    return tree;
  }

  static ParamTree zeros_like(const ParamTree& other) {
    ParamTree tree;
    for (const auto& layer : other.layers) {
      tree.layers.push_back({Matrix::Zero(layer.weight.rows(), layer.weight.cols()),
                             Vector::Zero(layer.bias.size())});
    }
    return tree;
  }

  bool same_shape(const ParamTree& other) const {
    if (layers.size() != other.layers.size()) return false;
    for (std::size_t l = 0; l < layers.size(); ++l) {
      if (layers[l].weight.rows() != other.layers[l].weight.rows() ||
          layers[l].weight.cols() != other.layers[l].weight.cols() ||
          layers[l].bias.size() != other.layers[l].bias.size()) {
        return false;
      }
    }
    return true;
  }

  bool matches(const MlpSpec& spec) const { return same_shape(zeros(spec)); }

  bool all_finite() const {
    for (const auto& layer : layers) {
      if (!layer.weight.allFinite() || !layer.bias.allFinite()) return false;
    }
    return true;
  }

  std::size_t size() const {
    std::size_t n = 0;
    for (const auto& layer : layers) n += layer.weight.size() + layer.bias.size();
    return n;
  }

  /// Flat view over all scalars: layer by layer, weights (column-major) then bias.
  double& flat(std::size_t index) {
    for (auto& layer : layers) {
      const auto w = static_cast<std::size_t>(layer.weight.size());
      if (index < w) return layer.weight.data()[index];
      index -= w;
      const auto b = static_cast<std::size_t>(layer.bias.size());
      if (index < b) return layer.bias.data()[index];
      index -= b;
    }
    throw DimensionError("flat index out of range");
  }
  double flat(std::size_t index) const { return const_cast<ParamTree*>(this)->flat(index); }

  /// this += scale * other
  void axpy(double scale, const ParamTree& other) {
    if (!same_shape(other)) throw DimensionError("axpy: shape mismatch");
    for (std::size_t l = 0; l < layers.size(); ++l) {
      layers[l].weight += scale * other.layers[l].weight;
      layers[l].bias += scale * other.layers[l].bias;
    }
  }

  void scale(double factor) {
    for (auto& layer : layers) {
      layer.weight *= factor;
      layer.bias *= factor;
    }
  }

  bool operator==(const ParamTree& other) const {
    if (!same_shape(other)) return false;
    for (std::size_t l = 0; l < layers.size(); ++l) {
      if (layers[l].weight != other.layers[l].weight || layers[l].bias != other.layers[l].bias) {
        return false;
      }
    }
    return true;
  }
};

using MlpParams = ParamTree;
using Gradient = ParamTree;

/// Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)] for weights and biases.
inline MlpParams init_params(const MlpSpec& spec, Rng& rng) {
  spec.validate();
  MlpParams params = ParamTree::zeros(spec);
  for (auto& layer : params.layers) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(layer.weight.cols()));
    // Column-major fill order is part of the reproducibility contract.
    for (Eigen::Index i = 0; i < layer.weight.size(); ++i) {
      layer.weight.data()[i] = rng.uniform(-bound, bound);
    }
    for (Eigen::Index i = 0; i < layer.bias.size(); ++i) layer.bias[i] = rng.uniform(-bound, bound);
  }
  return params;
}

namespace detail {

inline void apply_activation(Activation act, Matrix& m) {
  switch (act) {
    case Activation::ReLU: m = m.cwiseMax(0.0); break;
    case Activation::Tanh: m = m.array().tanh().matrix(); break;
    case Activation::Sigmoid:
      m = m.unaryExpr([](double z) {
        if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
        const double e = std::exp(z);
        return e / (1.0 + e);
      });
      break;
    case Activation::Identity: break;
  }
}

// d(activation)/d(pre) expressed through the post-activation value where possible.
inline Matrix activation_derivative(Activation act, const Matrix& pre, const Matrix& post) {
  switch (act) {
    case Activation::ReLU: return (pre.array() > 0.0).cast<double>().matrix();
    case Activation::Tanh: return (1.0 - post.array().square()).matrix();
    case Activation::Sigmoid: return (post.array() * (1.0 - post.array())).matrix();
    case Activation::Identity: return Matrix::Ones(pre.rows(), pre.cols());
  }
  return Matrix::Ones(pre.rows(), pre.cols());
}

inline void check_params(const MlpSpec& spec, const MlpParams& params) {
  if (!params.matches(spec)) throw DimensionError("parameters do not match MlpSpec");
}

}  // namespace detail

/// Intermediate values of a batched forward pass, kept for backward.
struct Tape {
  std::vector<Matrix> pre;   // pre-activation per layer
  std::vector<Matrix> post;  // post[0] = input, post[l+1] = output of layer l

  const Matrix& output() const { return post.back(); }
};

inline Tape forward_tape(const MlpSpec& spec, const MlpParams& params, const Matrix& inputs) {
  detail::check_params(spec, params);
  if (inputs.rows() != spec.input_dim()) {
    throw DimensionError("forward: input has " + std::to_string(inputs.rows()) + " rows, expected " +
                         std::to_string(spec.input_dim()));
  }
  Tape tape;
  tape.post.push_back(inputs);
  const std::size_t n = spec.num_layers();
  for (std::size_t l = 0; l < n; ++l) {
    const auto& layer = params.layers[l];
    Matrix z = layer.weight * tape.post.back();
    z.colwise() += layer.bias;
    Matrix a = z;
    detail::apply_activation(l + 1 == n ? spec.output : spec.hidden, a);
    tape.pre.push_back(std::move(z));
    tape.post.push_back(std::move(a));
  }
  return tape;
}

inline Matrix forward_batch(const MlpSpec& spec, const MlpParams& params, const Matrix& inputs) {
  return forward_tape(spec, params, inputs).output();
}

inline Vector forward(const MlpSpec& spec, const MlpParams& params, const Vector& input) {
  return forward_batch(spec, params, input);
}

struct BackwardResult {
  Gradient grad;
  Matrix input_grad;
};

/// Reverse pass. `output_grad` is dLoss/dOutput per sample (same shape as the
/// output); parameter gradients are summed over the batch.
inline BackwardResult backward_tape(const MlpSpec& spec, const MlpParams& params, const Tape& tape,
                                    const Matrix& output_grad) {
  const std::size_t n = spec.num_layers();
  if (output_grad.rows() != tape.output().rows() || output_grad.cols() != tape.output().cols()) {
    throw DimensionError("backward: output gradient shape mismatch");
  }
  BackwardResult result{ParamTree::zeros(spec), Matrix()};
  Matrix delta = output_grad;
  for (std::size_t i = n; i-- > 0;) {
    const Activation act = i + 1 == n ? spec.output : spec.hidden;
    delta = delta.cwiseProduct(detail::activation_derivative(act, tape.pre[i], tape.post[i + 1]));
    result.grad.layers[i].weight.noalias() = delta * tape.post[i].transpose();
    result.grad.layers[i].bias = delta.rowwise().sum();
    delta = params.layers[i].weight.transpose() * delta;
  }
  result.input_grad = std::move(delta);
  return result;
}

inline std::pair<Gradient, Vector> backward(const MlpSpec& spec, const MlpParams& params,
                                            const Vector& input, const Vector& output_grad) {
  const Tape tape = forward_tape(spec, params, input);
  BackwardResult r = backward_tape(spec, params, tape, output_grad);
  return {std::move(r.grad), r.input_grad.col(0)};
}

struct AdamState {
  ParamTree first;
  ParamTree second;
  std::int64_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  static AdamState for_params(const ParamTree& params) {
    return {ParamTree::zeros_like(params), ParamTree::zeros_like(params)};
  }
};

namespace detail {

template <typename P, typename G, typename M>
void adam_block(P&& param, const G& grad, M&& first, M&& second, double lr, double c1, double c2,
                const AdamState& s) {
  first = s.beta1 * first + (1.0 - s.beta1) * grad;
  second = s.beta2 * second + (1.0 - s.beta2) * grad.cwiseProduct(grad);
  param.array() -= lr * (first.array() / c1) / ((second.array() / c2).sqrt() + s.epsilon);
}

}  // namespace detail

/// One bias-corrected Adam step. A zero learning rate advances the moments
/// but leaves the parameters unchanged.
inline void adam_step(MlpParams& params, const Gradient& grad, AdamState& state, double lr) {
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw PreconditionError("adam_step: learning rate must be >= 0");
  if (!params.same_shape(grad) || !params.same_shape(state.first) || !params.same_shape(state.second)) {
    throw DimensionError("adam_step: shape mismatch");
  }
  if (!grad.all_finite()) throw NonFiniteError("adam_step: non-finite gradient");
  state.step += 1;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    detail::adam_block(params.layers[l].weight, grad.layers[l].weight, state.first.layers[l].weight,
                       state.second.layers[l].weight, lr, c1, c2, state);
    detail::adam_block(params.layers[l].bias, grad.layers[l].bias, state.first.layers[l].bias,
                       state.second.layers[l].bias, lr, c1, c2, state);
  }
}

/// Adam for a single scalar parameter (SAC log-temperature).
struct ScalarAdam {
  double first = 0.0;
  double second = 0.0;
  std::int64_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  void apply(double& param, double grad, double lr) {
    if (!std::isfinite(grad)) throw NonFiniteError("ScalarAdam: non-finite gradient");
    step += 1;
    first = beta1 * first + (1.0 - beta1) * grad;
    second = beta2 * second + (1.0 - beta2) * grad * grad;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step));
    param -= lr * (first / c1) / (std::sqrt(second / c2) + epsilon);
  }
};

/// target <- target + rate * (online - target). Rates 0 and 1 are exact
/// no-op and copy respectively.
inline void polyak_update(MlpParams& target, const MlpParams& online, double rate) {
  if (!(rate >= 0.0 && rate <= 1.0)) throw PreconditionError("polyak_update: rate outside [0, 1]");
  if (!target.same_shape(online)) throw DimensionError("polyak_update: shape mismatch");
  if (rate == 0.0) return;
  if (rate == 1.0) {
    target = online;
    return;
  }
  for (std::size_t l = 0; l < target.layers.size(); ++l) {
    target.layers[l].weight += rate * (online.layers[l].weight - target.layers[l].weight);
    target.layers[l].bias += rate * (online.layers[l].bias - target.layers[l].bias);
  }
}

/// A network: architecture plus parameters.
struct Mlp {
  MlpSpec spec;
  MlpParams params;

  static Mlp create(MlpSpec spec, Rng& rng) {
    MlpParams params = init_params(spec, rng);
    return {std::move(spec), std::move(params)};
  }

  Matrix operator()(const Matrix& inputs) const { return forward_batch(spec, params, inputs); }
};

// ---- checkpoints ----------------------------------------------------------

using Json = nlohmann::json;

/// Weights are written row-major. nlohmann serializes doubles with the
/// shortest representation that round-trips, so the document is value-exact.
inline Json to_json(const Mlp& net) {
  Json layers = Json::array();
  for (const auto& layer : net.params.layers) {
    std::vector<double> weight;
    weight.reserve(static_cast<std::size_t>(layer.weight.size()));
    for (Eigen::Index r = 0; r < layer.weight.rows(); ++r) {
      for (Eigen::Index c = 0; c < layer.weight.cols(); ++c) weight.push_back(layer.weight(r, c));
    }
    layers.push_back({{"weight", weight},
                      {"bias", std::vector<double>(layer.bias.data(), layer.bias.data() + layer.bias.size())}});
  }
  return {{"widths", net.spec.widths},
          {"hidden_activation", to_string(net.spec.hidden)},
          {"output_activation", to_string(net.spec.output)},
          {"layers", layers}};
}

inline Mlp mlp_from_json(const Json& doc) {
  try {
    Mlp net;
    net.spec.widths = doc.at("widths").get<std::vector<int>>();
    net.spec.hidden = activation_from_string(doc.at("hidden_activation").get<std::string>());
    net.spec.output = activation_from_string(doc.at("output_activation").get<std::string>());
    net.spec.validate();
    net.params = ParamTree::zeros(net.spec);
    const Json& layers = doc.at("layers");
    if (layers.size() != net.spec.num_layers()) throw DimensionError("checkpoint: layer count mismatch");
    for (std::size_t l = 0; l < layers.size(); ++l) {
      auto& layer = net.params.layers[l];
      const auto weight = layers[l].at("weight").get<std::vector<double>>();
      const auto bias = layers[l].at("bias").get<std::vector<double>>();
      if (weight.size() != static_cast<std::size_t>(layer.weight.size()) ||
          bias.size() != static_cast<std::size_t>(layer.bias.size())) {
        throw DimensionError("checkpoint: layer " + std::to_string(l) + " shape mismatch");
      }
      std::size_t k = 0;
      for (Eigen::Index r = 0; r < layer.weight.rows(); ++r) {
        for (Eigen::Index c = 0; c < layer.weight.cols(); ++c) layer.weight(r, c) = weight[k++];
      }
      for (std::size_t i = 0; i < bias.size(); ++i) layer.bias[static_cast<Eigen::Index>(i)] = bias[i];
    }
    return net;
  } catch (const Json::exception& e) {
    throw ParseError(0, std::string("checkpoint: ") + e.what());
  }
}

inline void write_json_file(const std::filesystem::path& path, const Json& doc) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw PreconditionError("cannot open " + path.string() + " for writing");
  out << doc.dump(1) << '\n';
}

inline Json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw PreconditionError("cannot open " + path.string());
  try {
    return Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw ParseError(0, path.string() + ": " + e.what());
  }
}

}  // namespace dsqil::nn
