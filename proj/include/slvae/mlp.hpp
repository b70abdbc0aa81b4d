#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "slvae/matrix.hpp"
#include "slvae/rng.hpp"
#include "slvae/tape.hpp"

namespace slvae {

enum class Activation : std::uint8_t { identity = 0, relu = 1, sigmoid = 2 };

inline const char* to_string(Activation a) {
  switch (a) {
    case Activation::identity: return "identity";
    case Activation::relu: return "relu";
    case Activation::sigmoid: return "sigmoid";
  }
  return "?";
}

struct DenseLayer {
  Matrix weight;  // out x in
  Matrix bias;    // 1 x out
  Activation activation = Activation::identity;

  std::size_t in_dim() const { return weight.cols(); }
  std::size_t out_dim() const { return weight.rows(); }
  bool operator==(const DenseLayer&) const = default;
};

/// Fully connected network. Layer dimensions chain; the shape is fixed once built.
struct MlpParams {
  std::vector<DenseLayer> layers;

  std::size_t input_dim() const { return layers.empty() ? 0 : layers.front().in_dim(); }
  std::size_t output_dim() const { return layers.empty() ? 0 : layers.back().out_dim(); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.weight.size() + l.bias.size();
    return n;
  }

  /// Weight then bias, layer by layer. Adam and persistence both use this order.
  std::vector<Matrix*> tensors() {
    std::vector<Matrix*> out;
    for (auto& l : layers) {
      out.push_back(&l.weight);
      out.push_back(&l.bias);
    }
    return out;
  }
  std::vector<const Matrix*> tensors() const {
    std::vector<const Matrix*> out;
    for (const auto& l : layers) {
      out.push_back(&l.weight);
      out.push_back(&l.bias);
    }
    return out;
  }

  bool operator==(const MlpParams&) const = default;
};

/// Zero-initialized network with the given layer widths (dims.size() - 1 layers).
inline MlpParams zero_mlp(std::span<const std::size_t> dims, std::span<const Activation> activations) {
  if (dims.size() < 2 || activations.size() != dims.size() - 1)
    throw ShapeError("mlp needs n+1 widths for n activations");
  MlpParams p;
  for (std::size_t l = 0; l + 1 < dims.size(); ++l)
    p.layers.push_back(DenseLayer{Matrix(dims[l + 1], dims[l]), Matrix(1, dims[l + 1]), activations[l]});
  return p;
}

/// Weights uniform in +-sqrt(6 / (fan_in + fan_out)), biases zero.
inline MlpParams init_mlp(std::span<const std::size_t> dims, std::span<const Activation> activations, Rng& rng) {
  MlpParams p = zero_mlp(dims, activations);
  for (auto& l : p.layers) {
    const double limit = std::sqrt(6.0 / static_cast<double>(l.in_dim() + l.out_dim()));
    for (double& w : l.weight.data()) w = (2.0 * uniform01(rng) - 1.0) * limit;
  }
  return p;
}

inline double activate(Activation a, double x) {
  switch (a) {
    case Activation::identity: return x;
    case Activation::relu: return x > 0.0 ? x : 0.0;
    case Activation::sigmoid: return ad::sigmoid_value(x);
  }
  return x;
}

/// Applies the network to every row of `x`.
inline Matrix mlp_forward(const MlpParams& p, const Matrix& x) {
  if (x.cols() != p.input_dim())
    throw ShapeError("mlp input width " + std::to_string(x.cols()) + ", expected " + std::to_string(p.input_dim()));
  Matrix cur = x;
  for (const auto& l : p.layers) {
    Matrix next(cur.rows(), l.out_dim());
    for (std::size_t r = 0; r < cur.rows(); ++r) {
      const double* xr = cur.row_span(r).data();
      for (std::size_t o = 0; o < l.out_dim(); ++o) {
        const double* w = l.weight.row_span(o).data();
        double s = l.bias[o];
        for (std::size_t i = 0; i < l.in_dim(); ++i) s += xr[i] * w[i];
        next(r, o) = activate(l.activation, s);
      }
    }
    cur = std::move(next);
  }
  return cur;
}

inline DenseVector mlp_forward(const MlpParams& p, std::span<const double> x) {
  return mlp_forward(p, Matrix::row(x)).data();
}

/// An MlpParams pushed onto a tape as leaves.
struct MlpVars {
  std::vector<Var> weights;
  std::vector<Var> biases;
  std::vector<Activation> activations;
};

inline MlpVars bind(Tape& tape, const MlpParams& p, bool trainable) {
  MlpVars v;
  for (const auto& l : p.layers) {
    v.weights.push_back(tape.leaf(l.weight, trainable));
    v.biases.push_back(tape.leaf(l.bias, trainable));
    v.activations.push_back(l.activation);
  }
  return v;
}

inline Var apply(const MlpVars& net, Var x) {
  Var h = x;
  for (std::size_t l = 0; l < net.weights.size(); ++l) {
    h = ad::linear(h, net.weights[l], net.biases[l]);
    switch (net.activations[l]) {
      case Activation::identity: break;
      case Activation::relu: h = ad::relu(h); break;
      case Activation::sigmoid: h = ad::sigmoid(h); break;
    }
  }
  return h;
}

/// Gradients of a bound network, shaped like the parameters.
inline MlpParams gradients(const MlpVars& net, const MlpParams& like) {
  MlpParams g = like;
  for (std::size_t l = 0; l < net.weights.size(); ++l) {
    g.layers[l].weight = net.weights[l].grad();
    g.layers[l].bias = net.biases[l].grad();
  }
  return g;
}

}  // namespace slvae
