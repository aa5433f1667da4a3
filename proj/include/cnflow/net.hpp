#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "cnflow/errors.hpp"
#include "cnflow/graph.hpp"
#include "cnflow/rng.hpp"
#include "cnflow/tensor.hpp"

namespace cnflow {

enum class Activation { kTanh, kSoftplus };

inline Activation activation_from_string(const std::string& s) {
  if (s == "tanh") return Activation::kTanh;
  if (s == "softplus") return Activation::kSoftplus;
  throw ConfigError("unknown activation '" + s + "' (expected tanh or softplus)");
}

inline const char* to_string(Activation a) {
  return a == Activation::kTanh ? "tanh" : "softplus";
}

inline Tensor apply_activation(Activation a, const Tensor& x) {
  return a == Activation::kTanh ? tanh(x) : softplus(x);
}

/// Weight init: W ~ N(0, (gain/sqrt(fan_in))^2), zero bias. With the final
/// layer zeroed the initial map is the identity flow.
struct InitSpec {
  double gain = 1.0;
  bool zero_init_last = true;
};

/// Stack of affine layers, each consuming the running hidden state with the
/// scalar time concatenated: h -> W^T [h ; t] + b. The activation follows
/// every layer except the last. An optional split index exposes the
/// network as g(h(z)) around its narrowest hidden layer.
class DynamicsNet {
 public:
  DynamicsNet() = default;

  std::size_t dim() const { return dim_; }
  const std::vector<std::size_t>& hidden_widths() const { return hidden_; }
  Activation activation() const { return act_; }
  const ParamStore& params() const { return params_; }
  ParamStore& params() { return params_; }
  std::size_t layer_count() const { return hidden_.size() + 1; }

  bool has_split() const { return split_.has_value(); }

  /// Index of the layer whose input is the bottleneck hidden state.
  std::size_t split_index() const {
    if (!split_) throw ConfigError("DynamicsNet: no bottleneck split point");
    return *split_;
  }

  /// Width of the hidden state at the split.
  std::size_t bottleneck_width() const { return layer_in_width(split_index()); }

  static DynamicsNet make(std::size_t dim, std::vector<std::size_t> hidden,
                          Activation act, const InitSpec& init, std::uint64_t seed,
                          bool with_split = false) {
    if (dim == 0) throw ConfigError("DynamicsNet: dim must be positive");
    DynamicsNet net;
    net.dim_ = dim;
    net.hidden_ = std::move(hidden);
    net.act_ = act;
    Rng rng(seed);
    const std::size_t layers = net.hidden_.size() + 1;
    for (std::size_t l = 0; l < layers; ++l) {
      const std::size_t in_w = net.layer_in_width(l);
      const std::size_t out_w = net.layer_out_width(l);
      const bool zero = init.zero_init_last && l == layers - 1;
      std::vector<double> w((in_w + 1) * out_w, 0.0);
      if (!zero) {
        const double sd = init.gain / std::sqrt(static_cast<double>(in_w + 1));
        for (double& v : w) v = sd * rng.normal();
      }
      net.params_.add(layer_name(l) + ".W",
                      Tensor::from({in_w + 1, out_w}, std::move(w)));
      net.params_.add(layer_name(l) + ".b", Tensor::zeros({out_w}));
    }
    if (with_split) {
      if (net.hidden_.empty()) {
        throw ConfigError("DynamicsNet: a bottleneck split needs at least one hidden layer");
      }
      std::size_t best = 0;
      for (std::size_t i = 1; i < net.hidden_.size(); ++i) {
        if (net.hidden_[i] < net.hidden_[best]) best = i;
      }
      net.split_ = best + 1;  // h ends after layer `best`'s activation
    }
    return net;
  }

  /// Shallow copy whose parameters are leaves of the given graph.
  DynamicsNet attached(Graph& g) const {
    DynamicsNet net = *this;
    for (auto& [name, value] : net.params_.items()) {
      value = g.leaf(value.detached());
    }
    return net;
  }

  Tensor forward(const Tensor& z, const Tensor& t) const {
    return forward_range(z, t, 0, layer_count());
  }

  Tensor forward(const Tensor& z, double t) const {
    return forward(z, Tensor::scalar(t));
  }

  /// h(z): layers up to the split, activation included.
  Tensor forward_prefix(const Tensor& z, const Tensor& t) const {
    return forward_range(z, t, 0, split_index());
  }

  /// g(h): layers from the split to the output.
  Tensor forward_suffix(const Tensor& h, const Tensor& t) const {
    return forward_range(h, t, split_index(), layer_count());
  }

  /// Splits the forward pass: returns h(z) and a closure computing g from
  /// any tensor of the same width, so g(h) reproduces forward() bit for bit.
  std::pair<Tensor, std::function<Tensor(const Tensor&)>> split_forward(
      const Tensor& z, const Tensor& t) const {
    Tensor hidden = forward_prefix(z, t);
    DynamicsNet self = *this;
    Tensor time = t;
    auto finish = [self, time](const Tensor& h) { return self.forward_suffix(h, time); };
    return {hidden, finish};
  }

  std::size_t layer_in_width(std::size_t l) const {
    return l == 0 ? dim_ : hidden_[l - 1];
  }
  std::size_t layer_out_width(std::size_t l) const {
    return l == hidden_.size() ? dim_ : hidden_[l];
  }

  static std::string layer_name(std::size_t l) {
    return "layer" + std::to_string(l);
  }

 private:
  Tensor forward_range(const Tensor& input, const Tensor& t, std::size_t l0,
                       std::size_t l1) const {
    if (input.rank() != 2 || input.cols() != layer_in_width(l0)) {
      throw ShapeError("DynamicsNet: input " + shape_str(input) + " does not match layer " +
                       std::to_string(l0) + " width " +
                       std::to_string(layer_in_width(l0)));
    }
    if (t.size() != 1) {
      throw ShapeError("DynamicsNet: time must be a single element, got " + shape_str(t));
    }
    const std::size_t batch = input.rows();
    Tensor tcol = bcast_rows(t, batch);  // (batch, 1)
    Tensor h = input;
    for (std::size_t l = l0; l < l1; ++l) {
      const Tensor& w = params_.at(layer_name(l) + ".W");
      const Tensor& bias = params_.at(layer_name(l) + ".b");
      h = add(matmul(concat_cols(h, tcol), w), bcast_rows(bias, batch));
      if (l + 1 < layer_count()) h = apply_activation(act_, h);
    }
    return h;
  }

  std::size_t dim_ = 0;
  std::vector<std::size_t> hidden_;
  Activation act_ = Activation::kTanh;
  std::optional<std::size_t> split_;
  ParamStore params_;
};

}  // namespace cnflow
