#ifndef MEDL_PARAM_VECTOR_HPP
#define MEDL_PARAM_VECTOR_HPP

#include <cstddef>
#include <span>
#include <vector>

#include "medl/rng.hpp"

namespace medl {

enum class Activation { identity, relu, sigmoid, softmax };

struct LayerSpec {
  std::size_t in = 0;
  std::size_t out = 0;
  Activation act = Activation::identity;

  std::size_t param_count() const { return in * out + out; }
  bool operator==(const LayerSpec&) const = default;
};

// Maps contiguous slices of one flat parameter vector onto dense layers.
// Layer l owns [weight_offset(l), weight_offset(l) + in*out) as a row-major
// (out x in) weight block followed by `out` biases. Total length is
// sum(in*out + out) over layers.
class NetworkLayout {
 public:
  NetworkLayout() = default;
  explicit NetworkLayout(std::vector<LayerSpec> layers);

  const std::vector<LayerSpec>& layers() const { return layers_; }
  std::size_t depth() const { return layers_.size(); }
  std::size_t param_count() const { return param_count_; }
  std::size_t input_dim() const;
  std::size_t output_dim() const;
  std::size_t weight_offset(std::size_t layer) const { return offsets_[layer]; }
  std::size_t bias_offset(std::size_t layer) const;

  bool operator==(const NetworkLayout&) const = default;

 private:
  std::vector<LayerSpec> layers_;
  std::vector<std::size_t> offsets_;
  std::size_t param_count_ = 0;
};

// Convenience description of an MLP: hidden widths share one activation, the
// head gets its own. hidden may be empty (affine model plus head activation).
struct NetworkSpec {
  std::size_t input_dim = 0;
  std::vector<std::size_t> hidden = {4, 4, 4, 4};
  std::size_t head_width = 1;
  Activation head_act = Activation::sigmoid;
  Activation hidden_act = Activation::relu;

  NetworkLayout layout() const;
};

struct ParamVector {
  NetworkLayout layout;
  std::vector<double> values;

  ParamVector() = default;
  explicit ParamVector(NetworkLayout l)
      : layout(std::move(l)), values(layout.param_count(), 0.0) {}
};

// Glorot-uniform weights, zero biases. `params` must span layout.param_count().
void glorot_init(const NetworkLayout& layout, std::span<double> params, Rng& rng);

}  // namespace medl

#endif  // MEDL_PARAM_VECTOR_HPP
