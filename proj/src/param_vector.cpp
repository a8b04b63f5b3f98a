#include "medl/param_vector.hpp"

#include <cmath>
#include <string>

#include "medl/errors.hpp"

namespace medl {

NetworkLayout::NetworkLayout(std::vector<LayerSpec> layers) : layers_(std::move(layers)) {
  if (layers_.empty()) {
    throw ConfigError("NetworkLayout: at least one layer required");
  }
  offsets_.reserve(layers_.size());
  std::size_t offset = 0;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const LayerSpec& spec = layers_[l];
    if (spec.in == 0 || spec.out == 0) {
      throw ConfigError("NetworkLayout: zero-width layer " + std::to_string(l));
    }
    if (l > 0 && spec.in != layers_[l - 1].out) {
      throw ConfigError("NetworkLayout: layer " + std::to_string(l) +
                        " input width does not match previous output width");
    }
    offsets_.push_back(offset);
    offset += spec.param_count();
  }
  param_count_ = offset;
}

std::size_t NetworkLayout::input_dim() const {
  if (layers_.empty()) {
    throw ConfigError("NetworkLayout: empty layout");
  }
  return layers_.front().in;
}

std::size_t NetworkLayout::output_dim() const {
  if (layers_.empty()) {
    throw ConfigError("NetworkLayout: empty layout");
  }
  return layers_.back().out;
}

std::size_t NetworkLayout::bias_offset(std::size_t layer) const {
  const LayerSpec& spec = layers_[layer];
  return offsets_[layer] + spec.in * spec.out;
}

NetworkLayout NetworkSpec::layout() const {
  if (input_dim == 0) {
    throw ConfigError("NetworkSpec: input_dim must be positive");
  }
  std::vector<LayerSpec> layers;
  std::size_t prev = input_dim;
  for (const std::size_t width : hidden) {
    layers.push_back({prev, width, hidden_act});
    prev = width;
  }
  layers.push_back({prev, head_width, head_act});
  return NetworkLayout(std::move(layers));
}

void glorot_init(const NetworkLayout& layout, std::span<double> params, Rng& rng) {
  if (params.size() != layout.param_count()) {
    throw ConfigError("glorot_init: parameter span size mismatch");
  }
  for (std::size_t l = 0; l < layout.depth(); ++l) {
    const LayerSpec& spec = layout.layers()[l];
    const double limit = std::sqrt(6.0 / static_cast<double>(spec.in + spec.out));
    const std::size_t w0 = layout.weight_offset(l);
    for (std::size_t i = 0; i < spec.in * spec.out; ++i) {
      params[w0 + i] = limit * (2.0 * rng.uniform() - 1.0);
    }
    const std::size_t b0 = layout.bias_offset(l);
    for (std::size_t i = 0; i < spec.out; ++i) {
      params[b0 + i] = 0.0;
    }
  }
}

}  // namespace medl
