#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cdkt/tensor.hpp"

namespace cdkt {

enum class LayerKind { dense, conv2d, maxpool2d, relu, flatten };

const char* to_string(LayerKind kind);
LayerKind layer_kind_from_string(const std::string& name);

struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  // dense: in_features/out_features. conv2d: in_channels/out_channels in the
  // same slots plus kernel and stride. maxpool2d: pool (stride == pool).
  Index in = 0;
  Index out = 0;
  Index kernel = 0;
  Index stride = 1;
  Index pool = 2;

  static LayerSpec dense(Index in, Index out) { return {LayerKind::dense, in, out}; }
  static LayerSpec conv2d(Index in_channels, Index out_channels, Index kernel, Index stride = 1) {
    return {LayerKind::conv2d, in_channels, out_channels, kernel, stride};
  }
  static LayerSpec maxpool2d(Index pool = 2) { return {LayerKind::maxpool2d, 0, 0, 0, pool, pool}; }
  static LayerSpec relu() { return {LayerKind::relu}; }
  static LayerSpec flatten() { return {LayerKind::flatten}; }

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

std::string describe(const LayerSpec& spec);

struct Parameter {
  Tensor value;
  Tensor grad;
  std::size_t id = 0;
};

// Per-layer activations retained by a forward pass for the matching backward.
struct ForwardCache {
  std::vector<Tensor> inputs;                  // input to each layer
  std::vector<std::vector<RowMatrix>> columns;  // conv2d: im2col per example
  std::vector<std::vector<Index>> argmax;       // maxpool2d: source offset per output
  Shape output_shape;
  Shape embedding_shape;
  bool valid = false;
};

struct ForwardResult {
  Tensor embedding;  // e: activation after the embedding tap
  Tensor logits;     // z: final-layer pre-softmax activation
};

class Model {
 public:
  Model() = default;

  const std::vector<LayerSpec>& layers() const { return specs_; }
  std::size_t embed_tap() const { return embed_tap_; }
  // Per-example input shape the stack was validated against; empty if unknown.
  const Shape& input_shape() const { return input_shape_; }

  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }
  Index parameter_count() const;

  // Forward pass that keeps its activations in the model for backward().
  ForwardResult forward(const Tensor& x);
  // Forward pass that keeps its activations in a caller-owned cache.
  ForwardResult forward(const Tensor& x, ForwardCache& cache) const;
  // Forward pass without any caching; never mutates the model.
  ForwardResult predict(const Tensor& x) const;

  // Accumulates gradients of sum(dz * z) + sum(de * e) into every Parameter.
  void backward(const Tensor& dz, const Tensor* de = nullptr);
  void backward(const ForwardCache& cache, const Tensor& dz, const Tensor* de = nullptr);

  void zero_grads();
  void sgd_step(double lr);

  Tensor get_params() const;
  void set_params(const Tensor& flat);

  static Model build(std::span<const LayerSpec> arch, std::size_t embed_tap, std::uint64_t seed,
                     const Shape& input_shape);

 private:
  ForwardResult run(const Tensor& x, ForwardCache* cache) const;

  std::vector<LayerSpec> specs_;
  std::vector<std::size_t> first_param_;  // index into params_ per layer
  std::vector<Parameter> params_;
  std::size_t embed_tap_ = 0;
  Shape input_shape_;
  ForwardCache cache_;
};

// Builds and initializes a model. Weights are Glorot-uniform from a generator
// seeded with `seed`; biases start at zero. When `input_shape` (per example)
// is given, every layer's input shape is inferred and checked.
Model build_model(std::span<const LayerSpec> arch, std::size_t embed_tap, std::uint64_t seed,
                  const Shape& input_shape = {});

// Shape of the activation after the first `upto` layers for one example.
Shape infer_shape(std::span<const LayerSpec> arch, const Shape& input_shape, std::size_t upto);

// Checkpoint: `<path>` holds an 8-byte little-endian parameter count followed
// by little-endian doubles in ordinal order; `<path>.json` describes the stack.
void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);

}  // namespace cdkt
