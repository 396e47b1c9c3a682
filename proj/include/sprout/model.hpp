#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sprout/autodiff.hpp"
#include "sprout/data.hpp"

namespace sprout {

enum class Arch { mlp, cnn };

std::string to_string(Arch a);
Arch parse_arch(const std::string& s);

/// Architecture description. Layer sizes follow deterministically:
///   mlp: flatten -> dense(128 w) -> relu -> dense(K)
///   cnn: conv(8 w, 3x3) -> relu -> conv(16 w, 3x3) -> relu -> mean-pool(pool) -> dense(K)
/// pool = 0 averages the whole feature map.
struct ModelSpec {
  Arch arch = Arch::cnn;
  std::size_t width_factor = 1;
  std::size_t channels = 1;
  std::size_t height = 28;
  std::size_t width = 28;
  std::size_t num_classes = 10;
  std::size_t pool = 4;

  void validate() const;
  std::vector<std::pair<std::string, ad::Shape>> parameter_shapes() const;
  bool operator==(const ModelSpec&) const = default;
};

ModelSpec spec_for(const Dataset& data, Arch arch, std::size_t width_factor = 1,
                   std::size_t pool = 4);

/// Throws DataError when the dataset's input shape or K differs from the model's.
void check_compatible(const ModelSpec& spec, const Dataset& data);

struct Model {
  ModelSpec spec;
  std::vector<std::string> names;
  std::vector<ad::Tensor> params;

  /// Records the forward pass; params must be nodes of x's tape, in `names` order.
  ad::Var forward(ad::Var x, std::span<const ad::Var> param_vars) const;
  /// Records with all parameters as constants.
  ad::Var forward(ad::Var x) const;

  /// Logits for a batch, evaluated in chunks without keeping a record.
  ad::Tensor logits(const ad::Tensor& x) const;
  std::vector<std::size_t> predict(const ad::Tensor& x) const;

  const ad::Tensor& param(const std::string& name) const;
  std::size_t parameter_count() const;
};

/// Fan-in scaled uniform weights U(-1/sqrt(fan_in), 1/sqrt(fan_in)), zero biases.
Model build_model(const ModelSpec& spec, std::uint64_t seed);

}  // namespace sprout
