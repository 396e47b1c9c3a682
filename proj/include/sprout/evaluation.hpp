#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "sprout/attacks.hpp"
#include "sprout/autodiff.hpp"
#include "sprout/data.hpp"
#include "sprout/dirichlet.hpp"
#include "sprout/model.hpp"
#include "sprout/training.hpp"

namespace sprout {

/// Named metrics, optional matrices and provenance. Serialized as JSON with
/// keys in sorted order; NaN entries (not-applicable cells) become null.
struct EvalReport {
  std::string kind;
  std::map<std::string, double> metrics;
  std::map<std::string, ad::Tensor> matrices;
  std::map<std::string, std::string> provenance;
  std::vector<std::string> notes;

  /// Throws NumericError when an accuracy leaves [0,1], a cosine leaves [-1,1]
  /// or a matrix holds an infinite value.
  void validate() const;
  std::string to_json() const;
  void write_json(const std::filesystem::path& path) const;
};

/// FNV-1a over name, shape, labels and pixel bytes, as 16 hex digits.
std::string dataset_id(const Dataset& data);
std::map<std::string, std::string> attack_provenance(const AttackSpec& spec);

double accuracy(const Model& model, const Dataset& data);
double robust_accuracy(const Model& model, const Dataset& data, const AttackSpec& spec);

// Invariance transforms, all on N x C x H x W batches with values in [0, 1].
/// Rotation about the image center, bilinear interpolation, zero fill.
ad::Tensor rotate(const ad::Tensor& x, double degrees);
ad::Tensor brightness(const ad::Tensor& x, double factor);
/// clip(m + factor (x - m)) with m the per-image mean over all pixels and channels.
ad::Tensor contrast(const ad::Tensor& x, double factor);
/// Channel mean replicated to every channel; requires C = 3.
ad::Tensor grayscale(const ad::Tensor& x);

struct InvarianceOptions {
  double rotation_degrees = 10;
  double brightness_factor = 1.5;
  double contrast_factor = 2;
};

/// Accuracy under each transform, keyed clean, rotation, brightness, contrast,
/// grayscale. Grayscale maps to nullopt unless C = 3.
std::map<std::string, std::optional<double>> invariance_suite(const Model& model, const Dataset& data,
                                                              const InvarianceOptions& opts = {});

struct Landscape {
  ad::Tensor loss;        // (n_grid + 1) x (n_grid + 1), rows follow u, columns v
  std::vector<double> u;  // along sign of the input gradient
  std::vector<double> v;  // along a Rademacher direction

  double range() const;
};

/// Cross-entropy on the plane x + u d1 + v d2 (clipped to [0,1]) for one example.
Landscape loss_landscape(const Model& model, const ad::Tensor& x, std::size_t label,
                         std::size_t n_grid = 20, double max_mag = 0.1, std::uint64_t seed = 0);

struct Diversity {
  std::vector<std::string> names;
  ad::Tensor cosine;  // M x M, diagonal NaN
  std::size_t used = 0;
  std::size_t excluded = 0;  // examples where some model had a zero input gradient
};

/// Average pairwise cosine between flattened input gradients of the CE loss at
/// the true label over the first n_examples of data.
Diversity gradient_diversity(const std::vector<std::pair<std::string, const Model*>>& models,
                             const Dataset& data, std::size_t n_examples);

/// beta_s beta_t matrix; also written to `csv` when a path is given.
ad::Tensor beta_correlation_export(const DirichletParams& beta,
                                   const std::optional<std::filesystem::path>& csv = std::nullopt);

void write_matrix_csv(const std::filesystem::path& path, const ad::Tensor& m,
                      const std::vector<double>& row_axis = {},
                      const std::vector<double>& col_axis = {});

struct BenchRow {
  std::string name;
  double seconds = 0;
  double seconds_per_epoch = 0;
  double median_epoch_seconds = 0;
  double ratio_to_natural = 0;  // of mean epoch times
};

/// Trains every config from random init for `epochs` epochs on the same data
/// order and times the epochs. Epochs of the configs interleave, in an order
/// that reverses every epoch. Ratios are relative to the first natural config
/// (or the first config when none is natural).
std::vector<BenchRow> runtime_benchmark(const Dataset& data,
                                        const std::vector<std::pair<std::string, TrainConfig>>& configs,
                                        std::size_t epochs);

}  // namespace sprout
