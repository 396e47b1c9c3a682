#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sprout/autodiff.hpp"

namespace sprout {

/// Labelled images, N x C x H x W with pixels in [0, 1].
struct Dataset {
  ad::Tensor images;
  std::vector<std::size_t> labels;
  std::size_t num_classes = 0;
  std::string name;

  std::size_t size() const { return labels.size(); }
  std::size_t channels() const { return images.dim(1); }
  std::size_t height() const { return images.dim(2); }
  std::size_t width() const { return images.dim(3); }
  std::size_t example_size() const { return images.size() / images.dim(0); }

  /// Throws DataError unless every pixel is in [0,1], every label < K and N >= 1.
  void validate() const;

  Dataset subset(std::span<const std::size_t> index) const;
  Dataset head(std::size_t n) const;
  ad::Tensor gather_images(std::span<const std::size_t> index) const;
};

/// IDX pair (magic 0x00000803 images, 0x00000801 labels). Pixels scaled by 1/255.
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                 std::optional<std::size_t> max_n = std::nullopt, std::size_t num_classes = 10);

/// CIFAR-10 binary batch: records of 1 label byte + 3072 pixel bytes (R, G, B planes).
Dataset load_cifar_bin(const std::filesystem::path& path,
                       std::optional<std::size_t> max_n = std::nullopt);

/// Isotropic Gaussian clusters (std 0.05) whose means are `separation` standard
/// deviations apart, clipped to [0,1] and laid out as N x 1 x d1 x d2.
Dataset synth_blobs(std::size_t num_classes, std::size_t n_per_class, std::size_t dim,
                    double separation, std::uint64_t seed);

inline constexpr double kBlobSigma = 0.05;

struct LabeledBatch {
  ad::Tensor x;                      // B x C x H x W
  ad::Tensor y;                      // B x K, rows on the simplex
  std::vector<std::size_t> labels;   // class indices
  std::vector<std::size_t> index;    // dataset rows
};

ad::Tensor one_hot(std::span<const std::size_t> labels, std::size_t num_classes);

/// Index batches for one epoch: a permutation derived from (seed, epoch), cut
/// into batches of batch_size with a final short batch.
std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size,
                                                    std::uint64_t seed, std::uint64_t epoch);

LabeledBatch make_batch(const Dataset& data, std::span<const std::size_t> index);

/// Every minibatch of one epoch, materialized.
std::vector<LabeledBatch> minibatch_iter(const Dataset& data, std::size_t batch_size,
                                         std::uint64_t seed, std::uint64_t epoch);

/// Writers used by the CLI tests and the dataset tooling.
void write_idx_images(const std::filesystem::path& path, std::span<const std::uint8_t> pixels,
                      std::size_t n, std::size_t rows, std::size_t cols);
void write_idx_labels(const std::filesystem::path& path, std::span<const std::uint8_t> labels);

}  // namespace sprout
