#include "sprout/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>

#include "sprout/error.hpp"
#include "sprout/rng.hpp"

namespace sprout {

namespace {

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t be32(const std::vector<std::uint8_t>& b, std::size_t at) {
  return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) |
         (std::uint32_t{b[at + 2]} << 8) | std::uint32_t{b[at + 3]};
}

void put_be32(std::ofstream& out, std::uint32_t v) {
  const char bytes[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16),
                         static_cast<char>(v >> 8), static_cast<char>(v)};
  out.write(bytes, 4);
}

}  // namespace

void Dataset::validate() const {
  if (labels.empty()) throw DataError(name + ": empty dataset");
  if (images.rank() != 4 || images.dim(0) != labels.size())
    throw DataError(name + ": image tensor " + ad::to_string(images.shape()) + " does not match " +
                    std::to_string(labels.size()) + " labels");
  for (double v : images.data())
    if (!(v >= 0.0 && v <= 1.0)) throw DataError(name + ": pixel outside [0,1]");
  for (std::size_t y : labels)
    if (y >= num_classes)
      throw DataError(name + ": label " + std::to_string(y) + " >= K=" +
                      std::to_string(num_classes));
}

ad::Tensor Dataset::gather_images(std::span<const std::size_t> index) const {
  const std::size_t d = example_size();
  ad::Shape shape = images.shape();
  shape[0] = index.size();
  ad::Tensor out(shape);
  for (std::size_t i = 0; i < index.size(); ++i)
    std::copy_n(images.data().begin() + static_cast<std::ptrdiff_t>(index[i] * d), d,
                out.data().begin() + static_cast<std::ptrdiff_t>(i * d));
  return out;
}

Dataset Dataset::subset(std::span<const std::size_t> index) const {
  Dataset out;
  out.images = gather_images(index);
  for (std::size_t i : index) out.labels.push_back(labels.at(i));
  out.num_classes = num_classes;
  out.name = name;
  return out;
}

Dataset Dataset::head(std::size_t n) const {
  std::vector<std::size_t> idx(std::min(n, size()));
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return subset(idx);
}

Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                 std::optional<std::size_t> max_n, std::size_t num_classes) {
  const auto img = read_file(images);
  const auto lab = read_file(labels);
  if (img.size() < 16 || be32(img, 0) != 0x00000803)
    throw DataError("idx: bad image magic in " + images.string());
  if (lab.size() < 8 || be32(lab, 0) != 0x00000801)
    throw DataError("idx: bad label magic in " + labels.string());
  const std::size_t n = be32(img, 4), rows = be32(img, 8), cols = be32(img, 12);
  const std::size_t nl = be32(lab, 4);
  if (img.size() < 16 + n * rows * cols) throw DataError("idx: truncated image file " + images.string());
  if (lab.size() < 8 + nl) throw DataError("idx: truncated label file " + labels.string());
  if (n != nl)
    throw DataError("idx: image count " + std::to_string(n) + " != label count " +
                    std::to_string(nl));
  const std::size_t take = std::min(n, max_n.value_or(n));
  if (take == 0) throw DataError("idx: empty dataset");

  Dataset d;
  d.name = images.filename().string();
  d.num_classes = num_classes;
  d.images = ad::Tensor(ad::Shape{take, 1, rows, cols});
  for (std::size_t i = 0; i < take * rows * cols; ++i) d.images[i] = img[16 + i] / 255.0;
  d.labels.assign(lab.begin() + 8, lab.begin() + 8 + static_cast<std::ptrdiff_t>(take));
  d.validate();
  return d;
}

Dataset load_cifar_bin(const std::filesystem::path& path, std::optional<std::size_t> max_n) {
  constexpr std::size_t record = 3073, plane = 1024;
  const auto bytes = read_file(path);
  if (bytes.empty() || bytes.size() % record != 0)
    throw DataError("cifar: file length " + std::to_string(bytes.size()) +
                    " is not a multiple of 3073");
  const std::size_t n = bytes.size() / record;
  const std::size_t take = std::min(n, max_n.value_or(n));
  if (take == 0) throw DataError("cifar: empty dataset");
  Dataset d;
  d.name = path.filename().string();
  d.num_classes = 10;
  d.images = ad::Tensor(ad::Shape{take, 3, 32, 32});
  for (std::size_t i = 0; i < take; ++i) {
    const std::uint8_t* r = bytes.data() + i * record;
    d.labels.push_back(r[0]);
    for (std::size_t p = 0; p < 3 * plane; ++p) d.images[i * 3 * plane + p] = r[1 + p] / 255.0;
  }
  d.validate();
  return d;
}

Dataset synth_blobs(std::size_t num_classes, std::size_t n_per_class, std::size_t dim,
                    double separation, std::uint64_t seed) {
  if (num_classes < 2) throw ConfigError("synth_blobs: need K >= 2");
  if (dim < 2 || dim < num_classes) throw ConfigError("synth_blobs: need dim >= max(2, K)");
  if (!(separation >= 0.0)) throw ConfigError("synth_blobs: separation must be >= 0");
  if (n_per_class == 0) throw ConfigError("synth_blobs: n_per_class must be positive");
  std::size_t d1 = static_cast<std::size_t>(std::sqrt(static_cast<double>(dim)));
  while (d1 > 1 && dim % d1 != 0) --d1;
  if (d1 < 2) throw ConfigError("synth_blobs: dim " + std::to_string(dim) + " has no d1 x d2 grid");
  const std::size_t d2 = dim / d1;

  // Means on scaled unit axes: pairwise distance separation * sigma.
  const double offset = separation * kBlobSigma / std::sqrt(2.0);
  Rng rng(seed);
  Dataset d;
  d.name = "blobs";
  d.num_classes = num_classes;
  const std::size_t n = num_classes * n_per_class;
  d.images = ad::Tensor(ad::Shape{n, 1, d1, d2});
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t k = i % num_classes;
    d.labels.push_back(k);
    for (std::size_t j = 0; j < dim; ++j) {
      const double mu = 0.5 - offset / 2 + (j == k ? offset : 0.0);
      d.images[i * dim + j] = std::clamp(mu + kBlobSigma * rng.normal(), 0.0, 1.0);
    }
  }
  d.validate();
  return d;
}

ad::Tensor one_hot(std::span<const std::size_t> labels, std::size_t num_classes) {
  ad::Tensor y(ad::Shape{labels.size(), num_classes}, 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i) y[i * num_classes + labels[i]] = 1.0;
  return y;
}

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size,
                                                    std::uint64_t seed, std::uint64_t epoch) {
  if (batch_size == 0 || batch_size > n)
    throw ConfigError("minibatch: batch_size must be in [1, N]");
  Rng rng = Rng::derive(seed, {0x7065726dull, epoch});
  const auto perm = rng.permutation(n);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t at = 0; at < n; at += batch_size)
    out.emplace_back(perm.begin() + static_cast<std::ptrdiff_t>(at),
                     perm.begin() + static_cast<std::ptrdiff_t>(std::min(n, at + batch_size)));
  return out;
}

LabeledBatch make_batch(const Dataset& data, std::span<const std::size_t> index) {
  LabeledBatch b;
  b.x = data.gather_images(index);
  b.index.assign(index.begin(), index.end());
  for (std::size_t i : index) b.labels.push_back(data.labels[i]);
  b.y = one_hot(b.labels, data.num_classes);
  return b;
}

std::vector<LabeledBatch> minibatch_iter(const Dataset& data, std::size_t batch_size,
                                         std::uint64_t seed, std::uint64_t epoch) {
  std::vector<LabeledBatch> out;
  for (const auto& idx : epoch_batches(data.size(), batch_size, seed, epoch))
    out.push_back(make_batch(data, idx));
  return out;
}

void write_idx_images(const std::filesystem::path& path, std::span<const std::uint8_t> pixels,
                      std::size_t n, std::size_t rows, std::size_t cols) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  put_be32(out, 0x00000803);
  put_be32(out, static_cast<std::uint32_t>(n));
  put_be32(out, static_cast<std::uint32_t>(rows));
  put_be32(out, static_cast<std::uint32_t>(cols));
  out.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
}

void write_idx_labels(const std::filesystem::path& path, std::span<const std::uint8_t> labels) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  put_be32(out, 0x00000801);
  put_be32(out, static_cast<std::uint32_t>(labels.size()));
  out.write(reinterpret_cast<const char*>(labels.data()), static_cast<std::streamsize>(labels.size()));
}

}  // namespace sprout
