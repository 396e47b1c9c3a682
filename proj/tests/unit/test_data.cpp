#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>

#include "sprout/autodiff.hpp"
#include "sprout/checkpoint.hpp"
#include "sprout/data.hpp"
#include "sprout/error.hpp"
#include "sprout/model.hpp"
#include "sprout/rng.hpp"

using namespace sprout;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "sproutlab-test-data";
  fs::create_directories(dir);
  return dir / name;
}

std::vector<std::uint8_t> read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const fs::path& p, const std::vector<std::uint8_t>& b) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

// 4 images of 28x28; image i has every pixel equal to 60*i, except pixel 0 of
// image 3 which is 255.
std::pair<fs::path, fs::path> idx_fixture(std::size_t n_labels = 4) {
  std::vector<std::uint8_t> px(4 * 28 * 28);
  for (std::size_t i = 0; i < 4; ++i)
    std::fill_n(px.begin() + static_cast<std::ptrdiff_t>(i * 784), 784, static_cast<std::uint8_t>(60 * i));
  px[3 * 784] = 255;
  std::vector<std::uint8_t> labels = {3, 1, 4, 1};
  labels.resize(n_labels);
  const auto img = scratch("fixture-images.idx");
  const auto lab = scratch("fixture-labels-" + std::to_string(n_labels) + ".idx");
  write_idx_images(img, px, 4, 28, 28);
  write_idx_labels(lab, labels);
  return {img, lab};
}

}  // namespace

TEST_CASE("IDX fixture round trip") {
  auto [img, lab] = idx_fixture();
  Dataset d = load_idx(img, lab);
  CHECK(d.size() == 4);
  CHECK(d.images.shape() == ad::Shape{4, 1, 28, 28});
  CHECK(d.labels == std::vector<std::size_t>{3, 1, 4, 1});
  CHECK(d.images[3 * 784] == 1.0);
  CHECK(d.images[784 + 5] == 60.0 / 255.0);
  CHECK(load_idx(img, lab, 2).size() == 2);
}

TEST_CASE("IDX errors") {
  auto [img, lab3] = idx_fixture(3);
  CHECK_THROWS_AS(load_idx(img, lab3), DataError);
  auto [img4, lab4] = idx_fixture();
  CHECK_THROWS_AS(load_idx(lab4, lab4), DataError);  // labels magic where images expected
  auto bytes = read_bytes(img4);
  bytes.resize(bytes.size() - 100);
  const auto cut = scratch("truncated-images.idx");
  write_bytes(cut, bytes);
  CHECK_THROWS_AS(load_idx(cut, lab4), DataError);
  CHECK_THROWS_AS(load_idx(scratch("missing.idx"), lab4), DataError);
}

TEST_CASE("CIFAR binary record") {
  std::vector<std::uint8_t> rec(3073);
  rec[0] = 7;
  std::fill(rec.begin() + 1, rec.begin() + 1025, 255);     // red plane
  std::fill(rec.begin() + 1025, rec.begin() + 2049, 0);    // green
  std::fill(rec.begin() + 2049, rec.end(), 51);            // blue
  const auto path = scratch("cifar.bin");
  write_bytes(path, rec);
  Dataset d = load_cifar_bin(path);
  CHECK(d.size() == 1);
  CHECK(d.labels == std::vector<std::size_t>{7});
  CHECK(d.images.shape() == ad::Shape{1, 3, 32, 32});
  CHECK(d.images[0] == 1.0);
  CHECK(d.images[1023] == 1.0);
  CHECK(d.images[1024] == 0.0);
  CHECK(d.images[2048] == 0.2);
  CHECK_THROWS_AS(load_cifar_bin(path, 0), DataError);

  rec.push_back(0);
  write_bytes(path, rec);
  CHECK_THROWS_AS(load_cifar_bin(path), DataError);
}

TEST_CASE("synthetic blobs") {
  Dataset a = synth_blobs(2, 200, 16, 10.0, 11);
  Dataset b = synth_blobs(2, 200, 16, 10.0, 11);
  CHECK(a.images == b.images);
  CHECK(a.labels == b.labels);
  CHECK(a.images.shape() == ad::Shape{400, 1, 4, 4});
  CHECK_NOTHROW(a.validate());
  CHECK_THROWS_AS(synth_blobs(2, 10, 7, 10.0, 1), ConfigError);

  // The class means differ along e_0 - e_1; projecting onto it separates them.
  std::size_t correct = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double s = a.images[i * 16] - a.images[i * 16 + 1];
    correct += (s > 0) == (a.labels[i] == 0);
  }
  CHECK(static_cast<double>(correct) / a.size() >= 0.99);

  // separation 0: both classes come from the same distribution.
  Dataset z = synth_blobs(2, 2000, 16, 0.0, 3);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double s = z.images[i * 16] - z.images[i * 16 + 1];
    hits += (s > 0) == (z.labels[i] == 0);
  }
  CHECK(std::abs(static_cast<double>(hits) / z.size() - 0.5) < 0.05);
}

TEST_CASE("minibatches") {
  Dataset d = synth_blobs(2, 5, 4, 5.0, 1);
  auto batches = minibatch_iter(d, 4, 9, 0);
  REQUIRE(batches.size() == 3);
  CHECK(batches[0].labels.size() == 4);
  CHECK(batches[1].labels.size() == 4);
  CHECK(batches[2].labels.size() == 2);
  std::multiset<std::size_t> seen;
  for (const auto& b : batches) {
    seen.insert(b.index.begin(), b.index.end());
    for (std::size_t r = 0; r < b.labels.size(); ++r) {
      CHECK(b.y[r * 2 + b.labels[r]] == 1.0);
      CHECK(b.y[r * 2] + b.y[r * 2 + 1] == 1.0);
    }
  }
  std::multiset<std::size_t> all;
  for (std::size_t i = 0; i < 10; ++i) all.insert(i);
  CHECK(seen == all);

  auto e0 = epoch_batches(10, 4, 9, 0);
  auto e1 = epoch_batches(10, 4, 9, 1);
  CHECK(e0 == epoch_batches(10, 4, 9, 0));
  CHECK(e0 != e1);
  std::vector<std::size_t> f0, f1;
  for (auto& b : e0) f0.insert(f0.end(), b.begin(), b.end());
  for (auto& b : e1) f1.insert(f1.end(), b.begin(), b.end());
  std::sort(f0.begin(), f0.end());
  std::sort(f1.begin(), f1.end());
  CHECK(f0 == f1);
}

TEST_CASE("model shapes") {
  ModelSpec mlp{Arch::mlp, 1, 1, 28, 28, 10, 4};
  auto shapes = mlp.parameter_shapes();
  REQUIRE(shapes.size() == 4);
  CHECK(shapes[0].second == ad::Shape{784, 128});
  CHECK(shapes[2].second == ad::Shape{128, 10});

  ModelSpec c1{Arch::cnn, 1, 1, 28, 28, 10, 4};
  ModelSpec c4 = c1;
  c4.width_factor = 4;
  auto s1 = c1.parameter_shapes();
  auto s4 = c4.parameter_shapes();
  CHECK(s4[0].second[0] == 4 * s1[0].second[0]);
  CHECK(s4[2].second[0] == 4 * s1[2].second[0]);

  Model a = build_model(c1, 5);
  Model b = build_model(c1, 5);
  CHECK(a.params == b.params);
  CHECK(a.params != build_model(c1, 6).params);
  for (const auto& name : a.names)
    if (name.ends_with(".bias"))
      for (double v : a.param(name).data()) CHECK(v == 0.0);

  ModelSpec bad = c1;
  bad.width_factor = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("full model cross-entropy passes finite differences") {
  Rng rng(21);
  ad::Tensor x(ad::Shape{8, 1, 8, 8});
  for (double& v : x.data()) v = rng.uniform();
  std::vector<std::size_t> labels(8);
  for (auto& l : labels) l = rng.index(10);
  const ad::Tensor y = one_hot(labels, 10);

  for (Arch arch : {Arch::cnn, Arch::mlp}) {
    CAPTURE(to_string(arch));
    ModelSpec spec{arch, 1, 1, 8, 8, 10, 4};
    Model m = build_model(spec, 3);
    // randomize biases so no relu input sits exactly at zero
    for (std::size_t p = 0; p < m.params.size(); ++p)
      if (m.names[p].ends_with(".bias"))
        for (double& v : m.params[p].data()) v = rng.uniform(-0.1, 0.1);
    auto loss_of = [&](ad::Tape& t, ad::Var xv) {
      return ad::scalar_multiply(ad::sum(ad::multiply(ad::log_softmax(m.forward(xv)), t.constant(y))),
                                 -1.0 / 8);
    };
    CHECK(ad::finite_diff_check(loss_of, x).max_rel_error < 1e-4);

    // gradient with respect to every parameter tensor
    for (std::size_t p = 0; p < m.params.size(); ++p) {
      CAPTURE(m.names[p]);
      auto wrt_param = [&](ad::Tape& t, ad::Var pv) {
        std::vector<ad::Var> vars;
        for (std::size_t q = 0; q < m.params.size(); ++q)
          vars.push_back(q == p ? pv : t.constant(m.params[q]));
        ad::Var z = m.forward(t.constant(x), vars);
        return ad::scalar_multiply(ad::sum(ad::multiply(ad::log_softmax(z), t.constant(y))), -1.0 / 8);
      };
      CHECK(ad::finite_diff_check(wrt_param, m.params[p]).max_rel_error < 1e-4);
    }
  }
}

TEST_CASE("checkpoint round trip") {
  Dataset d = synth_blobs(10, 2, 64, 5.0, 1);
  ModelSpec spec = spec_for(d, Arch::cnn, 2, 4);
  Checkpoint ck;
  ck.model = build_model(spec, 8);
  ck.log_beta = {0.1, -0.2, 0.3, 0, 0, 0, 0, 0, 0, 1e-300};
  ck.config = {{"train.mode", "sprout"}, {"train.seed", "8"}};
  ck.epoch = 5;
  ck.seed = 8;
  ck.seed_lineage = {1, 8};
  const auto p1 = scratch("ck1.ckpt");
  const auto p2 = scratch("ck2.ckpt");
  save_checkpoint(p1, ck);
  Checkpoint back = load_checkpoint(p1);
  save_checkpoint(p2, back);
  CHECK(read_bytes(p1) == read_bytes(p2));
  CHECK(checkpoint_id(p1) == checkpoint_id(p2));
  CHECK(back.model.spec == spec);
  CHECK(back.model.params == ck.model.params);
  CHECK(back.log_beta == ck.log_beta);
  CHECK(back.config == ck.config);
  CHECK(back.seed_lineage == ck.seed_lineage);
  CHECK(back.epoch == 5);
  CHECK(back.model.logits(d.images) == ck.model.logits(d.images));

  Dataset two = synth_blobs(2, 2, 64, 5.0, 1);
  CHECK_THROWS_AS(check_compatible(back.model.spec, two), DataError);
}

TEST_CASE("checkpoint errors") {
  Dataset d = synth_blobs(2, 2, 16, 5.0, 1);
  Checkpoint ck;
  ck.model = build_model(spec_for(d, Arch::mlp), 1);
  const auto path = scratch("ck-err.ckpt");
  save_checkpoint(path, ck);
  auto bytes = read_bytes(path);
  const std::string text(bytes.begin(), bytes.end());

  auto patched = [&](const std::string& from, const std::string& to) {
    std::string t = text;
    const auto at = t.find(from);
    REQUIRE(at != std::string::npos);
    t.replace(at, from.size(), to);
    const auto out = scratch("ck-patched.ckpt");
    write_bytes(out, std::vector<std::uint8_t>(t.begin(), t.end()));
    return out;
  };
  CHECK_THROWS_AS(load_checkpoint(patched("\"version\":1", "\"version\":7")), DataError);
  // same-length edit
  CHECK_THROWS_AS(load_checkpoint(patched("[16,128]", "[16,129]")), DataError);
  bytes.pop_back();
  write_bytes(path, bytes);
  CHECK_THROWS_AS(load_checkpoint(path), DataError);
}
