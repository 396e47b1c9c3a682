#include "sprout/model.hpp"

#include <algorithm>
#include <cmath>

#include "sprout/error.hpp"
#include "sprout/rng.hpp"

namespace sprout {

std::string to_string(Arch a) { return a == Arch::mlp ? "mlp" : "cnn"; }

Arch parse_arch(const std::string& s) {
  if (s == "mlp") return Arch::mlp;
  if (s == "cnn") return Arch::cnn;
  throw ConfigError("unknown architecture '" + s + "'");
}

void ModelSpec::validate() const {
  if (width_factor < 1) throw ConfigError("model: width_factor must be >= 1");
  if (num_classes < 2) throw ConfigError("model: need at least 2 classes");
  if (channels == 0 || height == 0 || width == 0) throw ConfigError("model: empty input shape");
  if (arch == Arch::cnn && pool != 0 && (height % pool != 0 || width % pool != 0))
    throw ConfigError("model: pool " + std::to_string(pool) + " does not tile " +
                      std::to_string(height) + "x" + std::to_string(width));
}

std::vector<std::pair<std::string, ad::Shape>> ModelSpec::parameter_shapes() const {
  const std::size_t in = channels * height * width;
  std::vector<std::pair<std::string, ad::Shape>> out;
  auto add = [&out](const char* name, ad::Shape shape) { out.emplace_back(name, std::move(shape)); };
  if (arch == Arch::mlp) {
    const std::size_t hidden = 128 * width_factor;
    add("fc1.weight", ad::Shape{in, hidden});
    add("fc1.bias", ad::Shape{hidden});
    add("fc2.weight", ad::Shape{hidden, num_classes});
    add("fc2.bias", ad::Shape{num_classes});
    return out;
  }
  const std::size_t c1 = 8 * width_factor, c2 = 16 * width_factor;
  const std::size_t cells = pool == 0 ? 1 : (height / pool) * (width / pool);
  add("conv1.weight", ad::Shape{c1, channels, 3, 3});
  add("conv1.bias", ad::Shape{c1});
  add("conv2.weight", ad::Shape{c2, c1, 3, 3});
  add("conv2.bias", ad::Shape{c2});
  add("fc.weight", ad::Shape{c2 * cells, num_classes});
  add("fc.bias", ad::Shape{num_classes});
  return out;
}

ModelSpec spec_for(const Dataset& data, Arch arch, std::size_t width_factor, std::size_t pool) {
  ModelSpec s;
  s.arch = arch;
  s.width_factor = width_factor;
  s.channels = data.channels();
  s.height = data.height();
  s.width = data.width();
  s.num_classes = data.num_classes;
  s.pool = pool;
  s.validate();
  return s;
}

void check_compatible(const ModelSpec& spec, const Dataset& data) {
  if (spec.num_classes != data.num_classes)
    throw DataError("model expects K=" + std::to_string(spec.num_classes) + " but dataset '" +
                    data.name + "' has K=" + std::to_string(data.num_classes));
  if (spec.channels != data.channels() || spec.height != data.height() ||
      spec.width != data.width())
    throw DataError("model input " + std::to_string(spec.channels) + "x" +
                    std::to_string(spec.height) + "x" + std::to_string(spec.width) +
                    " does not match dataset " + ad::to_string(data.images.shape()));
}

ad::Var Model::forward(ad::Var x, std::span<const ad::Var> p) const {
  const std::size_t n = x.shape().at(0);
  if (spec.arch == Arch::mlp) {
    ad::Var flat = ad::reshape(x, {n, spec.channels * spec.height * spec.width});
    ad::Var h = ad::relu(ad::add(ad::matmul(flat, p[0]), p[1]));
    return ad::add(ad::matmul(h, p[2]), p[3]);
  }
  ad::Var h1 = ad::relu(ad::conv2d(x, p[0], p[1]));
  ad::Var h2 = ad::relu(ad::conv2d(h1, p[2], p[3]));
  ad::Var pooled = ad::avg_pool2d(h2, spec.pool);
  ad::Var flat = ad::reshape(pooled, {n, pooled.value().size() / n});
  return ad::add(ad::matmul(flat, p[4]), p[5]);
}

ad::Var Model::forward(ad::Var x) const {
  std::vector<ad::Var> p;
  for (const auto& t : params) p.push_back(x.tape().constant(t));
  return forward(x, p);
}

ad::Tensor Model::logits(const ad::Tensor& x) const {
  constexpr std::size_t chunk = 500;
  const std::size_t n = x.dim(0);
  const std::size_t d = x.size() / n;
  ad::Tensor out(ad::Shape{n, spec.num_classes});
  for (std::size_t at = 0; at < n; at += chunk) {
    const std::size_t m = std::min(chunk, n - at);
    ad::Shape s = x.shape();
    s[0] = m;
    std::vector<double> part(x.data().begin() + static_cast<std::ptrdiff_t>(at * d),
                             x.data().begin() + static_cast<std::ptrdiff_t>((at + m) * d));
    ad::Tape tape;
    const ad::Tensor z = forward(tape.constant(ad::Tensor(s, std::move(part)))).value();
    std::copy(z.data().begin(), z.data().end(),
              out.data().begin() + static_cast<std::ptrdiff_t>(at * spec.num_classes));
  }
  return out;
}

std::vector<std::size_t> Model::predict(const ad::Tensor& x) const {
  const ad::Tensor z = logits(x);
  const std::size_t K = spec.num_classes;
  std::vector<std::size_t> out(z.dim(0));
  for (std::size_t i = 0; i < out.size(); ++i) {
    const auto row = z.data().subspan(i * K, K);
    out[i] = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

const ad::Tensor& Model::param(const std::string& name) const {
  for (std::size_t i = 0; i < names.size(); ++i)
    if (names[i] == name) return params[i];
  throw ConfigError("model has no parameter '" + name + "'");
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params) n += p.size();
  return n;
}

Model build_model(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  Model m;
  m.spec = spec;
  Rng rng = Rng::derive(seed, {0x696e6974ull});
  for (auto& [name, shape] : spec.parameter_shapes()) {
    ad::Tensor t(shape, 0.0);
    if (shape.size() > 1) {
      const std::size_t fan_in = shape.size() == 4 ? shape[1] * shape[2] * shape[3] : shape[0];
      const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
      for (double& v : t.data()) v = rng.uniform(-bound, bound);
    }
    m.names.push_back(name);
    m.params.push_back(std::move(t));
  }
  return m;
}

}  // namespace sprout
