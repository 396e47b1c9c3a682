#include "sprout/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <json.hpp>
#include <limits>
#include <memory>
#include <numbers>
#include <sstream>

#include "sprout/error.hpp"
#include "sprout/rng.hpp"
#include "sprout/vicinity.hpp"

namespace sprout {

namespace {

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

nlohmann::json number(double v) { return std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v); }

double hit_rate(const std::vector<std::size_t>& pred, const std::vector<std::size_t>& labels) {
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == labels[i];
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

void require_images(const ad::Tensor& x, const char* who) {
  if (x.rank() != 4) throw ShapeError(std::string(who) + ": expected N x C x H x W, got " + ad::to_string(x.shape()));
}

// CE input gradient for one example, flattened.
std::vector<double> input_gradient(const Model& m, const ad::Tensor& x, std::size_t label) {
  ad::Tape t;
  ad::Var xv = t.leaf(x);
  ad::Var loss = attack_loss(AttackLoss::cross_entropy, m.forward(xv), {label});
  const ad::Tensor g = t.backward(loss, {xv}).at(xv.id());
  return {g.data().begin(), g.data().end()};
}

}  // namespace

void EvalReport::validate() const {
  for (const auto& [name, v] : metrics) {
    if (std::isinf(v)) throw NumericError("report " + kind + ": metric " + name + " is infinite");
    const bool acc = name.find("acc") != std::string::npos;
    const bool cos = name.find("cosine") != std::string::npos;
    if (acc && !(v >= 0 && v <= 1)) throw NumericError("report " + kind + ": " + name + " outside [0,1]");
    if (cos && !(v >= -1 - 1e-12 && v <= 1 + 1e-12))
      throw NumericError("report " + kind + ": " + name + " outside [-1,1]");
  }
  for (const auto& [name, m] : matrices)
    for (double v : m.data())
      if (std::isinf(v)) throw NumericError("report " + kind + ": matrix " + name + " not finite");
}

std::string EvalReport::to_json() const {
  nlohmann::json j;
  j["kind"] = kind;
  j["metrics"] = nlohmann::json::object();
  for (const auto& [k, v] : metrics) j["metrics"][k] = number(v);
  j["matrices"] = nlohmann::json::object();
  for (const auto& [k, m] : matrices) {
    nlohmann::json data = nlohmann::json::array();
    for (double v : m.data()) data.push_back(number(v));
    j["matrices"][k] = {{"shape", m.shape()}, {"data", data}};
  }
  j["provenance"] = provenance;
  j["notes"] = notes;
  return j.dump(2) + "\n";
}

void EvalReport::write_json(const std::filesystem::path& path) const {
  validate();
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << to_json();
}

std::string dataset_id(const Dataset& data) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  auto mix = [&](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) h = (h ^ b[i]) * 0x100000001b3ull;
  };
  mix(data.name.data(), data.name.size());
  for (std::size_t d : data.images.shape()) mix(&d, sizeof d);
  mix(&data.num_classes, sizeof data.num_classes);
  for (std::size_t l : data.labels) mix(&l, sizeof l);
  mix(data.images.data().data(), data.images.size() * sizeof(double));
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

std::map<std::string, std::string> attack_provenance(const AttackSpec& spec) {
  return {{"attack.epsilon", fmt(spec.epsilon)},
          {"attack.steps", std::to_string(spec.steps)},
          {"attack.step_size", fmt(spec.effective_step_size())},
          {"attack.restarts", std::to_string(spec.restarts)},
          {"attack.loss", to_string(spec.loss)},
          {"attack.include_zero_start", spec.include_zero_start ? "true" : "false"},
          {"attack.seed", std::to_string(spec.seed)}};
}

double accuracy(const Model& model, const Dataset& data) {
  if (data.size() == 0) throw DataError("accuracy: empty dataset");
  check_compatible(model.spec, data);
  return hit_rate(model.predict(data.images), data.labels);
}

double robust_accuracy(const Model& model, const Dataset& data, const AttackSpec& spec) {
  if (data.size() == 0) throw DataError("robust_accuracy: empty dataset");
  check_compatible(model.spec, data);
  return hit_rate(model.predict(pgd_linf(model, data.images, data.labels, spec)), data.labels);
}

ad::Tensor rotate(const ad::Tensor& x, double degrees) {
  require_images(x, "rotate");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const double th = degrees * std::numbers::pi / 180.0;
  const double c = std::cos(th), s = std::sin(th);
  const double cy = (static_cast<double>(H) - 1) / 2, cx = (static_cast<double>(W) - 1) / 2;
  ad::Tensor out(x.shape(), 0.0);
  auto at = [&](std::size_t plane, std::ptrdiff_t r, std::ptrdiff_t col) {
    if (r < 0 || col < 0 || r >= static_cast<std::ptrdiff_t>(H) || col >= static_cast<std::ptrdiff_t>(W)) return 0.0;
    return x[plane * H * W + static_cast<std::size_t>(r) * W + static_cast<std::size_t>(col)];
  };
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j) {
      // inverse map of the output pixel into the source image
      const double dy = static_cast<double>(i) - cy, dx = static_cast<double>(j) - cx;
      const double sy = c * dy - s * dx + cy;
      const double sx = s * dy + c * dx + cx;
      const double fy = std::floor(sy), fx = std::floor(sx);
      const double wy = sy - fy, wx = sx - fx;
      const auto r0 = static_cast<std::ptrdiff_t>(fy), c0 = static_cast<std::ptrdiff_t>(fx);
      for (std::size_t p = 0; p < N * C; ++p) {
        double v = (1 - wy) * (1 - wx) * at(p, r0, c0);
        if (wx != 0) v += (1 - wy) * wx * at(p, r0, c0 + 1);
        if (wy != 0) v += wy * (1 - wx) * at(p, r0 + 1, c0);
        if (wy != 0 && wx != 0) v += wy * wx * at(p, r0 + 1, c0 + 1);
        out[p * H * W + i * W + j] = std::clamp(v, 0.0, 1.0);
      }
    }
  return out;
}

ad::Tensor brightness(const ad::Tensor& x, double factor) {
  require_images(x, "brightness");
  ad::Tensor out = x;
  for (double& v : out.data()) v = std::clamp(factor * v, 0.0, 1.0);
  return out;
}

ad::Tensor contrast(const ad::Tensor& x, double factor) {
  require_images(x, "contrast");
  ad::Tensor out = x;
  const std::size_t N = x.dim(0), D = x.size() / N;
  for (std::size_t n = 0; n < N; ++n) {
    double m = 0;
    for (std::size_t k = 0; k < D; ++k) m += x[n * D + k];
    m /= static_cast<double>(D);
    for (std::size_t k = 0; k < D; ++k) out[n * D + k] = std::clamp(m + factor * (x[n * D + k] - m), 0.0, 1.0);
  }
  return out;
}

ad::Tensor grayscale(const ad::Tensor& x) {
  require_images(x, "grayscale");
  if (x.dim(1) != 3) throw DataError("grayscale: needs 3 channels, got " + std::to_string(x.dim(1)));
  ad::Tensor out = x;
  const std::size_t N = x.dim(0), P = x.dim(2) * x.dim(3);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t p = 0; p < P; ++p) {
      const std::size_t base = n * 3 * P + p;
      const double g = (x[base] + x[base + P] + x[base + 2 * P]) / 3.0;
      out[base] = out[base + P] = out[base + 2 * P] = g;
    }
  return out;
}

std::map<std::string, std::optional<double>> invariance_suite(const Model& model, const Dataset& data,
                                                              const InvarianceOptions& opts) {
  check_compatible(model.spec, data);
  auto acc = [&](const ad::Tensor& x) { return hit_rate(model.predict(x), data.labels); };
  std::map<std::string, std::optional<double>> r;
  r["clean"] = acc(data.images);
  r["rotation"] = acc(rotate(data.images, opts.rotation_degrees));
  r["brightness"] = acc(brightness(data.images, opts.brightness_factor));
  const bool rgb = data.channels() == 3;
  r["contrast"] = acc(contrast(data.images, opts.contrast_factor));
  r["grayscale"] = rgb ? std::optional<double>(acc(grayscale(data.images))) : std::nullopt;
  return r;
}

double Landscape::range() const {
  const auto [lo, hi] = std::minmax_element(loss.data().begin(), loss.data().end());
  return *hi - *lo;
}

Landscape loss_landscape(const Model& model, const ad::Tensor& x, std::size_t label,
                         std::size_t n_grid, double max_mag, std::uint64_t seed) {
  require_images(x, "loss_landscape");
  if (x.dim(0) != 1) throw ShapeError("loss_landscape: expects a single example");
  if (n_grid < 2) throw ConfigError("loss_landscape: n_grid must be >= 2");
  const std::size_t D = x.size(), G = n_grid + 1;
  const auto grad = input_gradient(model, x, label);
  std::vector<double> d1(D), d2(D);
  Rng rng = Rng::derive(seed, {0x6c616e64});
  for (std::size_t k = 0; k < D; ++k) {
    d1[k] = grad[k] > 0 ? 1.0 : (grad[k] < 0 ? -1.0 : 0.0);
    d2[k] = rng.uniform() < 0.5 ? -1.0 : 1.0;
  }
  Landscape L;
  for (std::size_t i = 0; i < G; ++i) {
    const double t = (2.0 * static_cast<double>(i) - static_cast<double>(n_grid)) / static_cast<double>(n_grid);
    L.u.push_back(max_mag * t);
  }
  L.v = L.u;
  ad::Shape batch = x.shape();
  batch[0] = G * G;
  ad::Tensor pts(batch);
  for (std::size_t i = 0; i < G; ++i)
    for (std::size_t j = 0; j < G; ++j)
      for (std::size_t k = 0; k < D; ++k)
        pts[(i * G + j) * D + k] = std::clamp(x[k] + L.u[i] * d1[k] + L.v[j] * d2[k], 0.0, 1.0);
  const auto per = attack_losses(AttackLoss::cross_entropy, model.logits(pts),
                                 std::vector<std::size_t>(G * G, label));
  L.loss = ad::Tensor(ad::Shape{G, G}, per);
  return L;
}

Diversity gradient_diversity(const std::vector<std::pair<std::string, const Model*>>& models,
                             const Dataset& data, std::size_t n_examples) {
  if (models.empty()) throw ConfigError("gradient_diversity: no models");
  if (n_examples < 1) throw ConfigError("gradient_diversity: n_examples must be >= 1");
  for (const auto& [name, m] : models) check_compatible(m->spec, data);
  const std::size_t M = models.size(), n = std::min(n_examples, data.size());
  Diversity d;
  for (const auto& [name, m] : models) d.names.push_back(name);
  std::vector<double> sum(M * M, 0.0);
  for (std::size_t e = 0; e < n; ++e) {
    const std::vector<std::size_t> idx{e};
    const ad::Tensor x = data.gather_images(idx);
    std::vector<std::vector<double>> g;
    std::vector<double> norm;
    for (const auto& [name, m] : models) {
      g.push_back(input_gradient(*m, x, data.labels[e]));
      double s = 0;
      for (double v : g.back()) s += v * v;
      norm.push_back(std::sqrt(s));
    }
    if (std::any_of(norm.begin(), norm.end(), [](double v) { return v == 0; })) {
      ++d.excluded;
      continue;
    }
    ++d.used;
    for (std::size_t a = 0; a < M; ++a)
      for (std::size_t b = a + 1; b < M; ++b) {
        double dot = 0;
        for (std::size_t k = 0; k < g[a].size(); ++k) dot += g[a][k] * g[b][k];
        const double c = std::clamp(dot / (norm[a] * norm[b]), -1.0, 1.0);
        sum[a * M + b] += c;
        sum[b * M + a] += c;
      }
  }
  d.cosine = ad::Tensor(ad::Shape{M, M});
  for (std::size_t a = 0; a < M; ++a)
    for (std::size_t b = 0; b < M; ++b)
      d.cosine[a * M + b] = (a == b || d.used == 0) ? std::numeric_limits<double>::quiet_NaN()
                                                     : sum[a * M + b] / static_cast<double>(d.used);
  return d;
}

ad::Tensor beta_correlation_export(const DirichletParams& beta,
                                   const std::optional<std::filesystem::path>& csv) {
  beta.validate();
  ad::Tensor m = correlation_matrix(beta);
  if (csv) {
    const std::size_t K = beta.size();
    std::ofstream out(*csv);
    if (!out) throw DataError("cannot write " + csv->string());
    out << "class";
    for (std::size_t k = 0; k < K; ++k) out << ',' << k;
    out << '\n';
    for (std::size_t s = 0; s < K; ++s) {
      out << s;
      for (std::size_t t = 0; t < K; ++t) out << ',' << fmt(m[s * K + t]);
      out << '\n';
    }
  }
  return m;
}

void write_matrix_csv(const std::filesystem::path& path, const ad::Tensor& m,
                      const std::vector<double>& row_axis, const std::vector<double>& col_axis) {
  if (m.rank() != 2) throw ShapeError("write_matrix_csv: expected a matrix, got " + ad::to_string(m.shape()));
  const std::size_t R = m.dim(0), C = m.dim(1);
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  const bool labelled = row_axis.size() == R && col_axis.size() == C;
  if (labelled) {
    out << "u\\v";
    for (double v : col_axis) out << ',' << fmt(v);
    out << '\n';
  }
  for (std::size_t r = 0; r < R; ++r) {
    if (labelled) out << fmt(row_axis[r]) << ',';
    for (std::size_t c = 0; c < C; ++c) out << (c ? "," : "") << fmt(m[r * C + c]);
    out << '\n';
  }
}

std::vector<BenchRow> runtime_benchmark(const Dataset& data,
                                        const std::vector<std::pair<std::string, TrainConfig>>& configs,
                                        std::size_t epochs) {
  if (epochs < 1) throw ConfigError("runtime_benchmark: epochs must be >= 1");
  if (configs.empty()) throw ConfigError("runtime_benchmark: no configs");
  std::vector<TrainConfig> prepared;
  for (const auto& [name, cfg] : configs) {
    if (cfg.arch != configs.front().second.arch || cfg.width_factor != configs.front().second.width_factor ||
        cfg.pool != configs.front().second.pool)
      throw ConfigError("runtime_benchmark: configs must share the model spec");
    TrainConfig c = cfg;
    c.epochs = epochs;
    c.init = "random";
    c.seed = configs.front().second.seed;
    c.batch_size = configs.front().second.batch_size;
    prepared.push_back(c);
  }
  std::vector<std::unique_ptr<Trainer>> trainers;
  for (const auto& c : prepared) trainers.push_back(std::make_unique<Trainer>(data, c));
  // epochs interleave across configs, order reversed every epoch
  for (std::size_t e = 0; e < epochs; ++e)
    for (std::size_t k = 0; k < trainers.size(); ++k) trainers[e % 2 ? trainers.size() - 1 - k : k]->run_epoch();

  std::vector<BenchRow> rows;
  std::optional<std::size_t> reference;
  for (std::size_t i = 0; i < trainers.size(); ++i) {
    const TrainResult r = std::move(*trainers[i]).finish();
    BenchRow row;
    row.name = configs[i].first;
    row.seconds = r.history.total_seconds();
    row.seconds_per_epoch = row.seconds / static_cast<double>(epochs);
    std::vector<double> per;
    for (const auto& ep : r.history.epochs) per.push_back(ep.seconds);
    std::sort(per.begin(), per.end());
    const std::size_t h = per.size() / 2;
    row.median_epoch_seconds = per.size() % 2 ? per[h] : (per[h - 1] + per[h]) / 2;
    if (!reference && prepared[i].mode.kind == VicinityKind::natural) reference = rows.size();
    rows.push_back(row);
  }
  const double base = rows[reference.value_or(0)].seconds;
  for (auto& r : rows) r.ratio_to_natural = r.seconds / base;
  return rows;
}

}  // namespace sprout
