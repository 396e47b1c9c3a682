#include "sprout/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "sprout/error.hpp"
#include "sprout/rng.hpp"

namespace sprout {

namespace {

constexpr std::size_t kChunk = 250;

void check_labels(const ad::Shape& s, const std::vector<std::size_t>& labels, const char* who) {
  if (s.size() != 2 || s[0] != labels.size())
    throw ShapeError(std::string(who) + ": logits " + ad::to_string(s) + " vs " +
                     std::to_string(labels.size()) + " labels");
  if (s[1] < 2) throw ShapeError(std::string(who) + ": needs K >= 2");
  for (std::size_t y : labels)
    if (y >= s[1]) throw ShapeError(std::string(who) + ": label out of range");
}

// Index of the largest logit other than y.
std::size_t runner_up(const double* z, std::size_t K, std::size_t y) {
  std::size_t best = y == 0 ? 1 : 0;
  for (std::size_t k = 0; k < K; ++k)
    if (k != y && z[k] > z[best]) best = k;
  return best;
}

// Same tie-breaking as Model::predict (first maximum).
bool misclassified(const double* z, std::size_t K, std::size_t y) {
  return static_cast<std::size_t>(std::max_element(z, z + K) - z) != y;
}

}  // namespace

std::string to_string(AttackLoss l) {
  return l == AttackLoss::cross_entropy ? "cross_entropy" : "cw_margin";
}

AttackLoss parse_attack_loss(const std::string& s) {
  if (s == "cross_entropy" || s == "ce") return AttackLoss::cross_entropy;
  if (s == "cw_margin" || s == "cw") return AttackLoss::cw_margin;
  throw ConfigError("unknown attack loss '" + s + "'");
}

void AttackSpec::validate() const {
  if (!(epsilon >= 0) || !std::isfinite(epsilon)) throw ConfigError("attack.epsilon must be >= 0");
  if (restarts < 1) throw ConfigError("attack.restarts must be >= 1");
  if (steps > 0 && !(effective_step_size() > 0) && epsilon > 0)
    throw ConfigError("attack.step_size must be > 0 when steps > 0");
  if (step_size && !(*step_size > 0)) throw ConfigError("attack.step_size must be > 0");
}

std::vector<double> cw_margins(const ad::Tensor& logits, const std::vector<std::size_t>& labels) {
  check_labels(logits.shape(), labels, "cw_margin_loss");
  const std::size_t K = logits.dim(1);
  std::vector<double> m(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double* z = logits.data().data() + i * K;
    m[i] = z[labels[i]] - z[runner_up(z, K, labels[i])];
  }
  return m;
}

ad::Var cw_margin_loss(ad::Var logits, const std::vector<std::size_t>& labels) {
  check_labels(logits.shape(), labels, "cw_margin_loss");
  auto forward = [labels](ad::Tape::Inputs in) {
    const auto m = cw_margins(*in[0], labels);
    double s = 0;
    for (double v : m) s += std::max(v, 0.0);
    return ad::Tensor::scalar(-s / static_cast<double>(m.size()));
  };
  auto backward = [labels](ad::Tape::Inputs in, const ad::Tensor&, const ad::Tensor& g,
                           std::span<ad::Tensor* const> gin) {
    if (!gin[0]) return;
    const ad::Tensor& z = *in[0];
    const std::size_t K = z.dim(1);
    const double scale = g.item() / static_cast<double>(labels.size());
    auto d = gin[0]->data();
    for (std::size_t i = 0; i < labels.size(); ++i) {
      const double* row = z.data().data() + i * K;
      const std::size_t r = runner_up(row, K, labels[i]);
      if (row[labels[i]] - row[r] <= 0) continue;
      d[i * K + labels[i]] -= scale;
      d[i * K + r] += scale;
    }
  };
  return logits.tape().record(ad::Primitive::custom, {logits}, forward, backward);
}

ad::Var attack_loss(AttackLoss kind, ad::Var logits, const std::vector<std::size_t>& labels) {
  if (kind == AttackLoss::cw_margin) return cw_margin_loss(logits, labels);
  check_labels(logits.shape(), labels, "cross_entropy");
  return ad::scalar_multiply(ad::mean(ad::gather(ad::log_softmax(logits), labels)), -1.0);
}

std::vector<double> attack_losses(AttackLoss kind, const ad::Tensor& logits,
                                  const std::vector<std::size_t>& labels) {
  if (kind == AttackLoss::cw_margin) {
    auto m = cw_margins(logits, labels);
    for (double& v : m) v = -std::max(v, 0.0);
    return m;
  }
  check_labels(logits.shape(), labels, "cross_entropy");
  const std::size_t K = logits.dim(1);
  std::vector<double> out(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double* z = logits.data().data() + i * K;
    const double mx = *std::max_element(z, z + K);
    double s = 0;
    for (std::size_t k = 0; k < K; ++k) s += std::exp(z[k] - mx);
    out[i] = mx + std::log(s) - z[labels[i]];
  }
  return out;
}

AttackResult pgd_attack(const Model& model, const ad::Tensor& x,
                        const std::vector<std::size_t>& labels, const AttackSpec& spec) {
  spec.validate();
  if (x.rank() != 4 || x.dim(0) != labels.size())
    throw ShapeError("pgd_linf: images " + ad::to_string(x.shape()) + " vs " +
                     std::to_string(labels.size()) + " labels");
  const std::size_t N = labels.size(), D = x.size() / N, K = model.spec.num_classes;
  const double eps = spec.epsilon, step = spec.effective_step_size();

  AttackResult res;
  res.x_adv = x;
  res.loss.assign(N, -std::numeric_limits<double>::infinity());
  res.best_loss = res.loss;
  res.clean_loss = attack_losses(spec.loss, model.logits(x), labels);
  res.fooled.assign(N, false);
  std::vector<bool> qualified(N, false);

  // Candidate ranking: (misclassified with loss >= clean loss, loss).
  auto offer = [&](std::size_t i, const double* cand, double loss, bool wrong) {
    res.best_loss[i] = std::max(res.best_loss[i], loss);
    const bool q = wrong && loss >= res.clean_loss[i];
    if (qualified[i] && !q) return;
    if (q == qualified[i] && !(loss > res.loss[i])) return;
    qualified[i] = q;
    res.loss[i] = loss;
    res.fooled[i] = wrong;
    std::copy(cand, cand + D, res.x_adv.data().begin() + static_cast<std::ptrdiff_t>(i * D));
  };

  ad::Shape chunk_shape = x.shape();
  for (std::size_t r = 0; r < spec.restarts; ++r) {
    const bool zero = spec.include_zero_start && r == 0;
    std::vector<double> start(x.size());
    Rng rng = Rng::derive(spec.seed, {r});
    for (std::size_t j = 0; j < x.size(); ++j) {
      const double noise = zero ? 0.0 : rng.uniform(-eps, eps);
      start[j] = std::clamp(x[j] + noise, 0.0, 1.0);
    }
    for (std::size_t c0 = 0; c0 < N; c0 += kChunk) {
      const std::size_t n = std::min(kChunk, N - c0);
      chunk_shape[0] = n;
      const auto off = static_cast<std::ptrdiff_t>(c0 * D);
      ad::Tensor xc(chunk_shape, std::vector<double>(start.begin() + off,
                                                    start.begin() + off + static_cast<std::ptrdiff_t>(n * D)));
      const std::vector<std::size_t> yc(labels.begin() + static_cast<std::ptrdiff_t>(c0),
                                        labels.begin() + static_cast<std::ptrdiff_t>(c0 + n));
      for (std::size_t t = 0;; ++t) {
        ad::Tape tape;
        ad::Var xv = tape.leaf(xc);
        ad::Var z = model.forward(xv);
        ad::Var loss = attack_loss(spec.loss, z, yc);
        if (!std::isfinite(loss.value().item()))
          throw NumericError("pgd_linf: non-finite loss at restart " + std::to_string(r) +
                             ", step " + std::to_string(t));
        const auto per = attack_losses(spec.loss, z.value(), yc);
        for (std::size_t i = 0; i < n; ++i)
          offer(c0 + i, xc.data().data() + i * D, per[i],
                misclassified(z.value().data().data() + i * K, K, yc[i]));
        if (t == spec.steps || eps == 0) break;
        const ad::Tensor g = tape.backward(loss, {xv}).at(xv.id());
        for (std::size_t j = 0; j < xc.size(); ++j) {
          const double o = x[static_cast<std::size_t>(off) + j];
          const double s = g[j] > 0 ? 1.0 : (g[j] < 0 ? -1.0 : 0.0);
          xc[j] = std::clamp(std::clamp(xc[j] + step * s, o - eps, o + eps), 0.0, 1.0);
        }
      }
    }
  }
  return res;
}

ad::Tensor pgd_linf(const Model& model, const ad::Tensor& x, const std::vector<std::size_t>& labels,
                    const AttackSpec& spec) {
  return pgd_attack(model, x, labels, spec).x_adv;
}

double transfer_eval(const Model& source, const Model& target, const Dataset& data,
                     const AttackSpec& spec) {
  check_compatible(source.spec, data);
  check_compatible(target.spec, data);
  const ad::Tensor adv = pgd_linf(source, data.images, data.labels, spec);
  const auto pred = target.predict(adv);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == data.labels[i];
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

double transfer_eval(const Checkpoint& source, const Checkpoint& target, const Dataset& data,
                     const AttackSpec& spec) {
  return transfer_eval(source.model, target.model, data, spec);
}

}  // namespace sprout
