#include "sprout/config.hpp"

#include <algorithm>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <charconv>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "sprout/error.hpp"

namespace sprout {

namespace fs = std::filesystem;

const std::vector<ConfigKey>& config_schema() {
  static const std::vector<ConfigKey> schema = {
      {"dataset.kind", "idx", "idx, cifar or blobs"},
      {"dataset.train_images", "", "IDX image file (kind=idx)"},
      {"dataset.train_labels", "", "IDX label file (kind=idx)"},
      {"dataset.test_images", "", "IDX image file (kind=idx)"},
      {"dataset.test_labels", "", "IDX label file (kind=idx)"},
      {"dataset.train_files", "", "comma-separated CIFAR-10 binary batches (kind=cifar)"},
      {"dataset.test_file", "", "CIFAR-10 binary test batch (kind=cifar)"},
      {"dataset.num_classes", "10", "K for IDX data"},
      {"dataset.max_n", "0", "cap on training examples, 0 for all"},
      {"dataset.max_test", "0", "cap on test examples, 0 for all"},
      {"dataset.blobs_classes", "3", "K for blobs"},
      {"dataset.blobs_per_class", "100", "training examples per class for blobs"},
      {"dataset.blobs_test_per_class", "50", "test examples per class for blobs"},
      {"dataset.blobs_dim", "8", "blob images are dim x dim"},
      {"dataset.blobs_separation", "3", "distance between blob means in standard deviations"},
      {"dataset.blobs_seed", "0", "blobs generator seed; the test split uses seed + 1"},
      {"model.arch", "cnn", "cnn or mlp"},
      {"model.width", "1", "width factor"},
      {"model.pool", "4", "CNN mean-pool window, 0 for global"},
      {"model.checkpoint", "", "model used by attack, eval, landscape and diversity"},
      {"train.mode", "natural", "natural, ga, ls, ls+ga, mixup, adv_train, trades, sprout"},
      {"train.alpha", "0.01", "label smoothing weight"},
      {"train.a", "0.2", "mixup Beta(a, a) parameter"},
      {"train.delta", "0.1", "Gaussian augmentation std"},
      {"train.stages", "gaussian,mixup,dirichlet", "sprout stages that run"},
      {"train.lr", "0.05", "SGD learning rate for the network"},
      {"train.lr_beta", "0.1", "ascent rate for log beta"},
      {"train.beta_warmup_epochs", "10", "epochs over which the beta step ramps up, 0 for none"},
      {"train.momentum", "0.9", "SGD momentum"},
      {"train.epochs", "10", "epochs"},
      {"train.batch", "128", "minibatch size"},
      {"train.seed", "0", "master seed"},
      {"train.init", "auto", "auto, random, natural or a checkpoint path"},
      {"train.monitor_examples", "1000", "training examples scored for the per-epoch accuracy"},
      {"train.attack_epsilon", "", "inner attack radius for adv_train and trades, empty for attack.epsilon"},
      {"train.attack_steps", "7", "inner attack steps for adv_train and trades"},
      {"attack.epsilon", "0.03", "l-infinity radius"},
      {"attack.steps", "20", "PGD steps"},
      {"attack.step_size", "", "PGD step, empty for epsilon / 5"},
      {"attack.restarts", "1", "random restarts"},
      {"attack.loss", "ce", "ce or cw"},
      {"attack.zero_start", "true", "restart 0 starts at the clean input"},
      {"attack.seed", "0", "seed for random starts"},
      {"attack.examples", "0", "test examples attacked, 0 for all"},
      {"eval.suites", "clean,invariance", "eval command suites: clean, invariance, robust"},
      {"eval.rotation", "10", "rotation in degrees"},
      {"eval.brightness", "1.5", "brightness factor"},
      {"eval.contrast", "2", "contrast factor"},
      {"eval.models", "", "name=checkpoint list for landscape and diversity, empty for model.checkpoint"},
      {"eval.landscape_examples", "50", "test examples averaged in the landscape"},
      {"eval.landscape_grid", "20", "grid intervals per axis"},
      {"eval.landscape_max_mag", "0.1", "largest step along each axis"},
      {"eval.landscape_seed", "0", "seed for the Rademacher axis"},
      {"eval.diversity_examples", "100", "test examples for gradient diversity"},
      {"eval.bench_epochs", "10", "epochs timed per method"},
      {"eval.bench_methods", "natural,sprout,adv_train", "train modes timed by bench"},
      {"output.dir", "", "output directory, empty for $SPROUT_OUTPUT_ROOT/<command> or runs/<command>"},
  };
  return schema;
}

namespace {

bool is_path_key(const std::string& key) {
  return key == "dataset.train_images" || key == "dataset.train_labels" || key == "dataset.test_images" ||
         key == "dataset.test_labels" || key == "dataset.test_file" || key == "model.checkpoint" ||
         key == "output.dir";
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r\n") - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, sep))
    if (!trim(item).empty()) out.push_back(trim(item));
  return out;
}

std::string absolute_from(const std::string& p, const fs::path& base) {
  if (p.empty()) return p;
  const fs::path path(p);
  return (path.is_absolute() ? path : (base.empty() ? fs::current_path() : base) / path).lexically_normal().string();
}

}  // namespace

ExperimentConfig::ExperimentConfig() {
  for (const auto& k : config_schema()) values_[k.name] = k.fallback;
}

void ExperimentConfig::set_resolved(const std::string& key, const std::string& raw, const fs::path& base) {
  if (!values_.contains(key)) throw ConfigError("unknown config key '" + key + "'");
  const std::string value = trim(raw);
  if (is_path_key(key)) {
    values_[key] = absolute_from(value, base);
  } else if (key == "dataset.train_files") {
    std::string joined;
    for (const auto& f : split(value, ',')) joined += (joined.empty() ? "" : ",") + absolute_from(f, base);
    values_[key] = joined;
  } else if (key == "eval.models") {
    std::string joined;
    for (const auto& item : split(value, ',')) {
      const auto eq = item.find('=');
      if (eq == std::string::npos) throw ConfigError("eval.models: expected name=path, got '" + item + "'");
      joined += (joined.empty() ? "" : ",") + trim(item.substr(0, eq)) + "=" +
                absolute_from(trim(item.substr(eq + 1)), base);
    }
    values_[key] = joined;
  } else if (key == "train.init" && value != "auto" && value != "random" && value != "natural") {
    values_[key] = absolute_from(value, base);
  } else {
    values_[key] = value;
  }
}

void ExperimentConfig::set(const std::string& key, const std::string& value) { set_resolved(key, value, {}); }

ExperimentConfig ExperimentConfig::from_string(const std::string& ini, const fs::path& base) {
  boost::property_tree::ptree tree;
  std::istringstream in(ini);
  try {
    boost::property_tree::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError("config parse error: " + e.message() + " at line " + std::to_string(e.line()));
  }
  ExperimentConfig cfg;
  for (const auto& [section, body] : tree) {
    if (body.empty()) throw ConfigError("config key '" + section + "' is outside a section");
    for (const auto& [key, leaf] : body) cfg.set_resolved(section + "." + key, leaf.data(), base);
  }
  return cfg;
}

ExperimentConfig ExperimentConfig::from_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::ostringstream body;
  body << in.rdbuf();
  return from_string(body.str(), fs::absolute(path).parent_path());
}

void ExperimentConfig::apply_override(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not section.key=value");
  set(trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

const std::string& ExperimentConfig::get(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
  return it->second;
}

double ExperimentConfig::get_double(const std::string& key) const {
  const std::string& s = get(key);
  double v = 0;
  const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc() || end != s.data() + s.size())
    throw ConfigError(key + ": expected a number, got '" + s + "'");
  return v;
}

std::uint64_t ExperimentConfig::get_u64(const std::string& key) const {
  const std::string& s = get(key);
  std::uint64_t v = 0;
  const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc() || end != s.data() + s.size())
    throw ConfigError(key + ": expected a non-negative integer, got '" + s + "'");
  return v;
}

std::size_t ExperimentConfig::get_size(const std::string& key) const {
  return static_cast<std::size_t>(get_u64(key));
}

bool ExperimentConfig::get_bool(const std::string& key) const {
  const std::string& s = get(key);
  if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  throw ConfigError(key + ": expected true or false, got '" + s + "'");
}

std::vector<std::string> ExperimentConfig::get_list(const std::string& key) const { return split(get(key), ','); }

std::string ExperimentConfig::to_ini() const {
  std::ostringstream out;
  std::string section;
  for (const auto& k : config_schema()) {
    const auto dot = k.name.find('.');
    const std::string s = k.name.substr(0, dot);
    if (s != section) {
      out << (section.empty() ? "" : "\n") << '[' << s << "]\n";
      section = s;
    }
    out << k.name.substr(dot + 1) << " = " << values_.at(k.name) << '\n';
  }
  return out.str();
}

AttackSpec ExperimentConfig::attack_spec() const {
  AttackSpec s;
  s.epsilon = get_double("attack.epsilon");
  s.steps = get_size("attack.steps");
  if (!get("attack.step_size").empty()) s.step_size = get_double("attack.step_size");
  s.restarts = get_size("attack.restarts");
  try {
    s.loss = parse_attack_loss(get("attack.loss"));
  } catch (const Error& e) {
    throw ConfigError(std::string("attack.loss: ") + e.what());
  }
  s.include_zero_start = get_bool("attack.zero_start");
  s.seed = get_u64("attack.seed");
  s.validate();
  return s;
}

TrainConfig ExperimentConfig::train_config() const {
  TrainConfig c;
  try {
    c.mode.kind = parse_vicinity_kind(get("train.mode"));
    c.arch = parse_arch(get("model.arch"));
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  c.mode.alpha = get_double("train.alpha");
  c.mode.a = get_double("train.a");
  c.mode.delta = get_double("train.delta");
  c.mode.stages = {false, false, false};
  for (const auto& s : get_list("train.stages")) {
    if (s == "gaussian") c.mode.stages.gaussian = true;
    else if (s == "mixup") c.mode.stages.mixup = true;
    else if (s == "dirichlet") c.mode.stages.dirichlet = true;
    else throw ConfigError("train.stages: unknown stage '" + s + "'");
  }
  if (c.mode.kind == VicinityKind::adv_train || c.mode.kind == VicinityKind::trades) {
    AttackSpec inner = attack_spec();
    if (!get("train.attack_epsilon").empty()) inner.epsilon = get_double("train.attack_epsilon");
    inner.steps = get_size("train.attack_steps");
    inner.step_size.reset();
    inner.restarts = 1;
    inner.include_zero_start = false;
    c.mode.attack = inner;
  }
  c.lr_theta = get_double("train.lr");
  c.lr_beta = get_double("train.lr_beta");
  c.beta_warmup_epochs = get_size("train.beta_warmup_epochs");
  c.momentum = get_double("train.momentum");
  c.epochs = get_size("train.epochs");
  c.batch_size = get_size("train.batch");
  c.seed = get_u64("train.seed");
  c.init = get("train.init");
  c.width_factor = get_size("model.width");
  c.pool = get_size("model.pool");
  c.monitor_examples = get_size("train.monitor_examples");
  c.validate();
  return c;
}

namespace {

std::optional<std::size_t> cap(std::size_t n) { return n == 0 ? std::nullopt : std::optional<std::size_t>(n); }

const std::string& need(const ExperimentConfig& c, const std::string& key) {
  const std::string& v = c.get(key);
  if (v.empty()) throw ConfigError(key + " must be set for dataset.kind=" + c.get("dataset.kind"));
  return v;
}

Dataset concat(std::vector<Dataset> parts) {
  if (parts.size() == 1) return std::move(parts.front());
  std::size_t n = 0;
  for (const auto& p : parts) n += p.size();
  Dataset out;
  ad::Shape shape = parts.front().images.shape();
  shape[0] = n;
  out.images = ad::Tensor(shape);
  out.num_classes = parts.front().num_classes;
  out.name = parts.front().name;
  std::size_t at = 0;
  for (const auto& p : parts) {
    std::copy(p.images.data().begin(), p.images.data().end(), out.images.data().begin() + static_cast<std::ptrdiff_t>(at));
    at += p.images.size();
    out.labels.insert(out.labels.end(), p.labels.begin(), p.labels.end());
  }
  return out;
}

Dataset load_split(const ExperimentConfig& c, bool train) {
  const std::string& kind = c.get("dataset.kind");
  const auto limit = cap(c.get_size(train ? "dataset.max_n" : "dataset.max_test"));
  if (kind == "idx") {
    return load_idx(need(c, train ? "dataset.train_images" : "dataset.test_images"),
                    need(c, train ? "dataset.train_labels" : "dataset.test_labels"), limit,
                    c.get_size("dataset.num_classes"));
  }
  if (kind == "cifar") {
    if (!train) return load_cifar_bin(need(c, "dataset.test_file"), limit);
    std::vector<Dataset> parts;
    std::size_t left = limit.value_or(std::numeric_limits<std::size_t>::max());
    for (const auto& f : c.get_list("dataset.train_files")) {
      if (left == 0) break;
      parts.push_back(load_cifar_bin(f, left));
      left -= parts.back().size();
    }
    if (parts.empty()) throw ConfigError("dataset.train_files must be set for dataset.kind=cifar");
    return concat(std::move(parts));
  }
  if (kind == "blobs") {
    Dataset d = synth_blobs(c.get_size("dataset.blobs_classes"),
                            c.get_size(train ? "dataset.blobs_per_class" : "dataset.blobs_test_per_class"),
                            c.get_size("dataset.blobs_dim"), c.get_double("dataset.blobs_separation"),
                            c.get_u64("dataset.blobs_seed") + (train ? 0 : 1));
    return limit ? d.head(std::min(*limit, d.size())) : d;
  }
  throw ConfigError("dataset.kind: expected idx, cifar or blobs, got '" + kind + "'");
}

}  // namespace

Dataset ExperimentConfig::load_train() const { return load_split(*this, true); }
Dataset ExperimentConfig::load_test() const { return load_split(*this, false); }

fs::path ExperimentConfig::output_dir(const std::string& command) const {
  if (!get("output.dir").empty()) return get("output.dir");
  const char* root = std::getenv("SPROUT_OUTPUT_ROOT");
  return fs::path(root && *root ? root : "runs") / command;
}

}  // namespace sprout
