#include "sprout/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <json.hpp>
#include <numeric>
#include <sstream>

#include "sprout/checkpoint.hpp"
#include "sprout/error.hpp"
#include "sprout/evaluation.hpp"
#include "sprout/rng.hpp"

namespace sprout {

namespace fs = std::filesystem;

namespace {

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

class Run {
 public:
  Run(std::string command, const ExperimentConfig& cfg)
      : command_(std::move(command)), cfg_(cfg), dir_(cfg.output_dir(command_)) {
    fs::create_directories(dir_);
    std::ostringstream ini;
    ini << "; sprout " << version() << "\n; command " << command_ << "\n\n" << cfg_.to_ini();
    write("resolved.ini", ini.str());
  }

  const ExperimentConfig& cfg() const { return cfg_; }
  const std::string& command() const { return command_; }
  fs::path path(const fs::path& rel) const { return dir_ / rel; }

  void write(const fs::path& rel, const std::string& body) {
    fs::create_directories(path(rel).parent_path());
    std::ofstream out(path(rel), std::ios::binary);
    if (!out) throw DataError("cannot write " + path(rel).string());
    out << body;
    files_.push_back(rel);
  }

  void record(const fs::path& rel) { files_.push_back(rel); }

  EvalReport report(const std::string& kind) const {
    EvalReport r;
    r.kind = kind;
    r.provenance["version"] = version();
    r.provenance["command"] = command_;
    for (const auto& [k, v] : cfg_.values()) r.provenance["config." + k] = v;
    return r;
  }

  void write_report(const fs::path& rel, const EvalReport& r) {
    r.validate();
    write(rel, r.to_json());
  }

  void save(const fs::path& rel, const Checkpoint& ck) {
    fs::create_directories(path(rel).parent_path());
    save_checkpoint(path(rel), ck);
    record(rel);
  }

  std::vector<fs::path> finish() {
    nlohmann::json m;
    m["command"] = command_;
    m["version"] = version();
    m["checkpoint_format"] = kCheckpointVersion;
    m["train_seed"] = cfg_.get("train.seed");
    m["attack_seed"] = cfg_.get("attack.seed");
    std::vector<std::string> names;
    for (const auto& f : files_) names.push_back(f.generic_string());
    m["files"] = names;
    write("manifest.json", m.dump(2) + "\n");
    return files_;
  }

 private:
  std::string command_;
  const ExperimentConfig& cfg_;
  fs::path dir_;
  std::vector<fs::path> files_;
};

Checkpoint model_checkpoint(const ExperimentConfig& cfg) {
  const std::string& p = cfg.get("model.checkpoint");
  if (p.empty()) throw ConfigError("model.checkpoint must be set");
  return load_checkpoint(p);
}

std::vector<std::pair<std::string, fs::path>> named_models(const ExperimentConfig& cfg) {
  std::vector<std::pair<std::string, fs::path>> out;
  for (const auto& item : cfg.get_list("eval.models")) {
    const auto eq = item.find('=');
    out.emplace_back(item.substr(0, eq), item.substr(eq + 1));
  }
  if (out.empty()) {
    if (cfg.get("model.checkpoint").empty()) throw ConfigError("eval.models or model.checkpoint must be set");
    out.emplace_back("model", cfg.get("model.checkpoint"));
  }
  return out;
}

Dataset test_split(const ExperimentConfig& cfg, std::size_t limit) {
  Dataset d = cfg.load_test();
  return limit == 0 || limit >= d.size() ? d : d.head(limit);
}

void add_model_provenance(EvalReport& r, const std::string& prefix, const fs::path& ckpt, const Dataset& d) {
  r.provenance[prefix + "checkpoint.id"] = checkpoint_id(ckpt);
  r.provenance[prefix + "checkpoint.path"] = ckpt.string();
  r.provenance["dataset.id"] = dataset_id(d);
  r.provenance["dataset.size"] = std::to_string(d.size());
}

void add_train_provenance(EvalReport& r, const Checkpoint& ck) {
  std::string lineage;
  for (auto s : ck.seed_lineage) lineage += (lineage.empty() ? "" : ",") + std::to_string(s);
  r.provenance["seed_lineage"] = lineage;
  if (!ck.log_beta.empty()) {
    ad::Tensor beta(ad::Shape{1, ck.log_beta.size()});
    for (std::size_t k = 0; k < ck.log_beta.size(); ++k) beta[k] = std::exp(ck.log_beta[k]);
    r.matrices["beta"] = beta;
  }
}

void write_history(Run& run, const fs::path& rel, const TrainHistory& h) {
  std::ostringstream csv;
  h.write_csv(csv);
  run.write(rel, csv.str());
}

void cmd_train(Run& run) {
  const Dataset data = run.cfg().load_train();
  const TrainResult r = train(data, run.cfg().train_config());
  run.save("checkpoint.bin", r.checkpoint);
  write_history(run, "history.csv", r.history);
  EvalReport rep = run.report("train");
  add_model_provenance(rep, "", run.path("checkpoint.bin"), data);
  add_train_provenance(rep, r.checkpoint);
  rep.metrics["final_loss"] = r.history.epochs.back().loss;
  rep.metrics["final_train_acc"] = r.history.epochs.back().clean_acc;
  run.write_report("train.json", rep);
}

void robust_metrics(EvalReport& rep, const Model& m, const Dataset& test, const AttackSpec& spec) {
  rep.metrics["clean_acc"] = accuracy(m, test);
  rep.metrics["robust_acc"] = robust_accuracy(m, test, spec);
  for (const auto& [k, v] : attack_provenance(spec)) rep.provenance[k] = v;
}

void cmd_attack(Run& run) {
  const Checkpoint ck = model_checkpoint(run.cfg());
  const Dataset test = test_split(run.cfg(), run.cfg().get_size("attack.examples"));
  EvalReport rep = run.report("attack");
  add_model_provenance(rep, "", run.cfg().get("model.checkpoint"), test);
  robust_metrics(rep, ck.model, test, run.cfg().attack_spec());
  run.write_report("attack.json", rep);
}

void cmd_eval(Run& run) {
  const Checkpoint ck = model_checkpoint(run.cfg());
  const Dataset test = test_split(run.cfg(), 0);
  EvalReport rep = run.report("eval");
  add_model_provenance(rep, "", run.cfg().get("model.checkpoint"), test);
  for (const auto& suite : run.cfg().get_list("eval.suites")) {
    if (suite == "clean") {
      rep.metrics["clean_acc"] = accuracy(ck.model, test);
    } else if (suite == "invariance") {
      InvarianceOptions o;
      o.rotation_degrees = run.cfg().get_double("eval.rotation");
      o.brightness_factor = run.cfg().get_double("eval.brightness");
      o.contrast_factor = run.cfg().get_double("eval.contrast");
      for (const auto& [name, acc] : invariance_suite(ck.model, test, o)) {
        if (acc) rep.metrics["invariance." + name + "_acc"] = *acc;
        else rep.notes.push_back("invariance." + name + ": skipped, needs 3 channels");
      }
    } else if (suite == "robust") {
      const Dataset sub = test_split(run.cfg(), run.cfg().get_size("attack.examples"));
      const AttackSpec spec = run.cfg().attack_spec();
      rep.metrics["robust_acc"] = robust_accuracy(ck.model, sub, spec);
      for (const auto& [k, v] : attack_provenance(spec)) rep.provenance[k] = v;
    } else {
      throw ConfigError("eval.suites: unknown suite '" + suite + "'");
    }
  }
  run.write_report("eval.json", rep);
}

void cmd_landscape(Run& run) {
  const auto& c = run.cfg();
  const Dataset test = test_split(c, c.get_size("eval.landscape_examples"));
  const std::size_t n = c.get_size("eval.landscape_grid");
  const double mag = c.get_double("eval.landscape_max_mag");
  const std::uint64_t seed = c.get_u64("eval.landscape_seed");
  EvalReport rep = run.report("landscape");
  rep.provenance["dataset.id"] = dataset_id(test);
  rep.provenance["dataset.size"] = std::to_string(test.size());
  for (const auto& [name, path] : named_models(c)) {
    const Checkpoint ck = load_checkpoint(path);
    check_compatible(ck.model.spec, test);
    rep.provenance[name + ".checkpoint.id"] = checkpoint_id(path);
    ad::Tensor mean(ad::Shape{n + 1, n + 1}, 0.0);
    double range = 0;
    Landscape last;
    for (std::size_t i = 0; i < test.size(); ++i) {
      const std::vector<std::size_t> idx{i};
      last = loss_landscape(ck.model, test.gather_images(idx), test.labels[i], n, mag,
                            Rng::derive(seed, {i}).engine()());
      range += last.range();
      for (std::size_t k = 0; k < mean.size(); ++k) mean[k] += last.loss[k];
    }
    for (double& v : mean.data()) v /= static_cast<double>(test.size());
    rep.metrics[name + ".mean_range"] = range / static_cast<double>(test.size());
    rep.matrices[name + ".mean_loss"] = mean;
    write_matrix_csv(run.path("landscape_" + name + ".csv"), mean, last.u, last.v);
    run.record("landscape_" + name + ".csv");
  }
  run.write_report("landscape.json", rep);
}

void cmd_diversity(Run& run) {
  const auto& c = run.cfg();
  const Dataset test = test_split(c, c.get_size("eval.diversity_examples"));
  std::vector<Checkpoint> held;
  const auto named = named_models(c);
  if (named.size() < 2) throw ConfigError("diversity needs at least two models in eval.models");
  EvalReport rep = run.report("diversity");
  rep.provenance["dataset.id"] = dataset_id(test);
  for (const auto& [name, path] : named) {
    held.push_back(load_checkpoint(path));
    rep.provenance[name + ".checkpoint.id"] = checkpoint_id(path);
  }
  std::vector<std::pair<std::string, const Model*>> models;
  for (std::size_t i = 0; i < named.size(); ++i) models.emplace_back(named[i].first, &held[i].model);
  const Diversity d = gradient_diversity(models, test, test.size());
  const std::size_t M = models.size();
  std::ostringstream csv;
  csv << "model";
  for (const auto& n : d.names) csv << ',' << n;
  csv << '\n';
  double sum = 0;
  for (std::size_t a = 0; a < M; ++a) {
    csv << d.names[a];
    for (std::size_t b = 0; b < M; ++b) {
      const double v = d.cosine[a * M + b];
      csv << ',' << (std::isnan(v) ? "NA" : fmt(v));
      if (a != b) sum += v;
    }
    csv << '\n';
  }
  run.write("diversity.csv", csv.str());
  rep.matrices["cosine"] = d.cosine;
  rep.metrics["examples_used"] = static_cast<double>(d.used);
  rep.metrics["examples_excluded"] = static_cast<double>(d.excluded);
  if (d.used > 0) rep.metrics["mean_cosine"] = sum / static_cast<double>(M * (M - 1));
  run.write_report("diversity.json", rep);
}

TrainConfig with_mode(const ExperimentConfig& base, const std::string& mode, const std::string& stages) {
  ExperimentConfig c = base;
  c.set("train.mode", mode);
  if (!stages.empty()) c.set("train.stages", stages);
  return c.train_config();
}

void cmd_bench(Run& run) {
  const auto& c = run.cfg();
  const Dataset data = c.load_train();
  std::vector<std::pair<std::string, TrainConfig>> configs;
  for (const auto& m : c.get_list("eval.bench_methods")) configs.emplace_back(m, with_mode(c, m, ""));
  const auto rows = runtime_benchmark(data, configs, c.get_size("eval.bench_epochs"));
  std::ostringstream csv;
  csv << "method,seconds,seconds_per_epoch,median_epoch_seconds,ratio_to_natural\n";
  EvalReport rep = run.report("bench");
  rep.provenance["dataset.id"] = dataset_id(data);
  rep.notes.push_back("timings are wall-clock and vary between runs");
  for (const auto& r : rows) {
    csv << r.name << ',' << fmt(r.seconds) << ',' << fmt(r.seconds_per_epoch) << ',' << fmt(r.median_epoch_seconds)
        << ',' << fmt(r.ratio_to_natural) << '\n';
    rep.metrics[r.name + ".median_epoch_seconds"] = r.median_epoch_seconds;
    rep.metrics[r.name + ".seconds_per_epoch"] = r.seconds_per_epoch;
    rep.metrics[r.name + ".ratio_to_natural"] = r.ratio_to_natural;
  }
  run.write("bench.csv", csv.str());
  run.write_report("bench.json", rep);
}

void cmd_ablate(Run& run) {
  const auto& c = run.cfg();
  const Dataset data = c.load_train();
  const Dataset test = test_split(c, c.get_size("attack.examples"));
  const AttackSpec spec = c.attack_spec();
  TrainConfig nat = with_mode(c, "natural", "");
  nat.init = "random";
  const TrainResult base = train(data, nat);
  run.save("natural_init/checkpoint.bin", base.checkpoint);
  write_history(run, "natural_init/history.csv", base.history);

  std::ostringstream csv;
  csv << "row,clean_acc,robust_acc\n";
  auto evaluate = [&](const std::string& row, const Checkpoint& ck) {
    EvalReport rep = run.report("ablate");
    rep.provenance["row"] = row;
    add_model_provenance(rep, "", run.path(row + "/checkpoint.bin"), test);
    add_train_provenance(rep, ck);
    robust_metrics(rep, ck.model, test, spec);
    run.write_report(row + "/report.json", rep);
    csv << row << ',' << fmt(rep.metrics["clean_acc"]) << ',' << fmt(rep.metrics["robust_acc"]) << '\n';
  };
  // every row, the natural reference included, continues from the same init
  // for train.epochs more epochs
  std::vector<AblationRow> rows{{"natural", "natural", ""}};
  rows.insert(rows.end(), ablation_rows().begin(), ablation_rows().end());
  for (const auto& row : rows) {
    const TrainResult r = train(data, with_mode(c, row.mode, row.stages), &base.checkpoint);
    run.save(row.name + "/checkpoint.bin", r.checkpoint);
    write_history(run, row.name + "/history.csv", r.history);
    evaluate(row.name, r.checkpoint);
  }
  run.write("ablation.csv", csv.str());
}

}  // namespace

const std::vector<std::string>& commands() {
  static const std::vector<std::string> c{"train", "attack", "eval", "landscape", "diversity", "bench", "ablate"};
  return c;
}

std::string version() { return SPROUT_VERSION; }

const std::vector<AblationRow>& ablation_rows() {
  static const std::vector<AblationRow> rows{
      {"ga", "sprout", "gaussian"},
      {"mixup", "sprout", "mixup"},
      {"dirichlet", "sprout", "dirichlet"},
      {"ga_mixup", "sprout", "gaussian,mixup"},
      {"mixup_dirichlet", "sprout", "mixup,dirichlet"},
      {"ga_dirichlet", "sprout", "gaussian,dirichlet"},
      {"uniform_ls", "ls", ""},
      {"sprout", "sprout", "gaussian,mixup,dirichlet"},
  };
  return rows;
}

std::vector<fs::path> run_command(const std::string& command, const ExperimentConfig& config) {
  if (std::find(commands().begin(), commands().end(), command) == commands().end())
    throw ConfigError("unknown command '" + command + "'");
  Run run(command, config);
  if (command == "train") cmd_train(run);
  else if (command == "attack") cmd_attack(run);
  else if (command == "eval") cmd_eval(run);
  else if (command == "landscape") cmd_landscape(run);
  else if (command == "diversity") cmd_diversity(run);
  else if (command == "bench") cmd_bench(run);
  else cmd_ablate(run);
  return run.finish();
}

int exit_code(const std::exception& e) {
  if (const auto* err = dynamic_cast<const Error*>(&e)) {
    switch (err->category()) {
      case Error::Category::config: return 2;
      case Error::Category::data:
      case Error::Category::shape: return 3;
      case Error::Category::numeric: return 4;
    }
  }
  if (dynamic_cast<const fs::filesystem_error*>(&e)) return 3;
  return 1;
}

std::string error_line(const std::exception& e) {
  static const char* kinds[] = {"internal", "", "config", "data", "numeric"};
  const int code = exit_code(e);
  std::string msg = e.what();
  for (char& ch : msg)
    if (ch == '\n' || ch == '\r') ch = ' ';
  std::string quoted;
  for (char ch : msg) {
    if (ch == '"' || ch == '\\') quoted += '\\';
    quoted += ch;
  }
  return std::string("error kind=") + kinds[code] + " code=" + std::to_string(code) + " message=\"" + quoted + "\"";
}

}  // namespace sprout
