#include <CLI11.hpp>

#include <iostream>

#include "sprout/error.hpp"
#include "sprout/experiment.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Vicinity training, attacks and evaluation"};
  app.set_version_flag("--version", sprout::version());
  std::string command;
  std::string config_path;
  std::vector<std::string> overrides;
  bool print_config = false;
  app.add_option("command", command, "train, attack, eval, landscape, diversity, bench or ablate")->required();
  app.add_option("-c,--config", config_path, "INI experiment config");
  app.add_option("--set", overrides, "section.key=value, applied after the config file")->allow_extra_args(false);
  app.add_flag("--print-config", print_config, "print the resolved config and exit");
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << sprout::error_line(sprout::ConfigError(e.what())) << std::endl;
    return 2;
  }
  try {
    sprout::ExperimentConfig cfg = config_path.empty() ? sprout::ExperimentConfig()
                                                       : sprout::ExperimentConfig::from_file(config_path);
    for (const auto& o : overrides) cfg.apply_override(o);
    if (print_config) {
      std::cout << cfg.to_ini();
      return 0;
    }
    const auto files = sprout::run_command(command, cfg);
    std::cout << "ok " << command << ' ' << cfg.output_dir(command).string() << ' ' << files.size() << " files\n";
    return 0;
  } catch (const std::exception& e) {
    std::cerr << sprout::error_line(e) << std::endl;
    return sprout::exit_code(e);
  }
}
