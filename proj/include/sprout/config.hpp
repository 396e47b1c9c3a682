#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "sprout/attacks.hpp"
#include "sprout/data.hpp"
#include "sprout/training.hpp"

namespace sprout {

struct ConfigKey {
  std::string name;  // section.key
  std::string fallback;
  std::string doc;
};

/// The recognised keys with their defaults, in documentation order.
const std::vector<ConfigKey>& config_schema();

/// Flat section.key -> value document. Every key in the schema is always
/// present; anything else is rejected.
class ExperimentConfig {
 public:
  ExperimentConfig();

  /// Defaults overlaid with an INI file. Relative dataset and checkpoint
  /// paths are resolved against the file's directory.
  static ExperimentConfig from_file(const std::filesystem::path& path);
  static ExperimentConfig from_string(const std::string& ini,
                                      const std::filesystem::path& base = {});

  void set(const std::string& key, const std::string& value);
  /// "section.key=value"; relative paths resolve against the working directory.
  void apply_override(const std::string& assignment);

  const std::string& get(const std::string& key) const;
  double get_double(const std::string& key) const;
  std::size_t get_size(const std::string& key) const;
  std::uint64_t get_u64(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  std::vector<std::string> get_list(const std::string& key) const;

  const std::map<std::string, std::string>& values() const { return values_; }

  /// Every key, grouped by section; feeding this back reproduces the config.
  std::string to_ini() const;

  TrainConfig train_config() const;
  AttackSpec attack_spec() const;
  Dataset load_train() const;
  Dataset load_test() const;
  /// output.dir, else $SPROUT_OUTPUT_ROOT/<command>, else runs/<command>.
  std::filesystem::path output_dir(const std::string& command) const;

 private:
  void set_resolved(const std::string& key, const std::string& value,
                    const std::filesystem::path& base);
  std::map<std::string, std::string> values_;
};

}  // namespace sprout
