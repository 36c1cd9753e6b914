#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include "cdkt/federation.hpp"

namespace cdkt {

// Values of a flat TOML document: no tables, single-line arrays of strings.
using TomlValue = std::variant<std::string, std::int64_t, double, bool, std::vector<std::string>>;
using TomlTable = std::map<std::string, TomlValue>;

// Parse errors carry the 1-based line number in the message.
TomlTable parse_flat_toml(const std::string& text);

struct ExperimentConfig {
  std::string dataset;  // mnist, fashion_mnist, cifar10, cifar100, synthetic
  std::string data_dir;
  std::vector<std::string> data_files;  // relative to data_dir; empty = standard names

  Index synthetic_classes = 10;
  Index synthetic_per_class = 100;
  Index synthetic_dim = 32;
  double synthetic_separation = 6.0;
  Index synthetic_image_side = 0;  // > 0: examples are (1, side, side) images

  Index classes_per_client = 2;
  double test_frac = 0.2;
  Index proxy_size = 100;
  double median_target = 0.0;  // 0 = no target

  std::string architecture = "auto";  // auto, mlp, mnist, cifar
  bool hetero = false;

  FederationConfig federation;
  std::string output_dir = "out";

  void validate() const;
};

// Environment variable naming the dataset root when data_dir is not set.
inline constexpr const char* kDataDirEnv = "CDKT_DATA_DIR";

// Unknown keys, wrong value types and out-of-range values are errors naming
// the key. Absent keys take their (dataset-dependent) defaults.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);

// Every field, defaults included, as a flat TOML document that parses back
// to an equal configuration.
std::string to_toml(const ExperimentConfig& cfg);

// Short name for outputs, e.g. "cdkt-repfull-kl-norm2" or "fedavg".
std::string run_label(const ExperimentConfig& cfg);

}  // namespace cdkt
