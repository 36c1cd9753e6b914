#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include <json.hpp>

#include "cdkt/config.hpp"
#include "cdkt/federation.hpp"

namespace cdkt {

struct ArchitecturePreset {
  std::vector<LayerSpec> layers;
  std::size_t embed_tap = 0;
};

// Reference stacks. "mlp": dense(d->64), relu, dense(64->32), relu | dense(32->C).
// "mnist": two conv(3x3)/relu/maxpool2 blocks (8, 16 channels), flatten,
// dense(->64), relu | dense(64->C). "cifar": a third block (32 channels) and a
// 128-wide embedding. `hetero` drops the last conv block (the last hidden
// dense layer for "mlp"); the embedding width is unchanged.
ArchitecturePreset architecture_preset(const std::string& name, const Shape& input_shape, Index classes, bool hetero);

// Resolves "auto" from the dataset and example shape.
std::string resolve_architecture(const ExperimentConfig& cfg, const Shape& input_shape);

LabeledSet load_dataset(const ExperimentConfig& cfg);

struct PreparedExperiment {
  FederationState state;
  Partition partition;
};

PreparedExperiment prepare_experiment(const ExperimentConfig& cfg);

// Window used for summaries: rounds [90, 100] when T >= 100, otherwise the
// final 10% of rounds (at least one).
std::pair<int, int> summary_window(Index rounds);

nlohmann::json make_summary(const ExperimentConfig& cfg, const std::vector<RoundRecord>& records,
                            const std::vector<std::string>& warnings);
std::string metrics_csv(const std::vector<RoundRecord>& records);

// Runs the experiment and writes metrics.csv, summary.json, config.toml and
// plotdata/ under `out_dir`. Nothing is left behind if the run fails.
ExperimentResult run_to_directory(const ExperimentConfig& cfg, const std::filesystem::path& out_dir);

// Table of Global and C-Per medians: one row per (scenario, label), one
// column group per dataset. Columns are limited to metrics every summary has.
std::string compare_summaries(const std::vector<nlohmann::json>& summaries);

}  // namespace cdkt
