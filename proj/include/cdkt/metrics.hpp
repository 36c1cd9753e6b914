#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cdkt/datasets.hpp"
#include "cdkt/model.hpp"

namespace cdkt {

struct FederationState;

struct RoundRecord {
  int round = 0;  // 1-based
  double global_acc = 0.0;
  double c_gen = 0.0;
  double c_spec = 0.0;
  double c_per = 0.0;
  std::vector<double> per_client_gen;
  std::vector<double> per_client_spec;
  std::uint64_t uplink_bytes = 0;
  std::uint64_t downlink_bytes = 0;
};

enum class MetricField { global, c_gen, c_spec, c_per, uplink_bytes, downlink_bytes };

inline constexpr MetricField kAllFields[] = {MetricField::global,   MetricField::c_gen,        MetricField::c_spec,
                                             MetricField::c_per,    MetricField::uplink_bytes, MetricField::downlink_bytes};

const char* to_string(MetricField f);
MetricField metric_field_from_string(const std::string& s);
double field_value(const RoundRecord& r, MetricField f);

// Index of the largest logit; ties break to the lowest class.
std::vector<int> predict_labels(const Model& model, const LabeledSet& set);
double accuracy(const Model& model, const LabeledSet& set);

// Global: server on the union of all client test shards. C-Spec: mean client
// accuracy on its own shard. C-Gen: mean client accuracy on the union.
// C-Per: (C-Gen + C-Spec) / 2. Every client is evaluated, selected or not.
RoundRecord evaluate_round(const FederationState& state);

// Median / population standard deviation of a field over records whose
// round lies in [lo, hi].
double median_window(std::span<const RoundRecord> records, int lo, int hi, MetricField field);
double window_stddev(std::span<const RoundRecord> records, int lo, int hi, MetricField field);

}  // namespace cdkt
