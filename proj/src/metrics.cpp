#include "cdkt/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "cdkt/federation.hpp"

namespace cdkt {

const char* to_string(MetricField f) {
  switch (f) {
    case MetricField::global: return "global";
    case MetricField::c_gen: return "c_gen";
    case MetricField::c_spec: return "c_spec";
    case MetricField::c_per: return "c_per";
    case MetricField::uplink_bytes: return "uplink_bytes";
    case MetricField::downlink_bytes: return "downlink_bytes";
  }
  return "?";
}

MetricField metric_field_from_string(const std::string& s) {
  for (MetricField f : kAllFields) {
    if (s == to_string(f)) return f;
  }
  throw ConfigError("unknown metric field '" + s + "'");
}

double field_value(const RoundRecord& r, MetricField f) {
  switch (f) {
    case MetricField::global: return r.global_acc;
    case MetricField::c_gen: return r.c_gen;
    case MetricField::c_spec: return r.c_spec;
    case MetricField::c_per: return r.c_per;
    case MetricField::uplink_bytes: return static_cast<double>(r.uplink_bytes);
    case MetricField::downlink_bytes: return static_cast<double>(r.downlink_bytes);
  }
  return 0.0;
}

std::vector<int> predict_labels(const Model& model, const LabeledSet& set) {
  constexpr Index kChunk = 256;
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(set.size()));
  std::vector<Index> rows;
  for (Index start = 0; start < set.size(); start += kChunk) {
    rows.clear();
    for (Index r = start; r < std::min(set.size(), start + kChunk); ++r) rows.push_back(r);
    const Tensor z = model.predict(set.examples.take_rows(rows)).logits;
    const auto zm = z.matrix();
    for (Index i = 0; i < zm.rows(); ++i) {
      int best = 0;
      for (Index c = 1; c < zm.cols(); ++c) {
        if (zm(i, c) > zm(i, best)) best = static_cast<int>(c);
      }
      out.push_back(best);
    }
  }
  return out;
}

double accuracy(const Model& model, const LabeledSet& set) {
  if (set.empty()) throw DataError("accuracy over an empty set");
  const auto pred = predict_labels(model, set);
  Index hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == set.labels[i];
  return static_cast<double>(hits) / static_cast<double>(set.size());
}

RoundRecord evaluate_round(const FederationState& state) {
  RoundRecord r;
  r.round = state.round;
  r.global_acc = accuracy(state.server, state.collective_test);
  double gen = 0.0, spec = 0.0;
  std::size_t spec_count = 0;
  for (const Client& c : state.clients) {
    const double g = accuracy(c.model, state.collective_test);
    // A client without a test shard has no specialization score.
    const double s = c.test.empty() ? std::nan("") : accuracy(c.model, c.test);
    r.per_client_gen.push_back(g);
    r.per_client_spec.push_back(s);
    gen += g;
    if (!c.test.empty()) {
      spec += s;
      ++spec_count;
    }
  }
  const auto n = static_cast<double>(state.clients.size());
  r.c_gen = n > 0 ? gen / n : 0.0;
  r.c_spec = spec_count > 0 ? spec / static_cast<double>(spec_count) : 0.0;
  r.c_per = 0.5 * (r.c_gen + r.c_spec);
  return r;
}

namespace {

std::vector<double> window_values(std::span<const RoundRecord> records, int lo, int hi, MetricField field) {
  if (lo > hi) throw ConfigError("window lower bound exceeds upper bound");
  std::vector<double> v;
  for (const auto& r : records) {
    if (r.round >= lo && r.round <= hi) v.push_back(field_value(r, field));
  }
  if (v.empty()) {
    throw DataError("no records in round window [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
  }
  return v;
}

}  // namespace

double median_window(std::span<const RoundRecord> records, int lo, int hi, MetricField field) {
  auto v = window_values(records, lo, hi, field);
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double window_stddev(std::span<const RoundRecord> records, int lo, int hi, MetricField field) {
  const auto v = window_values(records, lo, hi, field);
  // Welford's update; a single pass with compensated mean.
  double mean = 0.0, m2 = 0.0;
  std::size_t k = 0;
  for (double x : v) {
    ++k;
    const double d = x - mean;
    mean += d / static_cast<double>(k);
    m2 += d * (x - mean);
  }
  return std::sqrt(m2 / static_cast<double>(k));
}

}  // namespace cdkt
