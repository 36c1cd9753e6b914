#include "cdkt/experiment.hpp"

#include <cstdio>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

namespace cdkt {

namespace fs = std::filesystem;

ArchitecturePreset architecture_preset(const std::string& name, const Shape& input_shape, Index classes, bool hetero) {
  ArchitecturePreset p;
  auto& L = p.layers;
  if (name == "mlp") {
    if (input_shape.size() != 1) throw ConfigError("architecture 'mlp' needs flat examples, got " + shape_string(input_shape));
    const Index d = input_shape[0];
    if (hetero) {
      L = {LayerSpec::dense(d, 32), LayerSpec::relu()};
    } else {
      L = {LayerSpec::dense(d, 64), LayerSpec::relu(), LayerSpec::dense(64, 32), LayerSpec::relu()};
    }
    p.embed_tap = L.size();
    L.push_back(LayerSpec::dense(32, classes));
    return p;
  }
  if (name != "mnist" && name != "cifar") throw ConfigError("unknown architecture preset '" + name + "'");
  if (input_shape.size() != 3) throw ConfigError("architecture '" + name + "' needs (channels, h, w) examples, got " + shape_string(input_shape));

  std::vector<Index> channels = name == "mnist" ? std::vector<Index>{8, 16} : std::vector<Index>{8, 16, 32};
  const Index embed = name == "mnist" ? 64 : 128;
  if (hetero) channels.pop_back();
  Index in = input_shape[0];
  for (Index out : channels) {
    L.push_back(LayerSpec::conv2d(in, out, 3));
    L.push_back(LayerSpec::relu());
    L.push_back(LayerSpec::maxpool2d(2));
    in = out;
  }
  L.push_back(LayerSpec::flatten());
  const Shape flat = infer_shape(L, input_shape, L.size());
  L.push_back(LayerSpec::dense(flat[0], embed));
  L.push_back(LayerSpec::relu());
  p.embed_tap = L.size();
  L.push_back(LayerSpec::dense(embed, classes));
  return p;
}

std::string resolve_architecture(const ExperimentConfig& cfg, const Shape& input_shape) {
  if (cfg.architecture != "auto") return cfg.architecture;
  if (cfg.dataset == "cifar10" || cfg.dataset == "cifar100") return "cifar";
  return input_shape.size() == 1 ? "mlp" : "mnist";
}

LabeledSet load_dataset(const ExperimentConfig& cfg) {
  const fs::path root(cfg.data_dir);
  auto file = [&](std::size_t i, const fs::path& fallback) {
    return i < cfg.data_files.size() ? root / cfg.data_files[i] : fallback;
  };
  if (cfg.dataset == "synthetic") {
    const Index side = cfg.synthetic_image_side;
    const Index dim = side > 0 ? side * side : cfg.synthetic_dim;
    LabeledSet s = synth_generate(cfg.synthetic_classes, cfg.synthetic_per_class, dim,
                                  derive_seed(cfg.federation.seed, "synthetic"), cfg.synthetic_separation);
    if (side > 0) s.examples = s.examples.reshaped({s.size(), 1, side, side});
    return s;
  }
  if (cfg.dataset == "mnist" || cfg.dataset == "fashion_mnist") {
    const fs::path dir = root / cfg.dataset;
    return load_idx(file(0, dir / "train-images-idx3-ubyte"), file(1, dir / "train-labels-idx1-ubyte"));
  }
  std::vector<fs::path> paths;
  if (!cfg.data_files.empty()) {
    for (const auto& f : cfg.data_files) paths.push_back(root / f);
  } else if (cfg.dataset == "cifar10") {
    for (int i = 1; i <= 5; ++i) paths.push_back(root / "cifar-10-batches-bin" / ("data_batch_" + std::to_string(i) + ".bin"));
  } else {
    paths.push_back(root / "cifar-100-binary" / "train.bin");
  }
  return load_cifar_binary(paths, cfg.dataset == "cifar10" ? CifarVariant::cifar10 : CifarVariant::cifar100);
}

PreparedExperiment prepare_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  const LabeledSet src = load_dataset(cfg);
  const auto& fed = cfg.federation;

  PartitionOptions opt;
  opt.n_clients = fed.scenario.total;
  opt.classes_per_client = cfg.classes_per_client;
  opt.test_frac = cfg.test_frac;
  opt.proxy_size = cfg.proxy_size;
  if (cfg.median_target > 0.0) opt.median_target = cfg.median_target;
  opt.seed = derive_seed(fed.seed, "partition");
  Partition part = partition_noniid(src, opt);

  const Shape input = src.example_shape();
  const std::string arch = resolve_architecture(cfg, input);
  const ArchitecturePreset server_arch = architecture_preset(arch, input, src.classes, false);
  const ArchitecturePreset client_arch = architecture_preset(arch, input, src.classes, cfg.hetero);
  Model server = build_model(server_arch.layers, server_arch.embed_tap, derive_seed(fed.seed, "server-model"), input);
  std::vector<Model> clients;
  for (Index n = 0; n < fed.scenario.total; ++n) {
    clients.push_back(build_model(client_arch.layers, client_arch.embed_tap,
                                  derive_seed(fed.seed, "client-model", static_cast<std::uint64_t>(n)), input));
  }
  FederationState state = make_federation(fed, std::move(server), std::move(clients), part);
  return {std::move(state), std::move(part)};
}

std::pair<int, int> summary_window(Index rounds) {
  if (rounds >= 100) return {90, 100};
  const Index n = std::max<Index>(1, (rounds + 9) / 10);
  return {static_cast<int>(rounds - n + 1), static_cast<int>(rounds)};
}

namespace {

std::string fixed6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

bool is_byte_field(MetricField f) { return f == MetricField::uplink_bytes || f == MetricField::downlink_bytes; }

}  // namespace

std::string metrics_csv(const std::vector<RoundRecord>& records) {
  std::ostringstream os;
  os << "round,global,c_gen,c_spec,c_per,uplink_bytes,downlink_bytes\n";
  for (const auto& r : records) {
    os << r.round << ',' << fixed6(r.global_acc) << ',' << fixed6(r.c_gen) << ',' << fixed6(r.c_spec) << ','
       << fixed6(r.c_per) << ',' << r.uplink_bytes << ',' << r.downlink_bytes << '\n';
  }
  return os.str();
}

nlohmann::json make_summary(const ExperimentConfig& cfg, const std::vector<RoundRecord>& records,
                            const std::vector<std::string>& warnings) {
  nlohmann::json j;
  j["label"] = run_label(cfg);
  j["algorithm"] = to_string(cfg.federation.algorithm);
  j["dataset"] = cfg.dataset;
  j["scenario"] = to_string(cfg.federation.scenario);
  j["seed"] = cfg.federation.seed;
  j["rounds"] = cfg.federation.rounds;
  const auto [lo, hi] = summary_window(cfg.federation.rounds);
  j["window"] = {{"lo", lo}, {"hi", hi}};
  nlohmann::json median = nlohmann::json::object(), stddev = nlohmann::json::object();
  for (MetricField f : kAllFields) {
    if (records.empty()) {
      median[to_string(f)] = nullptr;
      stddev[to_string(f)] = nullptr;
      continue;
    }
    median[to_string(f)] = median_window(records, lo, hi, f);
    stddev[to_string(f)] = window_stddev(records, lo, hi, f);
  }
  j["median"] = median;
  j["stddev"] = stddev;
  std::uint64_t up = 0, down = 0;
  for (const auto& r : records) {
    up += r.uplink_bytes;
    down += r.downlink_bytes;
  }
  j["total_uplink_bytes"] = up;
  j["total_downlink_bytes"] = down;
  j["warnings"] = warnings;
  j["config"] = to_toml(cfg);
  return j;
}

ExperimentResult run_to_directory(const ExperimentConfig& cfg, const fs::path& out_dir) {
  PreparedExperiment prepared = prepare_experiment(cfg);

  std::vector<fs::path> created;
  auto cleanup = [&] {
    std::error_code ec;
    for (auto it = created.rbegin(); it != created.rend(); ++it) fs::remove(*it, ec);
  };
  try {
    ExperimentResult result = run_experiment(prepared.state);

    auto make_dir = [&](const fs::path& d) {
      if (!fs::exists(d)) {
        fs::create_directories(d);
        created.push_back(d);
      }
    };
    auto write = [&](const fs::path& p, const std::string& text) {
      created.push_back(p);
      std::ofstream os(p, std::ios::binary);
      if (!os) throw Error("cannot write " + p.string());
      os << text;
      if (!os) throw Error("write failed for " + p.string());
    };

    make_dir(out_dir);
    write(out_dir / "metrics.csv", metrics_csv(result.records));
    write(out_dir / "summary.json", make_summary(cfg, result.records, prepared.state.warnings).dump(2) + "\n");
    write(out_dir / "config.toml", to_toml(cfg));
    const fs::path plot = out_dir / "plotdata";
    make_dir(plot);
    const std::string label = run_label(cfg);
    for (MetricField f : kAllFields) {
      std::ostringstream os;
      for (const auto& r : result.records) {
        os << r.round << ' ';
        if (is_byte_field(f)) {
          os << static_cast<std::uint64_t>(field_value(r, f));
        } else {
          os << fixed6(field_value(r, f));
        }
        os << '\n';
      }
      write(plot / (label + "_" + to_string(f) + ".dat"), os.str());
    }
    return result;
  } catch (...) {
    cleanup();
    throw;
  }
}

std::string compare_summaries(const std::vector<nlohmann::json>& summaries) {
  if (summaries.size() < 2) throw ConfigError("compare needs at least two summaries");
  const std::pair<const char*, const char*> kColumns[] = {{"global", "Global"}, {"c_per", "C-Per"}};

  for (const auto& s : summaries) {
    if (!s.is_object() || !s.contains("median") || !s["median"].is_object() || !s.contains("label") ||
        !s.contains("dataset") || !s.contains("scenario")) {
      throw ConfigError("summary schema mismatch: expected label, dataset, scenario and median");
    }
  }
  std::vector<std::pair<std::string, std::string>> columns;
  for (const auto& [key, title] : kColumns) {
    bool everywhere = true;
    for (const auto& s : summaries) everywhere = everywhere && s["median"].contains(key);
    if (everywhere) columns.emplace_back(key, title);
  }
  if (columns.empty()) throw ConfigError("summary schema mismatch: no common Global or C-Per median");

  std::vector<std::string> datasets;
  std::vector<std::pair<std::string, std::string>> rows;  // (scenario, label)
  std::map<std::tuple<std::string, std::string, std::string>, const nlohmann::json*> cells;
  for (const auto& s : summaries) {
    const auto ds = s["dataset"].get<std::string>();
    const auto row = std::make_pair(s["scenario"].get<std::string>(), s["label"].get<std::string>());
    if (std::find(datasets.begin(), datasets.end(), ds) == datasets.end()) datasets.push_back(ds);
    if (std::find(rows.begin(), rows.end(), row) == rows.end()) rows.push_back(row);
    cells[{row.first, row.second, ds}] = &s;
  }

  constexpr int kRowHead = 16, kLabel = 24, kCell = 9;
  std::ostringstream os;
  os << std::left << std::setw(kRowHead) << "scenario" << std::setw(kLabel) << "algorithm";
  for (const auto& ds : datasets) os << "| " << std::setw(kCell * static_cast<int>(columns.size())) << ds;
  os << '\n' << std::setw(kRowHead + kLabel) << "";
  for (std::size_t d = 0; d < datasets.size(); ++d) {
    os << "| ";
    for (const auto& c : columns) os << std::setw(kCell) << c.second;
  }
  os << '\n';
  for (const auto& row : rows) {
    os << std::setw(kRowHead) << row.first << std::setw(kLabel) << row.second;
    for (const auto& ds : datasets) {
      os << "| ";
      auto it = cells.find({row.first, row.second, ds});
      for (const auto& c : columns) {
        std::string cell = "-";
        if (it != cells.end()) {
          const auto& v = (*it->second)["median"][c.first];
          if (v.is_number()) {
            char buf[32];
            std::snprintf(buf, sizeof buf, "%.2f", 100.0 * v.get<double>());
            cell = buf;
          }
        }
        os << std::setw(kCell) << cell;
      }
    }
    os << '\n';
  }
  return os.str();
}

}  // namespace cdkt
