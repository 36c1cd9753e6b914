#include "cdkt/config.hpp"

#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

namespace cdkt {

namespace {

[[noreturn]] void parse_fail(int line, const std::string& what) {
  throw ConfigError("line " + std::to_string(line) + ": " + what);
}

std::string trim(const std::string& s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

// Reads a basic string starting at s[at] == '"'; returns the index past the
// closing quote.
std::size_t read_string(const std::string& s, std::size_t at, std::string& out, int line) {
  out.clear();
  for (std::size_t i = at + 1; i < s.size(); ++i) {
    const char c = s[i];
    if (c == '"') return i + 1;
    if (c == '\\') {
      if (++i >= s.size()) break;
      switch (s[i]) {
        case '"': out += '"'; break;
        case '\\': out += '\\'; break;
        case 'n': out += '\n'; break;
        case 't': out += '\t'; break;
        default: parse_fail(line, std::string("unsupported escape \\") + s[i]);
      }
    } else {
      out += c;
    }
  }
  parse_fail(line, "unterminated string");
}

// Removes a trailing comment that is not inside a string.
std::string strip_comment(const std::string& s) {
  bool in_string = false;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '\\' && in_string) {
      ++i;
    } else if (s[i] == '"') {
      in_string = !in_string;
    } else if (s[i] == '#' && !in_string) {
      return s.substr(0, i);
    }
  }
  return s;
}

TomlValue parse_scalar(const std::string& raw, int line) {
  const std::string v = trim(raw);
  if (v.empty()) parse_fail(line, "missing value");
  if (v == "true") return true;
  if (v == "false") return false;
  if (v.front() == '"') {
    std::string out;
    const std::size_t end = read_string(v, 0, out, line);
    if (!trim(v.substr(end)).empty()) parse_fail(line, "trailing characters after string");
    return out;
  }
  if (v.front() == '[') {
    if (v.back() != ']') parse_fail(line, "arrays must close on the same line");
    std::vector<std::string> items;
    std::size_t at = 1;
    const std::size_t end = v.size() - 1;
    while (true) {
      while (at < end && std::isspace(static_cast<unsigned char>(v[at]))) ++at;
      if (at >= end) break;
      if (v[at] != '"') parse_fail(line, "arrays may only hold strings");
      std::string item;
      at = read_string(v, at, item, line);
      items.push_back(std::move(item));
      while (at < end && std::isspace(static_cast<unsigned char>(v[at]))) ++at;
      if (at < end) {
        if (v[at] != ',') parse_fail(line, "expected ',' between array items");
        ++at;
      }
    }
    return items;
  }
  std::string num;
  for (char c : v) {
    if (c != '_') num += c;
  }
  const bool is_float = num.find_first_of(".eE") != std::string::npos;
  const char* first = num.data() + (num.front() == '+' ? 1 : 0);
  const char* last = num.data() + num.size();
  if (is_float) {
    double d = 0.0;
    auto [p, ec] = std::from_chars(first, last, d);
    if (ec != std::errc() || p != last || !std::isfinite(d)) parse_fail(line, "invalid number '" + v + "'");
    return d;
  }
  std::int64_t i = 0;
  auto [p, ec] = std::from_chars(first, last, i);
  if (ec != std::errc() || p != last) parse_fail(line, "invalid value '" + v + "'");
  return i;
}

std::string format_double(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  std::string s(buf, p);
  if (s.find_first_of(".e") == std::string::npos) s += ".0";
  return s;
}

std::string quote(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    if (c == '\n') {
      out += "\\n";
      continue;
    }
    if (c == '\t') {
      out += "\\t";
      continue;
    }
    out += c;
  }
  return out + '"';
}

const std::set<std::string> kDatasets = {"mnist", "fashion_mnist", "cifar10", "cifar100", "synthetic"};
const std::set<std::string> kArchitectures = {"auto", "mlp", "mnist", "cifar"};

Index dataset_classes(const ExperimentConfig& c) {
  if (c.dataset == "synthetic") return c.synthetic_classes;
  if (c.dataset == "cifar100") return 100;
  return 10;
}

// Typed access to a parsed table; every key read is marked as known.
class Reader {
 public:
  explicit Reader(const TomlTable& t) : table_(t) {}

  template <typename T>
  bool get(const std::string& key, T& out) {
    known_.insert(key);
    auto it = table_.find(key);
    if (it == table_.end()) return false;
    const TomlValue& v = it->second;
    if constexpr (std::is_same_v<T, std::string>) {
      if (auto* s = std::get_if<std::string>(&v)) {
        out = *s;
        return true;
      }
      throw ConfigError("key '" + key + "': expected a string");
    } else if constexpr (std::is_same_v<T, bool>) {
      if (auto* b = std::get_if<bool>(&v)) {
        out = *b;
        return true;
      }
      throw ConfigError("key '" + key + "': expected true or false");
    } else if constexpr (std::is_same_v<T, double>) {
      if (auto* d = std::get_if<double>(&v)) {
        out = *d;
        return true;
      }
      if (auto* i = std::get_if<std::int64_t>(&v)) {
        out = static_cast<double>(*i);
        return true;
      }
      throw ConfigError("key '" + key + "': expected a number");
    } else if constexpr (std::is_same_v<T, std::vector<std::string>>) {
      if (auto* a = std::get_if<std::vector<std::string>>(&v)) {
        out = *a;
        return true;
      }
      throw ConfigError("key '" + key + "': expected an array of strings");
    } else {
      if (auto* i = std::get_if<std::int64_t>(&v)) {
        out = static_cast<T>(*i);
        return true;
      }
      throw ConfigError("key '" + key + "': expected an integer");
    }
  }

  void reject_unknown() const {
    for (const auto& [key, value] : table_) {
      if (!known_.count(key)) throw ConfigError("unknown key '" + key + "'");
    }
  }

 private:
  const TomlTable& table_;
  std::set<std::string> known_;
};

}  // namespace

TomlTable parse_flat_toml(const std::string& text) {
  TomlTable table;
  std::istringstream is(text);
  std::string raw;
  int line = 0;
  while (std::getline(is, raw)) {
    ++line;
    const std::string s = trim(strip_comment(raw));
    if (s.empty()) continue;
    if (s.front() == '[') parse_fail(line, "tables are not supported; the document is flat");
    const std::size_t eq = s.find('=');
    if (eq == std::string::npos) parse_fail(line, "expected key = value");
    const std::string key = trim(s.substr(0, eq));
    if (key.empty()) parse_fail(line, "missing key");
    for (char c : key) {
      if (!std::isalnum(static_cast<unsigned char>(c)) && c != '_' && c != '-') parse_fail(line, "invalid key '" + key + "'");
    }
    if (table.count(key)) parse_fail(line, "duplicate key '" + key + "'");
    table[key] = parse_scalar(s.substr(eq + 1), line);
  }
  return table;
}

void ExperimentConfig::validate() const {
  if (!kDatasets.count(dataset)) throw ConfigError("key 'dataset': unknown dataset '" + dataset + "'");
  if (!kArchitectures.count(architecture)) throw ConfigError("key 'architecture': unknown preset '" + architecture + "'");
  if (dataset == "synthetic") {
    if (synthetic_classes < 2) throw ConfigError("key 'synthetic_classes': must be >= 2");
    if (synthetic_per_class < 1) throw ConfigError("key 'synthetic_per_class': must be >= 1");
    if (synthetic_dim < 1) throw ConfigError("key 'synthetic_dim': must be >= 1");
    if (!(synthetic_separation >= 0.0)) throw ConfigError("key 'synthetic_separation': must be >= 0");
    if (synthetic_image_side < 0) throw ConfigError("key 'synthetic_image_side': must be >= 0");
  }
  const Index classes = dataset_classes(*this);
  if (classes_per_client < 1 || classes_per_client > classes) {
    throw ConfigError("key 'classes_per_client': must lie in [1, " + std::to_string(classes) + "]");
  }
  if (!(test_frac >= 0.0 && test_frac < 1.0)) throw ConfigError("key 'test_frac': must lie in [0, 1)");
  if (proxy_size < classes) throw ConfigError("key 'proxy_size': must be >= the class count " + std::to_string(classes));
  if (!(median_target >= 0.0)) throw ConfigError("key 'median_target': must be >= 0");
  if (output_dir.empty()) throw ConfigError("key 'output_dir': must not be empty");

  const auto& f = federation;
  const auto& t = f.transfer;
  if (!(t.alpha >= 0.0)) throw ConfigError("key 'alpha': must be >= 0");
  if (!(t.beta >= 0.0)) throw ConfigError("key 'beta': must be >= 0");
  if (!(t.lambda >= 0.0 && t.lambda <= 1.0)) throw ConfigError("key 'lambda': must lie in [0, 1]");
  if (!(t.tau > 0.0)) throw ConfigError("key 'tau': must be > 0");
  if (f.rounds < 0) throw ConfigError("key 'rounds': must be >= 0");
  if (f.local_epochs < 0) throw ConfigError("key 'local_epochs': must be >= 0");
  if (f.global_epochs < 0) throw ConfigError("key 'global_epochs': must be >= 0");
  if (!(f.eta > 0.0)) throw ConfigError("key 'eta': must be > 0");
  if (!(f.gamma > 0.0)) throw ConfigError("key 'gamma': must be > 0");
  if (f.batch_size < 1) throw ConfigError("key 'batch_size': must be >= 1");
  if (hetero && f.algorithm == Algorithm::fedavg) throw ConfigError("key 'hetero': FedAvg requires identical models");
  f.validate();
}

ExperimentConfig parse_config(const std::string& text) {
  const TomlTable table = parse_flat_toml(text);
  Reader r(table);
  ExperimentConfig c;
  if (!r.get("dataset", c.dataset)) throw ConfigError("key 'dataset': required");
  std::string algorithm;
  if (!r.get("algorithm", algorithm)) throw ConfigError("key 'algorithm': required");
  try {
    c.federation.algorithm = algorithm_from_string(algorithm);
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("key 'algorithm': ") + e.what());
  }
  if (!kDatasets.count(c.dataset)) throw ConfigError("key 'dataset': unknown dataset '" + c.dataset + "'");

  // Dataset-dependent defaults.
  if (c.dataset == "mnist") {
    c.proxy_size = 355;
    c.median_target = 63.0;
  } else if (c.dataset == "fashion_mnist") {
    c.proxy_size = 330;
    c.median_target = 70.5;
  } else if (c.dataset == "cifar10") {
    c.proxy_size = 4200;
    c.median_target = 966.5;
  } else if (c.dataset == "cifar100") {
    c.proxy_size = 4200;
    c.median_target = 1163.5;
    c.classes_per_client = 20;
  }
  if (const char* env = std::getenv(kDataDirEnv); env && *env) {
    c.data_dir = env;
  } else {
    c.data_dir = "data";
  }

  r.get("data_dir", c.data_dir);
  r.get("data_files", c.data_files);
  r.get("synthetic_classes", c.synthetic_classes);
  r.get("synthetic_per_class", c.synthetic_per_class);
  r.get("synthetic_dim", c.synthetic_dim);
  r.get("synthetic_separation", c.synthetic_separation);
  r.get("synthetic_image_side", c.synthetic_image_side);

  std::string text_value;
  if (r.get("scenario", text_value)) {
    try {
      c.federation.scenario = scenario_from_string(text_value);
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("key 'scenario': ") + e.what());
    }
  }
  auto& t = c.federation.transfer;
  auto parse_enum = [&](const char* key, auto parse, auto& out) {
    if (!r.get(key, text_value)) return;
    try {
      out = parse(text_value);
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("key '") + key + "': " + e.what());
    }
  };
  parse_enum("mode", mode_from_string, t.mode);
  parse_enum("d_global", distance_from_string, t.d_global);
  parse_enum("d_local", distance_from_string, t.d_local);
  r.get("alpha", t.alpha);
  r.get("beta", t.beta);
  r.get("lambda", t.lambda);
  r.get("tau", t.tau);

  r.get("classes_per_client", c.classes_per_client);
  r.get("test_frac", c.test_frac);
  r.get("proxy_size", c.proxy_size);
  r.get("median_target", c.median_target);

  auto& f = c.federation;
  r.get("rounds", f.rounds);
  r.get("local_epochs", f.local_epochs);
  r.get("global_epochs", f.global_epochs);
  r.get("eta", f.eta);
  r.get("gamma", f.gamma);
  r.get("batch_size", f.batch_size);
  r.get("fedavg_weighted", f.fedavg_weighted);
  r.get("server_proxy_training", f.server_proxy_training);
  std::int64_t seed = static_cast<std::int64_t>(f.seed);
  r.get("seed", seed);
  if (seed < 0) throw ConfigError("key 'seed': must be >= 0");
  f.seed = static_cast<std::uint64_t>(seed);

  r.get("architecture", c.architecture);
  r.get("hetero", c.hetero);
  r.get("output_dir", c.output_dir);

  r.reject_unknown();
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str());
}

std::string to_toml(const ExperimentConfig& c) {
  const auto& f = c.federation;
  const auto& t = f.transfer;
  std::ostringstream os;
  os << "dataset = " << quote(c.dataset) << '\n';
  os << "data_dir = " << quote(c.data_dir) << '\n';
  os << "data_files = [";
  for (std::size_t i = 0; i < c.data_files.size(); ++i) os << (i ? ", " : "") << quote(c.data_files[i]);
  os << "]\n";
  os << "synthetic_classes = " << c.synthetic_classes << '\n';
  os << "synthetic_per_class = " << c.synthetic_per_class << '\n';
  os << "synthetic_dim = " << c.synthetic_dim << '\n';
  os << "synthetic_separation = " << format_double(c.synthetic_separation) << '\n';
  os << "synthetic_image_side = " << c.synthetic_image_side << '\n';
  os << "scenario = " << quote(to_string(f.scenario)) << '\n';
  os << "algorithm = " << quote(to_string(f.algorithm)) << '\n';
  os << "mode = " << quote(to_string(t.mode)) << '\n';
  os << "d_global = " << quote(to_string(t.d_global)) << '\n';
  os << "d_local = " << quote(to_string(t.d_local)) << '\n';
  os << "alpha = " << format_double(t.alpha) << '\n';
  os << "beta = " << format_double(t.beta) << '\n';
  os << "lambda = " << format_double(t.lambda) << '\n';
  os << "tau = " << format_double(t.tau) << '\n';
  os << "classes_per_client = " << c.classes_per_client << '\n';
  os << "test_frac = " << format_double(c.test_frac) << '\n';
  os << "proxy_size = " << c.proxy_size << '\n';
  os << "median_target = " << format_double(c.median_target) << '\n';
  os << "rounds = " << f.rounds << '\n';
  os << "local_epochs = " << f.local_epochs << '\n';
  os << "global_epochs = " << f.global_epochs << '\n';
  os << "eta = " << format_double(f.eta) << '\n';
  os << "gamma = " << format_double(f.gamma) << '\n';
  os << "batch_size = " << f.batch_size << '\n';
  os << "fedavg_weighted = " << (f.fedavg_weighted ? "true" : "false") << '\n';
  os << "server_proxy_training = " << (f.server_proxy_training ? "true" : "false") << '\n';
  os << "architecture = " << quote(c.architecture) << '\n';
  os << "hetero = " << (c.hetero ? "true" : "false") << '\n';
  os << "seed = " << f.seed << '\n';
  os << "output_dir = " << quote(c.output_dir) << '\n';
  return os.str();
}

std::string run_label(const ExperimentConfig& cfg) {
  const auto& f = cfg.federation;
  if (f.algorithm != Algorithm::cdkt) return to_string(f.algorithm);
  return std::string("cdkt-") + to_string(f.transfer.mode) + "-" + to_string(f.transfer.d_global) + "-" +
         to_string(f.transfer.d_local);
}

}  // namespace cdkt
