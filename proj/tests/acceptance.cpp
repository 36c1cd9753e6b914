// Acceptance suite: one PASS/FAIL line per criterion; exit status 1 if any fails.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>

#include <unistd.h>

#include "cdkt/error.hpp"
#include "cdkt/experiment.hpp"
#include "cdkt/losses.hpp"
#include "support.hpp"

using namespace cdkt;
using cdkt::test::numeric_grad;
using cdkt::test::random_labels;
using cdkt::test::random_probs;
using cdkt::test::random_tensor;
using cdkt::test::rel_err;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void report(int id, const std::string& name, double limit_s, const std::function<Outcome()>& body) {
  const auto t0 = Clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
  if (secs >= limit_s) {
    o.pass = false;
    o.detail += "; over the time limit";
  }
  if (!o.pass) ++failures;
  std::printf("%s %d %s: %s (%.1f s, limit %.0f s)\n", o.pass ? "PASS" : "FAIL", id, name.c_str(), o.detail.c_str(), secs,
              limit_s);
  std::fflush(stdout);
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data().data(), b.data().data(), sizeof(double) * static_cast<std::size_t>(a.size())) == 0;
}

Index rand_in(Rng& rng, Index lo, Index hi) { return lo + static_cast<Index>(rng.below(static_cast<std::uint64_t>(hi - lo + 1))); }

// --- 1: gradients ----------------------------------------------------------

double model_grad_error(const std::vector<LayerSpec>& arch, std::size_t tap, const Shape& input, Rng& rng) {
  Model m = build_model(arch, tap, rng.next_u64(), input);
  m.set_params(random_tensor({m.parameter_count()}, rng, 0.5));
  Shape batch = input;
  batch.insert(batch.begin(), rand_in(rng, 1, 3));
  const Tensor x = random_tensor(batch, rng);
  const ForwardResult out = m.forward(x);
  const Tensor wz = random_tensor(out.logits.shape(), rng), we = random_tensor(out.embedding.shape(), rng);
  m.zero_grads();
  m.backward(wz, &we);
  Tensor analytic({m.parameter_count()});
  Index at = 0;
  for (const auto& p : m.parameters()) {
    analytic.data().segment(at, p.grad.size()) = p.grad.data();
    at += p.grad.size();
  }
  const Tensor base = m.get_params();
  const Tensor numeric = numeric_grad(
      [&](const Tensor& flat) {
        m.set_params(flat);
        const ForwardResult r = m.predict(x);
        return r.logits.data().dot(wz.data()) + r.embedding.data().dot(we.data());
      },
      base, 1e-5);
  return rel_err(analytic, numeric);
}

std::vector<LayerSpec> with_head(std::vector<LayerSpec> body, const Shape& input, Index classes) {
  const Shape flat = infer_shape(body, input, body.size());
  body.push_back(LayerSpec::dense(flat[0], classes));
  return body;
}

Outcome gradient_suite() {
  constexpr int kN = 20;
  Rng rng(2024);
  double layer_worst = 0.0, loss_worst = 0.0;
  std::string worst_layer, worst_name;
  auto layer = [&](const char* name, double e) {
    if (e > layer_worst) layer_worst = e, worst_layer = name;
  };
  auto loss = [&](const std::string& name, double e) {
    if (e > loss_worst) loss_worst = e, worst_name = name;
  };
  using L = LayerSpec;
  for (int k = 0; k < kN; ++k) {
    const Index a = rand_in(rng, 1, 5), b = rand_in(rng, 2, 6), c = rand_in(rng, 1, 4);
    layer("dense", model_grad_error({L::dense(a, b), L::dense(b, c)}, 1, {a}, rng));
    layer("relu", model_grad_error({L::dense(a, b), L::relu(), L::dense(b, c)}, 2, {a}, rng));
    const Index ch = rand_in(rng, 1, 2), side = rand_in(rng, 5, 7), kern = rand_in(rng, 1, 3), stride = rand_in(rng, 1, 2);
    const Shape img = {ch, side, side};
    layer("conv2d", model_grad_error(with_head({L::conv2d(ch, 2, kern, stride), L::conv2d(2, 2, 2), L::flatten()}, img, 3),
                                     1, img, rng));
    layer("maxpool2d",
          model_grad_error(with_head({L::conv2d(ch, 2, 2), L::maxpool2d(rand_in(rng, 2, 3)), L::flatten()}, img, 2), 2,
                           img, rng));
    layer("flatten", model_grad_error(with_head({L::conv2d(ch, 2, 2), L::relu(), L::flatten()}, img, 3), 3, img, rng));
  }

  const DistanceKind kinds[] = {DistanceKind::norm2, DistanceKind::kl, DistanceKind::js};
  const TransferMode modes[] = {TransferMode::rep, TransferMode::full, TransferMode::repfull};
  for (int k = 0; k < kN; ++k) {
    const Index B = rand_in(rng, 1, 4), C = rand_in(rng, 2, 6);
    const Tensor z = random_tensor({B, C}, rng, 2.0), z2 = random_tensor({B, C}, rng);
    const auto y = random_labels(B, C, rng);
    const double tau = 0.5 + 2.0 * rng.uniform();
    loss("cross_entropy", rel_err(cross_entropy(z, y).grad, numeric_grad([&](const Tensor& t) { return cross_entropy(t, y).value; }, z)));
    loss("norm2", rel_err(dist_norm2(z, z2).grad, numeric_grad([&](const Tensor& t) { return dist_norm2(t, z2).value; }, z)));
    const Tensor p = random_probs(B, C, rng), q = random_probs(B, C, rng);
    loss("kl", rel_err(dist_kl(p, q).grad, numeric_grad([&](const Tensor& t) { return dist_kl(p, t).value; }, q, 1e-7)));
    loss("js", rel_err(dist_js(p, q).grad, numeric_grad([&](const Tensor& t) { return dist_js(p, t).value; }, q, 1e-7)));
    loss("kd_loss", rel_err(kd_loss(z2, z, tau).grad, numeric_grad([&](const Tensor& t) { return kd_loss(z2, t, tau).value; }, z)));
  }
  for (TransferMode mode : modes) {
    for (DistanceKind d : kinds) {
      const std::string tag = std::string(to_string(mode)) + "/" + to_string(d);
      for (int k = 0; k < kN; ++k) {
        const Index B = rand_in(rng, 1, 4), Br = rand_in(rng, 1, 4), C = rand_in(rng, 2, 5), E = rand_in(rng, 2, 5);
        TransferConfig cfg;
        cfg.mode = mode;
        cfg.d_global = cfg.d_local = d;
        cfg.alpha = cfg.beta = 0.2 + rng.uniform();
        cfg.lambda = rng.uniform();
        cfg.tau = 0.5 + 2.0 * rng.uniform();
        const Tensor zs = random_tensor({Br, C}, rng), es = random_tensor({Br, E}, rng);
        const Tensor pavg = random_probs(Br, C, rng), eavg = random_tensor({Br, E}, rng);
        const auto yr = random_labels(Br, C, rng);
        const ServerLoss g = global_cdkt_loss(zs, &es, &pavg, &eavg, yr, cfg);
        loss("global_cdkt_loss " + tag,
             rel_err(g.grad_logits, numeric_grad([&](const Tensor& t) { return global_cdkt_loss(t, &es, &pavg, &eavg, yr, cfg).value; }, zs)));
        if (g.grad_embedding) {
          loss("global_cdkt_loss " + tag,
               rel_err(*g.grad_embedding, numeric_grad([&](const Tensor& t) { return global_cdkt_loss(zs, &t, &pavg, &eavg, yr, cfg).value; }, es)));
        }
        const Tensor zp = random_tensor({B, C}, rng), zsrv = random_tensor({Br, C}, rng), esrv = random_tensor({Br, E}, rng);
        const auto yp = random_labels(B, C, rng);
        auto value = [&](const Tensor& a, const Tensor& b, const Tensor& c) {
          return on_device_loss(a, yp, &b, &c, &zsrv, &esrv, yr, cfg).value;
        };
        const ClientLoss l = on_device_loss(zp, yp, &zs, &es, &zsrv, &esrv, yr, cfg);
        loss("on_device_loss " + tag, rel_err(l.grad_private_logits, numeric_grad([&](const Tensor& t) { return value(t, zs, es); }, zp)));
        if (l.grad_proxy_logits) {
          loss("on_device_loss " + tag, rel_err(*l.grad_proxy_logits, numeric_grad([&](const Tensor& t) { return value(zp, t, es); }, zs)));
        }
        if (l.grad_proxy_embedding) {
          loss("on_device_loss " + tag, rel_err(*l.grad_proxy_embedding, numeric_grad([&](const Tensor& t) { return value(zp, zs, t); }, es)));
        }
      }
    }
  }
  const bool ok = layer_worst < 1e-4 && loss_worst < 1e-5;
  return {ok, "worst layer rel err " + fmt("%.2e", layer_worst) + " (" + worst_layer + "), worst loss rel err " + fmt("%.2e", loss_worst) +
                  " (" + worst_name + ")"};
}

// --- 2: divergence properties ---------------------------------------------

Outcome divergence_properties() {
  constexpr int kPairs = 1000;
  Rng rng(7);
  int violations = 0;
  double worst_sym = 0.0, worst_js = 0.0, worst_self = 0.0;
  for (int k = 0; k < kPairs; ++k) {
    const Index C = rand_in(rng, 2, 12);
    Tensor p = random_probs(1, C, rng), q = random_probs(1, C, rng);
    if (k % 10 == 0) {  // one-hot rows, disjoint every other time
      p = Tensor({1, C});
      const Index i = static_cast<Index>(rng.below(static_cast<std::uint64_t>(C)));
      p[i] = 1.0;
      if (k % 20 == 0) {
        q = Tensor({1, C});
        q[(i + 1) % C] = 1.0;
      }
    }
    const double kl = dist_kl(p, q).value;
    const double self = std::abs(dist_kl(p, p).value);
    const double js = dist_js(p, q).value, js_rev = dist_js(q, p).value;
    worst_self = std::max(worst_self, self);
    worst_sym = std::max(worst_sym, std::abs(js - js_rev));
    worst_js = std::max(worst_js, js);
    if (kl < 0.0 || self >= 1e-12 || std::abs(js - js_rev) > 1e-12 || js > std::log(2.0) + 1e-12 || js < 0.0) ++violations;

    const Tensor a = random_tensor({1, C}, rng), b = random_tensor({1, C}, rng), c = random_tensor({1, C}, rng);
    if (dist_norm2(a, a).value != 0.0) ++violations;
    const double ac = dist_norm2(a, c).value, ab = dist_norm2(a, b).value, bc = dist_norm2(b, c).value;
    if (ac > ab + bc + 1e-12) ++violations;
  }
  return {violations == 0, std::to_string(kPairs) + " pairs, " + std::to_string(violations) + " violations, max |KL(p,p)| " +
                               fmt("%.1e", worst_self) + ", max JS asymmetry " + fmt("%.1e", worst_sym) + ", max JS " +
                               fmt("%.6f", worst_js)};
}

// --- 3: reductions ---------------------------------------------------------

// Desk-scale synthetic setup shared by the criteria; `overrides` replace keys.
ExperimentConfig desk_config(const std::string& algorithm, const std::map<std::string, std::string>& overrides = {}) {
  std::map<std::string, std::string> keys = {
      {"dataset", "\"synthetic\""}, {"synthetic_classes", "10"}, {"synthetic_per_class", "100"},
      {"synthetic_dim", "32"},       {"classes_per_client", "2"}, {"proxy_size", "100"},
      {"scenario", "\"fixed(10)\""}, {"eta", "0.1"},             {"gamma", "0.1"},
      {"alpha", "3.0"},              {"beta", "0.5"}};
  keys["algorithm"] = "\"" + algorithm + "\"";
  for (const auto& [k, v] : overrides) keys[k] = v;
  std::string text;
  for (const auto& [k, v] : keys) text += k + " = " + v + "\n";
  return parse_config(text);
}

Outcome reductions() {
  std::string detail;
  bool ok = true;

  // (a) CDKT with alpha = beta = 0 and R = 0 against No-Transfer.
  {
    const std::map<std::string, std::string> zero = {
        {"rounds", "10"}, {"alpha", "0.0"}, {"beta", "0.0"}, {"global_epochs", "0"}, {"mode", "\"repfull\""}};
    const ExperimentConfig c = desk_config("cdkt", zero), n = desk_config("no_transfer", zero);
    PreparedExperiment pc = prepare_experiment(c), pn = prepare_experiment(n);
    bool same = true;
    for (int t = 0; t < 10; ++t) {
      const RoundRecord rc = run_round(pc.state), rn = run_round(pn.state);
      same = same && rc.global_acc == rn.global_acc && rc.per_client_gen == rn.per_client_gen &&
             rc.per_client_spec == rn.per_client_spec;
      same = same && bitwise_equal(pc.state.server.get_params(), pn.state.server.get_params());
      for (std::size_t k = 0; k < pc.state.clients.size(); ++k) {
        same = same && bitwise_equal(pc.state.clients[k].model.get_params(), pn.state.clients[k].model.get_params());
      }
    }
    ok = ok && same;
    detail += std::string("(a) cdkt(0,0,R=0) vs no_transfer 10 rounds ") + (same ? "bitwise equal" : "DIFFER");
  }

  // (b) FedAvg with one client against that client's own local SGD.
  {
    ExperimentConfig f = desk_config("fedavg", {{"scenario", "\"fixed(1)\""}, {"rounds", "10"}});
    PreparedExperiment p = prepare_experiment(f);
    Client shadow = p.state.clients[0];
    bool same = true;
    for (int t = 0; t < 10; ++t) {
      shadow.model.set_params(p.state.server.get_params());
      client_local_update(shadow, p.state.proxy, nullptr, p.state.config);
      run_round(p.state);
      same = same && bitwise_equal(p.state.server.get_params(), shadow.model.get_params());
    }
    ok = ok && same;
    detail += std::string("; (b) fedavg 1 client ") + (same ? "matches local SGD every round" : "DIFFERS");
  }

  // (c) kd_student_loss with alpha = 0 is cross-entropy.
  {
    Rng rng(3);
    bool same = true;
    for (int k = 0; k < 100; ++k) {
      const Index B = rand_in(rng, 1, 8), C = rand_in(rng, 2, 10);
      const Tensor zs = random_tensor({B, C}, rng, 3.0), zt = random_tensor({B, C}, rng, 3.0);
      const auto y = random_labels(B, C, rng);
      const LossGrad kd = kd_student_loss(zs, y, zt, 0.5 + 3.0 * rng.uniform(), 0.0);
      const LossGrad ce = cross_entropy(zs, y);
      same = same && kd.value == ce.value && bitwise_equal(kd.grad, ce.grad);
    }
    ok = ok && same;
    detail += std::string("; (c) kd_student_loss(alpha=0) ") + (same ? "== cross_entropy" : "DIFFERS");
  }
  return {ok, detail};
}

// --- 4, 5: desk-scale trends ------------------------------------------------

double median3(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

Outcome cgen_trend() {
  std::vector<double> cdkt, none;
  std::string per_seed;
  for (std::uint64_t seed : {1, 2, 3}) {
    auto run = [&](const std::string& alg) {
      ExperimentConfig c = desk_config(alg, {{"rounds", "30"}, {"mode", "\"rep\""}, {"d_global", "\"kl\""}, {"d_local", "\"norm2\""}});
      c.federation.seed = seed;
      PreparedExperiment p = prepare_experiment(c);
      const auto r = run_experiment(p.state);
      return median_window(r.records, 26, 30, MetricField::c_gen);
    };
    cdkt.push_back(run("cdkt"));
    none.push_back(run("no_transfer"));
    per_seed += (per_seed.empty() ? "" : ", ") + fmt("%.3f", cdkt.back()) + "/" + fmt("%.3f", none.back());
  }
  const double gap = median3(cdkt) - median3(none);
  return {gap >= 0.20, "median C-Gen cdkt(rep,KL-N) " + fmt("%.4f", median3(cdkt)) + " vs no_transfer " +
                           fmt("%.4f", median3(none)) + ", gap " + fmt("%+.2f", 100.0 * gap) +
                           " points, need >= +20 (per seed cdkt/none: " + per_seed + ")"};
}

Outcome stability() {
  std::vector<double> cdkt, fedavg;
  for (std::uint64_t seed : {1, 2, 3}) {
    auto run = [&](const std::string& alg) {
      ExperimentConfig c = desk_config(alg, {{"rounds", "40"}, {"mode", "\"repfull\""}, {"scenario", "\"subset(50,10)\""}});
      c.federation.seed = seed;
      PreparedExperiment p = prepare_experiment(c);
      const auto r = run_experiment(p.state);
      return window_stddev(r.records, 31, 40, MetricField::global);
    };
    cdkt.push_back(run("cdkt"));
    fedavg.push_back(run("fedavg"));
  }
  return {median3(cdkt) <= median3(fedavg), "median stddev of Global over rounds 31-40: cdkt(repfull) " +
                                                fmt("%.4f", median3(cdkt)) + " vs fedavg " + fmt("%.4f", median3(fedavg))};
}

// --- 6: communication ---------------------------------------------------------

Outcome communication() {
  const std::map<std::string, std::string> extra = {
      {"synthetic_image_side", "28"}, {"proxy_size", "330"},   {"rounds", "1"},        {"mode", "\"repfull\""},
      {"architecture", "\"mnist\""},  {"local_epochs", "1"}, {"global_epochs", "1"}};
  ExperimentConfig c = desk_config("cdkt", extra), f = desk_config("fedavg", extra);
  PreparedExperiment pc = prepare_experiment(c), pf = prepare_experiment(f);
  const Index params = pc.state.server.parameter_count();
  const std::uint64_t cdkt_up = run_round(pc.state).uplink_bytes;
  const std::uint64_t fedavg_up = run_round(pf.state).uplink_bytes;
  const bool ok = cdkt_up == 1953600 && params == 27562 && fedavg_up == 10ull * 27562 * 8 && cdkt_up < fedavg_up;
  return {ok, "cdkt uplink " + std::to_string(cdkt_up) + " (expect 1953600), fedavg uplink " + std::to_string(fedavg_up) +
                  " (10 * " + std::to_string(params) + " params * 8)"};
}

// --- 7: determinism -------------------------------------------------------------

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

Outcome determinism() {
  const fs::path root = fs::temp_directory_path() / ("cdkt_accept_" + std::to_string(::getpid()));
  fs::remove_all(root);
  std::string detail;
  bool ok = true;
  for (const char* alg : {"cdkt", "fedavg", "no_transfer", "kd"}) {
    const ExperimentConfig c = desk_config(alg, {{"rounds", "5"}});
    run_to_directory(c, root / alg / "a");
    run_to_directory(c, root / alg / "b");
    const std::string a = slurp(root / alg / "a" / "metrics.csv"), b = slurp(root / alg / "b" / "metrics.csv");
    const bool same = !a.empty() && a == b;
    ok = ok && same;
    detail += std::string(detail.empty() ? "" : ", ") + alg + (same ? " identical" : " DIFFERENT");
  }
  fs::remove_all(root);
  return {ok, detail};
}

// --- 8: heterogeneous clients ------------------------------------------------------

Outcome heterogeneity() {
  const std::map<std::string, std::string> extra = {
      {"synthetic_image_side", "16"}, {"architecture", "\"mnist\""}, {"hetero", "true"}, {"rounds", "10"}};
  PreparedExperiment p = prepare_experiment(desk_config("cdkt", extra));
  const auto result = run_experiment(p.state);
  bool valid = result.records.size() == 10;
  for (const auto& r : result.records) {
    for (double v : {r.global_acc, r.c_gen, r.c_spec, r.c_per}) valid = valid && std::isfinite(v) && v >= 0.0 && v <= 1.0;
    valid = valid && std::abs(r.c_per - 0.5 * (r.c_gen + r.c_spec)) < 1e-12;
  }
  std::string message;
  try {
    desk_config("fedavg", extra);
  } catch (const ConfigError& e) {
    message = e.what();
  }
  const bool rejected = message.find("FedAvg requires identical models") != std::string::npos;
  return {valid && rejected, std::string("cdkt hetero 10 rounds ") + (valid ? "valid" : "INVALID") +
                                 ", final global " + fmt("%.3f", result.records.empty() ? 0.0 : result.records.back().global_acc) +
                                 "; fedavg: " + (rejected ? "\"" + message + "\"" : "NOT rejected")};
}

}  // namespace

int main() {
  report(1, "gradient suite", 30, gradient_suite);
  report(2, "divergence properties", 5, divergence_properties);
  report(3, "reductions", 60, reductions);
  report(4, "C-Gen trend (synthetic, fixed users)", 600, cgen_trend);
  report(5, "stability (synthetic, subset(50,10))", 900, stability);
  report(6, "communication (fashion preset)", 60, communication);
  report(7, "byte-identical metrics.csv", 120, determinism);
  report(8, "heterogeneous clients", 120, heterogeneity);
  return failures == 0 ? 0 : 1;
}
