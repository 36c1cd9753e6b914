#include "cdkt/federation.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numeric>

namespace cdkt {

const char* to_string(Algorithm a) {
  switch (a) {
    case Algorithm::cdkt: return "cdkt";
    case Algorithm::fedavg: return "fedavg";
    case Algorithm::no_transfer: return "no_transfer";
    case Algorithm::kd: return "kd";
  }
  return "?";
}

Algorithm algorithm_from_string(const std::string& s) {
  for (Algorithm a : {Algorithm::cdkt, Algorithm::fedavg, Algorithm::no_transfer, Algorithm::kd}) {
    if (s == to_string(a)) return a;
  }
  throw ConfigError("unknown algorithm '" + s + "' (expected cdkt, fedavg, no_transfer or kd)");
}

std::string to_string(const Scenario& s) {
  if (s.subset) return "subset(" + std::to_string(s.total) + "," + std::to_string(s.per_round) + ")";
  return "fixed(" + std::to_string(s.total) + ")";
}

Scenario scenario_from_string(const std::string& text) {
  std::string s;
  for (char c : text) {
    if (!std::isspace(static_cast<unsigned char>(c))) s += c;
  }
  auto args = [&](std::size_t open) {
    if (s.back() != ')') throw ConfigError("scenario '" + text + "': missing ')'");
    std::vector<Index> out;
    std::size_t at = open + 1;
    while (at < s.size() - 1) {
      std::size_t end = s.find(',', at);
      if (end == std::string::npos || end > s.size() - 1) end = s.size() - 1;
      try {
        std::size_t used = 0;
        const long long v = std::stoll(s.substr(at, end - at), &used);
        if (used != end - at) throw std::invalid_argument("trailing");
        out.push_back(v);
      } catch (const std::exception&) {
        throw ConfigError("scenario '" + text + "': bad integer argument");
      }
      at = end + 1;
    }
    return out;
  };
  if (s.rfind("fixed(", 0) == 0 || s.rfind("fixed_users(", 0) == 0) {
    const auto a = args(s.find('('));
    if (a.size() != 1 || a[0] < 1) throw ConfigError("scenario '" + text + "': expected fixed(n) with n >= 1");
    return Scenario::fixed_users(a[0]);
  }
  if (s.rfind("subset(", 0) == 0) {
    const auto a = args(s.find('('));
    if (a.size() != 2 || a[1] < 1 || a[0] < a[1]) {
      throw ConfigError("scenario '" + text + "': expected subset(total, per_round) with 1 <= per_round <= total");
    }
    return Scenario::subset_of(a[0], a[1]);
  }
  throw ConfigError("unknown scenario '" + text + "' (expected fixed(n) or subset(total,per_round))");
}

void FederationConfig::validate() const {
  transfer.validate();
  if (scenario.total < 1 || scenario.per_round < 1 || scenario.per_round > scenario.total) {
    throw ConfigError("scenario needs 1 <= per_round <= total");
  }
  if (rounds < 0) throw ConfigError("rounds must be >= 0");
  if (local_epochs < 0) throw ConfigError("local_epochs must be >= 0");
  if (global_epochs < 0) throw ConfigError("global_epochs must be >= 0");
  if (!(eta > 0.0) || !std::isfinite(eta)) throw ConfigError("eta must be > 0");
  if (!(gamma > 0.0) || !std::isfinite(gamma)) throw ConfigError("gamma must be > 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
}

std::uint64_t CommLedger::total_uplink() const {
  std::uint64_t t = 0;
  for (const auto& r : rounds) t += r.uplink_bytes;
  return t;
}

std::uint64_t CommLedger::total_downlink() const {
  std::uint64_t t = 0;
  for (const auto& r : rounds) t += r.downlink_bytes;
  return t;
}

std::uint64_t knowledge_payload_bytes(Index participants, Index proxy_rows, Index classes, Index embedding_width,
                                      TransferMode mode) {
  const Index per_row = (uses_outcomes(mode) ? classes : 0) + (uses_embeddings(mode) ? embedding_width : 0);
  return static_cast<std::uint64_t>(participants) * static_cast<std::uint64_t>(proxy_rows) *
         static_cast<std::uint64_t>(per_row) * sizeof(double);
}

std::uint64_t parameter_payload_bytes(Index participants, Index param_count) {
  return static_cast<std::uint64_t>(participants) * static_cast<std::uint64_t>(param_count) * sizeof(double);
}

namespace {

Shape embedding_row_shape(const Model& m) {
  if (m.input_shape().empty()) throw ConfigError("federation models need a known input shape");
  return infer_shape(m.layers(), m.input_shape(), m.embed_tap());
}

Shape logits_row_shape(const Model& m) { return infer_shape(m.layers(), m.input_shape(), m.layers().size()); }

TransferMode knowledge_mode(const FederationConfig& c) {
  return c.algorithm == Algorithm::kd ? TransferMode::full : c.transfer.mode;
}

}  // namespace

FederationState make_federation(const FederationConfig& config, Model server, std::vector<Model> clients,
                                const Partition& partition) {
  config.validate();
  if (static_cast<Index>(clients.size()) != config.scenario.total) {
    throw ConfigError("scenario expects " + std::to_string(config.scenario.total) + " clients, got " +
                      std::to_string(clients.size()));
  }
  if (clients.size() != partition.clients.size()) {
    throw ConfigError("partition has " + std::to_string(partition.clients.size()) + " clients, models " +
                      std::to_string(clients.size()));
  }
  if (partition.proxy.empty()) throw ConfigError("proxy set is empty");

  const Shape server_input = server.input_shape();
  const Shape server_logits = logits_row_shape(server);
  const Shape server_embed = embedding_row_shape(server);
  for (std::size_t n = 0; n < clients.size(); ++n) {
    const Model& m = clients[n];
    if (m.input_shape() != server_input) throw ConfigError("client " + std::to_string(n) + " input shape differs from the server's");
    if (logits_row_shape(m) != server_logits) throw ConfigError("client " + std::to_string(n) + " class count differs from the server's");
    if (config.algorithm == Algorithm::fedavg && m.layers() != server.layers()) {
      throw ConfigError("FedAvg requires identical models");
    }
    if (config.algorithm == Algorithm::cdkt && uses_embeddings(config.transfer.mode) &&
        embedding_row_shape(m) != server_embed) {
      throw ConfigError("client " + std::to_string(n) + " embedding shape " + shape_string(embedding_row_shape(m)) +
                        " differs from the server's " + shape_string(server_embed));
    }
  }

  FederationState st;
  st.config = config;
  st.server = std::move(server);
  st.proxy = partition.proxy;
  st.selection_rng = Rng(derive_seed(config.seed, "selection"));
  st.server_batches.emplace(st.proxy.size(), config.batch_size, derive_seed(config.seed, "server-batches"), false);

  std::vector<LabeledSet> tests;
  for (std::size_t n = 0; n < clients.size(); ++n) {
    Client c;
    c.model = std::move(clients[n]);
    c.train = partition.clients[n].train;
    c.test = partition.clients[n].test;
    if (!c.train.empty()) {
      c.private_batches.emplace(c.train.size(), config.batch_size, derive_seed(config.seed, "client-batches", n), false);
    } else {
      st.warnings.push_back("client " + std::to_string(n) + " has no private training data; it is skipped");
    }
    c.proxy_batches.emplace(st.proxy.size(), config.batch_size, derive_seed(config.seed, "client-proxy", n), true);
    if (!c.test.empty()) tests.push_back(c.test);
    st.clients.push_back(std::move(c));
  }
  if (tests.empty()) throw ConfigError("no client holds test data");
  st.collective_test = concat(tests);
  return st;
}

std::vector<std::size_t> select_clients(FederationState& state) {
  const auto total = static_cast<std::size_t>(state.config.scenario.total);
  std::vector<std::size_t> ids(total);
  std::iota(ids.begin(), ids.end(), std::size_t{0});
  if (!state.config.scenario.subset) return ids;
  // Partial Fisher-Yates: the first per_round slots are a uniform sample.
  const auto k = static_cast<std::size_t>(state.config.scenario.per_round);
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = i + state.selection_rng.below(total - i);
    std::swap(ids[i], ids[j]);
  }
  ids.resize(k);
  std::sort(ids.begin(), ids.end());
  return ids;
}

void client_local_update(Client& client, const LabeledSet& proxy, const Knowledge* server_knowledge,
                         const FederationConfig& config) {
  if (!client.private_batches) return;
  const TransferConfig& tc = config.transfer;
  ForwardCache private_cache, proxy_cache;

  for (Index k = 0; k < config.local_epochs; ++k) {
    const auto epoch = client.private_batches->next_epoch();
    if (server_knowledge) client.proxy_batches->restart();
    for (const auto& rows : epoch) {
      client.model.zero_grads();
      const Tensor x = client.train.examples.take_rows(rows);
      std::vector<int> y;
      for (Index r : rows) y.push_back(client.train.labels[static_cast<std::size_t>(r)]);
      const ForwardResult priv = client.model.forward(x, private_cache);

      if (!server_knowledge) {
        const LossGrad ce = cross_entropy(priv.logits, y);
        client.model.backward(private_cache, ce.grad);
        client.model.sgd_step(config.eta);
        continue;
      }

      const auto proxy_rows = *client.proxy_batches->next();
      const Tensor xr = proxy.examples.take_rows(proxy_rows);
      std::vector<int> yr;
      for (Index r : proxy_rows) yr.push_back(proxy.labels[static_cast<std::size_t>(r)]);
      const ForwardResult prox = client.model.forward(xr, proxy_cache);

      ClientLoss loss;
      if (config.algorithm == Algorithm::kd) {
        const Tensor zs = server_knowledge->logits->take_rows(proxy_rows);
        loss = on_device_kd_loss(priv.logits, y, prox.logits, zs, tc.alpha, tc.tau);
      } else {
        std::optional<Tensor> zs, es;
        if (server_knowledge->logits) zs = server_knowledge->logits->take_rows(proxy_rows);
        if (server_knowledge->embeddings) es = server_knowledge->embeddings->take_rows(proxy_rows);
        loss = on_device_loss(priv.logits, y, &prox.logits, &prox.embedding, zs ? &*zs : nullptr,
                              es ? &*es : nullptr, yr, tc);
      }
      client.model.backward(private_cache, loss.grad_private_logits);
      const Tensor dz = loss.grad_proxy_logits ? *loss.grad_proxy_logits : Tensor(prox.logits.shape());
      client.model.backward(proxy_cache, dz, loss.grad_proxy_embedding ? &*loss.grad_proxy_embedding : nullptr);
      client.model.sgd_step(config.eta);
    }
  }
}

Knowledge extract_knowledge(const Model& model, const LabeledSet& proxy, TransferMode mode, int producer) {
  if (proxy.empty()) throw DataError("cannot extract knowledge over an empty proxy set");
  const ForwardResult out = model.predict(proxy.examples);
  Knowledge k;
  k.producer = producer;
  if (uses_outcomes(mode)) k.logits = out.logits;
  if (uses_embeddings(mode)) k.embeddings = out.embedding.reshaped({out.embedding.rows(), out.embedding.cols()});
  return k;
}

Knowledge aggregate_knowledge(std::span<const Knowledge> knowledge, double tau) {
  if (knowledge.empty()) throw Error("aggregate_knowledge: no knowledge to aggregate");
  const Knowledge& first = knowledge.front();
  auto producers = [&](const Knowledge& k) {
    return "producers " + std::to_string(first.producer) + " and " + std::to_string(k.producer);
  };
  Knowledge out;
  out.producer = Knowledge::kServer;
  out.softened = true;
  const double n = static_cast<double>(knowledge.size());
  for (const Knowledge& k : knowledge) {
    if (k.logits.has_value() != first.logits.has_value() || k.embeddings.has_value() != first.embeddings.has_value()) {
      throw Error("aggregate_knowledge: presence mismatch between " + producers(k));
    }
    if (k.logits) {
      if (k.logits->shape() != first.logits->shape()) throw ShapeError("aggregate_knowledge: logits shape mismatch between " + producers(k));
      const Tensor p = k.softened ? *k.logits : softmax(*k.logits, tau);
      if (!out.logits) out.logits = Tensor(p.shape());
      out.logits->data() += p.data();
    }
    if (k.embeddings) {
      if (k.embeddings->shape() != first.embeddings->shape()) {
        throw ShapeError("aggregate_knowledge: embedding shape mismatch between " + producers(k));
      }
      if (!out.embeddings) out.embeddings = Tensor(k.embeddings->shape());
      out.embeddings->data() += k.embeddings->data();
    }
  }
  if (out.logits) out.logits->data() /= n;
  if (out.embeddings) out.embeddings->data() /= n;
  return out;
}

void server_update(FederationState& state, const Knowledge* collective) {
  const FederationConfig& cfg = state.config;
  Model& server = state.server;
  for (Index r = 0; r < cfg.global_epochs; ++r) {
    for (const auto& rows : state.server_batches->next_epoch()) {
      server.zero_grads();
      const Tensor x = state.proxy.examples.take_rows(rows);
      std::vector<int> y;
      for (Index i : rows) y.push_back(state.proxy.labels[static_cast<std::size_t>(i)]);
      const ForwardResult out = server.forward(x);

      if (!collective) {
        const LossGrad ce = cross_entropy(out.logits, y);
        server.backward(ce.grad);
      } else if (cfg.algorithm == Algorithm::kd) {
        const Tensor p = collective->logits->take_rows(rows);
        const ServerLoss loss = global_kd_loss(out.logits, p, y, cfg.transfer.beta, cfg.transfer.tau);
        server.backward(loss.grad_logits);
      } else {
        std::optional<Tensor> p, e;
        if (collective->logits) p = collective->logits->take_rows(rows);
        if (collective->embeddings) e = collective->embeddings->take_rows(rows);
        const Tensor es = out.embedding.reshaped({out.embedding.rows(), out.embedding.cols()});
        const ServerLoss loss = global_cdkt_loss(out.logits, &es, p ? &*p : nullptr, e ? &*e : nullptr, y, cfg.transfer);
        std::optional<Tensor> de;
        if (loss.grad_embedding) de = loss.grad_embedding->reshaped(out.embedding.shape());
        server.backward(loss.grad_logits, de ? &*de : nullptr);
      }
      server.sgd_step(cfg.gamma);
    }
  }
}

void fedavg_round(FederationState& state, std::span<const std::size_t> selected) {
  if (selected.empty()) return;
  const Tensor broadcast = state.server.get_params();
  Tensor sum(broadcast.shape());
  double weight_total = 0.0;
  for (std::size_t id : selected) {
    Client& c = state.clients[id];
    c.model.set_params(broadcast);
    client_local_update(c, state.proxy, nullptr, state.config);
    const Tensor p = c.model.get_params();
    if (state.config.fedavg_weighted) {
      const auto w = static_cast<double>(c.train.size());
      sum.data() += w * p.data();
      weight_total += w;
    } else {
      sum.data() += p.data();
      weight_total += 1.0;
    }
  }
  if (weight_total > 0.0) {
    sum.data() /= weight_total;
    state.server.set_params(sum);
  }
}

RoundRecord run_round(FederationState& state) {
  const FederationConfig& cfg = state.config;
  const auto selected = select_clients(state);
  const auto participants = static_cast<Index>(selected.size());
  CommRound comm;
  comm.round = state.round + 1;

  switch (cfg.algorithm) {
    case Algorithm::cdkt:
    case Algorithm::kd: {
      const TransferMode mode = knowledge_mode(cfg);
      // Knowledge of the server as it stands at the end of the previous round.
      const Knowledge server_knowledge = extract_knowledge(state.server, state.proxy, mode, Knowledge::kServer);
      std::vector<Knowledge> uploads;
      for (std::size_t id : selected) {
        client_local_update(state.clients[id], state.proxy, &server_knowledge, cfg);
        uploads.push_back(extract_knowledge(state.clients[id].model, state.proxy, mode, static_cast<int>(id)));
      }
      const Knowledge collective = aggregate_knowledge(uploads, cfg.transfer.tau);
      server_update(state, &collective);

      const Index classes = server_knowledge.logits ? server_knowledge.logits->cols() : 0;
      const Index width = server_knowledge.embeddings ? server_knowledge.embeddings->cols() : 0;
      comm.uplink_bytes = knowledge_payload_bytes(participants, state.proxy.size(), classes, width, mode);
      comm.downlink_bytes = comm.uplink_bytes;
      break;
    }
    case Algorithm::no_transfer:
      for (std::size_t id : selected) client_local_update(state.clients[id], state.proxy, nullptr, cfg);
      if (cfg.server_proxy_training) server_update(state, nullptr);
      break;
    case Algorithm::fedavg:
      fedavg_round(state, selected);
      comm.uplink_bytes = parameter_payload_bytes(participants, state.server.parameter_count());
      comm.downlink_bytes = comm.uplink_bytes;
      break;
  }

  ++state.round;
  state.ledger.rounds.push_back(comm);
  RoundRecord rec = evaluate_round(state);
  rec.uplink_bytes = comm.uplink_bytes;
  rec.downlink_bytes = comm.downlink_bytes;
  return rec;
}

ExperimentResult run_experiment(FederationState& state) {
  ExperimentResult out;
  while (state.round < state.config.rounds) {
    try {
      out.records.push_back(run_round(state));
    } catch (const Error& e) {
      throw Error("round " + std::to_string(state.round + 1) + ": " + e.what());
    }
  }
  out.ledger = state.ledger;
  return out;
}

}  // namespace cdkt
