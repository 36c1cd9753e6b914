#pragma once

#include <vector>

#include "cdkt/datasets.hpp"
#include "cdkt/experiment.hpp"
#include "cdkt/federation.hpp"

namespace cdkt::test {

// Small synthetic federation: 8-dimensional blobs, mlp preset everywhere.
inline FederationState small_federation(FederationConfig cfg, Index classes = 4, Index per_class = 40,
                                        Index proxy = 12, Index classes_per_client = 2, bool hetero = false) {
  const LabeledSet src = synth_generate(classes, per_class, 8, cfg.seed);
  PartitionOptions opt;
  opt.n_clients = cfg.scenario.total;
  opt.classes_per_client = classes_per_client;
  opt.proxy_size = proxy;
  opt.seed = cfg.seed + 100;
  const Partition part = partition_noniid(src, opt);
  const auto server = architecture_preset("mlp", {8}, classes, false);
  const auto client = architecture_preset("mlp", {8}, classes, hetero);
  std::vector<Model> clients;
  for (Index n = 0; n < cfg.scenario.total; ++n) {
    clients.push_back(build_model(client.layers, client.embed_tap, 1000 + static_cast<std::uint64_t>(n), {8}));
  }
  return make_federation(cfg, build_model(server.layers, server.embed_tap, 7, {8}), std::move(clients), part);
}

}  // namespace cdkt::test
