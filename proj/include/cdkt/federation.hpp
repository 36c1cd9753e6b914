#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cdkt/datasets.hpp"
#include "cdkt/losses.hpp"
#include "cdkt/metrics.hpp"
#include "cdkt/model.hpp"
#include "cdkt/random.hpp"

namespace cdkt {

enum class Algorithm { cdkt, fedavg, no_transfer, kd };

const char* to_string(Algorithm a);
Algorithm algorithm_from_string(const std::string& s);

struct Scenario {
  bool subset = false;
  Index total = 10;      // N
  Index per_round = 10;  // participants per round

  static Scenario fixed_users(Index n) { return {false, n, n}; }
  static Scenario subset_of(Index total, Index per_round) { return {true, total, per_round}; }
  friend bool operator==(const Scenario&, const Scenario&) = default;
};

std::string to_string(const Scenario& s);
Scenario scenario_from_string(const std::string& s);

struct FederationConfig {
  Algorithm algorithm = Algorithm::cdkt;
  TransferConfig transfer;
  Scenario scenario;
  Index rounds = 100;        // T
  Index local_epochs = 2;    // K
  Index global_epochs = 2;   // R
  double eta = 0.01;         // client learning rate
  double gamma = 0.01;       // server learning rate
  Index batch_size = 20;
  bool fedavg_weighted = false;       // weight the parameter mean by train size
  bool server_proxy_training = true;  // No-Transfer server fine-tunes on the proxy
  std::uint64_t seed = 1;

  void validate() const;
};

// Model knowledge over the proxy set, row k <-> proxy example k. Logits are
// raw when extracted and softmax(., tau) distributions after aggregation.
struct Knowledge {
  std::optional<Tensor> logits;
  std::optional<Tensor> embeddings;
  int producer = kServer;  // client id, or kServer
  bool softened = false;

  static constexpr int kServer = -1;
};

struct Client {
  Model model;
  LabeledSet train;
  LabeledSet test;
  std::optional<BatchStream> private_batches;
  std::optional<BatchStream> proxy_batches;
};

struct CommRound {
  int round = 0;
  std::uint64_t uplink_bytes = 0;
  std::uint64_t downlink_bytes = 0;
};

struct CommLedger {
  std::vector<CommRound> rounds;

  std::uint64_t total_uplink() const;
  std::uint64_t total_downlink() const;
};

// participants * |D_r| * (C [full, repfull] + E [rep, repfull]) * 8
std::uint64_t knowledge_payload_bytes(Index participants, Index proxy_rows, Index classes, Index embedding_width,
                                      TransferMode mode);
// participants * param_count * 8
std::uint64_t parameter_payload_bytes(Index participants, Index param_count);

struct FederationState {
  FederationConfig config;
  Model server;
  std::vector<Client> clients;
  LabeledSet proxy;
  LabeledSet collective_test;  // union of all client test shards
  int round = 0;
  Rng selection_rng{0};
  std::optional<BatchStream> server_batches;
  CommLedger ledger;
  std::vector<std::string> warnings;
};

// Validates the configuration against the models and wires up the state.
// `clients` are paired with `partition.clients` by position.
FederationState make_federation(const FederationConfig& config, Model server, std::vector<Model> clients,
                                const Partition& partition);

std::vector<std::size_t> select_clients(FederationState& state);

// K epochs of transfer-regularised training: each private batch is paired with the
// next proxy batch. Without server knowledge, plain private cross-entropy.
void client_local_update(Client& client, const LabeledSet& proxy, const Knowledge* server_knowledge,
                         const FederationConfig& config);

Knowledge extract_knowledge(const Model& model, const LabeledSet& proxy, TransferMode mode, int producer);
// Unweighted mean over producers: logits as mean softmax(., tau), embeddings raw.
Knowledge aggregate_knowledge(std::span<const Knowledge> knowledge, double tau);

// R epochs over proxy batches with rate gamma. With collective knowledge the
// objective is the global CDKT loss (or the KD loss for Algorithm::kd);
// without it, proxy cross-entropy.
void server_update(FederationState& state, const Knowledge* collective);

void fedavg_round(FederationState& state, std::span<const std::size_t> selected);

// One full round: select, transfer, local updates, aggregation, server update,
// evaluation. Appends to the ledger and returns the round's record.
RoundRecord run_round(FederationState& state);

struct ExperimentResult {
  std::vector<RoundRecord> records;
  CommLedger ledger;
};

ExperimentResult run_experiment(FederationState& state);

}  // namespace cdkt
