#pragma once

#include <optional>
#include <span>
#include <string>

#include "cdkt/tensor.hpp"

namespace cdkt {

enum class DistanceKind { norm2, kl, js };
enum class TransferMode { rep, full, repfull };

const char* to_string(DistanceKind d);
const char* to_string(TransferMode m);
DistanceKind distance_from_string(const std::string& s);
TransferMode mode_from_string(const std::string& s);

inline bool uses_embeddings(TransferMode m) { return m != TransferMode::full; }
inline bool uses_outcomes(TransferMode m) { return m != TransferMode::rep; }

struct TransferConfig {
  TransferMode mode = TransferMode::repfull;
  DistanceKind d_global = DistanceKind::kl;
  DistanceKind d_local = DistanceKind::norm2;
  double alpha = 0.5;   // on-device regularizer weight
  double beta = 0.5;    // server regularizer weight
  double lambda = 0.5;  // label mixing
  double tau = 1.0;     // softening temperature

  void validate() const;
};

// Floor applied to probabilities before any logarithm.
inline constexpr double kLogClamp = 1e-12;

// A scalar objective and its gradient with respect to the learner operand.
struct LossGrad {
  double value = 0.0;
  Tensor grad;
};

using Labels = std::span<const int>;

// Row-wise softmax(z / tau), max-subtracted.
Tensor softmax(const Tensor& z, double tau = 1.0);
Tensor one_hot(Labels labels, Index classes);

// Mean over the batch of -ln softmax(z)[y]; grad = (softmax - onehot) / B.
LossGrad cross_entropy(const Tensor& z, Labels labels);

// Mean over the batch of ||a_i - b_i||_2 (not squared); grad w.r.t. a.
LossGrad dist_norm2(const Tensor& a, const Tensor& b);
// Mean over the batch of sum_c p ln(p / q); p is the target, grad w.r.t. q.
LossGrad dist_kl(const Tensor& p, const Tensor& q);
// 0.5 KL(p, m) + 0.5 KL(q, m) with m = (p + q) / 2; grad w.r.t. q.
LossGrad dist_js(const Tensor& p, const Tensor& q);
LossGrad distance(DistanceKind kind, const Tensor& target, const Tensor& learner);

// Distance from a fixed target to a learner operand. For kl and js (and for
// norm2 when `soften` is set) the learner passes through softmax(., tau) and
// the target must already be a distribution. The gradient is w.r.t. the raw
// learner operand.
LossGrad distance_to_target(DistanceKind kind, const Tensor& target, const Tensor& learner, bool soften, double tau);

// lambda * y + (1 - lambda) * z_avg, rows renormalized only on drift > 1e-9.
Tensor mixed_target(const Tensor& y_onehot, const Tensor& z_avg, double lambda);

// tau^2 KL(softmax(z_t, tau), softmax(z_s, tau)); grad w.r.t. z_s only.
LossGrad kd_loss(const Tensor& z_t, const Tensor& z_s, double tau);
// cross_entropy(z_s, y) + alpha * kd_loss(z_t, z_s, tau).
LossGrad kd_student_loss(const Tensor& z_s, Labels y, const Tensor& z_t, double tau, double alpha);

struct ServerLoss {
  double value = 0.0;
  Tensor grad_logits;
  std::optional<Tensor> grad_embedding;
};

// Server objective on a proxy batch: cross-entropy on the proxy labels plus
// beta times the embedding term (rep, repfull) and the outcome term (full,
// repfull). `collective_probs` is the averaged client distribution and
// `collective_embedding` the averaged raw client embedding; both are constants.
ServerLoss global_cdkt_loss(const Tensor& z_s, const Tensor* e_s, const Tensor* collective_probs,
                            const Tensor* collective_embedding, Labels y_r, const TransferConfig& cfg);

// Ensemble-KD server objective: cross-entropy + beta * tau^2 KL(avg, softmax(z_s, tau)).
ServerLoss global_kd_loss(const Tensor& z_s, const Tensor& collective_probs, Labels y_r, double beta, double tau);

struct ClientLoss {
  double value = 0.0;
  Tensor grad_private_logits;
  std::optional<Tensor> grad_proxy_logits;
  std::optional<Tensor> grad_proxy_embedding;
};

// Client objective: cross-entropy on the private batch plus alpha times the
// selected transfer terms on the proxy batch, using d_local. Server knowledge
// (`server_logits` raw, `server_embedding` raw) is constant.
ClientLoss on_device_loss(const Tensor& z_private, Labels y_private, const Tensor* z_proxy,
                          const Tensor* e_proxy, const Tensor* server_logits, const Tensor* server_embedding,
                          Labels y_proxy, const TransferConfig& cfg);

// Client objective for the ensemble-KD baseline: private cross-entropy plus
// alpha * tau^2 KL(softmax(server, tau), softmax(z_proxy, tau)).
ClientLoss on_device_kd_loss(const Tensor& z_private, Labels y_private, const Tensor& z_proxy,
                             const Tensor& server_logits, double alpha, double tau);

}  // namespace cdkt
