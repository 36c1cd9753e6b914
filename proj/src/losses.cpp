#include "cdkt/losses.hpp"

#include <cmath>

namespace cdkt {

const char* to_string(DistanceKind d) {
  switch (d) {
    case DistanceKind::norm2: return "norm2";
    case DistanceKind::kl: return "kl";
    case DistanceKind::js: return "js";
  }
  return "?";
}

const char* to_string(TransferMode m) {
  switch (m) {
    case TransferMode::rep: return "rep";
    case TransferMode::full: return "full";
    case TransferMode::repfull: return "repfull";
  }
  return "?";
}

DistanceKind distance_from_string(const std::string& s) {
  if (s == "norm2" || s == "n") return DistanceKind::norm2;
  if (s == "kl") return DistanceKind::kl;
  if (s == "js") return DistanceKind::js;
  throw ConfigError("unknown distance '" + s + "' (expected norm2, kl or js)");
}

TransferMode mode_from_string(const std::string& s) {
  if (s == "rep") return TransferMode::rep;
  if (s == "full") return TransferMode::full;
  if (s == "repfull") return TransferMode::repfull;
  throw ConfigError("unknown transfer mode '" + s + "' (expected rep, full or repfull)");
}

void TransferConfig::validate() const {
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw ConfigError("alpha must be >= 0");
  if (!(beta >= 0.0) || !std::isfinite(beta)) throw ConfigError("beta must be >= 0");
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("lambda must lie in [0, 1]");
  if (!(tau > 0.0) || !std::isfinite(tau)) throw ConfigError("tau must be > 0");
}

namespace {

double batch_scale(const Tensor& t) { return t.rows() > 0 ? 1.0 / static_cast<double>(t.rows()) : 0.0; }

double safe_log(double v) { return std::log(std::max(v, kLogClamp)); }

void check_labels(const Tensor& z, Labels labels, const char* what) {
  if (z.rank() != 2) throw ShapeError(std::string(what) + ": logits must be (batch, classes), got " + shape_string(z.shape()));
  if (static_cast<Index>(labels.size()) != z.rows()) {
    throw ShapeError(std::string(what) + ": " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(z.rows()) + " rows");
  }
  for (int y : labels) {
    if (y < 0 || y >= z.cols()) {
      throw ShapeError(std::string(what) + ": label " + std::to_string(y) + " outside [0, " + std::to_string(z.cols()) + ")");
    }
  }
}

// Pulls a gradient w.r.t. q = softmax(u / tau) back to u, row by row.
Tensor softmax_backward(const Tensor& q, const Tensor& gq, double tau) {
  Tensor gu(q.shape());
  const auto qm = q.matrix();
  const auto gm = gq.matrix();
  auto out = gu.matrix();
  for (Index i = 0; i < q.rows(); ++i) {
    const double dot = qm.row(i).dot(gm.row(i));
    out.row(i) = (qm.row(i).array() * (gm.row(i).array() - dot) / tau).matrix();
  }
  return gu;
}

}  // namespace

Tensor softmax(const Tensor& z, double tau) {
  if (!(tau > 0.0)) throw ConfigError("softmax temperature must be > 0");
  Tensor p(z.shape());
  const auto zm = z.matrix();
  auto pm = p.matrix();
  for (Index i = 0; i < z.rows(); ++i) {
    const double mx = zm.row(i).maxCoeff();
    pm.row(i) = ((zm.row(i).array() - mx) / tau).exp().matrix();
    pm.row(i) /= pm.row(i).sum();
  }
  return p;
}

Tensor one_hot(Labels labels, Index classes) {
  Tensor y({static_cast<Index>(labels.size()), classes});
  auto m = y.matrix();
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= classes) throw ShapeError("one_hot: label out of range");
    m(static_cast<Index>(i), labels[i]) = 1.0;
  }
  return y;
}

LossGrad cross_entropy(const Tensor& z, Labels labels) {
  check_labels(z, labels, "cross_entropy");
  LossGrad out{0.0, softmax(z, 1.0)};
  const auto zm = z.matrix();
  auto gm = out.grad.matrix();
  const double s = batch_scale(z);
  for (Index i = 0; i < z.rows(); ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    const double mx = zm.row(i).maxCoeff();
    const double lse = mx + std::log((zm.row(i).array() - mx).exp().sum());
    out.value += lse - zm(i, y);
    gm(i, y) -= 1.0;
  }
  out.value *= s;
  out.grad.data() *= s;
  return out;
}

LossGrad dist_norm2(const Tensor& a, const Tensor& b) {
  expect_same_shape(a, b, "dist_norm2");
  LossGrad out{0.0, Tensor(a.shape())};
  const double s = batch_scale(a);
  const auto am = a.matrix();
  const auto bm = b.matrix();
  auto gm = out.grad.matrix();
  for (Index i = 0; i < a.rows(); ++i) {
    const RowMatrix diff = am.row(i) - bm.row(i);
    const double n = diff.norm();
    out.value += n;
    if (n > 0.0) gm.row(i) = diff / n * s;
  }
  out.value *= s;
  return out;
}

LossGrad dist_kl(const Tensor& p, const Tensor& q) {
  expect_same_shape(p, q, "dist_kl");
  LossGrad out{0.0, Tensor(q.shape())};
  const double s = batch_scale(p);
  for (Index k = 0; k < p.size(); ++k) {
    const double pk = p[k], qk = q[k];
    if (pk > 0.0) out.value += pk * (safe_log(pk) - safe_log(qk));
    out.grad[k] = qk > kLogClamp ? -pk / qk * s : 0.0;
  }
  out.value *= s;
  return out;
}

LossGrad dist_js(const Tensor& p, const Tensor& q) {
  expect_same_shape(p, q, "dist_js");
  LossGrad out{0.0, Tensor(q.shape())};
  const double s = batch_scale(p);
  for (Index k = 0; k < p.size(); ++k) {
    const double pk = p[k], qk = q[k];
    const double lm = safe_log(0.5 * (pk + qk));
    if (pk > 0.0) out.value += 0.5 * pk * (safe_log(pk) - lm);
    if (qk > 0.0) out.value += 0.5 * qk * (safe_log(qk) - lm);
    out.grad[k] = 0.5 * (safe_log(qk) - lm) * s;
  }
  out.value *= s;
  return out;
}

LossGrad distance(DistanceKind kind, const Tensor& target, const Tensor& learner) {
  switch (kind) {
    case DistanceKind::norm2: return dist_norm2(learner, target);
    case DistanceKind::kl: return dist_kl(target, learner);
    case DistanceKind::js: return dist_js(target, learner);
  }
  throw Error("unreachable distance kind");
}

LossGrad distance_to_target(DistanceKind kind, const Tensor& target, const Tensor& learner, bool soften, double tau) {
  expect_same_shape(target, learner, "distance");
  if (kind == DistanceKind::norm2 && !soften) return dist_norm2(learner, target);

  const Tensor q = softmax(learner, tau);
  if (kind == DistanceKind::kl) {
    // d/du of -sum p ln softmax(u / tau) in closed form.
    LossGrad out{dist_kl(target, q).value, Tensor(learner.shape())};
    const double s = batch_scale(learner);
    const auto pm = target.matrix();
    const auto qm = q.matrix();
    auto gm = out.grad.matrix();
    for (Index i = 0; i < q.rows(); ++i) {
      gm.row(i) = (qm.row(i) * pm.row(i).sum() - pm.row(i)) * (s / tau);
    }
    return out;
  }
  LossGrad inner = distance(kind, target, q);
  return {inner.value, softmax_backward(q, inner.grad, tau)};
}

Tensor mixed_target(const Tensor& y_onehot, const Tensor& z_avg, double lambda) {
  expect_same_shape(y_onehot, z_avg, "mixed_target");
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("lambda must lie in [0, 1]");
  Tensor out(y_onehot.shape());
  out.data() = lambda * y_onehot.data() + (1.0 - lambda) * z_avg.data();
  auto m = out.matrix();
  for (Index i = 0; i < m.rows(); ++i) {
    const double sum = m.row(i).sum();
    if (std::abs(sum - 1.0) > 1e-9 && sum > 0.0) m.row(i) /= sum;
  }
  return out;
}

LossGrad kd_loss(const Tensor& z_t, const Tensor& z_s, double tau) {
  expect_same_shape(z_t, z_s, "kd_loss");
  const Tensor p = softmax(z_t, tau);
  const Tensor q = softmax(z_s, tau);
  LossGrad out{tau * tau * dist_kl(p, q).value, Tensor(z_s.shape())};
  out.grad.data() = (q.data() - p.data()) * (tau * batch_scale(z_s));
  return out;
}

LossGrad kd_student_loss(const Tensor& z_s, Labels y, const Tensor& z_t, double tau, double alpha) {
  LossGrad ce = cross_entropy(z_s, y);
  const LossGrad kd = kd_loss(z_t, z_s, tau);
  ce.value += alpha * kd.value;
  ce.grad.data() += alpha * kd.grad.data();
  return ce;
}

namespace {

// Embedding term: raw rows for norm2, softmax(., tau) rows for kl/js.
LossGrad embedding_term(DistanceKind kind, const Tensor& target_raw, const Tensor& learner, double tau) {
  if (kind == DistanceKind::norm2) return dist_norm2(learner, target_raw);
  return distance_to_target(kind, softmax(target_raw, tau), learner, true, tau);
}

}  // namespace

ServerLoss global_cdkt_loss(const Tensor& z_s, const Tensor* e_s, const Tensor* collective_probs,
                            const Tensor* collective_embedding, Labels y_r, const TransferConfig& cfg) {
  cfg.validate();
  LossGrad ce = cross_entropy(z_s, y_r);
  ServerLoss out{ce.value, std::move(ce.grad), std::nullopt};

  if (uses_embeddings(cfg.mode)) {
    if (!e_s || !collective_embedding) {
      throw Error(std::string("global_cdkt_loss: mode ") + to_string(cfg.mode) + " needs server and collective embeddings");
    }
    const LossGrad term = embedding_term(cfg.d_global, *collective_embedding, *e_s, cfg.tau);
    out.value += cfg.beta * term.value;
    out.grad_embedding = Tensor(e_s->shape());
    out.grad_embedding->data() = cfg.beta * term.grad.data();
  }
  if (uses_outcomes(cfg.mode)) {
    if (!collective_probs) {
      throw Error(std::string("global_cdkt_loss: mode ") + to_string(cfg.mode) + " needs collective outcomes");
    }
    const Tensor target = mixed_target(one_hot(y_r, z_s.cols()), *collective_probs, cfg.lambda);
    const LossGrad term = distance_to_target(cfg.d_global, target, z_s, true, cfg.tau);
    out.value += cfg.beta * term.value;
    out.grad_logits.data() += cfg.beta * term.grad.data();
  }
  return out;
}

ServerLoss global_kd_loss(const Tensor& z_s, const Tensor& collective_probs, Labels y_r, double beta, double tau) {
  LossGrad ce = cross_entropy(z_s, y_r);
  const LossGrad kl = distance_to_target(DistanceKind::kl, collective_probs, z_s, true, tau);
  ServerLoss out{ce.value + beta * tau * tau * kl.value, std::move(ce.grad), std::nullopt};
  out.grad_logits.data() += (beta * tau * tau) * kl.grad.data();
  return out;
}

ClientLoss on_device_loss(const Tensor& z_private, Labels y_private, const Tensor* z_proxy,
                          const Tensor* e_proxy, const Tensor* server_logits, const Tensor* server_embedding,
                          Labels y_proxy, const TransferConfig& cfg) {
  cfg.validate();
  LossGrad ce = cross_entropy(z_private, y_private);
  ClientLoss out{ce.value, std::move(ce.grad), std::nullopt, std::nullopt};

  if (uses_embeddings(cfg.mode)) {
    if (!e_proxy || !server_embedding) {
      throw Error(std::string("on_device_loss: mode ") + to_string(cfg.mode) + " needs client and server embeddings");
    }
    const LossGrad term = embedding_term(cfg.d_local, *server_embedding, *e_proxy, cfg.tau);
    out.value += cfg.alpha * term.value;
    out.grad_proxy_embedding = Tensor(e_proxy->shape());
    out.grad_proxy_embedding->data() = cfg.alpha * term.grad.data();
  }
  if (uses_outcomes(cfg.mode)) {
    if (!z_proxy || !server_logits) {
      throw Error(std::string("on_device_loss: mode ") + to_string(cfg.mode) + " needs client and server outcomes");
    }
    const Tensor target = mixed_target(one_hot(y_proxy, z_proxy->cols()), softmax(*server_logits, cfg.tau), cfg.lambda);
    const LossGrad term = distance_to_target(cfg.d_local, target, *z_proxy, true, cfg.tau);
    out.value += cfg.alpha * term.value;
    out.grad_proxy_logits = Tensor(z_proxy->shape());
    out.grad_proxy_logits->data() = cfg.alpha * term.grad.data();
  }
  return out;
}

ClientLoss on_device_kd_loss(const Tensor& z_private, Labels y_private, const Tensor& z_proxy,
                             const Tensor& server_logits, double alpha, double tau) {
  LossGrad ce = cross_entropy(z_private, y_private);
  const LossGrad kd = kd_loss(server_logits, z_proxy, tau);
  ClientLoss out{ce.value + alpha * kd.value, std::move(ce.grad), Tensor(z_proxy.shape()), std::nullopt};
  out.grad_proxy_logits->data() = alpha * kd.grad.data();
  return out;
}

}  // namespace cdkt
